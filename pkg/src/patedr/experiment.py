"""End-to-end desk-scale experiments on synthetic masks.

An :class:`ExperimentSpec` fully determines a run: ground-truth masks,
teacher corruption, encoder fitting and aggregation noise are all derived
from its seeds.
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from . import accountant
from .accountant import PrivacyBudget, QueryPlan
from .autoencoder import TrainConfig, ae_train
from .dwt import WaveletSpec, dwt_forward, sparse_decode, top_coefficients
from .mechanisms import NoiseSeed, gaussian_perturb
from .pca import choose_num_components, pca_fit
from .pipeline import (
    AggregationJob,
    AutoencoderCodec,
    DwtAggregation,
    PcaCodec,
    ensemble_labels,
    label_dataset,
)
from .synthetic import SyntheticMaskSpec, default_teachers, gen_masks
from .volume import BinaryMask, FormatError, Volume, dice

# Offsets separating the seed streams derived from ExperimentSpec.seed.
_INPUT_STREAM, _FIT_STREAM, _TEACHER_STREAM, _NOISE_STREAM = 0, 1, 2, 3


@dataclass(frozen=True)
class PcaSettings:
    block_edge: int = 8
    # An integer, "auto" (keep eigenvalues above sigma^2) or "full".
    num_components: Union[int, str] = "auto"


@dataclass(frozen=True)
class AutoencoderSettings:
    latent_dim: int = 32
    hidden_dim: int = 128
    epochs: int = 100
    learning_rate: float = 0.01
    batch_size: int = 16
    # None trains with the deployment sigma as bottleneck noise.
    train_noise_sigma: Optional[float] = None


@dataclass(frozen=True)
class DwtSettings:
    filter: str = "haar"
    levels: int = 3
    threshold: float = 0.05
    max_selections: int = 64


@dataclass(frozen=True)
class TeacherSettings:
    flip_rate: float = 0.003
    morph_prob: float = 0.7


@dataclass(frozen=True)
class ExperimentSpec:
    masks: SyntheticMaskSpec = field(default_factory=SyntheticMaskSpec)
    num_teachers: int = 8
    num_queries: int = 62
    encoder: str = "autoencoder"
    fit_masks: int = 200
    pca: PcaSettings = field(default_factory=PcaSettings)
    autoencoder: AutoencoderSettings = field(default_factory=AutoencoderSettings)
    dwt: DwtSettings = field(default_factory=DwtSettings)
    teachers: TeacherSettings = field(default_factory=TeacherSettings)
    sigma: Optional[float] = 0.075
    epsilon: Optional[float] = None
    delta: float = 0.01
    seed: int = 0
    threads: int = 1
    output_dir: Optional[str] = None

    def __post_init__(self):
        if self.encoder not in ("pca", "autoencoder", "dwt"):
            raise ValueError(f"unknown encoder {self.encoder!r}")
        if self.sigma is None and self.epsilon is None:
            raise ValueError("experiment needs sigma or epsilon")
        if self.num_teachers < 1 or self.num_queries < 1:
            raise ValueError("num_teachers and num_queries must be positive")
        if self.encoder != "dwt" and self.fit_masks < 2:
            raise ValueError("fit_masks must be at least 2")

    @property
    def plan(self) -> QueryPlan:
        return QueryPlan(self.num_queries, self.num_teachers)

    @property
    def budget(self) -> Optional[PrivacyBudget]:
        return None if self.epsilon is None else PrivacyBudget(self.epsilon, self.delta)

    @property
    def effective_sigma(self) -> float:
        if self.sigma is not None:
            return self.sigma
        if self.encoder == "dwt":
            half = PrivacyBudget(self.epsilon / 2, self.delta)
            return accountant.calibrate_sigma(half, self.plan)
        return accountant.calibrate_sigma(self.budget, self.plan)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentSpec":
        return _build(cls, data, "")


_NESTED = {
    "masks": SyntheticMaskSpec,
    "pca": PcaSettings,
    "autoencoder": AutoencoderSettings,
    "dwt": DwtSettings,
    "teachers": TeacherSettings,
}


def _build(cls, data, prefix: str):
    if not isinstance(data, dict):
        raise FormatError("expected a JSON object", prefix.rstrip(".") or "<root>")
    known = {f.name for f in fields(cls)}
    for key in data:
        if key not in known:
            raise FormatError("unknown key", prefix + key)
    kwargs = {}
    for key, value in data.items():
        if cls is ExperimentSpec and key in _NESTED:
            value = _build(_NESTED[key], value, prefix + key + ".")
        elif isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise FormatError(str(e), prefix.rstrip(".") or "<root>") from None


def load_spec(path) -> ExperimentSpec:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"invalid JSON: {e.msg}", e.pos) from None
    return ExperimentSpec.from_dict(data)


def fit_pca_codec(masks: Sequence[BinaryMask], settings: PcaSettings, sigma: float) -> PcaCodec:
    scale = 1.0 / math.sqrt(masks[0].size)
    model = pca_fit([Volume(m.data * scale) for m in masks], settings.block_edge)
    n = settings.num_components
    if n == "auto":
        n = choose_num_components(model.eigenvalues, sigma)
    elif n == "full":
        n = model.block_grid.block_size
    return PcaCodec(model.truncated(int(n)))


def fit_autoencoder_codec(
    masks: Sequence[BinaryMask], settings: AutoencoderSettings, sigma: float, seed: int
) -> AutoencoderCodec:
    noise = settings.train_noise_sigma if settings.train_noise_sigma is not None else sigma
    cfg = TrainConfig(
        learning_rate=settings.learning_rate,
        epochs=settings.epochs,
        batch_size=settings.batch_size,
        bottleneck_noise_sigma=noise,
        seed=seed,
    )
    params = ae_train(masks, cfg, settings.latent_dim, settings.hidden_dim)
    return AutoencoderCodec(params, masks[0].dims)


def build_encoder(spec: ExperimentSpec):
    """Fit (or configure) the encoder named by ``spec.encoder`` on public masks."""
    if spec.encoder == "dwt":
        d = spec.dwt
        return DwtAggregation(WaveletSpec(d.filter, d.levels), d.threshold, d.max_selections)
    fit = gen_masks(replace(spec.masks, seed=_derive(spec.seed, _FIT_STREAM)), spec.fit_masks)
    if spec.encoder == "pca":
        return fit_pca_codec(fit, spec.pca, spec.effective_sigma)
    return fit_autoencoder_codec(fit, spec.autoencoder, spec.effective_sigma, _derive(spec.seed, _FIT_STREAM))


def _derive(seed: int, stream: int) -> int:
    return int(np.random.SeedSequence([seed, stream]).generate_state(1, np.uint64)[0] >> 1)


@dataclass
class MetricRow:
    actor: str
    dice: float
    sigma: float
    epsilon: Optional[float]
    delta: float
    seed: int


@dataclass
class ExperimentReport:
    rows: list
    privacy: dict
    runtime_seconds: float
    spec: dict

    def row(self, actor: str) -> MetricRow:
        return next(r for r in self.rows if r.actor == actor)

    def to_dict(self) -> dict:
        return {
            "rows": [asdict(r) for r in self.rows],
            "privacy": self.privacy,
            "runtime_seconds": self.runtime_seconds,
            "spec": self.spec,
        }

    def metrics_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["actor", "dice", "sigma", "epsilon", "delta", "seed"])
        for r in self.rows:
            w.writerow([r.actor, repr(r.dice), repr(r.sigma), "" if r.epsilon is None else repr(r.epsilon), repr(r.delta), r.seed])
        return buf.getvalue()

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(self.to_dict(), indent=2, allow_nan=False))
        (out / "metrics.csv").write_text(self.metrics_csv())
        (out / "privacy_report.json").write_text(json.dumps(self.privacy, indent=2, allow_nan=False))


def run_experiment(spec: ExperimentSpec, encoder=None) -> ExperimentReport:
    """Run the teacher ensemble over N synthetic inputs and score each stage.

    Rows: ``teacher`` (mean single-teacher Dice), ``teacher_ensemble``
    (noise-free aggregate), ``teacher_ensemble_noise`` (private labels). A
    pre-fitted ``encoder`` may be passed to share it across runs; it must
    match what :func:`build_encoder` would produce for ``spec``'s encoder kind.
    """
    start = time.perf_counter()
    if encoder is None:
        encoder = build_encoder(spec)
    truth = gen_masks(replace(spec.masks, seed=_derive(spec.seed, _INPUT_STREAM)), spec.num_queries)
    teachers = default_teachers(
        spec.num_teachers, _derive(spec.seed, _TEACHER_STREAM), spec.teachers.flip_rate, spec.teachers.morph_prob
    )
    preds = [[t.predict(m, n) for t in teachers] for n, m in enumerate(truth)]
    teacher_dice = float(np.mean([dice(p, m) for ps, m in zip(preds, truth) for p in ps]))

    if isinstance(encoder, DwtAggregation):
        quiet = replace(encoder, noiseless=True)
        job0 = AggregationJob(quiet, spec.plan, sigma=0.0, budget=spec.budget or PrivacyBudget(1.0, spec.delta), delta=spec.delta)
        ensemble, _ = label_dataset(job0, teachers, truth)
    else:
        ensemble = ensemble_labels(encoder, preds)
    ensemble_dice = float(np.mean([dice(e, m) for e, m in zip(ensemble, truth)]))

    job = AggregationJob(
        encoder,
        spec.plan,
        budget=spec.budget,
        sigma=spec.sigma,
        delta=spec.delta,
        base_seed=_derive(spec.seed, _NOISE_STREAM),
        threads=spec.threads,
    )
    labels, report = label_dataset(job, teachers, truth)
    noisy_dice = float(np.mean([dice(lab, m) for lab, m in zip(labels, truth)]))
    privacy = report.to_dict()
    privacy["seed"] = spec.seed
    sigma, eps = report.sigma, report.epsilon
    rows = [
        MetricRow("teacher", teacher_dice, sigma, eps, spec.delta, spec.seed),
        MetricRow("teacher_ensemble", ensemble_dice, sigma, eps, spec.delta, spec.seed),
        MetricRow("teacher_ensemble_noise", noisy_dice, sigma, eps, spec.delta, spec.seed),
    ]
    result = ExperimentReport(rows, privacy, time.perf_counter() - start, spec.to_dict())
    if spec.output_dir:
        result.write(spec.output_dir)
    return result


@dataclass(frozen=True)
class BenchmarkRow:
    encoder: str
    dims: int
    sigma: float
    dice: float
    seed: int


def _reconstruct(kind: str, encoder, mask: BinaryMask, sigma: float, seed: NoiseSeed) -> BinaryMask:
    if kind == "dwt":
        spec, count = encoder
        scale = 1.0 / math.sqrt(mask.size)
        code = top_coefficients(dwt_forward(Volume(mask.data * scale), spec), count)
        noisy = gaussian_perturb([v for _, v in code.entries], sigma, seed)
        code = type(code)(tuple(zip([i for i, _ in code.entries], noisy)), code.total)
        return BinaryMask.threshold(Volume(sparse_decode(code, spec, mask.dims).data / scale))
    z = gaussian_perturb(encoder.encode(mask.as_volume()), sigma, seed)
    return encoder.decode(z)


def compression_benchmark(
    dataset: Sequence[BinaryMask],
    encoders: dict,
    sigma_grid: Sequence[float],
    seed: int = 0,
    dims_grid: Optional[Sequence[int]] = None,
) -> list[BenchmarkRow]:
    """Dice of decode(encode(mask) + noise) for every encoder, size and noise level.

    ``encoders`` maps a kind (``"pca"``, ``"autoencoder"``, ``"dwt"``) to a
    ``{dims: encoder}`` dict. PCA/autoencoder entries are codecs; DWT entries
    are ``(WaveletSpec, coefficient_count)`` pairs. ``dims`` is the number of
    code variables per volume; ``dims_grid`` restricts the sizes evaluated.
    """
    rows = []
    for kind, by_dims in encoders.items():
        for ndims, enc in sorted(by_dims.items()):
            if dims_grid is not None and ndims not in dims_grid:
                continue
            for sigma in sigma_grid:
                scores = [
                    dice(_reconstruct(kind, enc, m, sigma, NoiseSeed(seed, i)), m)
                    for i, m in enumerate(dataset)
                ]
                rows.append(BenchmarkRow(kind, int(ndims), float(sigma), float(np.mean(scores)), seed))
    return rows


def benchmark_csv(rows: Sequence[BenchmarkRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["encoder", "dims", "sigma", "dice", "seed"])
    for r in rows:
        w.writerow([r.encoder, r.dims, repr(r.sigma), repr(r.dice), r.seed])
    return buf.getvalue()


@dataclass(frozen=True)
class BenchmarkSpec:
    masks: SyntheticMaskSpec = field(default_factory=SyntheticMaskSpec)
    fit_masks: int = 1000
    test_masks: int = 50
    dims_grid: tuple = (8, 64, 512)
    sigma_grid: tuple = (0.0, 0.075, 0.3)
    block_edge: int = 8
    wavelet: WaveletSpec = WaveletSpec("db4", 2)
    autoencoder: AutoencoderSettings = field(default_factory=lambda: AutoencoderSettings(epochs=60, learning_rate=0.02, train_noise_sigma=0.0))
    seed: int = 0


def fit_benchmark_encoders(spec: BenchmarkSpec) -> dict:
    """Fit one encoder per (kind, dims) point of the grid on public masks."""
    fit = gen_masks(replace(spec.masks, seed=_derive(spec.seed, _FIT_STREAM)), spec.fit_masks)
    n_vox = fit[0].size
    pca_full = fit_pca_codec(fit, PcaSettings(spec.block_edge, "full"), 0.0).model
    blocks = pca_full.block_grid.num_blocks
    out = {"pca": {}, "autoencoder": {}, "dwt": {}}
    for ndims in spec.dims_grid:
        if ndims % blocks or ndims // blocks > pca_full.block_grid.block_size:
            raise ValueError(f"dims {ndims} is not a multiple of the {blocks} PCA blocks up to full rank")
        out["pca"][ndims] = PcaCodec(pca_full.truncated(ndims // blocks))
        out["dwt"][ndims] = (spec.wavelet, min(ndims, n_vox))
        ae = replace(spec.autoencoder, latent_dim=ndims)
        out["autoencoder"][ndims] = fit_autoencoder_codec(fit, ae, 0.0, _derive(spec.seed, _FIT_STREAM) + ndims)
    return out


def run_benchmark(spec: BenchmarkSpec, encoders: Optional[dict] = None) -> list[BenchmarkRow]:
    if encoders is None:
        encoders = fit_benchmark_encoders(spec)
    test = gen_masks(replace(spec.masks, seed=_derive(spec.seed, _INPUT_STREAM)), spec.test_masks)
    return compression_benchmark(test, encoders, spec.sigma_grid, spec.seed, spec.dims_grid)
