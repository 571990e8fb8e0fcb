"""Private aggregation of teacher predictions: encode, average, perturb, decode.

Codecs wrap the three encoders behind a common ``encode``/``decode`` pair
operating on masks. Linear encoders (PCA, DWT) see the mask scaled by
``1/sqrt(d)``, so a binary mask of d voxels has norm at most one before any
clipping; decoding undoes the scale and thresholds at 0.5.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

from . import accountant
from .accountant import PrivacyBudget, QueryPlan
from .autoencoder import AutoencoderParams, ae_decode, ae_encode
from .dwt import WaveletSpec, dwt_private_encode, sparse_decode
from .mechanisms import NoiseSeed, SvtConfig, gaussian_perturb
from .pca import PcaModel, pca_decode, pca_encode
from .volume import BinaryMask, Volume, clip_to_ball

NORM_SLACK = 1e-9


class PcaCodec:
    name = "pca"

    def __init__(self, model: PcaModel):
        self.model = model
        self.dims = model.block_grid.volume_dims
        self.scale = 1.0 / math.sqrt(model.block_grid.num_voxels)

    @property
    def code_length(self) -> int:
        return self.model.code_length

    def encode(self, v: Volume) -> np.ndarray:
        return pca_encode(Volume(v.data * self.scale), self.model)

    def decode_real(self, z) -> Volume:
        return Volume(pca_decode(z, self.model).data / self.scale)

    def decode(self, z) -> BinaryMask:
        return BinaryMask.threshold(self.decode_real(z))


class AutoencoderCodec:
    name = "autoencoder"

    def __init__(self, params: AutoencoderParams, dims):
        self.params = params
        self.dims = tuple(dims)
        if math.prod(self.dims) != params.input_dim:
            raise ValueError("dims do not match autoencoder input size")

    @property
    def code_length(self) -> int:
        return self.params.latent_dim

    def encode(self, v: Volume) -> np.ndarray:
        return ae_encode(v, self.params)

    def decode_real(self, z) -> Volume:
        return ae_decode(z, self.params, self.dims, binarize=False)

    def decode(self, z) -> BinaryMask:
        return BinaryMask.threshold(self.decode_real(z))


Codec = Union[PcaCodec, AutoencoderCodec]


@dataclass(frozen=True)
class DwtAggregation:
    """Wavelet encoder settings for the SVT-based aggregation path.

    ``threshold`` is in units of the ``1/sqrt(d)``-scaled mean mask.
    """

    wavelet: WaveletSpec = WaveletSpec("haar", 3)
    threshold: float = 0.05
    max_selections: int = 64
    noiseless: bool = False

    name = "dwt"


def aggregate_codes(codes: Sequence, sigma: float, seed: NoiseSeed) -> np.ndarray:
    """Mean of the teachers' codes plus N(0, sigma^2 I) noise."""
    if len(codes) == 0:
        raise ValueError("empty teacher set")
    arr = np.asarray([np.asarray(c, dtype=np.float64).reshape(-1) for c in codes])
    if arr.ndim != 2:
        raise ValueError("teacher codes have mismatched lengths")
    norms = np.linalg.norm(arr, axis=1)
    if np.any(norms > 1 + NORM_SLACK):
        raise ValueError(f"teacher code norm {norms.max()} exceeds the unit bound")
    return gaussian_perturb(arr.mean(axis=0), sigma, seed)


@dataclass
class PrivacyReport:
    sigma: float
    epsilon: Optional[float]
    delta: float
    N: int
    K: int
    alpha_star: Optional[float]
    encoder: str
    seed: int
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        extra = d.pop("extra")
        d.update(extra)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, allow_nan=False)


@dataclass(frozen=True)
class AggregationJob:
    """One run of the private labelling loop.

    Give either ``budget`` (sigma is calibrated) or ``sigma`` (epsilon is
    reported); if both are set, ``sigma`` wins.
    """

    encoder: Union[Codec, DwtAggregation]
    plan: QueryPlan
    budget: Optional[PrivacyBudget] = None
    sigma: Optional[float] = None
    delta: Optional[float] = None
    base_seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.budget is None and self.sigma is None:
            raise ValueError("an aggregation job needs a privacy budget or a sigma")
        if self.sigma is not None and self.sigma < 0:
            raise ValueError("sigma must be nonnegative")
        if self.budget is None and self.delta is None:
            raise ValueError("delta is required when sigma is given without a budget")

    @property
    def report_delta(self) -> float:
        return self.budget.delta if self.budget is not None else self.delta


def _gaussian_accounting(sigma: float, delta: float, plan: QueryPlan):
    if sigma == 0:
        return None, None
    return accountant.compose_epsilon(sigma, delta, plan), accountant.optimal_alpha(sigma, delta, plan)


def label_dataset(
    job: AggregationJob, teachers: Sequence, inputs: Sequence[BinaryMask]
) -> tuple[list[BinaryMask], PrivacyReport]:
    """Label every input through the private aggregator.

    ``teachers`` expose ``predict(mask, input_index) -> BinaryMask``. Exactly
    ``plan.num_queries`` aggregations are performed; the noise for query n is
    keyed by ``(base_seed, n)`` so threaded runs match sequential ones.
    """
    plan = job.plan
    if len(inputs) != plan.num_queries:
        raise ValueError(f"plan expects {plan.num_queries} inputs, got {len(inputs)}")
    if len(teachers) != plan.num_teachers:
        raise ValueError(f"plan expects {plan.num_teachers} teachers, got {len(teachers)}")
    if isinstance(job.encoder, DwtAggregation):
        return _label_dwt(job, teachers, inputs)

    codec = job.encoder
    delta = job.report_delta
    sigma = job.sigma if job.sigma is not None else accountant.calibrate_sigma(job.budget, plan)

    def one(n: int) -> BinaryMask:
        preds = [_predict(t, inputs[n], n) for t in teachers]
        codes = [codec.encode(p.as_volume()) for p in preds]
        return codec.decode(aggregate_codes(codes, sigma, NoiseSeed(job.base_seed, n)))

    labels = _run_queries(one, plan.num_queries, job.threads)
    epsilon, alpha = _gaussian_accounting(sigma, delta, plan)
    report = PrivacyReport(sigma, epsilon, delta, plan.num_queries, plan.num_teachers, alpha, codec.name, job.base_seed)
    return labels, report


def _predict(teacher, mask: BinaryMask, n: int) -> BinaryMask:
    try:
        pred = teacher.predict(mask, n)
    except Exception as e:
        raise RuntimeError(f"teacher {teacher!r} failed on input {n}: {e}") from e
    if pred.dims != mask.dims:
        raise RuntimeError(f"teacher {teacher!r} returned dims {pred.dims} for input {n}")
    return pred


def _run_queries(fn: Callable[[int], BinaryMask], count: int, threads: int) -> list:
    if threads <= 1:
        out = [fn(n) for n in range(count)]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            out = list(pool.map(fn, range(count)))
    assert len(out) == count
    return out


def dwt_budget_split(job: AggregationJob) -> tuple[float, float]:
    """Per-volume SVT epsilon and value-noise sigma for the wavelet path.

    With a budget, half of epsilon pays for selection (split evenly across the
    N volumes by basic composition) and half for the Gaussian value releases
    (RDP-composed over the N volumes).
    """
    plan = job.plan
    if job.sigma is not None:
        eps_gauss, _ = _gaussian_accounting(job.sigma, job.report_delta, plan)
        if job.budget is not None:
            eps_sel_total = job.budget.epsilon / 2
        elif eps_gauss is not None:
            eps_sel_total = eps_gauss
        else:
            raise ValueError("the wavelet path needs a budget when sigma is zero")
        return eps_sel_total / plan.num_queries, job.sigma
    half = PrivacyBudget(job.budget.epsilon / 2, job.budget.delta)
    return half.epsilon / plan.num_queries, accountant.calibrate_sigma(half, plan)


def _label_dwt(job: AggregationJob, teachers, inputs):
    cfg_in: DwtAggregation = job.encoder
    plan = job.plan
    dims = inputs[0].dims
    scale = 1.0 / math.sqrt(math.prod(dims))
    eps_sel, sigma = dwt_budget_split(job)
    svt = SvtConfig(
        threshold=cfg_in.threshold,
        max_selections=cfg_in.max_selections,
        selection_epsilon=eps_sel,
        value_sigma=0.0 if cfg_in.noiseless else sigma,
        coefficient_sensitivity=plan.sensitivity,
        noiseless=cfg_in.noiseless,
    )

    def one(n: int) -> BinaryMask:
        vols = [
            Volume(clip_to_ball(p.data.reshape(-1) * scale, 1.0).reshape(dims))
            for p in (_predict(t, inputs[n], n) for t in teachers)
        ]
        code = dwt_private_encode(vols, svt, cfg_in.wavelet, NoiseSeed(job.base_seed, n))
        return BinaryMask.threshold(Volume(sparse_decode(code, cfg_in.wavelet, dims).data / scale))

    labels = _run_queries(one, plan.num_queries, job.threads)
    eps_gauss, alpha = _gaussian_accounting(sigma, job.report_delta, plan)
    per_volume = [eps_sel] * plan.num_queries
    epsilon = None if eps_gauss is None else math.fsum(per_volume) + eps_gauss
    report = PrivacyReport(
        sigma, epsilon, job.report_delta, plan.num_queries, plan.num_teachers, alpha, "dwt", job.base_seed,
        extra={
            "epsilon_gaussian": eps_gauss,
            "epsilon_selection_per_volume": per_volume,
            "svt_threshold": cfg_in.threshold,
            "svt_max_selections": cfg_in.max_selections,
        },
    )
    return labels, report


def ensemble_labels(codec: Codec, predictions: Sequence[Sequence[BinaryMask]]) -> list[BinaryMask]:
    """Noise-free aggregation: decode the plain mean code per input."""
    return [
        codec.decode(np.mean([codec.encode(p.as_volume()) for p in preds], axis=0))
        for preds in predictions
    ]


def adversarial_volumes(dims) -> list[Volume]:
    """Fixed worst-case style inputs: all ones, single voxels, checkerboards, zeros."""
    dims = tuple(dims)
    out = [Volume(np.ones(dims)), Volume(np.zeros(dims))]
    for idx in [(0, 0, 0), tuple(n // 2 for n in dims), tuple(n - 1 for n in dims)]:
        single = np.zeros(dims)
        single[idx] = 1.0
        out.append(Volume(single))
    parity = np.indices(dims).sum(axis=0) % 2
    out += [Volume(parity.astype(float)), Volume(1.0 - parity)]
    out.append(Volume(np.full(dims, 1e6)))
    return out


def sensitivity_audit(encode: Callable[[Volume], np.ndarray], dims, trials: int, seed: int = 0) -> float:
    """Largest code norm over adversarial inputs plus ``trials`` random volumes.

    Random inputs cycle through binary masks of random density, uniform
    volumes in [0, 1], and Gaussian volumes with scales up to 100.
    """
    rng = np.random.default_rng(seed)
    dims = tuple(dims)
    worst = max(float(np.linalg.norm(encode(v))) for v in adversarial_volumes(dims))
    for t in range(trials):
        kind = t % 3
        if kind == 0:
            data = (rng.random(dims) < rng.random()).astype(float)
        elif kind == 1:
            data = rng.random(dims)
        else:
            data = rng.standard_normal(dims) * 10 ** rng.uniform(-2, 2)
        worst = max(worst, float(np.linalg.norm(encode(Volume(data)))))
    return worst
