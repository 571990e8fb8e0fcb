"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 runtime error (bad input files,
invalid parameters). Results go to stdout or the named output files; log
lines go to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import replace
from importlib import resources
from pathlib import Path

from . import __version__, accountant
from .accountant import PrivacyBudget, QueryPlan
from .autoencoder import load_autoencoder, save_autoencoder
from .dwt import SparseCode, WaveletSpec, dwt_forward, sparse_decode, top_coefficients
from .experiment import (
    AutoencoderSettings,
    BenchmarkSpec,
    PcaSettings,
    benchmark_csv,
    fit_autoencoder_codec,
    fit_benchmark_encoders,
    fit_pca_codec,
    load_spec,
    run_benchmark,
    run_experiment,
)
from .pca import load_pca, save_pca
from .pipeline import AggregationJob, AutoencoderCodec, DwtAggregation, PcaCodec, label_dataset
from .synthetic import SyntheticMaskSpec, gen_masks
from .volume import BinaryMask, FormatError, Volume, read_volb, write_volb

log = logging.getLogger("patedr")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return value


def _seed(text):
    value = int(text)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be a 64-bit unsigned integer")
    return value


# ---- privacy accounting -------------------------------------------------


def cmd_calibrate(args):
    sigma = accountant.calibrate_sigma(
        PrivacyBudget(args.epsilon, args.delta), QueryPlan(args.queries, args.teachers)
    )
    print(f"{sigma:.10g}")


def cmd_compose(args):
    eps = accountant.compose_epsilon(args.sigma, args.delta, QueryPlan(args.queries, args.teachers))
    print(f"{eps:.10g}")


def cmd_curve(args):
    if args.k_max < args.k_min:
        raise UsageError("--k-max must be at least --k-min")
    curve = accountant.privacy_curve(args.sigma, args.delta, args.queries, range(args.k_min, args.k_max + 1))
    text = accountant.curve_to_csv(curve)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    k10 = accountant.first_k_below(curve, 10.0)
    print(f"first K with epsilon < 10: {k10 if k10 is not None else f'none up to {args.k_max}'}", file=sys.stderr)


# ---- encoders -----------------------------------------------------------


def _read_masks(directory) -> list[Volume]:
    paths = sorted(Path(directory).glob("*.volb"))
    if not paths:
        raise FileNotFoundError(f"no .volb files in {directory}")
    return [_read_volb(p) for p in paths]


def _read_volb(path) -> Volume:
    try:
        return read_volb(path)
    except FormatError as e:
        raise FormatError(f"{path}: {e}") from None


def _as_mask(v: Volume) -> BinaryMask:
    return v if isinstance(v, BinaryMask) else BinaryMask.threshold(v)


def cmd_gen_masks(args):
    spec = SyntheticMaskSpec(
        dims=tuple(args.dims), num_blobs=tuple(args.blobs), semi_axes=tuple(args.semi_axes),
        margin=args.margin, seed=args.seed,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, m in enumerate(gen_masks(spec, args.count)):
        write_volb(out / f"mask_{i:04d}.volb", m)
    log.info("wrote %d masks to %s", args.count, out)


def cmd_fit_encoder(args):
    masks = [_as_mask(v) for v in _read_masks(args.masks)]
    out = Path(args.out)
    if args.method == "pca":
        comps = args.components
        if comps not in ("auto", "full"):
            comps = int(comps)
        codec = fit_pca_codec(masks, PcaSettings(args.block_edge, comps), args.sigma)
        save_pca(out, codec.model)
        log.info("PCA: %d components per block, code length %d", codec.model.num_components, codec.code_length)
    elif args.method == "ae":
        settings = AutoencoderSettings(
            latent_dim=args.latent, hidden_dim=args.hidden, epochs=args.epochs,
            learning_rate=args.lr, batch_size=args.batch_size, train_noise_sigma=args.train_noise,
        )
        codec = fit_autoencoder_codec(masks, settings, args.sigma, args.seed)
        save_autoencoder(out, codec.params)
    else:
        out.write_text(json.dumps({
            "method": "dwt", "filter": args.filter, "levels": args.levels, "dims": list(masks[0].dims),
        }, indent=2))
    log.info("wrote %s", out)


def _load_model(path, dims=None):
    """Return a PCA/autoencoder codec or a ``(WaveletSpec, dims)`` pair."""
    raw = Path(path).read_bytes()
    if raw[:4] == b"PCAM":
        return PcaCodec(load_pca(path))
    if raw[:4] == b"AENC":
        params = load_autoencoder(path)
        if dims is None:
            side = round(params.input_dim ** (1 / 3))
            dims = (side,) * 3
        return AutoencoderCodec(params, dims)
    try:
        meta = json.loads(raw)
    except (json.JSONDecodeError, UnicodeDecodeError):
        raise FormatError(f"{path}: unrecognised model file", 0) from None
    if not isinstance(meta, dict) or meta.get("method") != "dwt":
        raise FormatError(f"{path}: expected a dwt model description", "method")
    try:
        return WaveletSpec(meta["filter"], int(meta["levels"])), tuple(meta["dims"])
    except (KeyError, ValueError, TypeError) as e:
        raise FormatError(f"{path}: {e}", "filter/levels/dims") from None


def _read_code(path) -> SparseCode:
    try:
        return SparseCode.from_csv(Path(path).read_text())
    except FormatError as e:
        raise FormatError(f"{path}: {e}") from None


def cmd_encode(args):
    model = _load_model(args.model)
    v = _read_volb(args.input)
    if isinstance(model, tuple):
        spec, dims = model
        scale = 1.0 / math.sqrt(math.prod(dims))
        coeffs = dwt_forward(Volume(v.data * scale), spec)
        code = top_coefficients(coeffs, args.coefficients or coeffs.size)
    else:
        z = model.encode(v if not isinstance(v, BinaryMask) else v.as_volume())
        code = SparseCode(tuple(enumerate(z)), z.size)
    Path(args.out).write_text(code.to_csv())


def cmd_decode(args):
    model = _load_model(args.model)
    code = _read_code(args.input)
    if isinstance(model, tuple):
        spec, dims = model
        real = Volume(sparse_decode(code, spec, dims).data * math.sqrt(math.prod(dims)))
    else:
        if code.total != model.code_length:
            raise FormatError(f"code has {code.total} entries, model expects {model.code_length}", "total")
        real = model.decode_real(code.dense())
    out = BinaryMask.threshold(real) if not args.real else real
    write_volb(args.out, out)


class _FileTeacher:
    def __init__(self, directory):
        self.directory = Path(directory)
        self.paths = sorted(self.directory.glob("*.volb"))

    def predict(self, mask, n):
        return _as_mask(_read_volb(self.paths[n]))

    def __repr__(self):
        return f"teacher({self.directory})"


def cmd_aggregate(args):
    teacher_dirs = sorted(p for p in Path(args.teachers).iterdir() if p.is_dir())
    if not teacher_dirs:
        raise FileNotFoundError(f"no teacher subdirectories in {args.teachers}")
    teachers = [_FileTeacher(d) for d in teacher_dirs]
    counts = {len(t.paths) for t in teachers}
    if len(counts) != 1 or 0 in counts:
        raise FormatError("teacher directories hold different (or zero) numbers of predictions", "teachers")
    n = counts.pop()
    first = [teachers[0].predict(None, i) for i in range(n)]
    model = _load_model(args.model, first[0].dims)
    if isinstance(model, tuple):
        model = DwtAggregation(model[0], args.threshold, args.max_selections)
    if args.sigma is None and args.epsilon is None:
        raise UsageError("give --sigma or --epsilon")
    plan = QueryPlan(n, len(teachers))
    budget = PrivacyBudget(args.epsilon, args.delta) if args.epsilon is not None else None
    job = AggregationJob(model, plan, budget=budget, sigma=args.sigma, delta=args.delta,
                         base_seed=args.seed, threads=args.threads)
    labels, report = label_dataset(job, teachers, first)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, lab in enumerate(labels):
        write_volb(out / f"label_{i:04d}.volb", lab)
    (out / "privacy_report.json").write_text(report.to_json())
    log.info("labelled %d inputs from %d teachers: sigma=%.6g epsilon=%s", n, len(teachers), report.sigma, report.epsilon)


# ---- experiments --------------------------------------------------------


def _spec_path(name: str):
    path = Path(name)
    if path.exists():
        return path
    packaged = resources.files("patedr") / "configs" / (name if name.endswith(".json") else name + ".json")
    if packaged.is_file():
        return packaged
    raise FileNotFoundError(f"no experiment spec {name!r} on disk or packaged")


def cmd_simulate(args):
    spec = load_spec(_spec_path(args.spec))
    spec = replace(spec, seed=args.seed, threads=args.threads, output_dir=args.out or spec.output_dir)
    if not spec.output_dir:
        raise UsageError("give --out or set output_dir in the experiment file")
    report = run_experiment(spec)
    for r in report.rows:
        log.info("%-24s dice=%.4f", r.actor, r.dice)
    log.info("sigma=%.6g epsilon=%s delta=%g (%.1fs)", report.privacy["sigma"], report.privacy["epsilon"],
             spec.delta, report.runtime_seconds)


def cmd_benchmark(args):
    spec = BenchmarkSpec(
        fit_masks=args.fit_masks, test_masks=args.test_masks, dims_grid=tuple(args.dims_grid),
        sigma_grid=tuple(args.sigma_grid), block_edge=args.block_edge, seed=args.seed,
        autoencoder=AutoencoderSettings(epochs=args.epochs, learning_rate=args.lr, train_noise_sigma=0.0),
    )
    rows = run_benchmark(spec, fit_benchmark_encoders(spec))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "benchmark.csv").write_text(benchmark_csv(rows))
    log.info("wrote %d rows to %s", len(rows), out / "benchmark.csv")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="patedr", description="Private aggregation of segmentation masks via dimensionality reduction.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def privacy_args(sp, with_sigma=False, with_teachers=True):
        if with_sigma:
            sp.add_argument("--sigma", type=float, required=True)
        sp.add_argument("--delta", type=float, required=True)
        sp.add_argument("--queries", type=_positive_int, required=True)
        if with_teachers:
            sp.add_argument("--teachers", type=_positive_int, required=True)

    sp = sub.add_parser("calibrate", help="noise scale for an (epsilon, delta) target")
    sp.add_argument("--epsilon", type=float, required=True)
    privacy_args(sp)
    sp.set_defaults(func=cmd_calibrate)

    sp = sub.add_parser("compose", help="epsilon spent at a given noise scale")
    privacy_args(sp, with_sigma=True)
    sp.set_defaults(func=cmd_compose)

    sp = sub.add_parser("curve", help="epsilon against number of teachers, as CSV")
    privacy_args(sp, with_sigma=True, with_teachers=False)
    sp.add_argument("--k-min", type=_positive_int, required=True)
    sp.add_argument("--k-max", type=_positive_int, required=True)
    sp.add_argument("--out", help="CSV path (default stdout)")
    sp.set_defaults(func=cmd_curve)

    sp = sub.add_parser("gen-masks", help="write synthetic masks as VOLB files")
    sp.add_argument("--count", type=_positive_int, required=True)
    sp.add_argument("--seed", type=_seed, required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--dims", type=_positive_int, nargs=3, default=[16, 16, 16])
    sp.add_argument("--blobs", type=int, nargs=2, default=[1, 2])
    sp.add_argument("--semi-axes", type=float, nargs=2, default=[3.0, 6.0])
    sp.add_argument("--margin", type=float, default=0.35)
    sp.set_defaults(func=cmd_gen_masks)

    sp = sub.add_parser("fit-encoder", help="fit a PCA/autoencoder model or describe a wavelet encoder")
    sp.add_argument("--method", choices=["pca", "ae", "dwt"], required=True)
    sp.add_argument("--masks", required=True, help="directory of .volb masks")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=_seed, required=True)
    sp.add_argument("--sigma", type=float, default=0.0, help="deployment noise (PCA auto rank, AE training noise)")
    sp.add_argument("--block-edge", type=_positive_int, default=8)
    sp.add_argument("--components", default="auto", help="integer, 'auto' or 'full'")
    sp.add_argument("--latent", type=_positive_int, default=32)
    sp.add_argument("--hidden", type=_positive_int, default=128)
    sp.add_argument("--epochs", type=int, default=100)
    sp.add_argument("--lr", type=float, default=0.01)
    sp.add_argument("--batch-size", type=_positive_int, default=16)
    sp.add_argument("--train-noise", type=float, default=None)
    sp.add_argument("--filter", choices=["haar", "db4"], default="haar")
    sp.add_argument("--levels", type=_positive_int, default=3)
    sp.set_defaults(func=cmd_fit_encoder)

    sp = sub.add_parser("encode", help="encode one VOLB volume to a code CSV")
    sp.add_argument("--model", required=True)
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--coefficients", type=_positive_int, help="wavelet coefficients to keep (default all)")
    sp.set_defaults(func=cmd_encode)

    sp = sub.add_parser("decode", help="decode a code CSV to a VOLB volume")
    sp.add_argument("--model", required=True)
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--real", action="store_true", help="write the real-valued reconstruction instead of a mask")
    sp.set_defaults(func=cmd_decode)

    sp = sub.add_parser("aggregate", help="privately label inputs from teacher prediction directories")
    sp.add_argument("--model", required=True)
    sp.add_argument("--teachers", required=True, help="directory with one subdirectory of .volb predictions per teacher")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=_seed, required=True)
    sp.add_argument("--sigma", type=float)
    sp.add_argument("--epsilon", type=float)
    sp.add_argument("--delta", type=float, required=True)
    sp.add_argument("--threads", type=_positive_int, default=1)
    sp.add_argument("--threshold", type=float, default=0.05, help="SVT threshold (dwt)")
    sp.add_argument("--max-selections", type=_positive_int, default=64, help="SVT selections (dwt)")
    sp.set_defaults(func=cmd_aggregate)

    sp = sub.add_parser("simulate", help="run an experiment spec end to end")
    sp.add_argument("--spec", required=True, help="experiment.json path or packaged name (e.g. paper_point)")
    sp.add_argument("--seed", type=_seed, required=True)
    sp.add_argument("--out")
    sp.add_argument("--threads", type=_positive_int, default=1)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("benchmark", help="reconstruction Dice by encoder, code size and noise")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=_seed, required=True)
    sp.add_argument("--fit-masks", type=_positive_int, default=1000)
    sp.add_argument("--test-masks", type=_positive_int, default=50)
    sp.add_argument("--dims-grid", type=_positive_int, nargs="+", default=[8, 64, 512])
    sp.add_argument("--sigma-grid", type=float, nargs="+", default=[0.0, 0.075, 0.3])
    sp.add_argument("--block-edge", type=_positive_int, default=8)
    sp.add_argument("--epochs", type=int, default=60)
    sp.add_argument("--lr", type=float, default=0.02)
    sp.set_defaults(func=cmd_benchmark)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # usage errors, --help and --version
        return e.code if isinstance(e.code, int) else 1
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(message)s",
        stream=sys.stderr,
    )
    try:
        args.func(args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"patedr: error: {e}", file=sys.stderr)
        return 1
    except (FormatError, ValueError, OSError, RuntimeError, FloatingPointError) as e:
        print(f"patedr: error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
