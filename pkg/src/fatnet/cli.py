"""``fatnet`` command line.

Exit codes: 0 success, 1 usage error, 2 numeric or validation failure.
``FAT_SEED`` supplies the seed when ``--seed`` is not given.
"""
from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import accounting, bench, gradcheck, modelio, spectral
from .model import PRESETS, FatConfig, FatModel, build_preset, fat_forward
from .tensor import Tensor

EXIT_OK, EXIT_USAGE, EXIT_FAILURE = 0, 1, 2
OUT_OF_SCOPE = "requires training (out of scope)"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _positive(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _non_negative(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {v}")
    return v


def _preset(text: str) -> str:
    names = {n.upper(): n for n in PRESETS}
    if text.upper() not in names:
        raise argparse.ArgumentTypeError(f"unknown preset {text!r}; valid presets: {', '.join(PRESETS)}")
    return names[text.upper()]


def _channels(text: str) -> list[int]:
    """``0-7`` or ``0,3,5`` (mixable: ``0-3,8``)."""
    out = []
    try:
        for part in text.split(","):
            if "-" in part:
                lo, hi = (int(v) for v in part.split("-", 1))
                out += range(lo, hi + 1)
            else:
                out.append(int(part))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad channel list {text!r}; use e.g. 0-7 or 0,2,4") from None
    if not out:
        raise argparse.ArgumentTypeError("empty channel list")
    return out


def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("FAT_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"FAT_SEED must be an integer, got {env!r}") from None


# --------------------------------------------------------------------------
# shared option groups
# --------------------------------------------------------------------------

def _add_model_args(p: argparse.ArgumentParser, variants: bool = True) -> None:
    g = p.add_mutually_exclusive_group()
    g.add_argument("--preset", type=_preset, default="B0", help="named configuration (default B0)")
    g.add_argument("--config", type=Path, help="key=value config file (may itself set preset=...)")
    if variants:
        p.add_argument("--fusion", choices=("interaction", "add-linear", "cat-linear", "mul-linear"))
        p.add_argument("--downsample", choices=("refined", "pool-down", "conv-no-overlap", "conv-overlap"))
        p.add_argument("--no-cpe", action="store_true", help="drop the positional-encoding residual")
        p.add_argument("--extra-sigmoid", action="store_true", help="keep the high-order sigmoid in the fusion")


def _config(args) -> FatConfig:
    cfg = modelio.load_config(args.config) if getattr(args, "config", None) else build_preset(args.preset)
    changes = {}
    if getattr(args, "fusion", None):
        changes["fusion"] = args.fusion
    if getattr(args, "downsample", None):
        changes["downsample"] = args.downsample
    if getattr(args, "no_cpe", False):
        changes["cpe"] = False
    if getattr(args, "extra_sigmoid", False):
        changes["extra_sigmoid"] = True
    return cfg.replace(**changes) if changes else cfg


def _add_input_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--weights", type=Path, help="FATW weight file (default: random weights from --seed)")
    p.add_argument("--image", type=Path, help="binary PPM (P6) input image")
    p.add_argument("--random-seed", type=int, help="use a seeded random image instead of --image")
    p.add_argument("--resolution", type=_positive, default=224, help="input side length (default 224)")
    p.add_argument("--seed", type=int, help="weight seed (default: $FAT_SEED or 0)")


def _model(args, cfg: FatConfig) -> FatModel:
    weights = modelio.load(args.weights) if args.weights else modelio.init_random(cfg, _seed(args))
    return FatModel(cfg, weights)


def _image(args) -> Tensor:
    if args.image is not None and args.random_seed is not None:
        raise UsageError("give either --image or --random-seed, not both")
    r = args.resolution
    if args.image is not None:
        return modelio.load_image_ppm(args.image, resize_to=r, normalize=True)
    seed = args.random_seed if args.random_seed is not None else _seed(args)
    return Tensor(np.random.default_rng(seed).standard_normal((1, 3, r, r)))


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def _fmt_m(n: int) -> str:
    return f"{n / 1e6:.3f}M"


def _fmt_g(n: int) -> str:
    return f"{n / 1e9:.3f}G"


def cmd_describe(args) -> int:
    cfg = _config(args)
    specs = cfg.layer_specs(args.resolution)
    if args.csv:
        print(accounting.layer_table(specs, as_csv=True), end="")
        return EXIT_OK
    if not args.summary:
        print(accounting.layer_table(specs))
        print()
    b = accounting.budget(cfg, args.resolution)
    print(f"{cfg.name}: params {b.params} ({_fmt_m(b.params)}), "
          f"FLOPs@{args.resolution} {b.flops} ({_fmt_g(b.flops)}, 1 FLOP = 1 MAC)")
    return EXIT_OK


def cmd_forward(args) -> int:
    cfg = _config(args)
    model = _model(args, cfg)
    logits = fat_forward(_image(args), model).numpy()[0].astype(np.float64)
    if not np.all(np.isfinite(logits)):
        print("error: non-finite logits", file=sys.stderr)
        return EXIT_FAILURE
    top = np.argsort(-logits, kind="stable")[: args.top]
    rows = [(rank, int(c), f"{logits[c]:.6f}") for rank, c in enumerate(top, start=1)]
    header = ("rank", "class", "logit")
    print(accounting.format_csv(header, rows) if args.csv else accounting.format_table(header, rows),
          end="" if args.csv else "\n")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    seed = _seed(args)
    if args.preset:
        problem = gradcheck.model_problem(build_preset(args.preset), seed=seed)
    elif args.config in ("tiny", "mini"):
        problem = gradcheck.problem_for(args.config, seed=seed)
    else:
        problem = gradcheck.model_problem(modelio.load_config(args.config), seed=seed)
    samples = None if args.all else args.samples
    if samples is None and not args.all and (args.preset or args.config != "tiny"):
        samples = gradcheck.DEFAULT_SAMPLES
    report = gradcheck.check(problem, tolerance=args.tolerance, max_per_tensor=samples, seed=seed)
    print(report.format_text())
    return EXIT_OK if report.passed else EXIT_FAILURE


def cmd_spectra(args) -> int:
    cfg = _config(args)
    model = _model(args, cfg)
    spectra = spectral.branch_spectra(model, _image(args), args.stage, args.block, args.branch, args.channels)
    written = spectral.export_spectra(spectra, args.out_dir, args.stage, args.block, args.branch)
    rows = []
    for s in spectra:
        lin = s.linear()
        peak = np.unravel_index(int(np.argmax(lin)), lin.shape)
        v, u = s.frequencies()
        rows.append((s.channel, f"{lin[s.center()]:.6g}", f"({int(u[peak[1]])},{int(v[peak[0]])})",
                     f"{s.parseval_error():.2e}"))
    header = ("channel", "dc_magnitude", "peak_uv", "parseval_rel_err")
    print(accounting.format_csv(header, rows) if args.csv else accounting.format_table(header, rows),
          end="" if args.csv else "\n")
    print(f"wrote {len(written)} files to {args.out_dir}", file=sys.stderr)
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = _config(args)
    variants = list(bench.FUSION_VARIANTS) if args.variant == ["fusion"] else (
        list(bench.VARIANTS) if args.variant == ["all"] else args.variant)
    results = bench.compare(cfg if args.config else args.preset, variants, batch=args.batch, iters=args.iters,
                            warmup=args.warmup, resolution=args.resolution, scope=args.scope,
                            seed=_seed(args), threads=args.threads)
    print(bench.results_table(results, as_csv=args.csv), end="" if args.csv else "\n")
    if args.append:
        path = Path(args.append)
        new = not path.exists() or path.stat().st_size == 0
        with path.open("a") as f:
            if new:
                f.write(",".join(bench.CSV_HEADER) + "\n")
            for r in results:
                f.write(r.csv_line() + "\n")
    return EXIT_OK


ABLATION_AXES = {
    "fusion": [("interaction", {}), ("add-linear", {"fusion": "add-linear"}),
               ("cat-linear", {"fusion": "cat-linear"}), ("mul-linear", {"fusion": "mul-linear"})],
    "downsample": [("refined", {}), ("pool-down", {"downsample": "pool-down"}),
                   ("conv-no-overlap", {"downsample": "conv-no-overlap"}),
                   ("conv-overlap", {"downsample": "conv-overlap"})],
    "cpe": [("cpe-on", {}), ("cpe-off", {"cpe": False})],
}


def ablation_rows(cfg: FatConfig, axis: str, resolution: int = 224) -> list[tuple]:
    base = accounting.budget(cfg.replace(**ABLATION_AXES[axis][0][1]), resolution)
    rows = []
    for name, change in ABLATION_AXES[axis]:
        b = accounting.budget(cfg.replace(**change), resolution)
        rows.append((name, b.params, _fmt_m(b.params), f"{b.params - base.params:+d}",
                     b.flops, _fmt_g(b.flops), f"{b.flops - base.flops:+d}", OUT_OF_SCOPE))
    return rows


ABLATION_HEADER = ("variant", "params", "params_m", "d_params", "flops", "flops_g", "d_flops", "top1_acc")


def cmd_ablate(args) -> int:
    cfg = _config(args)
    rows = ablation_rows(cfg, args.axis, args.resolution)
    if args.csv:
        print(accounting.format_csv(ABLATION_HEADER, rows), end="")
    else:
        print(accounting.format_table(ABLATION_HEADER, rows))
    return EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fatnet", description="FASA / FAT backbone engine: accounting, inference, "
                     "gradient checks, spectra and throughput.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("describe", help="per-layer and total params/FLOPs")
    _add_model_args(p)
    p.add_argument("--resolution", type=_positive, default=224)
    p.add_argument("--summary", action="store_true", help="totals only")
    p.add_argument("--csv", action="store_true")
    p.set_defaults(fn=cmd_describe)

    p = sub.add_parser("forward", help="top logits for one image")
    _add_model_args(p)
    _add_input_args(p)
    p.add_argument("--top", type=_positive, default=5)
    p.add_argument("--csv", action="store_true")
    p.set_defaults(fn=cmd_forward)

    p = sub.add_parser("gradcheck", help="tape gradients vs central finite differences (float64)")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--config", default="tiny", help="tiny (FASA block), mini (1 block per stage) or a config file")
    g.add_argument("--preset", type=_preset, help="preset (rejected if over the size guard)")
    p.add_argument("--seed", type=int)
    p.add_argument("--tolerance", type=float, default=gradcheck.TOLERANCE)
    s = p.add_mutually_exclusive_group()
    s.add_argument("--samples", type=_positive, help="scalars checked per tensor (default: all for tiny, "
                   f"{gradcheck.DEFAULT_SAMPLES} otherwise)")
    s.add_argument("--all", action="store_true", help="check every scalar")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("spectra", help="per-channel DFT magnitude of a FASA branch, as CSV + PGM")
    _add_model_args(p)
    _add_input_args(p)
    p.add_argument("--stage", type=_positive, default=1, help="1-based stage (default 1)")
    p.add_argument("--block", type=_positive, default=1, help="1-based block within the stage (default 1)")
    p.add_argument("--branch", choices=spectral.BRANCHES, default="local")
    p.add_argument("--channels", type=_channels, default=list(range(8)), help="e.g. 0-7 (default) or 0,4,9")
    p.add_argument("--out-dir", type=Path, default=Path("spectra"))
    p.add_argument("--csv", action="store_true")
    p.set_defaults(fn=cmd_spectra)

    p = sub.add_parser("bench", help="throughput (images/s): median, p10, p90")
    _add_model_args(p, variants=False)
    p.add_argument("--variant", nargs="+", default=["default"],
                   help=f"one or more of {', '.join(bench.VARIANTS)}; or 'fusion' / 'all'")
    p.add_argument("--batch", type=_positive, default=1)
    p.add_argument("--iters", type=_positive, default=30)
    p.add_argument("--warmup", type=_non_negative, default=3)
    p.add_argument("--resolution", type=_positive, default=224)
    p.add_argument("--scope", choices=bench.SCOPES, default="model")
    p.add_argument("--threads", type=_positive, default=1, help="BLAS worker threads (default 1)")
    p.add_argument("--seed", type=int)
    p.add_argument("--csv", action="store_true")
    p.add_argument("--append", metavar="FILE", help="append CSV rows to FILE (header written if new)")
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("ablate", help="params/FLOPs side by side along one variant axis")
    _add_model_args(p, variants=False)
    p.add_argument("--axis", choices=tuple(ABLATION_AXES), required=True)
    p.add_argument("--resolution", type=_positive, default=224)
    p.add_argument("--csv", action="store_true")
    p.set_defaults(fn=cmd_ablate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "bench":
        unknown = [v for v in args.variant if v not in bench.VARIANTS and v not in ("fusion", "all")]
        if unknown:
            parser.error(f"unknown variant {unknown[0]!r}")
    try:
        return args.fn(args)
    except UsageError as e:
        print(f"fatnet: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, KeyError, OSError, modelio.FormatError) as e:
        msg = e.args[0] if isinstance(e, KeyError) and e.args else e
        print(f"fatnet: error: {msg}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
