"""Throughput harness for the structural variants.

Absolute numbers are machine-specific. The harness is meant for
comparisons on one machine, which is why :func:`compare` interleaves the
variants iteration by iteration: slow drift (thermal, other processes)
then hits every variant alike instead of whichever ran last.

Scopes:

* ``model``: full forward pass, image to logits;
* ``block``: the first FAT block of stage 1;
* ``fusion``: only the stage-1 fusion step (where the variants differ most).
"""
from __future__ import annotations

import contextlib
import time
from collections.abc import Callable, Sequence
from dataclasses import dataclass

import numpy as np

from .accounting import format_csv, format_table
from .fasa import bidirectional_interaction_fuse
from .model import FatConfig, FatModel, build_preset, fat_block_forward, fat_forward
from .modelio import init_random
from .params import Params
from .tensor import Tensor

VARIANTS: dict[str, dict] = {
    "default": {},
    "add-linear": {"fusion": "add-linear"},
    "cat-linear": {"fusion": "cat-linear"},
    "mul-linear": {"fusion": "mul-linear"},
    "extra-sigmoid": {"extra_sigmoid": True},
    "pool-down": {"downsample": "pool-down"},
    "conv-no-overlap": {"downsample": "conv-no-overlap"},
    "conv-overlap": {"downsample": "conv-overlap"},
    "no-cpe": {"cpe": False},
}
FUSION_VARIANTS = ("default", "add-linear", "cat-linear", "mul-linear", "extra-sigmoid")
SCOPES = ("model", "block", "fusion")

CSV_HEADER = ("preset", "variant", "scope", "batch", "resolution", "iters",
              "imgs_per_s_median", "imgs_per_s_p10", "imgs_per_s_p90")


def variant_config(preset: str | FatConfig, variant: str) -> FatConfig:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {tuple(VARIANTS)}")
    base = build_preset(preset) if isinstance(preset, str) else preset
    return base.replace(**VARIANTS[variant])


@dataclass(frozen=True)
class BenchResult:
    preset: str
    variant: str
    scope: str
    batch: int
    resolution: int
    seconds: tuple[float, ...]  # per timed iteration

    @property
    def iters(self) -> int:
        return len(self.seconds)

    def _rate(self, q: float) -> float:
        # throughput percentile q corresponds to time percentile 100 - q
        return self.batch / float(np.percentile(self.seconds, 100 - q))

    @property
    def median(self) -> float:
        return self.batch / float(np.median(self.seconds))

    @property
    def p10(self) -> float:
        return self._rate(10)

    @property
    def p90(self) -> float:
        return self._rate(90)

    def row(self) -> tuple:
        return (self.preset, self.variant, self.scope, self.batch, self.resolution, self.iters,
                f"{self.median:.3f}", f"{self.p10:.3f}", f"{self.p90:.3f}")

    def csv_line(self) -> str:
        return format_csv(CSV_HEADER, [self.row()]).splitlines()[1]


def _workload(cfg: FatConfig, scope: str, batch: int, resolution: int, seed: int) -> Callable[[], Tensor]:
    if scope not in SCOPES:
        raise ValueError(f"unknown scope {scope!r}; expected one of {SCOPES}")
    cfg.check_resolution(resolution)
    model = FatModel(cfg, init_random(cfg, seed))
    rng = np.random.default_rng(seed)
    if scope == "model":
        img = Tensor(rng.standard_normal((batch, 3, resolution, resolution)))
        return lambda: fat_forward(img, model)
    bc = next(cfg.block_configs())
    h = resolution // 4
    p = Params(model.tensors) / bc.prefix
    if scope == "block":
        x = Tensor(rng.standard_normal((batch, bc.channels, h, h)))
        return lambda: fat_block_forward(x, p, bc)
    q_local = Tensor(rng.standard_normal((batch, bc.channels, h, h)))
    x_global = Tensor(rng.standard_normal((batch, bc.channels, h, h)))
    fp = p / "fasa"
    return lambda: bidirectional_interaction_fuse(q_local, x_global, bc.fasa, fp)


@contextlib.contextmanager
def thread_limit(threads: int | None):
    """Pin BLAS/OpenMP pools to ``threads`` workers (``None`` leaves them alone)."""
    if threads is None:
        yield
        return
    if threads < 1:
        raise ValueError("threads must be >= 1")
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=threads):
        yield


def _check_counts(batch: int, iters: int, warmup: int) -> None:
    if batch < 1:
        raise ValueError("batch must be >= 1")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    if warmup < 0:
        raise ValueError("warmup must be >= 0")


def compare(preset: str | FatConfig, variants: Sequence[str], batch: int = 1, iters: int = 30,
            warmup: int = 3, resolution: int = 224, scope: str = "model", seed: int = 0,
            threads: int | None = 1) -> list[BenchResult]:
    """Time several variants, interleaved round-robin, one result per variant."""
    _check_counts(batch, iters, warmup)
    name = preset if isinstance(preset, str) else preset.name
    runs = [_workload(variant_config(preset, v), scope, batch, resolution, seed) for v in variants]
    times: list[list[float]] = [[] for _ in runs]
    with thread_limit(threads):
        for _ in range(warmup):
            for run in runs:
                run()
        for _ in range(iters):
            for i, run in enumerate(runs):
                t0 = time.perf_counter()
                run()
                times[i].append(time.perf_counter() - t0)
    return [BenchResult(name.upper() if isinstance(preset, str) else name, v, scope, batch, resolution, tuple(t))
            for v, t in zip(variants, times)]


def bench(preset: str | FatConfig, variant: str = "default", **kwargs) -> BenchResult:
    return compare(preset, [variant], **kwargs)[0]


def results_table(results: Sequence[BenchResult], as_csv: bool = False) -> str:
    rows = [r.row() for r in results]
    return format_csv(CSV_HEADER, rows) if as_csv else format_table(CSV_HEADER, rows)
