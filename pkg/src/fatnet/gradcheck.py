"""Finite-difference verification of the tape's adjoints.

Everything runs in float64. The scalar under test is a fixed random
projection of the output, ``L = sum(r * f(x))``, so no output element can
hide behind a symmetric reduction. Each scalar of every checked tensor is
perturbed by ``+-h`` and compared against the tape gradient with

    rel = |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)
"""
from __future__ import annotations

import contextlib
import math
from collections.abc import Callable, Mapping
from dataclasses import dataclass

import numpy as np

from . import tensor as _tensor
from .accounting import format_table
from .fasa import FasaConfig, fasa_forward, fasa_specs
from .model import FatConfig, FatModel, fat_forward, param_entries
from .params import Params
from .tensor import FLOAT64, Tape, Tensor, grad, mul, sum_all

STEP = 1e-4
TOLERANCE = 1e-4
FLOOR = 1e-8
MAX_PARAMS = 50_000
# finite differences are meaningless across a ReLU kink; inputs are redrawn
# until every ReLU argument is at least this far from zero
KINK_MARGIN = 1e-3
KINK_TRIES = 100
# scalars checked per tensor for model-sized problems
DEFAULT_SAMPLES = 48

INPUT = "<input>"


@dataclass(frozen=True)
class Problem:
    """A differentiable scalar function of named float64 tensors."""

    name: str
    tensors: dict[str, np.ndarray]
    fn: Callable[[Mapping[str, Tensor]], Tensor]
    num_params: int

    def loss(self, tensors: Mapping[str, Tensor]) -> Tensor:
        return self.fn(tensors)


@dataclass(frozen=True)
class GroupResult:
    name: str
    count: int
    max_rel: float
    worst_index: int

    def passed(self, tol: float) -> bool:
        return self.max_rel <= tol


@dataclass(frozen=True)
class Report:
    problem: str
    groups: list[GroupResult]
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(g.passed(self.tolerance) for g in self.groups)

    @property
    def max_rel(self) -> float:
        return max((g.max_rel for g in self.groups), default=0.0)

    def format_text(self) -> str:
        rows = [(g.name, g.count, f"{g.max_rel:.3e}", "ok" if g.passed(self.tolerance) else "FAIL")
                for g in self.groups]
        verdict = "PASS" if self.passed else "FAIL"
        return (format_table(("tensor", "checked", "max_rel_err", "status"), rows)
                + f"\n{verdict} {self.problem}: max relative error {self.max_rel:.3e} (tolerance {self.tolerance:g})")


def rel_error(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), FLOOR)


def _wrap(arrays: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: Tensor(v, dtype=FLOAT64) for k, v in arrays.items()}


def analytic_gradients(problem: Problem) -> dict[str, np.ndarray]:
    tensors = _wrap(problem.tensors)
    with Tape() as tape:
        out = problem.loss(tensors)
    return {k: g.numpy() for k, g in grad(tape, out, tensors).items()}


def numeric_gradient(problem: Problem, name: str, index: int, h: float = STEP) -> float:
    base = problem.tensors[name]
    vals = []
    for sign in (1.0, -1.0):
        arr = base.copy().reshape(-1)
        arr[index] += sign * h
        tensors = _wrap({**problem.tensors, name: arr.reshape(base.shape)})
        vals.append(problem.loss(tensors).item())
    return (vals[0] - vals[1]) / (2 * h)


def check(problem: Problem, tolerance: float = TOLERANCE, h: float = STEP,
          names: list[str] | None = None, max_per_tensor: int | None = None, seed: int = 0) -> Report:
    """Compare tape and central-difference gradients.

    With ``max_per_tensor`` only that many scalars per tensor are checked,
    chosen uniformly at random (always including the first and last).
    """
    analytic = analytic_gradients(problem)
    rng = np.random.default_rng(seed)
    groups = []
    for name in names or list(problem.tensors):
        a = analytic[name].reshape(-1)
        idx = np.arange(a.size)
        if max_per_tensor is not None and a.size > max_per_tensor:
            inner = rng.choice(np.arange(1, a.size - 1), size=max_per_tensor - 2, replace=False)
            idx = np.concatenate([[0], np.sort(inner), [a.size - 1]])
        n = np.array([numeric_gradient(problem, name, int(i), h) for i in idx])
        rel = rel_error(a[idx], n)
        worst = int(np.argmax(rel))
        groups.append(GroupResult(name, idx.size, float(rel[worst]), int(idx[worst])))
    return Report(problem.name, groups, tolerance)


def relu_margin(problem: Problem) -> float:
    """Smallest ``|z|`` over every ReLU argument at the base point."""
    with Tape() as tape:
        problem.loss(_wrap(problem.tensors))
    zs = [np.abs(rec.inputs[0].data).min() for rec in tape.records if rec.op == "relu"]
    return float(min(zs)) if zs else math.inf


@contextlib.contextmanager
def corrupt_adjoint(op: str, factor: float = 1.5):
    """Scale the recorded adjoint of ``op`` by ``factor`` (negative control)."""
    prev = _tensor._ADJOINT_FAULTS.get(op)
    _tensor._ADJOINT_FAULTS[op] = factor
    try:
        yield
    finally:
        if prev is None:
            del _tensor._ADJOINT_FAULTS[op]
        else:
            _tensor._ADJOINT_FAULTS[op] = prev


# --------------------------------------------------------------------------
# problems
# --------------------------------------------------------------------------

def jittered_params(entries, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Random, non-degenerate float64 parameters.

    Weights are fan-in scaled; norm parameters and biases are perturbed away
    from their neutral values so every adjoint term is exercised.
    """
    out = {}
    for name, shape, _ in entries:
        suffix = name.rsplit(".", 1)[1]
        if suffix == "weight":
            fan_in = math.prod(shape[1:])
            out[name] = rng.standard_normal(shape) / math.sqrt(fan_in)
        elif suffix == "gamma":
            out[name] = 1.0 + 0.2 * rng.standard_normal(shape)
        elif suffix == "var":
            out[name] = 0.5 + rng.random(shape)
        else:  # bias, beta, mean
            out[name] = 0.2 * rng.standard_normal(shape)
    return out


def _projection_loss(out: Tensor, r: np.ndarray) -> Tensor:
    return sum_all(mul(out, Tensor(r, dtype=FLOAT64)))


TINY = FasaConfig(channels=8, heads=2, local_kernel=3, pool_units=1)
TINY_INPUT = (1, 8, 8, 8)

MINI = FatConfig(
    name="mini",
    stem_channels=(4, 8),
    blocks=(1, 1, 1, 1),
    channels=(8, 12, 16, 24),
    heads=(2, 2, 2, 2),
    num_classes=10,
)
MINI_RESOLUTION = 32


def fasa_problem(cfg: FasaConfig = TINY, seed: int = 0, input_shape=TINY_INPUT) -> Problem:
    rng = np.random.default_rng(seed)
    n, c, h, w = input_shape
    if c != cfg.channels:
        raise ValueError(f"input has {c} channels, config has {cfg.channels}")
    specs = fasa_specs(cfg, "fasa", h, w)
    entries = [(f"{s.name}.{suf}", shape, learned) for s in specs for suf, shape, learned in s.param_entries()]
    tensors = jittered_params(entries, rng)
    num_params = sum(s.params for s in specs)
    tensors[INPUT] = rng.standard_normal(input_shape)
    r = rng.standard_normal(input_shape) / math.sqrt(math.prod(input_shape))

    def fn(t: Mapping[str, Tensor]) -> Tensor:
        return _projection_loss(fasa_forward(t[INPUT], cfg, Params(t) / "fasa"), r)

    return Problem(f"fasa-block C={cfg.channels} heads={cfg.heads} n={cfg.pool_units}", tensors, fn, num_params)


def model_problem(cfg: FatConfig = MINI, seed: int = 0, resolution: int = MINI_RESOLUTION,
                  batch: int = 1) -> Problem:
    from .accounting import count_params

    num_params = count_params(cfg)
    if num_params > MAX_PARAMS:
        raise ValueError(
            f"config {cfg.name!r} has {num_params:,} parameters; finite differences are limited to "
            f"{MAX_PARAMS:,}. Use --config tiny or mini, or shrink channels/blocks."
        )
    cfg.check_resolution(resolution)
    rng = np.random.default_rng(seed)
    tensors = jittered_params(param_entries(cfg), rng)
    shape = (batch, 3, resolution, resolution)
    r = rng.standard_normal((batch, cfg.num_classes)) / math.sqrt(batch * cfg.num_classes)

    def fn(t: Mapping[str, Tensor]) -> Tensor:
        params = {k: v for k, v in t.items() if k != INPUT}
        return _projection_loss(fat_forward(t[INPUT], FatModel(cfg, params)), r)

    for _ in range(KINK_TRIES):
        tensors[INPUT] = rng.standard_normal(shape)
        problem = Problem(f"{cfg.name} model {resolution}x{resolution}", tensors, fn, num_params)
        if relu_margin(problem) >= KINK_MARGIN:
            return problem
    raise RuntimeError(f"no kink-free input found in {KINK_TRIES} draws (seed {seed})")


def problem_for(name: str, seed: int = 0) -> Problem:
    from .model import build_preset

    if name == "tiny":
        return fasa_problem(seed=seed)
    if name == "mini":
        return model_problem(seed=seed)
    return model_problem(build_preset(name), seed=seed, resolution=MINI_RESOLUTION)
