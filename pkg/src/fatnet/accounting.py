"""Exact parameter and FLOP accounting over a model's layer list.

Conventions:

* one FLOP is one multiply-accumulate (MAC);
* conv: ``H'·W'·C_out·(C_in/groups)·k²``; linear over ``T`` tokens:
  ``T·C_in·C_out``; attention: ``T_q·T_kv·d`` per head for ``Q K^T`` and the
  same again for ``attn · V``;
* norms, activations, residual adds, softmax and biases cost nothing;
* batch-norm running statistics are not learned and are not counted.

A "model" here is anything with ``layer_specs(resolution) -> list[LayerSpec]``
(:class:`fatnet.model.FatConfig`, :class:`fatnet.model.FatModel`, or a
:class:`Submodel`).
"""
from __future__ import annotations

import csv
import io
import math
from collections.abc import Callable, Iterable
from dataclasses import dataclass, field
from typing import Protocol

KINDS = ("conv", "dwconv", "linear", "norm", "attention", "elementwise")


@dataclass(frozen=True)
class LayerSpec:
    """One layer of a built model, as seen by the accountant.

    Shapes are per-sample: ``(C, H, W)`` for feature maps, ``(C,)`` for
    pooled vectors. ``name`` is the parameter prefix in the weight store.
    """

    name: str
    kind: str
    in_shape: tuple[int, ...]
    out_shape: tuple[int, ...]
    kernel: int = 1
    stride: int = 1
    groups: int = 1
    bias: bool = False
    norm: str = ""
    heads: int = 1
    kv_tokens: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == "norm" and self.norm not in ("batch", "layer"):
            raise ValueError(f"norm layer {self.name} needs norm='batch' or 'layer'")

    @property
    def in_channels(self) -> int:
        return self.in_shape[0]

    @property
    def out_channels(self) -> int:
        return self.out_shape[0]

    def param_entries(self) -> list[tuple[str, tuple[int, ...], bool]]:
        """``(suffix, shape, learned)`` for every tensor this layer owns."""
        cin, cout = self.in_channels, self.out_channels
        if self.kind in ("conv", "dwconv"):
            entries = [("weight", (cout, cin // self.groups, self.kernel, self.kernel), True)]
            if self.bias:
                entries.append(("bias", (cout,), True))
            return entries
        if self.kind == "linear":
            entries = [("weight", (cout, cin), True)]
            if self.bias:
                entries.append(("bias", (cout,), True))
            return entries
        if self.kind == "norm":
            entries = [("gamma", (cout,), True), ("beta", (cout,), True)]
            if self.norm == "batch":
                entries += [("mean", (cout,), False), ("var", (cout,), False)]
            return entries
        return []

    @property
    def params(self) -> int:
        return sum(math.prod(shape) for _, shape, learned in self.param_entries() if learned)

    @property
    def flops(self) -> int:
        if self.kind in ("conv", "dwconv"):
            _, ho, wo = self.out_shape
            return ho * wo * self.out_channels * (self.in_channels // self.groups) * self.kernel**2
        if self.kind == "linear":
            tokens = math.prod(self.in_shape[1:]) if len(self.in_shape) > 1 else 1
            return tokens * self.in_channels * self.out_channels
        if self.kind == "attention":
            tq = math.prod(self.in_shape[1:])
            return 2 * tq * self.kv_tokens * self.in_channels
        return 0


class HasLayers(Protocol):
    def layer_specs(self, resolution: int) -> list[LayerSpec]: ...


@dataclass(frozen=True)
class Submodel:
    """A named slice of a model, e.g. its convolution-only layers."""

    name: str
    builder: Callable[[int], list[LayerSpec]]

    def layer_specs(self, resolution: int) -> list[LayerSpec]:
        return self.builder(resolution)


DEFAULT_RESOLUTION = 224


def count_params(model: HasLayers) -> int:
    # parameter shapes do not depend on the input size; any valid size works
    return sum(s.params for s in model.layer_specs(DEFAULT_RESOLUTION))


def count_flops(model: HasLayers, resolution: int = DEFAULT_RESOLUTION) -> int:
    if resolution < 1:
        raise ValueError("resolution must be positive")
    return sum(s.flops for s in model.layer_specs(resolution))


def layer_group(name: str) -> str:
    """Coarse grouping used in budget reports.

    ``stages.2.blocks.4.fasa.pool.units.0.dw`` -> ``stage3.fasa``;
    ``stem.conv1`` -> ``stem``; ``head.fc`` -> ``head``.
    """
    parts = name.split(".")
    if parts[0] == "stages" and len(parts) >= 5:
        return f"stage{int(parts[1]) + 1}.{parts[4]}"
    return parts[0]


@dataclass(frozen=True)
class Budget:
    params: int
    flops: int
    resolution: int
    groups: dict[str, tuple[int, int]] = field(default_factory=dict)


def budget(model: HasLayers, resolution: int = DEFAULT_RESOLUTION) -> Budget:
    specs = model.layer_specs(resolution)
    groups: dict[str, tuple[int, int]] = {}
    for s in specs:
        g = layer_group(s.name)
        p, f = groups.get(g, (0, 0))
        groups[g] = (p + s.params, f + s.flops)
    return Budget(
        params=sum(s.params for s in specs),
        flops=sum(s.flops for s in specs),
        resolution=resolution,
        groups=groups,
    )


@dataclass(frozen=True)
class DeltaRow:
    group: str
    params_a: int
    params_b: int
    flops_a: int
    flops_b: int

    @property
    def d_params(self) -> int:
        return self.params_b - self.params_a

    @property
    def d_flops(self) -> int:
        return self.flops_b - self.flops_a

    @property
    def rel_params(self) -> float:
        return self.d_params / self.params_a if self.params_a else (0.0 if not self.d_params else math.inf)

    @property
    def rel_flops(self) -> float:
        return self.d_flops / self.flops_a if self.flops_a else (0.0 if not self.d_flops else math.inf)


@dataclass(frozen=True)
class BudgetDiff:
    rows: list[DeltaRow]
    total: DeltaRow

    def is_zero(self) -> bool:
        return self.total.d_params == 0 and self.total.d_flops == 0 and all(
            r.d_params == 0 and r.d_flops == 0 for r in self.rows
        )

    def format_text(self) -> str:
        header = ("group", "params_a", "params_b", "d_params", "rel", "flops_a", "flops_b", "d_flops", "rel")
        body = [
            (r.group, r.params_a, r.params_b, f"{r.d_params:+d}", f"{r.rel_params:+.2%}",
             r.flops_a, r.flops_b, f"{r.d_flops:+d}", f"{r.rel_flops:+.2%}")
            for r in [*self.rows, self.total]
        ]
        return format_table(header, body)


def diff_budgets(a: Budget, b: Budget) -> BudgetDiff:
    names = list(a.groups) + [g for g in b.groups if g not in a.groups]
    rows = []
    for g in names:
        pa, fa = a.groups.get(g, (0, 0))
        pb, fb = b.groups.get(g, (0, 0))
        if (pa, fa) != (pb, fb):
            rows.append(DeltaRow(g, pa, pb, fa, fb))
    return BudgetDiff(rows, DeltaRow("total", a.params, b.params, a.flops, b.flops))


# --------------------------------------------------------------------------
# tables
# --------------------------------------------------------------------------

def format_table(header: Iterable[str], rows: Iterable[Iterable[object]]) -> str:
    header = [str(h) for h in header]
    rows = [[str(c) for c in r] for r in rows]
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h) for i, h in enumerate(header)]

    def line(cells):
        return "  ".join(
            c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(cells, widths))
        ).rstrip()

    out = [line(header), line(["-" * w for w in widths])]
    out += [line(r) for r in rows]
    return "\n".join(out)


def format_csv(header: Iterable[str], rows: Iterable[Iterable[object]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(header))
    w.writerows(rows)
    return buf.getvalue()


LAYER_HEADER = ("layer", "kind", "params", "flops")


def layer_rows(specs: Iterable[LayerSpec]) -> list[tuple[str, str, int, int]]:
    return [(s.name, s.kind, s.params, s.flops) for s in specs]


def layer_table(specs: list[LayerSpec], as_csv: bool = False) -> str:
    rows = layer_rows(specs)
    if as_csv:
        return format_csv(LAYER_HEADER, rows)
    total = ("TOTAL", "", sum(r[2] for r in rows), sum(r[3] for r in rows))
    return format_table(LAYER_HEADER, [*rows, total])
