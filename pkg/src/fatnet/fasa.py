"""Fully adaptive self-attention block.

The block splits into three parts that share one query projection:

* global adaptive aggregation: queries at full resolution attend over keys
  and values reduced by a chain of stride-2 depthwise units;
* local adaptive aggregation: a depthwise convolution of the same queries;
* bidirectional interaction: ``proj(SiLU(local) * SiLU(global))``, the
  cross-gated product with its high-order sigmoid dropped.

Ablation variants for the fusion and the key/value reduction are selected
through :class:`FasaConfig`.
"""
from __future__ import annotations

from dataclasses import dataclass

from .accounting import LayerSpec
from .layers import avg_pool2d, batchnorm_inference, conv2d, linear, mhsa_pooled
from .params import Params
from .tensor import ShapeError, Tensor, add, concat, mul, sigmoid, silu, slice_axis

FUSIONS = ("interaction", "add-linear", "cat-linear", "mul-linear")
DOWNSAMPLES = ("refined", "pool-down", "conv-no-overlap", "conv-overlap")

BN_EPS = 1e-5
UNIT_KERNEL = 5
FINAL_KERNEL = 3


@dataclass(frozen=True)
class FasaConfig:
    channels: int
    heads: int
    local_kernel: int = 3
    pool_units: int = 0
    fusion: str = "interaction"
    downsample: str = "refined"
    extra_sigmoid: bool = False
    # project K/V from the pooled map (True) or pool the projected K and V (False)
    kv_from_pooled: bool = True

    def __post_init__(self):
        if self.channels < 1 or self.heads < 1 or self.channels % self.heads:
            raise ValueError(f"channels={self.channels} must be a positive multiple of heads={self.heads}")
        if self.local_kernel < 1 or self.local_kernel % 2 == 0:
            raise ValueError(f"local kernel must be odd, got {self.local_kernel}")
        if self.pool_units < 0:
            raise ValueError("pool_units must be >= 0")
        if self.fusion not in FUSIONS:
            raise ValueError(f"unknown fusion {self.fusion!r}; expected one of {FUSIONS}")
        if self.downsample not in DOWNSAMPLES:
            raise ValueError(f"unknown downsample {self.downsample!r}; expected one of {DOWNSAMPLES}")
        if self.extra_sigmoid and self.fusion != "interaction":
            raise ValueError("extra_sigmoid only applies to the interaction fusion")

    @property
    def reduction(self) -> int:
        return 2**self.pool_units

    @property
    def head_dim(self) -> int:
        return self.channels // self.heads


def _single_conv_geometry(cfg: FasaConfig) -> tuple[int, int, int]:
    """(kernel, stride, padding) of the one-shot conv downsample variants."""
    r = cfg.reduction
    if cfg.downsample == "conv-no-overlap":
        return r, r, 0
    if r == 1:
        # an even kernel cannot preserve extent; fall back to the smallest odd overlap
        return 3, 1, 1
    return r + 1, r, r // 2


# --------------------------------------------------------------------------
# forward
# --------------------------------------------------------------------------

def _dw_bn(x: Tensor, p: Params, kernel_stride_pad: tuple[int, int, int]) -> Tensor:
    k, s, pad = kernel_stride_pad
    y = conv2d(x, p["dw.weight"], None, stride=s, padding=pad, groups=x.shape[1])
    return batchnorm_inference(y, p["bn.gamma"], p["bn.beta"], p["bn.mean"], p["bn.var"], BN_EPS)


def fine_grained_pool(x: Tensor, cfg: FasaConfig, p: Params) -> Tensor:
    """Reduce the spatial extent by ``2**pool_units``; channels unchanged."""
    r = cfg.reduction
    h, w = x.shape[2:]
    if h % r or w % r:
        raise ValueError(f"extent {h}x{w} not divisible by reduction {r} ({cfg.pool_units} pool units)")
    if cfg.downsample == "refined":
        for u in range(cfg.pool_units):
            unit = p / f"units.{u}"
            x = _dw_bn(x, unit, (UNIT_KERNEL, 2, UNIT_KERNEL // 2))
            x = conv2d(x, unit["pw.weight"], unit["pw.bias"])
        return _dw_bn(x, p, (FINAL_KERNEL, 1, FINAL_KERNEL // 2))
    if cfg.downsample == "pool-down":
        return avg_pool2d(x, r) if r > 1 else x
    return _dw_bn(x, p, _single_conv_geometry(cfg))


def global_adaptive_aggregation(x: Tensor, cfg: FasaConfig, p: Params) -> tuple[Tensor, Tensor]:
    """Return the query map and the attention output, both shaped like ``x``."""
    c = cfg.channels
    if x.shape[1] != c:
        raise ShapeError(f"expected {c} channels, got {x.shape[1]}")
    q = linear(x, p["q.weight"], p["q.bias"])
    if cfg.kv_from_pooled:
        kv = linear(fine_grained_pool(x, cfg, p / "pool"), p["kv.weight"], p["kv.bias"])
        k, v = slice_axis(kv, 1, 0, c), slice_axis(kv, 1, c, 2 * c)
    else:
        kv = linear(x, p["kv.weight"], p["kv.bias"])
        k = fine_grained_pool(slice_axis(kv, 1, 0, c), cfg, p / "pool_k")
        v = fine_grained_pool(slice_axis(kv, 1, c, 2 * c), cfg, p / "pool_v")
    return q, mhsa_pooled(q, k, v, cfg.heads)


def local_adaptive_aggregation(q: Tensor, cfg: FasaConfig, p: Params) -> Tensor:
    # the SiLU self-modulation is applied in the fusion step
    k = cfg.local_kernel
    return conv2d(q, p["local.weight"], p["local.bias"], stride=1, padding=k // 2, groups=cfg.channels)


def bidirectional_interaction_fuse(
    q_local: Tensor, x_global: Tensor, cfg: FasaConfig, p: Params, fusion: str | None = None
) -> Tensor:
    fusion = fusion or cfg.fusion
    if q_local.shape != x_global.shape:
        raise ShapeError(f"local {q_local.shape} and global {x_global.shape} branches differ in shape")
    local = silu(q_local)
    if fusion == "interaction":
        mixed = mul(local, silu(x_global))
        if cfg.extra_sigmoid:
            mixed = mul(mixed, sigmoid(local))
    elif fusion == "add-linear":
        mixed = add(local, x_global)
    elif fusion == "mul-linear":
        mixed = mul(local, x_global)
    elif fusion == "cat-linear":
        mixed = concat([local, x_global], axis=1)
    else:
        raise ValueError(f"unknown fusion {fusion!r}")
    return linear(mixed, p["proj.weight"], p["proj.bias"])


def fasa_forward(x: Tensor, cfg: FasaConfig, p: Params, taps: dict | None = None) -> Tensor:
    """Full block on layer-normalized tokens; output shape equals input shape.

    When ``taps`` is a dict it receives the intermediate maps ``q``,
    ``q_local`` (depthwise output), ``local`` (its SiLU), ``global`` and
    ``fused``.
    """
    q, x_global = global_adaptive_aggregation(x, cfg, p)
    q_local = local_adaptive_aggregation(q, cfg, p)
    y = bidirectional_interaction_fuse(q_local, x_global, cfg, p)
    if taps is not None:
        taps.update(q=q, q_local=q_local, local=silu(q_local), **{"global": x_global}, fused=y)
    return y


# --------------------------------------------------------------------------
# layer specs
# --------------------------------------------------------------------------

def _pool_specs(cfg: FasaConfig, prefix: str, c: int, h: int, w: int) -> list[LayerSpec]:
    specs = []

    def dw_bn(name, k, s, pad, h, w):
        ho, wo = (h + 2 * pad - k) // s + 1, (w + 2 * pad - k) // s + 1
        specs.append(LayerSpec(f"{name}.dw", "dwconv", (c, h, w), (c, ho, wo), kernel=k, stride=s, groups=c))
        specs.append(LayerSpec(f"{name}.bn", "norm", (c, ho, wo), (c, ho, wo), norm="batch"))
        return ho, wo

    if cfg.downsample == "refined":
        for u in range(cfg.pool_units):
            unit = f"{prefix}.units.{u}"
            h, w = dw_bn(unit, UNIT_KERNEL, 2, UNIT_KERNEL // 2, h, w)
            specs.append(LayerSpec(f"{unit}.pw", "conv", (c, h, w), (c, h, w), bias=True))
        dw_bn(prefix, FINAL_KERNEL, 1, FINAL_KERNEL // 2, h, w)
    elif cfg.downsample == "pool-down":
        r = cfg.reduction
        specs.append(LayerSpec(f"{prefix}.avg", "elementwise", (c, h, w), (c, h // r, w // r), kernel=r, stride=r))
    else:
        dw_bn(prefix, *_single_conv_geometry(cfg), h, w)
    return specs


def fasa_specs(cfg: FasaConfig, prefix: str, h: int, w: int) -> list[LayerSpec]:
    c = cfg.channels
    r = cfg.reduction
    hk, wk = h // r, w // r
    fmap = (c, h, w)
    specs = [LayerSpec(f"{prefix}.q", "linear", fmap, fmap, bias=True)]
    if cfg.kv_from_pooled:
        specs += _pool_specs(cfg, f"{prefix}.pool", c, h, w)
        specs.append(LayerSpec(f"{prefix}.kv", "linear", (c, hk, wk), (2 * c, hk, wk), bias=True))
    else:
        specs.append(LayerSpec(f"{prefix}.kv", "linear", fmap, (2 * c, h, w), bias=True))
        specs += _pool_specs(cfg, f"{prefix}.pool_k", c, h, w)
        specs += _pool_specs(cfg, f"{prefix}.pool_v", c, h, w)
    specs.append(LayerSpec(f"{prefix}.attn", "attention", fmap, fmap, heads=cfg.heads, kv_tokens=hk * wk))
    k = cfg.local_kernel
    specs.append(LayerSpec(f"{prefix}.local", "dwconv", fmap, fmap, kernel=k, groups=c, bias=True))
    cin = 2 * c if cfg.fusion == "cat-linear" else c
    specs.append(LayerSpec(f"{prefix}.proj", "linear", (cin, h, w), fmap, bias=True))
    return specs
