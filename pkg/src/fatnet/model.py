"""FAT backbone: convolution stem, four stages of FAT blocks, linear head."""
from __future__ import annotations

from collections.abc import Iterator, Mapping
from dataclasses import asdict, dataclass, replace

from .accounting import LayerSpec, Submodel
from .fasa import BN_EPS, FasaConfig, fasa_forward, fasa_specs
from .layers import batchnorm_inference, conv2d, global_avg_pool, layernorm, linear
from .params import Params
from .tensor import Tensor, add, gelu, relu

SHORTCUT_KERNEL = 3
MIN_DIVISOR = 32


@dataclass(frozen=True)
class BlockConfig:
    stage: int  # 0-based
    index: int  # 0-based within the stage
    channels: int
    out_channels: int
    cpe_kernel: int
    fasa: FasaConfig
    ffn_ratio: int
    ffn_kernel: int
    downsample: bool
    cpe: bool

    @property
    def prefix(self) -> str:
        return f"stages.{self.stage}.blocks.{self.index}"

    @property
    def hidden(self) -> int:
        return self.channels * self.ffn_ratio


@dataclass(frozen=True)
class FatConfig:
    name: str = "custom"
    stem_channels: tuple[int, int] = (16, 32)
    blocks: tuple[int, ...] = (2, 2, 6, 2)
    channels: tuple[int, ...] = (32, 80, 160, 256)
    heads: tuple[int, ...] = (2, 5, 10, 16)
    fasa_kernels: tuple[int, ...] = (3, 5, 7, 9)
    cpe_kernels: tuple[int, ...] = (3, 5, 7, 9)
    pool_units: tuple[int, ...] = (3, 2, 1, 0)
    ffn_ratio: int = 4
    ffn_kernel: int = 5
    num_classes: int = 1000
    cpe: bool = True
    fusion: str = "interaction"
    downsample: str = "refined"
    extra_sigmoid: bool = False
    kv_from_pooled: bool = True

    def __post_init__(self):
        for f in ("stem_channels", "blocks", "channels", "heads", "fasa_kernels", "cpe_kernels", "pool_units"):
            object.__setattr__(self, f, tuple(int(v) for v in getattr(self, f)))
        per_stage = ("blocks", "channels", "heads", "fasa_kernels", "cpe_kernels", "pool_units")
        if any(len(getattr(self, f)) != 4 for f in per_stage):
            raise ValueError("FAT has exactly four stages; every per-stage field needs four values")
        if len(self.stem_channels) != 2:
            raise ValueError("stem_channels is (first conv width, stem output width)")
        if self.stem_channels[1] != self.channels[0]:
            raise ValueError(f"stem output width {self.stem_channels[1]} must equal stage-1 width {self.channels[0]}")
        if min(self.blocks) < 1:
            raise ValueError("every stage needs at least one block")
        if any(k % 2 == 0 for k in self.cpe_kernels) or self.ffn_kernel % 2 == 0:
            raise ValueError("CPE and ConvFFN kernels must be odd")
        if self.num_classes < 1 or self.ffn_ratio < 1:
            raise ValueError("num_classes and ffn_ratio must be positive")
        for i in range(4):
            self.fasa_config(i)  # validates heads/kernels/variants

    def replace(self, **changes) -> FatConfig:
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return asdict(self)

    def fasa_config(self, stage: int) -> FasaConfig:
        return FasaConfig(
            channels=self.channels[stage],
            heads=self.heads[stage],
            local_kernel=self.fasa_kernels[stage],
            pool_units=self.pool_units[stage],
            fusion=self.fusion,
            downsample=self.downsample,
            extra_sigmoid=self.extra_sigmoid,
            kv_from_pooled=self.kv_from_pooled,
        )

    def block_configs(self) -> Iterator[BlockConfig]:
        for s in range(4):
            fasa = self.fasa_config(s)
            for b in range(self.blocks[s]):
                # the last block of stages 1-3 carries the stride-2 transition
                boundary = s < 3 and b == self.blocks[s] - 1
                yield BlockConfig(
                    stage=s,
                    index=b,
                    channels=self.channels[s],
                    out_channels=self.channels[s + 1] if boundary else self.channels[s],
                    cpe_kernel=self.cpe_kernels[s],
                    fasa=fasa,
                    ffn_ratio=self.ffn_ratio,
                    ffn_kernel=self.ffn_kernel,
                    downsample=boundary,
                    cpe=self.cpe,
                )

    def check_resolution(self, height: int, width: int | None = None) -> None:
        width = height if width is None else width
        if height % MIN_DIVISOR or width % MIN_DIVISOR or height < MIN_DIVISOR or width < MIN_DIVISOR:
            raise ValueError(f"input {height}x{width} must be a positive multiple of {MIN_DIVISOR}")

    def layer_specs(self, resolution: int = 224) -> list[LayerSpec]:
        self.check_resolution(resolution)
        specs = stem_specs(self, resolution)
        h = w = resolution // 4
        for bc in self.block_configs():
            specs += block_specs(bc, h, w)
            if bc.downsample:
                h, w = h // 2, w // 2
        return specs + head_specs(self)

    def stage_shapes(self, resolution: int) -> list[tuple[int, int, int]]:
        self.check_resolution(resolution)
        return [(self.channels[s], resolution >> (s + 2), resolution >> (s + 2)) for s in range(4)]


PRESETS: dict[str, FatConfig] = {
    "B0": FatConfig(name="B0"),
    "B1": FatConfig(
        name="B1", stem_channels=(24, 48), channels=(48, 96, 192, 384), heads=(3, 6, 12, 24)
    ),
    "B2": FatConfig(
        name="B2", stem_channels=(32, 64), channels=(64, 128, 256, 512), heads=(2, 4, 8, 16)
    ),
    "B3": FatConfig(
        name="B3", stem_channels=(32, 64), blocks=(4, 4, 16, 4),
        channels=(64, 128, 256, 512), heads=(2, 4, 8, 16),
    ),
    "B3-ST": FatConfig(
        name="B3-ST", stem_channels=(48, 96), blocks=(2, 2, 6, 2),
        channels=(96, 192, 384, 768), heads=(3, 6, 12, 24),
    ),
}


def build_preset(name: str, **overrides) -> FatConfig:
    key = name.upper()
    if key not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; valid presets: {', '.join(PRESETS)}")
    cfg = PRESETS[key]
    return cfg.replace(**overrides) if overrides else cfg


# --------------------------------------------------------------------------
# layer specs
# --------------------------------------------------------------------------

def _conv_out(n: int, k: int, s: int) -> int:
    return (n + 2 * (k // 2) - k) // s + 1


def stem_specs(cfg: FatConfig, resolution: int) -> list[LayerSpec]:
    c1, c2 = cfg.stem_channels
    plan = [(3, c1, 2), (c1, c2, 2), (c2, c2, 1), (c2, c2, 1)]
    specs = []
    h = resolution
    for i, (cin, cout, s) in enumerate(plan, start=1):
        ho = _conv_out(h, 3, s)
        specs.append(LayerSpec(f"stem.conv{i}", "conv", (cin, h, h), (cout, ho, ho), kernel=3, stride=s))
        specs.append(LayerSpec(f"stem.bn{i}", "norm", (cout, ho, ho), (cout, ho, ho), norm="batch"))
        h = ho
    specs.append(LayerSpec("stem.conv5", "conv", (c2, h, h), (c2, h, h), bias=True))
    specs.append(LayerSpec("stem.norm", "norm", (c2, h, h), (c2, h, h), norm="layer"))
    return specs


def block_specs(bc: BlockConfig, h: int, w: int) -> list[LayerSpec]:
    c, p = bc.channels, bc.prefix
    fmap = (c, h, w)
    specs = []
    if bc.cpe:
        specs.append(LayerSpec(f"{p}.cpe", "dwconv", fmap, fmap, kernel=bc.cpe_kernel, groups=c, bias=True))
    specs.append(LayerSpec(f"{p}.norm1", "norm", fmap, fmap, norm="layer"))
    specs += fasa_specs(bc.fasa, f"{p}.fasa", h, w)
    specs.append(LayerSpec(f"{p}.norm2", "norm", fmap, fmap, norm="layer"))
    s = 2 if bc.downsample else 1
    ho, wo = _conv_out(h, bc.ffn_kernel, s), _conv_out(w, bc.ffn_kernel, s)
    hid = bc.hidden
    specs += [
        LayerSpec(f"{p}.ffn.fc1", "conv", fmap, (hid, h, w), bias=True),
        LayerSpec(f"{p}.ffn.dw", "dwconv", (hid, h, w), (hid, ho, wo), kernel=bc.ffn_kernel, stride=s, groups=hid, bias=True),
        LayerSpec(f"{p}.ffn.fc2", "conv", (hid, ho, wo), (bc.out_channels, ho, wo), bias=True),
    ]
    if bc.downsample:
        hs, ws = _conv_out(h, SHORTCUT_KERNEL, 2), _conv_out(w, SHORTCUT_KERNEL, 2)
        specs += [
            LayerSpec(f"{p}.shortcut.dw", "dwconv", fmap, (c, hs, ws), kernel=SHORTCUT_KERNEL, stride=2, groups=c, bias=True),
            LayerSpec(f"{p}.shortcut.pw", "conv", (c, hs, ws), (bc.out_channels, hs, ws), bias=True),
        ]
    return specs


def head_specs(cfg: FatConfig) -> list[LayerSpec]:
    c = cfg.channels[3]
    return [
        LayerSpec("head.norm", "norm", (c,), (c,), norm="layer"),
        LayerSpec("head.fc", "linear", (c,), (cfg.num_classes,), bias=True),
    ]


def conv_submodel(cfg: FatConfig) -> Submodel:
    """Stem plus the convolution layers of an in-stage stage-1 block.

    Every layer here is a convolution whose output extent scales linearly
    with the input, so FLOPs scale exactly quadratically.
    """
    def build(resolution: int) -> list[LayerSpec]:
        if resolution % 4:
            raise ValueError("resolution must be divisible by 4")
        bc = next(cfg.block_configs())
        bc = replace(bc, downsample=False, out_channels=bc.channels)
        h = resolution // 4
        specs = stem_specs(cfg, resolution) + block_specs(bc, h, h)
        return [s for s in specs if s.kind in ("conv", "dwconv") and ".fasa." not in s.name]

    return Submodel(f"{cfg.name}-conv", build)


def param_entries(cfg: FatConfig) -> list[tuple[str, tuple[int, ...], bool]]:
    """Full parameter names, shapes and learned flags, in store order."""
    return [
        (f"{s.name}.{suffix}", shape, learned)
        for s in cfg.layer_specs(MIN_DIVISOR * 7)
        for suffix, shape, learned in s.param_entries()
    ]


def check_weights(cfg: FatConfig, tensors: Mapping[str, Tensor]) -> None:
    """Raise ``ValueError`` naming the first layer whose weights do not fit."""
    expected = param_entries(cfg)
    names = set()
    for name, shape, _ in expected:
        names.add(name)
        t = tensors.get(name)
        if t is None:
            raise ValueError(f"weights do not match config {cfg.name!r}: missing {name} (shape {shape})")
        if tuple(t.shape) != shape:
            raise ValueError(
                f"weights do not match config {cfg.name!r}: {name} has shape {tuple(t.shape)}, expected {shape}"
            )
    for name in tensors:
        if name not in names:
            raise ValueError(f"weights do not match config {cfg.name!r}: unexpected entry {name}")


# --------------------------------------------------------------------------
# forward
# --------------------------------------------------------------------------

def _bn(x: Tensor, p: Params) -> Tensor:
    return batchnorm_inference(x, p["gamma"], p["beta"], p["mean"], p["var"], BN_EPS)


def _ln(x: Tensor, p: Params) -> Tensor:
    return layernorm(x, p["gamma"], p["beta"])


def stem_forward(img: Tensor, p: Params) -> Tensor:
    """Four 3x3 conv+BN+ReLU (strides 2,2,1,1), a 1x1 conv, then layer norm."""
    if img.ndim != 4 or img.shape[1] != 3:
        raise ValueError(f"expected an [N, 3, H, W] image, got {img.shape}")
    h, w = img.shape[2:]
    if h % 4 or w % 4:
        raise ValueError(f"stem needs extents divisible by 4, got {h}x{w}")
    x = img
    for i, s in enumerate((2, 2, 1, 1), start=1):
        x = conv2d(x, p[f"conv{i}.weight"], None, stride=s, padding=1)
        x = relu(_bn(x, p / f"bn{i}"))
    x = conv2d(x, p["conv5.weight"], p["conv5.bias"])
    return _ln(x, p / "norm")


def conv_ffn(x: Tensor, bc: BlockConfig, p: Params) -> Tensor:
    s = 2 if bc.downsample else 1
    k = bc.ffn_kernel
    x = gelu(conv2d(x, p["fc1.weight"], p["fc1.bias"]))
    x = conv2d(x, p["dw.weight"], p["dw.bias"], stride=s, padding=k // 2, groups=bc.hidden)
    return conv2d(x, p["fc2.weight"], p["fc2.bias"])


def shortcut(y: Tensor, bc: BlockConfig, p: Params) -> Tensor:
    if not bc.downsample:
        return y
    k = SHORTCUT_KERNEL
    y = conv2d(y, p["dw.weight"], p["dw.bias"], stride=2, padding=k // 2, groups=bc.channels)
    return conv2d(y, p["pw.weight"], p["pw.bias"])


def fat_block_forward(x: Tensor, p: Params, bc: BlockConfig, taps: dict | None = None,
                      features: list | None = None) -> Tensor:
    """CPE residual, FASA residual, then ConvFFN plus (possibly strided) shortcut.

    If ``features`` is a list it receives ``Y``, the post-attention feature
    at the block's input resolution.
    """
    if bc.cpe:
        k = bc.cpe_kernel
        x = add(conv2d(x, p["cpe.weight"], p["cpe.bias"], padding=k // 2, groups=bc.channels), x)
    y = add(fasa_forward(_ln(x, p / "norm1"), bc.fasa, p / "fasa", taps), x)
    if features is not None:
        features.append(y)
    return add(conv_ffn(_ln(y, p / "norm2"), bc, p / "ffn"), shortcut(y, bc, p / "shortcut"))


class FatModel:
    """A configuration bound to a set of weights.

    ``weights`` may be a :class:`fatnet.modelio.WeightStore` or any mapping
    from parameter name to :class:`Tensor` (float32 or float64).
    """

    def __init__(self, config: FatConfig, weights):
        tensors = weights.tensors() if hasattr(weights, "tensors") else dict(weights)
        check_weights(config, tensors)
        self.config = config
        self.tensors: dict[str, Tensor] = tensors

    def params(self, used: set[str] | None = None) -> Params:
        return Params(self.tensors, "", used)

    def layer_specs(self, resolution: int = 224) -> list[LayerSpec]:
        return self.config.layer_specs(resolution)

    def forward(self, img: Tensor) -> Tensor:
        return fat_forward(img, self)

    __call__ = forward


def _run_blocks(img: Tensor, model: FatModel, p: Params, stage_outputs: list | None = None,
                capture: tuple[int, int] | None = None, taps: dict | None = None) -> Tensor:
    cfg = model.config
    cfg.check_resolution(*img.shape[2:])
    x = stem_forward(img, p / "stem")
    for bc in cfg.block_configs():
        hit = capture is not None and capture == (bc.stage + 1, bc.index + 1)
        last = stage_outputs is not None and bc.index == cfg.blocks[bc.stage] - 1
        feats = [] if last and bc.downsample else None
        x = fat_block_forward(x, p / bc.prefix, bc, taps if hit else None, feats)
        if hit:
            return x
        if last:
            stage_outputs.append(feats[0] if feats else x)
    return x


def fat_forward(img: Tensor, model: FatModel, stage_outputs: list | None = None,
                used: set[str] | None = None) -> Tensor:
    """Image ``[N, 3, H, W]`` to logits ``[N, classes]``.

    If ``stage_outputs`` is a list, it receives one feature map per stage
    at that stage's resolution and width. Stages 1-3 end in a stride-2
    transition block, so their entry is the block's pre-FFN ``Y``.
    """
    p = model.params(used)
    x = _run_blocks(img, model, p, stage_outputs)
    x = _ln(global_avg_pool(x), p / "head.norm")
    return linear(x, p["head.fc.weight"], p["head.fc.bias"])


def capture_fasa(model: FatModel, img: Tensor, stage: int, block: int) -> dict:
    """Run the network up to ``(stage, block)`` (1-based) and return its FASA taps.

    The returned dict also holds ``params`` (the block's FASA parameter view)
    and ``config`` (its :class:`FasaConfig`).
    """
    cfg = model.config
    if not 1 <= stage <= 4:
        raise ValueError(f"stage must be in 1..4, got {stage}")
    if not 1 <= block <= cfg.blocks[stage - 1]:
        raise ValueError(f"stage {stage} has blocks 1..{cfg.blocks[stage - 1]}, got {block}")
    taps: dict = {}
    p = model.params()
    _run_blocks(img, model, p, capture=(stage, block), taps=taps)
    taps["params"] = p / f"stages.{stage - 1}.blocks.{block - 1}.fasa"
    taps["config"] = cfg.fasa_config(stage - 1)
    return taps
