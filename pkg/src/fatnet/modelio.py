"""Weight container, deterministic initialization, image and config input.

FATW file layout (all integers little-endian)::

    "FATW"            4 bytes magic
    version           u32, currently 1
    entry count       u64
    per entry:
      name length     u16
      name            UTF-8 bytes
      learned flag    u8 (0 = buffer such as BN running stats, 1 = learned)
      rank            u8
      extents         u32 x rank
      payload         float32 x prod(extents), little-endian

Random initialization uses xorshift64* (Vigna 2016)::

    x ^= x >> 12;  x ^= x << 25;  x ^= x >> 27
    out = x * 0x2545F4914F6CDD1D   (mod 2**64)

Each tensor draws from its own generator bank so that initialization does
not depend on tensor order. The bank holds :data:`LANES` generators whose
states are ``splitmix64`` outputs seeded with
``seed ^ fnv1a64(name)``, advanced ``lane + 1`` times. A draw round steps
every lane once; values are consumed lane-major within a round. Uniforms
in [0, 1) take the top 53 bits; normals use Box-Muller on consecutive
uniform pairs ``(u1, u2)`` as ``sqrt(-2 ln(1 - u1)) * cos(2 pi u2)``.
"""
from __future__ import annotations

import math
import re
import struct
from collections.abc import Iterator, Mapping
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import FLOAT32, Tensor

MAGIC = b"FATW"
VERSION = 1

MASK64 = (1 << 64) - 1
XORSHIFT_MULT = 0x2545F4914F6CDD1D
SPLITMIX_GAMMA = 0x9E3779B97F4A7C15
FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
LANES = 256

PROJECTION_STD = 0.02
TRUNC_BOUND = 2.0
# std of a standard normal truncated to [-2, 2]; divides it out so the
# truncated draws have standard deviation PROJECTION_STD
_TRUNC_STD = math.sqrt(
    1 - 2 * TRUNC_BOUND * math.exp(-TRUNC_BOUND**2 / 2) / math.sqrt(2 * math.pi) / math.erf(TRUNC_BOUND / math.sqrt(2))
)

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class FormatError(ValueError):
    """Malformed FATW file; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


# --------------------------------------------------------------------------
# weight store
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Entry:
    name: str
    learned: bool
    tensor: Tensor


class WeightStore:
    """Ordered, uniquely named tensors with a learned/buffer flag."""

    def __init__(self, entries: Iterator[Entry] | None = None):
        self._entries: dict[str, Entry] = {}
        for e in entries or ():
            self.add(e.name, e.tensor, e.learned)

    def add(self, name: str, tensor: Tensor, learned: bool = True) -> None:
        if name in self._entries:
            raise ValueError(f"duplicate entry {name!r}")
        if not isinstance(tensor, Tensor):
            tensor = Tensor(tensor)
        self._entries[name] = Entry(name, bool(learned), tensor)

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name].tensor

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __iter__(self):
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def entries(self) -> list[Entry]:
        return list(self._entries.values())

    def is_learned(self, name: str) -> bool:
        return self._entries[name].learned

    def tensors(self) -> dict[str, Tensor]:
        return {n: e.tensor for n, e in self._entries.items()}

    def num_scalars(self, learned_only: bool = False) -> int:
        return sum(e.tensor.size for e in self._entries.values() if e.learned or not learned_only)

    def astype(self, dtype) -> WeightStore:
        return WeightStore(Entry(e.name, e.learned, e.tensor.astype(dtype)) for e in self._entries.values())

    def replace(self, name: str, tensor: Tensor) -> WeightStore:
        """Copy of the store with one tensor swapped (same shape required)."""
        old = self._entries[name]
        if tuple(tensor.shape) != old.tensor.shape:
            raise ValueError(f"{name}: shape {tensor.shape} != {old.tensor.shape}")
        return WeightStore(
            Entry(e.name, e.learned, tensor if e.name == name else e.tensor) for e in self._entries.values()
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, WeightStore):
            return NotImplemented
        return not compare(self, other)

    def __repr__(self) -> str:
        return f"WeightStore({len(self)} entries, {self.num_scalars()} scalars)"


def compare(a: WeightStore, b: WeightStore) -> list[str]:
    """Bit-level differences between two stores, as human-readable lines."""
    diffs = []
    if list(a) != list(b):
        diffs.append(f"entry names/order differ: {list(a)[:5]}... vs {list(b)[:5]}...")
    for name in a:
        if name not in b:
            continue
        ea, eb = a._entries[name], b._entries[name]
        if ea.learned != eb.learned:
            diffs.append(f"{name}: learned flag {ea.learned} vs {eb.learned}")
        ta, tb = ea.tensor.data, eb.tensor.data
        if ta.shape != tb.shape or ta.dtype != tb.dtype:
            diffs.append(f"{name}: {ta.shape}/{ta.dtype} vs {tb.shape}/{tb.dtype}")
            continue
        # compare bit patterns so NaN payloads and signed zeros count too
        ba = np.ascontiguousarray(ta).reshape(-1).view(np.uint8).reshape(ta.size, -1)
        bb = np.ascontiguousarray(tb).reshape(-1).view(np.uint8).reshape(tb.size, -1)
        idx = np.flatnonzero((ba != bb).any(axis=1))
        if idx.size:
            diffs.append(f"{name}: {idx.size} differing scalar(s), first at flat index {int(idx[0])}")
    return diffs


def save(store: WeightStore, path: str | Path) -> None:
    with open(path, "wb") as f:
        f.write(dumps(store))


def dumps(store: WeightStore) -> bytes:
    parts = [MAGIC, struct.pack("<IQ", VERSION, len(store))]
    for e in store.entries():
        t = e.tensor
        if t.dtype != FLOAT32:
            raise ValueError(f"{e.name}: FATW stores float32 payloads; got {t.dtype} (cast explicitly)")
        name = e.name.encode("utf-8")
        if len(name) > 0xFFFF:
            raise ValueError(f"name too long: {e.name[:40]}...")
        if t.ndim > 0xFF:
            raise ValueError(f"{e.name}: rank {t.ndim} exceeds 255")
        parts.append(struct.pack("<H", len(name)))
        parts.append(name)
        parts.append(struct.pack("<BB", int(e.learned), t.ndim))
        parts.append(struct.pack(f"<{t.ndim}I", *t.shape))
        parts.append(t.data.astype("<f4", copy=False).tobytes())
    return b"".join(parts)


def load(path: str | Path) -> WeightStore:
    return loads(Path(path).read_bytes())


def loads(buf: bytes) -> WeightStore:
    mv = memoryview(buf)
    pos = 0

    def take(n: int, what: str) -> memoryview:
        nonlocal pos
        if pos + n > len(mv):
            raise FormatError(f"truncated file while reading {what}: need {n} bytes, {len(mv) - pos} left", pos)
        chunk = mv[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4, "magic")) != MAGIC:
        raise FormatError("bad magic, expected b'FATW'", 0)
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    (count,) = struct.unpack("<Q", take(8, "entry count"))
    store = WeightStore()
    for i in range(count):
        start = pos
        (nlen,) = struct.unpack("<H", take(2, f"entry {i} name length"))
        try:
            name = bytes(take(nlen, f"entry {i} name")).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"entry {i} name is not valid UTF-8", start + 2) from None
        flag_pos = pos
        learned, rank = struct.unpack("<BB", take(2, f"{name} flags"))
        if learned > 1:
            raise FormatError(f"{name}: learned flag must be 0 or 1, got {learned}", flag_pos)
        shape = struct.unpack(f"<{rank}I", take(4 * rank, f"{name} extents"))
        if any(s == 0 for s in shape):
            raise FormatError(f"{name}: zero extent in shape {shape}", flag_pos + 2)
        n = math.prod(shape)
        payload = take(4 * n, f"{name} payload")
        data = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(shape)
        if name in store:
            raise FormatError(f"duplicate entry {name!r}", start)
        store.add(name, Tensor(data), bool(learned))
    if pos != len(mv):
        raise FormatError(f"{len(mv) - pos} trailing bytes after last entry", pos)
    return store


# --------------------------------------------------------------------------
# PRNG
# --------------------------------------------------------------------------

def splitmix64(state: int) -> tuple[int, int]:
    """One splitmix64 step: returns ``(new_state, output)``."""
    state = (state + SPLITMIX_GAMMA) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


def fnv1a64(text: str) -> int:
    h = FNV_OFFSET
    for b in text.encode("utf-8"):
        h = ((h ^ b) * FNV_PRIME) & MASK64
    return h


class XorShift64Star:
    """Scalar reference generator (used for test vectors)."""

    def __init__(self, state: int):
        if state == 0:
            raise ValueError("xorshift state must be non-zero")
        self.state = state & MASK64

    def next(self) -> int:
        x = self.state
        x ^= x >> 12
        x ^= (x << 25) & MASK64
        x ^= x >> 27
        self.state = x
        return (x * XORSHIFT_MULT) & MASK64


class LaneRNG:
    """``LANES`` xorshift64* generators stepped in lock-step with numpy."""

    def __init__(self, seed: int, stream: str = ""):
        base = (seed ^ fnv1a64(stream)) & MASK64
        states = []
        s = base
        for _ in range(LANES):
            s, out = splitmix64(s)
            states.append(out or 1)
        self.states = np.array(states, dtype=np.uint64)

    def next_u64(self, rounds: int) -> np.ndarray:
        out = np.empty((rounds, LANES), dtype=np.uint64)
        x = self.states
        mult = np.uint64(XORSHIFT_MULT)
        with np.errstate(over="ignore"):
            for r in range(rounds):
                x = x ^ (x >> np.uint64(12))
                x = x ^ (x << np.uint64(25))
                x = x ^ (x >> np.uint64(27))
                out[r] = x * mult
        self.states = x
        return out.reshape(-1)

    def uniform(self, n: int) -> np.ndarray:
        rounds = -(-n // LANES)
        u = (self.next_u64(rounds) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
        return u[:n]

    def normal(self, n: int) -> np.ndarray:
        u = self.uniform(2 * n).reshape(n, 2)
        return np.sqrt(-2.0 * np.log1p(-u[:, 0])) * np.cos(2.0 * np.pi * u[:, 1])

    def truncated_normal(self, n: int, bound: float = TRUNC_BOUND) -> np.ndarray:
        out = np.empty(0)
        while out.size < n:
            z = self.normal(max(n - out.size, 16) * 2)
            out = np.concatenate([out, z[np.abs(z) <= bound]])
        return out[:n]


# --------------------------------------------------------------------------
# initialization
# --------------------------------------------------------------------------

def init_random(config, seed: int = 0) -> WeightStore:
    """Deterministic random weights for ``config`` (a FatConfig).

    * linear projections: normal truncated at +-2 sigma, scaled to std 0.02;
    * convolutions: He normal, std ``sqrt(2 / fan_in)``;
    * biases 0; norm gamma 1, beta 0; BN running mean 0, var 1.
    """
    from .model import param_entries

    specs = {s.name: s for s in config.layer_specs(224)}
    store = WeightStore()
    for name, shape, learned in param_entries(config):
        layer, suffix = name.rsplit(".", 1)
        kind = specs[layer].kind
        n = math.prod(shape)
        if suffix == "weight" and kind == "linear":
            rng = LaneRNG(seed, name)
            data = rng.truncated_normal(n) * (PROJECTION_STD / _TRUNC_STD)
        elif suffix == "weight":
            fan_in = math.prod(shape[1:])
            data = LaneRNG(seed, name).normal(n) * math.sqrt(2.0 / fan_in)
        elif suffix in ("gamma", "var"):
            data = np.ones(n)
        else:
            data = np.zeros(n)
        store.add(name, Tensor(data.reshape(shape)), learned)
    return store


# --------------------------------------------------------------------------
# images
# --------------------------------------------------------------------------

_PPM_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def read_ppm(path: str | Path) -> np.ndarray:
    """Binary P6 with maxval 255 -> uint8 array ``[H, W, 3]``."""
    buf = Path(path).read_bytes()
    pos = 0
    fields = []
    for _ in range(4):
        m = _PPM_TOKEN.match(buf, pos)
        if not m:
            raise ValueError(f"{path}: malformed PPM header")
        fields.append(m.group(1))
        pos = m.end()
    if fields[0] != b"P6":
        raise ValueError(f"{path}: expected binary PPM (P6), got {fields[0]!r}")
    try:
        w, h, maxval = (int(f) for f in fields[1:])
    except ValueError:
        raise ValueError(f"{path}: malformed PPM header") from None
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported, got {maxval}")
    if w < 1 or h < 1:
        raise ValueError(f"{path}: invalid size {w}x{h}")
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise ValueError(f"{path}: malformed PPM header")
    pos += 1
    need = w * h * 3
    if len(buf) - pos < need:
        raise ValueError(f"{path}: truncated pixel data ({len(buf) - pos} of {need} bytes)")
    return np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos).reshape(h, w, 3)


def write_ppm(path: str | Path, pixels: np.ndarray) -> None:
    pixels = np.asarray(pixels, dtype=np.uint8)
    h, w, _ = pixels.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + pixels.tobytes())


def _resize_axis(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # half-pixel centres: src = (dst + 0.5) * n_in / n_out - 0.5, clamped to the edge
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize_bilinear(img: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize of a ``[C, H, W]`` array with half-pixel centres."""
    c, h, w = img.shape
    if (h, w) == (height, width):
        return img.astype(np.float64)
    y0, y1, fy = _resize_axis(h, height)
    x0, x1, fx = _resize_axis(w, width)
    img = img.astype(np.float64)
    rows = img[:, y0, :] * (1 - fy)[None, :, None] + img[:, y1, :] * fy[None, :, None]
    return rows[:, :, x0] * (1 - fx) + rows[:, :, x1] * fx


def load_image_ppm(path: str | Path, resize_to: int | tuple[int, int] | None = None,
                   normalize: bool = False) -> Tensor:
    """Read a P6 image into a ``[1, 3, H, W]`` float tensor in [0, 1].

    With ``normalize`` the ImageNet channel mean/std are applied after scaling.
    """
    pixels = read_ppm(path)
    x = pixels.transpose(2, 0, 1).astype(np.float64) / 255.0
    if resize_to is not None:
        h, w = (resize_to, resize_to) if isinstance(resize_to, int) else resize_to
        x = resize_bilinear(x, h, w)
    if normalize:
        x = (x - np.array(IMAGENET_MEAN)[:, None, None]) / np.array(IMAGENET_STD)[:, None, None]
    return Tensor(x[None])


# --------------------------------------------------------------------------
# config files
# --------------------------------------------------------------------------

_TUPLE_FIELDS = ("stem_channels", "blocks", "channels", "heads", "fasa_kernels", "cpe_kernels", "pool_units")
_INT_FIELDS = ("ffn_ratio", "ffn_kernel", "num_classes")
_BOOL_FIELDS = ("cpe", "extra_sigmoid", "kv_from_pooled")
_STR_FIELDS = ("name", "fusion", "downsample")


def _parse_bool(key: str, value: str) -> bool:
    v = value.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"{key}: expected a boolean, got {value!r}")


def parse_config(text: str):
    """Parse flat ``key=value`` lines into a FatConfig.

    ``preset=B0`` selects the starting point (applied first wherever it
    appears); other keys override its fields. Lists are comma-separated.
    Blank lines and ``#`` comments are ignored; dashes in keys are accepted.
    """
    from .model import FatConfig, build_preset

    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key in values:
            raise ValueError(f"line {lineno}: duplicate key {key!r}")
        values[key] = value
    base = build_preset(values.pop("preset")) if "preset" in values else FatConfig()
    changes: dict = {}
    for key, value in values.items():
        if key in _TUPLE_FIELDS:
            changes[key] = tuple(int(v) for v in value.split(","))
        elif key in _INT_FIELDS:
            changes[key] = int(value)
        elif key in _BOOL_FIELDS:
            changes[key] = _parse_bool(key, value)
        elif key in _STR_FIELDS:
            changes[key] = value
        else:
            raise ValueError(f"unknown config key {key!r}")
    return base.replace(**changes)


def load_config(path: str | Path):
    return parse_config(Path(path).read_text())


def format_config(config) -> str:
    lines = []
    for key, value in config.to_dict().items():
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        elif isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"


def tensors_from(weights: WeightStore | Mapping[str, Tensor]) -> dict[str, Tensor]:
    return weights.tensors() if isinstance(weights, WeightStore) else dict(weights)
