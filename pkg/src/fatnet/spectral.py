"""Per-channel 2D DFT magnitude of FASA branch outputs.

The transform is computed directly from its definition,
``X[k, l] = sum_{m, n} x[m, n] exp(-2 pi i (k m / H + l n / W))``, as two
products with explicit DFT matrices in float64 (no FFT). The centred
layout swaps quadrants so the zero frequency lands at ``(H // 2, W // 2)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .accounting import format_csv
from .fasa import bidirectional_interaction_fuse
from .tensor import Tensor, silu

BRANCHES = ("local", "global", "fused-add-linear", "fused-interaction")


@dataclass(frozen=True)
class Spectrum:
    """Magnitude grid of one channel.

    ``magnitude`` is log1p-scaled when ``log_scaled`` is set; :meth:`linear`
    always returns plain magnitudes. ``input_energy`` is ``sum(x**2)`` of the
    transformed map, kept so Parseval can be checked on any emitted spectrum.
    """

    channel: int
    magnitude: np.ndarray
    centered: bool
    log_scaled: bool
    input_energy: float

    @property
    def shape(self) -> tuple[int, int]:
        return self.magnitude.shape

    def linear(self) -> np.ndarray:
        return np.expm1(self.magnitude) if self.log_scaled else self.magnitude

    def parseval_error(self) -> float:
        """Relative gap between ``sum |X|^2 / (H W)`` and ``sum x^2``."""
        h, w = self.shape
        lhs = float(np.sum(self.linear() ** 2)) / (h * w)
        return abs(lhs - self.input_energy) / max(self.input_energy, 1e-300)

    def center(self) -> tuple[int, int]:
        h, w = self.shape
        return (h // 2, w // 2) if self.centered else (0, 0)

    def frequencies(self) -> tuple[np.ndarray, np.ndarray]:
        """Signed vertical (v) and horizontal (u) frequency index of every row/column."""
        h, w = self.shape
        if self.centered:
            return np.arange(h) - h // 2, np.arange(w) - w // 2
        return _signed(h), _signed(w)


def _signed(n: int) -> np.ndarray:
    k = np.arange(n)
    return np.where(k < n - n // 2, k, k - n)


def dft_matrix(n: int) -> np.ndarray:
    # reduce j*k mod n before scaling so large products keep full precision
    jk = np.outer(np.arange(n), np.arange(n)) % n
    return np.exp(-2j * np.pi * jk / n)


def dft2(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    h, w = x.shape
    return dft_matrix(h) @ x @ dft_matrix(w).T


def center_shift(m: np.ndarray) -> np.ndarray:
    h, w = m.shape
    return np.roll(m, (h // 2, w // 2), axis=(0, 1))


def dft2_magnitude(x, channel: int = 0, center: bool = True, log: bool = False) -> Spectrum:
    """Magnitude spectrum of a 2-D map (``[H, W]`` array or Tensor)."""
    x = np.asarray(x.numpy() if isinstance(x, Tensor) else x, dtype=np.float64)
    if x.ndim != 2 or min(x.shape) < 1:
        raise ValueError(f"expected a non-empty [H, W] map, got shape {x.shape}")
    mag = np.abs(dft2(x))
    if center:
        mag = center_shift(mag)
    if log:
        mag = np.log1p(mag)
    return Spectrum(channel, mag, center, log, float(np.sum(x * x)))


def branch_maps(model, img: Tensor, stage: int, block: int) -> dict[str, Tensor]:
    """All four branch outputs of one FASA block, from a single forward pass.

    The two fused maps are computed side by side from the same local and
    global tensors and the block's projection weights.
    """
    from .model import capture_fasa

    taps = capture_fasa(model, img, stage, block)
    cfg, p = taps["config"], taps["params"]
    if cfg.fusion == "cat-linear":
        raise ValueError("fused branches need a C x C projection; the cat-linear variant has C x 2C")
    return {
        "local": silu(taps["q_local"]),
        "global": taps["global"],
        "fused-add-linear": bidirectional_interaction_fuse(taps["q_local"], taps["global"], cfg, p, "add-linear"),
        "fused-interaction": bidirectional_interaction_fuse(taps["q_local"], taps["global"], cfg, p, "interaction"),
    }


def branch_spectra(model, img: Tensor, stage: int, block: int, branch: str, channels,
                   log: bool = False) -> list[Spectrum]:
    """One centred spectrum per requested channel of ``branch`` (batch item 0)."""
    if branch not in BRANCHES:
        raise ValueError(f"unknown branch {branch!r}; expected one of {BRANCHES}")
    channels = list(channels)
    width = model.config.channels[stage - 1] if 1 <= stage <= 4 else 0
    bad = [c for c in channels if not 0 <= c < width]
    if width and bad:
        raise ValueError(f"channel {bad[0]} out of range; stage {stage} has channels 0..{width - 1}")
    fmap = branch_maps(model, img, stage, block)[branch].numpy()[0]
    return [dft2_magnitude(fmap[c], channel=c, log=log) for c in channels]


# --------------------------------------------------------------------------
# export
# --------------------------------------------------------------------------

def spectrum_csv(s: Spectrum) -> str:
    v, u = s.frequencies()
    mag = s.linear()
    rows = [(int(u[j]), int(v[i]), repr(float(mag[i, j]))) for i in range(mag.shape[0]) for j in range(mag.shape[1])]
    return format_csv(("u", "v", "magnitude"), rows)


def heatmap(s: Spectrum) -> np.ndarray:
    """8-bit image of log1p magnitudes, min-max normalized."""
    m = np.log1p(s.linear())
    lo, hi = float(m.min()), float(m.max())
    if hi <= lo:
        return np.zeros(m.shape, dtype=np.uint8)
    return np.round((m - lo) / (hi - lo) * 255).astype(np.uint8)


def write_pgm(path: str | Path, pixels: np.ndarray) -> None:
    h, w = pixels.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + np.asarray(pixels, dtype=np.uint8).tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    buf = Path(path).read_bytes()
    head = buf.split(maxsplit=4)
    if head[0] != b"P5" or int(head[3]) != 255:
        raise ValueError(f"{path}: not an 8-bit binary PGM")
    w, h = int(head[1]), int(head[2])
    return np.frombuffer(buf[-w * h:], dtype=np.uint8).reshape(h, w)


def spectrum_stem(stage: int, block: int, branch: str, channel: int) -> str:
    return f"stage{stage}_block{block}_{branch}_ch{channel}"


def export_spectra(spectra: list[Spectrum], out_dir: str | Path, stage: int, block: int,
                   branch: str) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for s in spectra:
        stem = out / spectrum_stem(stage, block, branch, s.channel)
        write_pgm(stem.with_suffix(".pgm"), heatmap(s))
        stem.with_suffix(".csv").write_text(spectrum_csv(s))
        written += [stem.with_suffix(".pgm"), stem.with_suffix(".csv")]
    return written
