"""Low/high frequency split and radial band-energy analysis of feature maps."""

from dataclasses import dataclass
from typing import Literal

import numpy as np
import torch
import torch.nn.functional as F


class DegenerateInputError(ValueError):
    pass


@dataclass(frozen=True)
class LowPassSpec:
    kind: Literal["box-blur", "gaussian-blur"] = "box-blur"
    kernel_size: int = 3
    sigma: float = 1.0

    def __post_init__(self):
        if self.kind not in ("box-blur", "gaussian-blur"):
            raise ValueError(f"unknown low-pass kind {self.kind!r}")
        if self.kernel_size < 3 or self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be an odd integer >= 3")
        if self.kind == "gaussian-blur" and not self.sigma > 0:
            raise ValueError("gaussian sigma must be positive")

    def kernel(self, dtype=torch.float32) -> torch.Tensor:
        k = self.kernel_size
        if self.kind == "box-blur":
            w = torch.full((k, k), 1.0 / (k * k), dtype=torch.float64)
        else:
            ax = torch.arange(k, dtype=torch.float64) - (k - 1) / 2
            g = torch.exp(-(ax**2) / (2 * self.sigma**2))
            w = torch.outer(g, g)
            w = w / w.sum()
        return w.to(dtype)


@dataclass(frozen=True)
class BandSpec:
    cut_low: float = 1 / 6
    cut_mid: float = 1 / 3

    def __post_init__(self):
        if not (0 < self.cut_low < self.cut_mid <= 0.5):
            raise ValueError("band cuts must satisfy 0 < cut_low < cut_mid <= 0.5")


def lowpass(x: torch.Tensor, spec: LowPassSpec) -> torch.Tensor:
    k = spec.kernel_size
    if x.dim() != 4:
        raise ValueError(f"expected a (B, C, H, W) feature map, got shape {tuple(x.shape)}")
    if x.shape[-2] < k or x.shape[-1] < k:
        raise ValueError(
            f"spatial extent {tuple(x.shape[-2:])} is smaller than the {k}x{k} low-pass kernel"
        )
    c = x.shape[1]
    w = spec.kernel(x.dtype).to(x.device).expand(c, 1, k, k)
    pad = k // 2
    return F.conv2d(F.pad(x, (pad, pad, pad, pad), mode="reflect"), w, groups=c)


def split_frequency(x: torch.Tensor, spec: LowPassSpec = LowPassSpec()):
    """Return ``(low, high)`` with ``low = lowpass(x)`` and ``high = x - low``."""
    low = lowpass(x, spec)
    return low, x - low


def radial_frequency(h: int, w: int) -> np.ndarray:
    """Radial frequency of every DFT bin, each axis normalized to [-0.5, 0.5)."""
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.fftfreq(w)[None, :]
    return np.sqrt(fy**2 + fx**2)


def band_masks(h: int, w: int, bands: BandSpec = BandSpec()):
    r = radial_frequency(h, w)
    nondc = r > 0
    low = nondc & (r <= bands.cut_low)
    mid = (r > bands.cut_low) & (r <= bands.cut_mid)
    # corner bins reach sqrt(2)/2; they belong to the high band
    high = r > bands.cut_mid
    return low, mid, high


def band_energy_ratios(x, bands: BandSpec = BandSpec()):
    """Fractions of non-DC spectral energy in the low, mid and high radial bands.

    Ratios are computed per (batch, channel) slice and then averaged. Slices
    whose non-DC energy is zero are skipped; if every slice is DC-only the
    input is rejected.
    """
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().double().numpy()
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None, None]
    elif x.ndim == 3:
        x = x[None]
    h, w = x.shape[-2:]
    if h < 4 or w < 4:
        raise ValueError(f"band analysis needs at least 4x4 maps, got {h}x{w}")
    power = np.abs(np.fft.fft2(x.reshape(-1, h, w))) ** 2
    low, mid, high = band_masks(h, w, bands)
    e = np.stack([power[:, m].sum(-1) for m in (low, mid, high)], axis=-1)
    total = e.sum(-1)
    scale = (power.reshape(power.shape[0], -1).sum(-1)) + 1e-300
    keep = total > 1e-12 * scale
    if not keep.any():
        raise DegenerateInputError("no spectral energy outside DC; band ratios are undefined")
    ratios = (e[keep] / total[keep, None]).mean(0)
    return tuple(float(v) for v in ratios)


def format_band_row(source: str, ratios) -> str:
    lo, mi, hi = ratios
    return f"{source},{lo:.6f},{mi:.6f},{hi:.6f}"


BAND_CSV_HEADER = "source,band_low,band_mid,band_high"
