"""Three-level U-shaped frequency-aware dual-path network."""

import dataclasses
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .freqsep import LowPassSpec, split_frequency
from .hfeb import HFEB
from .lfeb import LFEB, PromptRouter


class ConfigError(ValueError):
    pass


OFFSET_MODES = ("learned", "none", "zero", "fixed", "conv")


@dataclass
class ModelConfig:
    in_channels: int = 3
    base_channels: int = 32
    levels: int = 3
    lfeb_per_level: List[int] = field(default_factory=lambda: [2, 2, 2])
    hfeb_per_level: List[int] = field(default_factory=lambda: [2, 3, 4])
    num_prompts: int = 16
    prompt_rank: int = 4
    state_dim: int = 16
    gumbel_tau: float = 1.0
    dpa_heads: List[int] = field(default_factory=lambda: [1, 2, 4])
    hfr_cycles: int = 2
    hfr_kernels: Tuple[int, ...] = (7, 5)
    shuffle_groups: int = 2
    se_reduction: int = 4
    lowpass_kind: str = "box-blur"
    lowpass_kernel: int = 3
    lowpass_sigma: float = 1.0
    scan_chunk: int = 32
    # ablations
    no_hfr: bool = False
    hfr_shuffle: bool = True
    no_dpa: bool = False
    dpa_fixed_temp: bool = False
    dpa_no_pos: bool = False
    no_seb: bool = False
    offsets: str = "learned"
    swap_branches: bool = False
    assb_variant: str = "full"

    def __post_init__(self):
        self.lfeb_per_level = list(self.lfeb_per_level)
        self.hfeb_per_level = list(self.hfeb_per_level)
        self.dpa_heads = list(self.dpa_heads)
        self.hfr_kernels = tuple(self.hfr_kernels)

    @property
    def lowpass(self):
        return LowPassSpec(self.lowpass_kind, self.lowpass_kernel, self.lowpass_sigma)

    @property
    def no_offsets(self):
        return self.offsets == "none"

    def width(self, level):
        return self.base_channels * 2**level

    def validate(self):
        c = self.base_channels
        if c < 2 or c % 2:
            raise ConfigError(f"base_channels must be even, got {c}")
        for name in ("lfeb_per_level", "hfeb_per_level", "dpa_heads"):
            if len(getattr(self, name)) != self.levels:
                raise ConfigError(f"{name} must have one entry per level ({self.levels})")
        if self.offsets not in OFFSET_MODES:
            raise ConfigError(f"unknown offsets mode {self.offsets!r}")
        if self.assb_variant not in PromptRouter.VARIANTS:
            raise ConfigError(f"unknown assb_variant {self.assb_variant!r}")
        if self.prompt_rank > min(self.num_prompts, self.state_dim) / 2:
            raise ConfigError("prompt_rank must satisfy r <= min(T, d) / 2")
        if self.hfr_cycles < 1 or self.gumbel_tau <= 0:
            raise ConfigError("hfr_cycles must be >= 1 and gumbel_tau > 0")
        try:
            self.lowpass
        except ValueError as e:
            raise ConfigError(str(e)) from e
        for lvl in range(self.levels):
            w = self.width(lvl)
            half = w // 2
            if half % self.dpa_heads[lvl]:
                raise ConfigError(f"level {lvl}: {self.dpa_heads[lvl]} heads do not divide {half}")
            if w % self.shuffle_groups:
                raise ConfigError(f"level {lvl}: shuffle groups do not divide {w}")
            if w % self.se_reduction or self.se_reduction >= w:
                raise ConfigError(f"level {lvl}: SE reduction {self.se_reduction} invalid for {w}")
        return self

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["hfr_kernels"] = list(self.hfr_kernels)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def small(cls, **kw):
        return cls(base_channels=24, **kw)

    @classmethod
    def toy(cls, **kw):
        kw.setdefault("base_channels", 16)
        kw.setdefault("lfeb_per_level", [1, 1, 1])
        kw.setdefault("hfeb_per_level", [1, 1, 2])
        return cls(**kw)


# name -> config overrides; each reproduces one row of the ablation tables
VARIANTS = {
    "no_hfr": {"no_hfr": True},
    "hfr_no_shuffle": {"hfr_shuffle": False},
    "hfr_only_5x5": {"hfr_kernels": (5, 5)},
    "hfr_only_7x7": {"hfr_kernels": (7, 7)},
    "dpa_fixed_temp_no_pos": {"dpa_fixed_temp": True, "dpa_no_pos": True},
    "dpa_fixed_temp": {"dpa_fixed_temp": True},
    "dpa_no_pos": {"dpa_no_pos": True},
    "no_dpa": {"no_dpa": True},
    "no_seb": {"no_seb": True},
    "assb_no_prompt_pool": {"assb_variant": "no_prompt_pool"},
    "assb_no_routing": {"assb_variant": "no_routing"},
    "assb_no_reorder": {"assb_variant": "no_reorder"},
    "assb_full_rank": {"assb_variant": "full_rank"},
    "no_offsets": {"offsets": "none"},
    "zero_offset_warp": {"offsets": "zero"},
    "fixed_warp": {"offsets": "fixed"},
    "conv_alignment": {"offsets": "conv"},
    "swap_branches": {"swap_branches": True},
}


def make_variant(config: ModelConfig, flag: str) -> ModelConfig:
    if flag not in VARIANTS:
        raise ConfigError(f"unknown ablation flag {flag!r}; known: {', '.join(VARIANTS)}")
    return dataclasses.replace(config, **VARIANTS[flag]).validate()


# ----------------------------------------------------------------------------
# offsets and warping
# ----------------------------------------------------------------------------

class OffsetPredictor(nn.Module):
    """Conv3x3 -> GELU -> Conv3x3 producing (dx, dy) in pixels; starts at zero."""

    def __init__(self, channels):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, 2, 3, padding=1)
        nn.init.zeros_(self.conv2.weight)
        nn.init.zeros_(self.conv2.bias)

    def forward(self, f1):
        return self.conv2(F.gelu(self.conv1(f1)))


def warp(f2, offsets):
    """Bilinearly sample ``f2`` at p + offsets(p), clamping samples to the border.

    offsets: (B, 2, H, W) with channel 0 = dx (columns), channel 1 = dy (rows).
    """
    b, c, h, w = f2.shape
    if offsets.shape != (b, 2, h, w):
        raise ValueError(f"offset field {tuple(offsets.shape)} does not match feature {tuple(f2.shape)}")
    ys = torch.arange(h, dtype=f2.dtype, device=f2.device)[:, None]
    xs = torch.arange(w, dtype=f2.dtype, device=f2.device)[None, :]
    x = (xs + offsets[:, 0]).clamp(0, w - 1)
    y = (ys + offsets[:, 1]).clamp(0, h - 1)
    x0 = x.detach().floor()
    y0 = y.detach().floor()
    wx = (x - x0)[:, None]
    wy = (y - y0)[:, None]
    x0 = x0.long()
    y0 = y0.long()
    x1 = (x0 + 1).clamp(max=w - 1)
    y1 = (y0 + 1).clamp(max=h - 1)
    flat = f2.reshape(b, c, h * w)

    def tap(yy, xx):
        idx = (yy * w + xx).reshape(b, 1, h * w).expand(-1, c, -1)
        return torch.gather(flat, 2, idx).reshape(b, c, h, w)

    top = tap(y0, x0) * (1 - wx) + tap(y0, x1) * wx
    bottom = tap(y1, x0) * (1 - wx) + tap(y1, x1) * wx
    return top * (1 - wy) + bottom * wy


class Alignment(nn.Module):
    """Brings the fused decoder feature f2 onto the shallow feature grid."""

    def __init__(self, channels, mode="learned"):
        super().__init__()
        self.mode = mode
        if mode == "learned":
            self.predictor = OffsetPredictor(channels)
        elif mode == "fixed":
            self.shift = nn.Parameter(torch.zeros(2))
        elif mode == "conv":
            self.conv1 = nn.Conv2d(channels * 2, channels, 3, padding=1)
            self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
            nn.init.zeros_(self.conv2.weight)
            nn.init.zeros_(self.conv2.bias)

    def offsets(self, f1):
        b, _, h, w = f1.shape
        if self.mode == "learned":
            return self.predictor(f1)
        if self.mode == "fixed":
            return self.shift[None, :, None, None].expand(b, 2, h, w)
        return f1.new_zeros(b, 2, h, w)

    def forward(self, f1, f2):
        if self.mode == "none":
            return f2
        if self.mode == "conv":
            return f2 + self.conv2(F.gelu(self.conv1(torch.cat([f1, f2], 1))))
        return warp(f2, self.offsets(f1))


# ----------------------------------------------------------------------------
# stages
# ----------------------------------------------------------------------------

class Downsample(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels * 2, 3, stride=2, padding=1)

    def forward(self, x):
        if x.shape[-2] % 2 or x.shape[-1] % 2:
            raise ValueError(f"cannot halve odd spatial size {tuple(x.shape[-2:])}")
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels // 2, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


def rescale_stage(x, direction, module):
    if direction not in ("down", "up"):
        raise ValueError(f"unknown direction {direction!r}")
    return module(x)


class DualPathStage(nn.Module):
    """Split into low/high parts, run LFEB and HFEB stacks, add, mix with 1x1."""

    def __init__(self, cfg: ModelConfig, level: int, basis: Optional[nn.Parameter]):
        super().__init__()
        w = cfg.width(level)
        self.lowpass = cfg.lowpass
        self.swap = cfg.swap_branches
        self.lfeb_stack = nn.Sequential(*[
            LFEB(w, cfg.num_prompts, cfg.prompt_rank, cfg.state_dim, basis, cfg.gumbel_tau,
                 cfg.assb_variant, use_seb=not cfg.no_seb, se_reduction=cfg.se_reduction,
                 chunk=cfg.scan_chunk)
            for _ in range(cfg.lfeb_per_level[level])
        ])
        self.hfeb_stack = nn.Sequential(*[
            HFEB(w, cfg.dpa_heads[level], cfg.hfr_cycles, cfg.hfr_kernels, cfg.hfr_shuffle,
                 cfg.shuffle_groups, use_hfr=not cfg.no_hfr, use_dpa=not cfg.no_dpa,
                 dpa_fixed_temp=cfg.dpa_fixed_temp, dpa_use_pos=not cfg.dpa_no_pos)
            for _ in range(cfg.hfeb_per_level[level])
        ])
        self.mix = nn.Conv2d(w, w, 1)

    def forward(self, x):
        low, high = split_frequency(x, self.lowpass)
        if self.swap:
            low, high = high, low
        return self.mix(self.lfeb_stack(low) + self.hfeb_stack(high))


class FADPNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        c, n = cfg.base_channels, cfg.levels
        self.shallow = nn.Conv2d(cfg.in_channels, c, 3, padding=1)
        if cfg.assb_variant == "full_rank":
            self.prompt_basis = None
        else:
            self.prompt_basis = nn.Parameter(torch.randn(cfg.num_prompts, cfg.prompt_rank) * 0.02)
        self.encoder = nn.ModuleList(DualPathStage(cfg, l, self.prompt_basis) for l in range(n))
        self.down = nn.ModuleList(Downsample(cfg.width(l)) for l in range(n - 1))
        self.decoder = nn.ModuleList(DualPathStage(cfg, l, self.prompt_basis) for l in range(n))
        self.up = nn.ModuleList(Upsample(cfg.width(l + 1)) for l in range(n - 1))
        self.skip = nn.ModuleList(nn.Conv2d(cfg.width(l) * 2, cfg.width(l), 1) for l in range(n - 1))
        self.fuse = nn.Conv2d(sum(cfg.width(l) for l in range(n)), c, 1)
        self.align = Alignment(c, cfg.offsets)
        self.reconstruct = nn.Conv2d(c, cfg.in_channels, 3, padding=1)
        self.bridge_init()

    @torch.no_grad()
    def bridge_init(self):
        """Start as the identity on the input image.

        The first ``in_channels`` shallow filters copy the input through centre
        taps, ``reconstruct`` reads them back out and ``fuse`` starts at zero, so
        the untrained network returns its input and every weight stays trainable.
        """
        k = self.cfg.in_channels
        self.shallow.weight[:k].zero_()
        self.shallow.bias[:k].zero_()
        self.reconstruct.weight.zero_()
        self.reconstruct.bias.zero_()
        for i in range(k):
            self.shallow.weight[i, i, 1, 1] = 1.0
            self.reconstruct.weight[i, i, 1, 1] = 1.0
        nn.init.zeros_(self.fuse.weight)
        nn.init.zeros_(self.fuse.bias)

    def set_generator(self, generator):
        for m in self.modules():
            if hasattr(m, "router"):
                m.generator = generator

    def forward(self, x):
        n = self.cfg.levels
        h, w = x.shape[-2:]
        if x.shape[1] != self.cfg.in_channels:
            raise ValueError(f"expected {self.cfg.in_channels} input channels, got {x.shape[1]}")
        if h % 2 ** (n - 1) or w % 2 ** (n - 1):
            raise ValueError(f"input size {h}x{w} must be a multiple of {2 ** (n - 1)}")
        f1 = self.shallow(x)
        skips = []
        t = f1
        for l in range(n):
            t = self.encoder[l](t)
            if l < n - 1:
                skips.append(t)
                t = self.down[l](t)
        outs = []
        for l in reversed(range(n)):
            if l < n - 1:
                t = self.skip[l](torch.cat([self.up[l](t), skips[l]], 1))
            t = self.decoder[l](t)
            outs.append(t if l == 0 else F.interpolate(t, size=(h, w), mode="nearest"))
        f2 = self.fuse(torch.cat(outs, 1))
        return self.reconstruct(f1 + self.align(f1, f2))
