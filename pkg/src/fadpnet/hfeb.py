"""High-frequency enhancement block: reduced-width trunk with RB/DPA and a recurrent HFR path."""

import torch
import torch.nn as nn
import torch.nn.functional as F

from .lfeb import NumericalInstabilityError


def channel_shuffle(x, groups):
    b, c, h, w = x.shape
    if groups < 1 or c % groups:
        raise ValueError(f"{c} channels cannot be shuffled in {groups} groups")
    return x.view(b, groups, c // groups, h, w).transpose(1, 2).reshape(b, c, h, w)


class HFR(nn.Module):
    """Recurrent multi-kernel depthwise refinement.

    One cycle: parallel depthwise convs, concat, grouped 1x1 compression back
    to the input width, channel shuffle, grouped 1x1 mixing. The cycle is
    repeated ``cycles`` times with the same weights. All layers are bias-free.
    """

    def __init__(self, channels, kernels=(7, 5), cycles=2, shuffle_groups=2, shuffle=True):
        super().__init__()
        if cycles < 1:
            raise ValueError("HFR needs at least one cycle")
        if channels % shuffle_groups:
            raise ValueError(f"shuffle groups {shuffle_groups} do not divide {channels} channels")
        self.cycles = cycles
        self.groups = shuffle_groups
        self.shuffle = shuffle
        self.dw = nn.ModuleList(
            nn.Conv2d(channels, channels, k, padding=k // 2, groups=channels, bias=False)
            for k in kernels
        )
        self.compress = nn.Conv2d(channels * len(kernels), channels, 1, groups=shuffle_groups, bias=False)
        self.mix = nn.Conv2d(channels, channels, 1, groups=shuffle_groups, bias=False)

    def cycle(self, x):
        t = self.compress(torch.cat([dw(x) for dw in self.dw], 1))
        if self.shuffle:
            t = channel_shuffle(t, self.groups)
        return self.mix(t)

    def forward(self, x):
        for _ in range(self.cycles):
            x = self.cycle(x)
        return x


class DPA(nn.Module):
    """Depthwise position-aware channel attention.

    Per head, A = relu(normalize(Q) normalize(K)^T * temp) over flattened
    tokens, out = A V; a sigmoid-gated positional branch is added before the
    output projection. ``temp`` comes from a small generator on the pooled
    input, or is a plain learnable per-head scalar when ``fixed_temp``.
    """

    def __init__(self, channels, heads=1, temp_hidden=None, fixed_temp=False, use_pos=True,
                 normalize_qk=True):
        super().__init__()
        if channels % heads:
            raise ValueError(f"{heads} heads do not divide {channels} channels")
        self.heads = heads
        self.normalize_qk = normalize_qk
        self.qkv = nn.Conv2d(channels, channels * 3, 1)
        self.qkv_dw = nn.Conv2d(channels * 3, channels * 3, 3, padding=1, groups=channels * 3)
        self.use_pos = use_pos
        if use_pos:
            self.pos1 = nn.Conv2d(channels, channels, 1)
            self.pos2 = nn.Conv2d(channels, channels, 1)
        self.fixed_temp = fixed_temp
        if fixed_temp:
            self.temperature = nn.Parameter(torch.ones(heads))
        else:
            temp_hidden = temp_hidden or channels
            self.temp_in = nn.Linear(channels, temp_hidden)
            self.temp_out = nn.Linear(temp_hidden, heads)
            with torch.no_grad():
                self.temp_out.bias.fill_(1.0)
        self.proj = nn.Conv2d(channels, channels, 1)

    def temp(self, x):
        if self.fixed_temp:
            return self.temperature.expand(x.shape[0], -1)
        return self.temp_out(F.gelu(self.temp_in(x.mean((2, 3)))))

    def pos(self, x):
        return self.pos2(F.gelu(self.pos1(x)))

    def attention(self, x):
        """Per-head (C/h x C/h) attention maps, shape (B, h, C/h, C/h), and V."""
        b, c, hgt, wid = x.shape
        q, k, v = self.qkv_dw(self.qkv(x)).chunk(3, dim=1)
        q, k, v = (t.reshape(b, self.heads, c // self.heads, hgt * wid) for t in (q, k, v))
        if self.normalize_qk:
            q = F.normalize(q, dim=-1)
            k = F.normalize(k, dim=-1)
        temp = self.temp(x)
        attn = F.relu((q @ k.transpose(-2, -1)) * temp[:, :, None, None])
        bad = ~torch.isfinite(attn)
        if bad.any():
            head = int(bad.nonzero()[0, 1])
            raise NumericalInstabilityError(f"non-finite attention scores in head {head}")
        return attn, v

    def forward(self, x):
        b, c, hgt, wid = x.shape
        attn, v = self.attention(x)
        out = (attn @ v).reshape(b, c, hgt, wid)
        if self.use_pos:
            out = out + torch.sigmoid(self.pos(x))
        return self.proj(out)


class ResidualBlock(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        return x + self.conv2(F.gelu(self.conv1(x)))


class HFEB(nn.Module):
    """RB -> (reduce to C/2, DPA, expand) -> RB trunk, HFR side path, 1x1 output, outer residual.

    With ``out`` zero-initialized the block is the identity map.
    """

    def __init__(self, channels, heads=1, hfr_cycles=2, hfr_kernels=(7, 5), hfr_shuffle=True,
                 shuffle_groups=2, use_hfr=True, use_dpa=True, dpa_fixed_temp=False,
                 dpa_use_pos=True):
        super().__init__()
        if channels % 2:
            raise ValueError(f"HFEB needs an even channel count, got {channels}")
        half = channels // 2
        self.channels = channels
        self.rb1 = ResidualBlock(channels)
        if use_dpa:
            self.reduce = nn.Conv2d(channels, half, 1)
            self.dpa = DPA(half, heads, fixed_temp=dpa_fixed_temp, use_pos=dpa_use_pos)
            self.expand = nn.Conv2d(half, channels, 1)
        else:
            self.dpa = None
        self.rb2 = ResidualBlock(channels)
        self.hfr = HFR(channels, hfr_kernels, hfr_cycles, shuffle_groups, hfr_shuffle) if use_hfr else None
        self.out = nn.Conv2d(channels, channels, 1)

    def forward(self, x):
        if x.shape[1] != self.channels:
            raise ValueError(f"HFEB expects {self.channels} channels, got {x.shape[1]}")
        t = self.rb1(x)
        if self.dpa is not None:
            z = self.reduce(t)
            t = t + self.expand(z + self.dpa(z))
        t = self.rb2(t)
        if self.hfr is not None:
            t = t + self.hfr(x)
        return x + self.out(t)
