"""Low-frequency enhancement block: prompt-routed state-space branch + SE branch."""

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F


class NumericalInstabilityError(FloatingPointError):
    pass


class LayerNorm2d(nn.Module):
    """LayerNorm over the channel axis of a (B, C, H, W) map."""

    def __init__(self, channels, eps=1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x):
        mu = x.mean(1, keepdim=True)
        var = (x - mu).pow(2).mean(1, keepdim=True)
        x = (x - mu) / torch.sqrt(var + self.eps)
        return x * self.weight[:, None, None] + self.bias[:, None, None]


class FeedForward(nn.Module):
    def __init__(self, channels, expansion=2):
        super().__init__()
        hidden = channels * expansion
        self.fc1 = nn.Conv2d(channels, hidden, 1)
        self.fc2 = nn.Conv2d(hidden, channels, 1)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


# ----------------------------------------------------------------------------
# positional gate
# ----------------------------------------------------------------------------

class PositionalGate(nn.Module):
    """x * sigmoid(DWConv3x3(Conv1x1(x)))."""

    def __init__(self, channels):
        super().__init__()
        self.channels = channels
        self.pw = nn.Conv2d(channels, channels, 1)
        self.dw = nn.Conv2d(channels, channels, 3, padding=1, groups=channels)

    def forward(self, x):
        if x.shape[1] != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {x.shape[1]}")
        return x * torch.sigmoid(self.dw(self.pw(x)))


# ----------------------------------------------------------------------------
# prompt routing
# ----------------------------------------------------------------------------

def gumbel_softmax(logits, tau=1.0, hard=True, noise=True, generator=None):
    """Gumbel-softmax over the last axis.

    With ``hard`` the forward value is one-hot at the argmax while gradients
    follow the soft sample (straight-through). ``noise=False`` drops the
    gumbel perturbation, which makes the hard path a deterministic argmax.
    """
    if not tau > 0:
        raise ValueError(f"gumbel temperature must be positive, got {tau}")
    if noise:
        u = torch.rand(logits.shape, generator=generator, dtype=logits.dtype, device=logits.device)
        g = -torch.log((-torch.log(u.clamp_min(1e-20))).clamp_min(1e-20))
        logits = logits + g
    y = F.softmax(logits / tau, dim=-1)
    if not hard:
        return y
    idx = y.argmax(-1, keepdim=True)
    y_hard = torch.zeros_like(y).scatter_(-1, idx, 1.0)
    return (y_hard - y).detach() + y


def route_prompts(tokens, w_p, pool, tau=1.0, hard=True, noise=True, generator=None):
    """Assign prompts to tokens.

    tokens: (B, L, C); w_p: nn.Linear C -> T; pool: (T, d).
    Returns ``(P_m, P, logits)`` with P_m (B, L, T) and P = P_m @ pool (B, L, d).
    """
    logits = F.log_softmax(w_p(tokens), dim=-1)
    p_m = gumbel_softmax(logits, tau, hard=hard, noise=noise, generator=generator)
    return p_m, p_m @ pool, logits


class PromptRouter(nn.Module):
    """Routing weights W_p, block-specific M_B and a (possibly shared) basis M_A.

    ``variant`` selects the component ablations:
    ``full``, ``no_prompt_pool`` (P = 0), ``no_routing`` (uniform prompt mix),
    ``no_reorder`` (raster scan order), ``full_rank`` (dense T x d pool).
    """

    VARIANTS = ("full", "no_prompt_pool", "no_routing", "no_reorder", "full_rank")

    def __init__(self, channels, num_prompts=16, rank=4, state_dim=16, basis=None,
                 tau=1.0, variant="full"):
        super().__init__()
        if variant not in self.VARIANTS:
            raise ValueError(f"unknown ASSB variant {variant!r}")
        if rank > min(num_prompts, state_dim) / 2:
            raise ValueError("prompt rank must satisfy r <= min(T, d) / 2")
        self.num_prompts, self.rank, self.state_dim = num_prompts, rank, state_dim
        self.variant = variant
        self.tau = tau
        self.w_p = nn.Linear(channels, num_prompts)
        if variant == "full_rank":
            self.pool = nn.Parameter(torch.randn(num_prompts, state_dim) * 0.02)
        else:
            if basis is None:
                basis = nn.Parameter(torch.randn(num_prompts, rank) * 0.02)
            if tuple(basis.shape) != (num_prompts, rank):
                raise ValueError("shared prompt basis has the wrong shape")
            self.m_a = basis
            self.m_b = nn.Parameter(torch.randn(rank, state_dim) * 0.02)

    def prompt_pool(self):
        if self.variant == "full_rank":
            return self.pool
        return self.m_a @ self.m_b

    def forward(self, tokens, hard=True, noise=True, generator=None):
        pool = self.prompt_pool()
        p_m, p, logits = route_prompts(tokens, self.w_p, pool, self.tau, hard, noise, generator)
        if self.variant == "no_prompt_pool":
            p = torch.zeros_like(p)
        elif self.variant == "no_routing":
            p = pool.mean(0).expand_as(p)
        return p_m, p


# ----------------------------------------------------------------------------
# semantic-guided unfold / fold
# ----------------------------------------------------------------------------

@dataclass
class SemanticPermutation:
    forward_index: torch.Tensor   # (B, L): position in raster order of the k-th sorted token
    inverse_index: torch.Tensor   # (B, L): sorted position of the raster token

    @classmethod
    def from_keys(cls, keys):
        order = torch.argsort(keys, dim=-1, stable=True)
        inverse = torch.argsort(order, dim=-1)
        return cls(order, inverse)

    @classmethod
    def identity(cls, batch, length, device=None):
        idx = torch.arange(length, device=device).expand(batch, length)
        return cls(idx, idx)


def _gather_tokens(x, index):
    return torch.gather(x, 1, index[..., None].expand(-1, -1, x.shape[-1]))


def sgn_unfold(f2, p_m, reorder=True):
    """Flatten (B, C, H, W) to (B, L, C) tokens sorted by their routed prompt index."""
    b, c, h, w = f2.shape
    tokens = f2.flatten(2).transpose(1, 2)
    if p_m.shape[:2] != (b, h * w):
        raise ValueError(f"P_m has {p_m.shape[1]} rows but the map has {h * w} tokens")
    if reorder:
        perm = SemanticPermutation.from_keys(p_m.argmax(-1))
    else:
        perm = SemanticPermutation.identity(b, h * w, f2.device)
    return _gather_tokens(tokens, perm.forward_index), perm


def permute_rows(x, perm):
    return _gather_tokens(x, perm.forward_index)


def sgn_fold(y, perm, shape):
    """Scatter sorted tokens (B, L, C) back to a (B, C, H, W) map."""
    h, w = shape
    if y.shape[1] != h * w or perm.inverse_index.shape[-1] != h * w:
        raise ValueError(f"sequence length {y.shape[1]} does not match a {h}x{w} map")
    tokens = _gather_tokens(y, perm.inverse_index)
    return tokens.transpose(1, 2).reshape(y.shape[0], y.shape[2], h, w)


# ----------------------------------------------------------------------------
# state-space scan
# ----------------------------------------------------------------------------

def discretize(delta, a, b):
    """Zero-order-hold transition and Euler input map.

    delta: (B, L, C) positive steps; a: (C,) negative rates; b: (B, L, d).
    Returns a_bar (B, L, C) and b_bar (B, L, C, d).
    """
    a_bar = torch.exp(delta * a)
    b_bar = delta[..., None] * b[:, :, None, :]
    return a_bar, b_bar


def scan_reference(x, a_bar, b_bar, c, d_skip, prompt=None):
    """Step-by-step recurrence, used as the slow reference path.

    h_i = a_bar_i * h_{i-1} + b_bar_i * x_i,  y_i = h_i (c_i + p_i) + D * x_i
    """
    bsz, length, ch = x.shape
    h = x.new_zeros(bsz, ch, b_bar.shape[-1])
    cp = c if prompt is None else c + prompt
    ys = []
    for i in range(length):
        h = a_bar[:, i, :, None] * h + b_bar[:, i] * x[:, i, :, None]
        ys.append((h * cp[:, i, None, :]).sum(-1) + d_skip * x[:, i])
    return torch.stack(ys, 1)


def _segsum(s):
    """exp(s_i - s_j) for j <= i and 0 above the diagonal, over the last axis."""
    k = s.shape[-1]
    causal = torch.ones(k, k, dtype=torch.bool, device=s.device).tril()
    # s is nonincreasing, so the masked (j > i) differences are >= 0; clamp keeps exp finite
    seg = (s[..., :, None] - s[..., None, :]).clamp(max=0)
    return torch.exp(seg) * causal


# largest within-chunk log-decay for which exp(-s) is formed directly
_FACTORED_SPAN = 40.0


def selective_scan(x, delta, a, b, c, d_skip, prompt=None, chunk=32):
    """Chunked evaluation of the same recurrence as :func:`scan_reference`.

    The transition rate is one scalar per channel, so the decay between
    tokens j <= i is exp(S_i - S_j) with S = a * cumsum(delta). Tokens are
    grouped into chunks; inside a chunk the map is a masked matrix product,
    and chunk end states are chained at chunk granularity.

    x, delta: (B, L, C); a: (C,); b, c, prompt: (B, L, d); d_skip: (C,).
    """
    bsz, length, ch = x.shape
    n_state = b.shape[-1]
    cp = c if prompt is None else c + prompt
    pad = (-length) % chunk
    if pad:
        # zero step and zero input: the state passes through unchanged
        x_p, delta_p = F.pad(x, (0, 0, 0, pad)), F.pad(delta, (0, 0, 0, pad))
        b_p, cp_p = F.pad(b, (0, 0, 0, pad)), F.pad(cp, (0, 0, 0, pad))
    else:
        x_p, delta_p, b_p, cp_p = x, delta, b, cp
    nc = (length + pad) // chunk
    u = (delta_p * x_p).reshape(bsz, nc, chunk, ch)
    s = torch.cumsum((delta_p * a).reshape(bsz, nc, chunk, ch), 2)     # (B, nc, K, C)
    bb = b_p.reshape(bsz, nc, chunk, n_state)
    cc = cp_p.reshape(bsz, nc, chunk, n_state)
    end = s[:, :, -1:, :]                                                # (B, nc, 1, C)

    g = (cc @ bb.transpose(-1, -2)).tril()                               # (B, nc, K, K)
    if float(-end.detach().min()) <= _FACTORED_SPAN:
        # exp(S_i - S_j) = exp(S_i) * exp(-S_j): one (K x K) product shared by all channels
        v = torch.exp(-s) * u
        y = torch.exp(s) * (g @ v)
        local = torch.exp(end).transpose(-1, -2) * (v.transpose(-1, -2) @ bb)   # (B, nc, C, d)
    else:
        st, ut = s.permute(0, 3, 1, 2), u.permute(0, 3, 1, 2)             # (B, C, nc, K)
        y = ((_segsum(st) * g[:, None]) @ ut[..., None]).squeeze(-1).permute(0, 2, 3, 1)
        local = torch.einsum("bcnk,bnkd->bncd", torch.exp(st[..., -1:] - st) * ut, bb)

    # state entering chunk n: sum over m < n of exp(E_{n-1} - E_m) * local_m
    e = torch.cumsum(end.squeeze(2), 1).transpose(1, 2)                  # (B, C, nc)
    e_prev = F.pad(e, (1, 0))[..., :-1]
    lower = torch.ones(nc, nc, dtype=torch.bool, device=x.device).tril(-1)
    w = torch.exp((e_prev[..., :, None] - e[..., None, :]).clamp(max=0)) * lower
    h_in = torch.einsum("bcnm,bmcd->bncd", w, local)                     # (B, nc, C, d)
    y = y + torch.exp(s) * (cc @ h_in.transpose(-1, -2))

    y = y.reshape(bsz, nc * chunk, ch)[:, :length]
    return y + d_skip * x


def check_finite(y, what="state-space scan"):
    bad = ~torch.isfinite(y)
    if bad.any():
        step = int(bad.nonzero()[0, 1])
        raise NumericalInstabilityError(f"non-finite value in {what} at sequence step {step}")
    return y


class SelectiveStateSpace(nn.Module):
    """Selective scan whose output matrix is shifted by per-token prompts."""

    def __init__(self, channels, state_dim=16, chunk=32):
        super().__init__()
        self.state_dim = state_dim
        self.chunk = chunk
        self.delta_proj = nn.Linear(channels, channels)
        self.b_proj = nn.Linear(channels, state_dim, bias=False)
        self.c_proj = nn.Linear(channels, state_dim, bias=False)
        # a = -softplus(a_raw); spread initial rates like the usual S4D-real init
        self.a_raw = nn.Parameter(torch.log(torch.expm1(torch.linspace(0.5, 4.0, channels))))
        self.d_skip = nn.Parameter(torch.ones(channels))
        with torch.no_grad():
            self.delta_proj.bias.fill_(-2.0)

    def rates(self):
        return -F.softplus(self.a_raw)

    def params_for(self, x):
        delta = F.softplus(self.delta_proj(x))
        return delta, self.rates(), self.b_proj(x), self.c_proj(x)

    def forward(self, x, prompt=None):
        if prompt is not None and prompt.shape[1] != x.shape[1]:
            raise ValueError("prompt rows must match the sequence length")
        delta, a, b, c = self.params_for(x)
        y = selective_scan(x, delta, a, b, c, self.d_skip, prompt, self.chunk)
        return check_finite(y)


def sse_scan(x, sse: SelectiveStateSpace, prompt):
    return sse(x, prompt)


# ----------------------------------------------------------------------------
# blocks
# ----------------------------------------------------------------------------

class ASSB(nn.Module):
    """Attentive state-space block: gate, route, sort, scan, unsort, project."""

    def __init__(self, channels, num_prompts=16, rank=4, state_dim=16, basis=None,
                 tau=1.0, variant="full", chunk=32):
        super().__init__()
        self.gate = PositionalGate(channels)
        self.router = PromptRouter(channels, num_prompts, rank, state_dim, basis, tau, variant)
        self.sse = SelectiveStateSpace(channels, state_dim, chunk)
        self.proj = nn.Conv2d(channels, channels, 1)
        self.hard = True
        self.generator: Optional[torch.Generator] = None

    def forward(self, x, generator=None):
        b, c, h, w = x.shape
        f2 = self.gate(x)
        tokens = f2.flatten(2).transpose(1, 2)
        gen = generator if generator is not None else self.generator
        # routing noise only while training; evaluation takes the argmax
        p_m, p = self.router(tokens, hard=self.hard, noise=self.training, generator=gen)
        seq, perm = sgn_unfold(f2, p_m, reorder=self.router.variant != "no_reorder")
        y = self.sse(seq, permute_rows(p, perm))
        return self.proj(sgn_fold(y, perm, (h, w)))


class SqueezeExcitation(nn.Module):
    def __init__(self, channels, reduction=4):
        super().__init__()
        if channels % reduction or reduction >= channels:
            raise ValueError(f"SE reduction {reduction} is invalid for {channels} channels")
        self.fc1 = nn.Linear(channels, channels // reduction)
        self.fc2 = nn.Linear(channels // reduction, channels)

    def forward(self, x):
        s = x.mean((2, 3))
        s = torch.sigmoid(self.fc2(F.gelu(self.fc1(s))))
        return x * s[:, :, None, None]


class LFEB(nn.Module):
    def __init__(self, channels, num_prompts=16, rank=4, state_dim=16, basis=None,
                 tau=1.0, assb_variant="full", use_seb=True, se_reduction=4, chunk=32):
        super().__init__()
        self.channels = channels
        self.norm1 = LayerNorm2d(channels)
        self.assb = ASSB(channels, num_prompts, rank, state_dim, basis, tau, assb_variant, chunk)
        self.seb = SqueezeExcitation(channels, se_reduction) if use_seb else None
        self.s1 = nn.Parameter(torch.ones(1))
        self.s2 = nn.Parameter(torch.ones(1)) if use_seb else None
        self.norm2 = LayerNorm2d(channels)
        self.ffn = FeedForward(channels)

    def forward(self, x):
        if x.shape[1] != self.channels:
            raise ValueError(f"LFEB expects {self.channels} channels, got {x.shape[1]}")
        u = self.norm1(x)
        mid = x + self.s1 * self.assb(u)
        if self.seb is not None:
            mid = mid + self.s2 * self.seb(u)
        return mid + self.ffn(self.norm2(mid))
