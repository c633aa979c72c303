"""Independent reference computations shared by the unit and acceptance tests."""

import math

import numpy as np


# ---------------------------------------------------------------------------- SSIM

def ssim_window_oracle(x, y, data_range=1.0, win=11, sigma=1.5, k1=0.01, k2=0.03):
    """Mean SSIM of two gray images by explicit loops over valid windows."""
    ax = np.arange(win) - (win - 1) / 2
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    w = np.outer(g, g)
    w /= w.sum()
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    h, wd = x.shape
    vals = []
    for i in range(h - win + 1):
        for j in range(wd - win + 1):
            px, py = x[i:i + win, j:j + win], y[i:i + win, j:j + win]
            mx, my = (w * px).sum(), (w * py).sum()
            vx = (w * (px - mx) ** 2).sum()
            vy = (w * (py - my) ** 2).sum()
            cxy = (w * (px - mx) * (py - my)).sum()
            vals.append(((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2)))
    return float(np.mean(vals))


def luma_oracle(rgb):
    """BT.601 studio-swing Y of a (3, H, W) image in [0, 1]."""
    r, g, b = rgb
    return (16.0 + 65.481 * r + 128.553 * g + 24.966 * b) / 255.0


# ---------------------------------------------------------------------------- parameter arithmetic

def conv(cin, cout, k, groups=1, bias=True):
    return cout * (cin // groups) * k * k + (cout if bias else 0)


def linear(cin, cout, bias=True):
    return cin * cout + (cout if bias else 0)


def lfeb_params(w, t, r, d, se_reduction=4):
    """One LFEB without the shared prompt basis."""
    gate = conv(w, w, 1) + conv(w, w, 3, groups=w)
    router = linear(w, t) + r * d
    sse = linear(w, w) + 2 * linear(w, d, bias=False) + 2 * w
    assb = gate + router + sse + conv(w, w, 1)
    seb = linear(w, w // se_reduction) + linear(w // se_reduction, w)
    norms = 2 * 2 * w
    ffn = conv(w, 2 * w, 1) + conv(2 * w, w, 1)
    return assb + seb + norms + ffn + 2


def hfeb_params(c, heads, kernels=(7, 5), groups=2):
    half = c // 2
    rb = conv(c, c, 3) * 2
    dpa = (conv(half, 3 * half, 1) + conv(3 * half, 3 * half, 3, groups=3 * half)
           + 2 * conv(half, half, 1) + linear(half, half) + linear(half, heads) + conv(half, half, 1))
    trunk = 2 * rb + conv(c, half, 1) + dpa + conv(half, c, 1)
    hfr = sum(conv(c, c, k, groups=c, bias=False) for k in kernels)
    hfr += conv(len(kernels) * c, c, 1, groups=groups, bias=False) + conv(c, c, 1, groups=groups, bias=False)
    return trunk + hfr + conv(c, c, 1)


def fadpnet_params(cfg):
    c, n = cfg.base_channels, cfg.levels
    widths = [c * 2 ** l for l in range(n)]
    total = conv(cfg.in_channels, c, 3) + cfg.num_prompts * cfg.prompt_rank
    for l, w in enumerate(widths):
        stage = (cfg.lfeb_per_level[l] * lfeb_params(w, cfg.num_prompts, cfg.prompt_rank, cfg.state_dim, cfg.se_reduction)
                 + cfg.hfeb_per_level[l] * hfeb_params(w, cfg.dpa_heads[l], cfg.hfr_kernels, cfg.shuffle_groups)
                 + conv(w, w, 1))
        total += 2 * stage
    for l in range(n - 1):
        w = widths[l]
        total += conv(w, 2 * w, 3) + conv(2 * w, w, 3) + conv(2 * w, w, 1)
    total += conv(sum(widths), c, 1)
    total += conv(c, c, 3) + conv(c, 2, 3)   # offset predictor
    total += conv(c, cfg.in_channels, 3)
    return total


def hfr_params(c, kernels=(7, 5), groups=2):
    return (sum(conv(c, c, k, groups=c, bias=False) for k in kernels)
            + conv(len(kernels) * c, c, 1, groups=groups, bias=False) + conv(c, c, 1, groups=groups, bias=False))


def psnr_closed_form(mse, data_range=1.0):
    return math.inf if mse == 0 else 10 * math.log10(data_range ** 2 / mse)
