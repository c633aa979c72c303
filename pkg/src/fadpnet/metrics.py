"""Pixel loss and fidelity metrics."""

import math

import numpy as np
import torch
import torch.nn.functional as F


def _check_shapes(a, b):
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def l1_loss(sr, hr):
    _check_shapes(sr, hr)
    return (sr - hr).abs().mean()


def _as_tensor(x):
    if isinstance(x, torch.Tensor):
        return x.detach().double()
    return torch.as_tensor(np.asarray(x), dtype=torch.float64)


def psnr(sr, hr, data_range=1.0):
    """PSNR in dB; identical inputs give ``math.inf``."""
    sr, hr = _as_tensor(sr), _as_tensor(hr)
    _check_shapes(sr, hr)
    mse = float(((sr - hr) ** 2).mean())
    if mse == 0:
        return math.inf
    return 10 * math.log10(data_range**2 / mse)


def rgb_to_y(img):
    """BT.601 luma (studio swing) of a channel-first RGB image in [0, 1]."""
    img = _as_tensor(img)
    r, g, b = img.unbind(-3)
    return (16.0 + 65.481 * r + 128.553 * g + 24.966 * b) / 255.0


def psnr_y(sr, hr):
    return psnr(rgb_to_y(sr), rgb_to_y(hr))


def gaussian_window(size=11, sigma=1.5):
    ax = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-(ax**2) / (2 * sigma**2))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim_map(x, y, data_range=1.0, win=11, sigma=1.5, k1=0.01, k2=0.03):
    """Per-window SSIM of two (H, W) or (N, H, W) single-channel images ('valid' windows)."""
    x, y = _as_tensor(x), _as_tensor(y)
    _check_shapes(x, y)
    if min(x.shape[-2:]) < win:
        raise ValueError(f"SSIM needs images of at least {win}x{win}, got {tuple(x.shape[-2:])}")
    x = x.reshape(-1, 1, *x.shape[-2:])
    y = y.reshape(-1, 1, *y.shape[-2:])
    w = gaussian_window(win, sigma)[None, None]
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    mx, my = F.conv2d(x, w), F.conv2d(y, w)
    sxx = F.conv2d(x * x, w) - mx * mx
    syy = F.conv2d(y * y, w) - my * my
    sxy = F.conv2d(x * y, w) - mx * my
    return ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx**2 + my**2 + c1) * (sxx + syy + c2))


def ssim(sr, hr, data_range=1.0):
    """SSIM on the luma channel of RGB inputs (C=3), or directly on 1-channel input."""
    sr, hr = _as_tensor(sr), _as_tensor(hr)
    _check_shapes(sr, hr)
    if sr.dim() >= 3 and sr.shape[-3] == 3:
        sr, hr = rgb_to_y(sr), rgb_to_y(hr)
    return float(ssim_map(sr, hr, data_range).mean())


def per_image_metrics(sr, hr):
    """Metrics for each item of an (N, 3, H, W) batch: list of (psnr_rgb, ssim_y, psnr_y)."""
    return [(psnr(a, b), ssim(a, b), psnr_y(a, b)) for a, b in zip(sr, hr)]
