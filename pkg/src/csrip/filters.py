"""Gaussian kernels and channelwise filtering shared by the data pipeline and losses."""
import math

import numpy as np
import torch
import torch.nn.functional as F


def gaussian_kernel_1d(size, sigma):
    if size < 1 or size % 2 == 0:
        raise ValueError(f"kernel size must be odd and positive, got {size}")
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    r = size // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def gaussian_kernel(size, sigma):
    """Discrete 2-D Gaussian of shape (size, size) normalized to unit sum."""
    g = gaussian_kernel_1d(size, sigma)
    k = np.outer(g, g)
    return k / k.sum()


def taps_for_sigma(sigma):
    # covers +-3 sigma
    return 2 * math.ceil(3 * sigma) + 1


def _as_batch(x):
    if x.dim() == 3:
        return x.unsqueeze(0), True
    if x.dim() == 4:
        return x, False
    raise ValueError(f"expected (C,H,W) or (N,C,H,W), got shape {tuple(x.shape)}")


def separable_filter(x, taps, padding="reflect"):
    """Channelwise correlation of ``x`` with the outer product of a 1-D kernel.

    ``padding="reflect"`` keeps the spatial size; ``padding=None`` returns the
    valid region only.
    """
    xb, squeeze = _as_batch(x)
    c = xb.shape[1]
    taps = torch.as_tensor(np.asarray(taps), dtype=xb.dtype, device=xb.device)
    k = taps.numel()
    r = k // 2
    if padding is not None and r > 0:
        xb = F.pad(xb, (r, r, r, r), mode=padding)
    wh = taps.view(1, 1, 1, k).expand(c, 1, 1, k)
    wv = taps.view(1, 1, k, 1).expand(c, 1, k, 1)
    out = F.conv2d(F.conv2d(xb, wh, groups=c), wv, groups=c)
    return out.squeeze(0) if squeeze else out


def filter2d(x, kernel, padding="reflect"):
    """Channelwise correlation with a dense 2-D kernel (reflect or valid)."""
    xb, squeeze = _as_batch(x)
    c = xb.shape[1]
    kernel = torch.as_tensor(np.asarray(kernel), dtype=xb.dtype, device=xb.device)
    kh, kw = kernel.shape
    if padding is not None:
        xb = F.pad(xb, (kw // 2, kw // 2, kh // 2, kh // 2), mode=padding)
    w = kernel.view(1, 1, kh, kw).expand(c, 1, kh, kw)
    out = F.conv2d(xb, w, groups=c)
    return out.squeeze(0) if squeeze else out


def gaussian_blur(x, sigma, size=None):
    """Reflect-padded channelwise Gaussian smoothing (separable)."""
    size = taps_for_sigma(sigma) if size is None else size
    return separable_filter(x, gaussian_kernel_1d(size, sigma))
