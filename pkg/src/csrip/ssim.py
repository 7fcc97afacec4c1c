"""Differentiable SSIM similarity map and the reconstruction losses."""
import numpy as np
import torch

from .filters import gaussian_kernel, gaussian_kernel_1d, separable_filter

WINDOW = 11
WINDOW_SIGMA = 1.5
DATA_RANGE = 255.0
K1, K2 = 0.01, 0.03
C1 = (K1 * DATA_RANGE) ** 2  # 6.5025
C2 = (K2 * DATA_RANGE) ** 2  # 58.5225

__all__ = ["gaussian_kernel", "ssim_map", "ssim_loss", "mse_loss", "mae_loss", "C1", "C2"]


def _as_tensor(x, like=None):
    if isinstance(x, torch.Tensor):
        return x
    dtype = like.dtype if isinstance(like, torch.Tensor) else torch.float64
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def _check_shapes(x, y):
    if tuple(x.shape) != tuple(y.shape):
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")


def ssim_map(x, x_hat):
    """Per-channel SSIM field on the valid region (border of 5 px removed).

    Accepts (3,H,W) or (N,3,H,W) arrays or tensors with values in [0, 255].
    """
    x = _as_tensor(x, x_hat)
    x_hat = _as_tensor(x_hat, x)
    _check_shapes(x, x_hat)
    if x.shape[-1] < WINDOW or x.shape[-2] < WINDOW:
        raise ValueError(f"images must be at least {WINDOW}x{WINDOW}")
    g = gaussian_kernel_1d(WINDOW, WINDOW_SIGMA)

    def blur(t):
        return separable_filter(t, g, padding=None)

    mu1, mu2 = blur(x), blur(x_hat)
    mu1_sq, mu2_sq, mu12 = mu1 * mu1, mu2 * mu2, mu1 * mu2
    s1 = blur(x * x) - mu1_sq
    s2 = blur(x_hat * x_hat) - mu2_sq
    s12 = blur(x * x_hat) - mu12
    num = (2 * mu12 + C1) * (2 * s12 + C2)
    den = (mu1_sq + mu2_sq + C1) * (s1 + s2 + C2)
    return num / den


def ssim_value(x, x_hat):
    """Mean SSIM per image: channel means of the valid map, averaged over channels."""
    m = ssim_map(x, x_hat)
    return m.mean(dim=(-1, -2)).mean(dim=-1)


def ssim_loss(x, x_hat):
    """0.5 * (1 - mean SSIM); batched inputs are averaged over the batch."""
    return 0.5 * (1.0 - ssim_value(x, x_hat).mean())


def mse_loss(x, x_hat):
    x = _as_tensor(x, x_hat)
    x_hat = _as_tensor(x_hat, x)
    _check_shapes(x, x_hat)
    return ((x - x_hat) ** 2).mean()


def mae_loss(x, x_hat):
    x = _as_tensor(x, x_hat)
    x_hat = _as_tensor(x_hat, x)
    _check_shapes(x, x_hat)
    return (x - x_hat).abs().mean()
