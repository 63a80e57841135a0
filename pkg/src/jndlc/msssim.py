"""Differentiable multi-scale structural similarity."""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import Tensor

MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
WINDOW_SIZE = 11
WINDOW_SIGMA = 1.5
_C1 = 0.01**2
_C2 = 0.03**2


def min_size_for_scales(scales: int, window: int = WINDOW_SIZE) -> int:
    """Smallest image side that still fits the window at the coarsest scale."""
    return window * 2 ** (scales - 1)


def max_scales(height: int, width: int, window: int = WINDOW_SIZE) -> int:
    side = min(height, width)
    n = 0
    while n < len(MSSSIM_WEIGHTS) and side >= min_size_for_scales(n + 1, window):
        n += 1
    return n


def _gaussian_window(channels: int, dtype: torch.dtype, device) -> tuple[Tensor, Tensor]:
    coords = torch.arange(WINDOW_SIZE, dtype=dtype, device=device) - (WINDOW_SIZE - 1) / 2
    g = torch.exp(-(coords**2) / (2 * WINDOW_SIGMA**2))
    g = g / g.sum()
    return g.view(1, 1, 1, -1).repeat(channels, 1, 1, 1), g.view(1, 1, -1, 1).repeat(channels, 1, 1, 1)


def _blur(x: Tensor, wx: Tensor, wy: Tensor) -> Tensor:
    c = x.shape[1]
    return F.conv2d(F.conv2d(x, wx, groups=c), wy, groups=c)


def _ssim_terms(a: Tensor, b: Tensor, wx: Tensor, wy: Tensor) -> tuple[Tensor, Tensor]:
    """Per-image, per-channel mean SSIM and mean contrast-structure term."""
    mu_a = _blur(a, wx, wy)
    mu_b = _blur(b, wx, wy)
    mu_aa, mu_bb, mu_ab = mu_a * mu_a, mu_b * mu_b, mu_a * mu_b
    var_a = _blur(a * a, wx, wy) - mu_aa
    var_b = _blur(b * b, wx, wy) - mu_bb
    cov = _blur(a * b, wx, wy) - mu_ab
    cs_map = (2 * cov + _C2) / (var_a + var_b + _C2)
    ssim_map = (2 * mu_ab + _C1) / (mu_aa + mu_bb + _C1) * cs_map
    return ssim_map.flatten(2).mean(-1), cs_map.flatten(2).mean(-1)


def ms_ssim(a: Tensor, b: Tensor, scales: int | None = None) -> Tensor:
    """MS-SSIM of two image batches with peak value 1, averaged over batch and channels.

    With ``scales=None`` the scale count is the largest (up to 5) that the image
    size supports, and the exponents are renormalized to sum to one.  Asking
    for more scales than the size allows raises ``ValueError``.
    """
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    h, w = a.shape[-2:]
    available = max_scales(h, w)
    if scales is None:
        scales = available
        if scales == 0:
            raise ValueError(f"MS-SSIM needs images of at least {min_size_for_scales(1)} pixels per side, got {h}x{w}")
    elif scales > available:
        raise ValueError(
            f"{scales}-scale MS-SSIM needs images of at least {min_size_for_scales(scales)} pixels per side, got {h}x{w}"
        )
    weights = torch.tensor(MSSSIM_WEIGHTS[:scales], dtype=a.dtype, device=a.device)
    weights = weights / weights.sum()
    wx, wy = _gaussian_window(a.shape[1], a.dtype, a.device)
    factors = []
    for i in range(scales):
        ssim_val, cs = _ssim_terms(a, b, wx, wy)
        if i < scales - 1:
            factors.append(torch.relu(cs))
            a = F.avg_pool2d(a, 2)
            b = F.avg_pool2d(b, 2)
    factors.append(torch.relu(ssim_val))
    stack = torch.stack(factors, dim=0)
    value = torch.prod(stack ** weights.view(-1, 1, 1), dim=0)
    return value.mean()
