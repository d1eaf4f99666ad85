"""Differentiable torch twins of the numpy preprocessing ops.

The canonical definitions (and their oracles) live in `alignment`; these
versions implement the same arithmetic with torch tensors so the booster
parameters can train end-to-end through the identity-extractor and texture
paths.  Equality with the numpy reference is asserted in the test suite.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .alignment import BAND_SIGN_EPS, SOBEL_NORM, SOBEL_X, SOBEL_Y, gaussian_kernel


def resize_bilinear_t(img: torch.Tensor, out_h: int, out_w: int) -> torch.Tensor:
    """(C, H, W) -> (C, out_h, out_w), half-pixel-centered bilinear."""
    return F.interpolate(img.unsqueeze(0), size=(out_h, out_w), mode="bilinear",
                         align_corners=False).squeeze(0)


def gaussian_blur_t(img: torch.Tensor, kernel: torch.Tensor) -> torch.Tensor:
    """(C, H, W) Gaussian blur with reflect padding; kernel is (k, k)."""
    c = img.shape[0]
    k = kernel.shape[0]
    pad = k // 2
    weight = kernel.to(img.dtype).expand(c, 1, k, k)
    padded = F.pad(img.unsqueeze(0), (pad, pad, pad, pad), mode="reflect")
    return F.conv2d(padded, weight, groups=c).squeeze(0)


def band_sign_t(d: torch.Tensor) -> torch.Tensor:
    return torch.sign(d) * (d.abs() > BAND_SIGN_EPS).to(d.dtype)


class DetailBooster(nn.Module):
    """Trainable band-pass resizer; 2*bands scalar parameters.

    Forward mirrors `alignment.booster_forward` with clamp=False: the raw
    band recursion stays in the graph, and [0, 1] clamping happens only when
    an image is materialized for storage or display.  `enabled=False` pins
    the parameters at zero (plain bilinear resize) and removes them from the
    trainable set, which is the ablation's booster-off cell.
    """

    def __init__(self, bands: int = 2, out_size: int = 32, blur_size: int = 5,
                 blur_sigma: float = 1.0, enabled: bool = True):
        super().__init__()
        self.out_size = out_size
        self.enabled = enabled
        self.weights = nn.Parameter(torch.zeros(bands), requires_grad=enabled)
        self.biases = nn.Parameter(torch.zeros(bands), requires_grad=enabled)
        # kept in float64 and cast at the use site so a double() twin test
        # sees the exact numpy kernel values
        self.register_buffer("kernel", torch.from_numpy(gaussian_kernel(blur_size, blur_sigma)))

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        """(3, H, W) -> (3, out_size, out_size), unclamped."""
        y = resize_bilinear_t(img, self.out_size, self.out_size)
        for w, b in zip(self.weights, self.biases):
            d = y - gaussian_blur_t(y, self.kernel)
            y = y + w * d + b * band_sign_t(d)
        return y


def sobel_magnitude_t(img: torch.Tensor) -> torch.Tensor:
    """(C, H, W) per-channel Sobel magnitude normalized by 4*sqrt(2)."""
    c = img.shape[0]
    kx = torch.from_numpy(SOBEL_X).to(img.dtype).expand(c, 1, 3, 3)
    ky = torch.from_numpy(SOBEL_Y).to(img.dtype).expand(c, 1, 3, 3)
    padded = F.pad(img.unsqueeze(0), (1, 1, 1, 1), mode="reflect")
    gx = F.conv2d(padded, kx, groups=c)
    gy = F.conv2d(padded, ky, groups=c)
    return (torch.sqrt(gx ** 2 + gy ** 2 + 1e-24) / SOBEL_NORM).squeeze(0)


def sobel_texture_t(enhanced: torch.Tensor, mask_out: torch.Tensor) -> torch.Tensor:
    """Edge texture of the (3, S, S) enhanced reference, foreground-masked."""
    g = sobel_magnitude_t(enhanced)
    return g * enhanced * (mask_out >= 0.5).to(enhanced.dtype).unsqueeze(0)


def to_tensor(arr: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """Channels-last numpy image/stack -> channels-first torch tensor."""
    arr = np.asarray(arr)
    if arr.ndim == 3 and arr.shape[-1] == 3:
        arr = np.moveaxis(arr, -1, 0)
    elif arr.ndim == 4 and arr.shape[-1] == 3:
        arr = np.moveaxis(arr, -1, 1)
    return torch.from_numpy(np.ascontiguousarray(arr)).to(dtype)
