"""Non-style conditioning: keypoint rasters + guider, audio context windows."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn

from .errors import ContractError

KPS_COUNT = 8


def rasterize_kps(kps: np.ndarray, height: int, width: int,
                  radius_px: int = 2) -> np.ndarray:
    """(8,2) normalized (x,y) -> single-channel raster, discs of 1 on black.

    A point at (0.5, 0.5) on a 64x64 canvas lands on pixel (32, 32); the
    L2 disc of radius 2 lights 13 pixels. Overlaps saturate at 1.
    """
    if height < 2 * radius_px or width < 2 * radius_px:
        raise ContractError(f"raster {height}x{width} smaller than disc radius {radius_px}")
    kps = np.asarray(kps, dtype=np.float64)
    if kps.ndim != 2 or kps.shape[1] != 2:
        raise ContractError(f"expected (k,2) keypoints, got {kps.shape}")
    if kps.size and (kps.min() < 0.0 or kps.max() > 1.0):
        raise ContractError("keypoints must lie in [0,1] normalized coordinates")
    img = np.zeros((height, width), dtype=np.float32)
    rr = np.arange(height, dtype=np.float64)[:, None]
    cc = np.arange(width, dtype=np.float64)[None, :]
    for x, y in kps:
        px, py = x * width, y * height
        img[(cc - px) ** 2 + (rr - py) ** 2 <= radius_px ** 2] = 1.0
    return img


def window_audio(seq: np.ndarray, index: int, k: int) -> np.ndarray:
    """Rows index-k..index+k of (N,d), zero rows where out of range."""
    n, d = seq.shape
    if not (0 <= index < n):
        raise ContractError(f"frame index {index} outside [0, {n})")
    out = np.zeros((2 * k + 1, d), dtype=seq.dtype)
    lo, hi = max(0, index - k), min(n, index + k + 1)
    out[lo - (index - k):hi - (index - k)] = seq[lo:hi]
    return out


def window_audio_clip(seq: np.ndarray, k: int) -> np.ndarray:
    """(N,d) -> (N, 2k+1, d), one window per frame."""
    return np.stack([window_audio(seq, i, k) for i in range(seq.shape[0])])


class KpsGuider(nn.Module):
    """Lightweight conv encoder from a kps raster to latent-shaped features.

    The output is added to the latent before the denoiser, so the final
    projection is zero-initialized: early training is unaffected by kps.
    """

    def __init__(self, latent_channels: int, image_size: int, latent_size: int,
                 width: int = 16):
        super().__init__()
        if image_size % latent_size != 0:
            raise ContractError(f"image size {image_size} not a multiple of "
                                f"latent size {latent_size}")
        reduction = image_size // latent_size
        if reduction & (reduction - 1):
            raise ContractError(f"reduction {reduction} must be a power of two")
        layers = []
        ch = 1
        r = reduction
        for _ in range(3):
            stride = 2 if r > 1 else 1
            layers += [nn.Conv2d(ch, width, 3, stride=stride, padding=1), nn.SiLU()]
            ch = width
            r //= stride
        if r != 1:
            raise ContractError(f"reduction {reduction} needs more than 3 blocks")
        proj = nn.Conv2d(ch, latent_channels, 1)
        nn.init.zeros_(proj.weight)
        nn.init.zeros_(proj.bias)
        layers.append(proj)
        self.net = nn.Sequential(*layers)

    def forward(self, kps_img: torch.Tensor) -> torch.Tensor:
        if kps_img.dim() != 4 or kps_img.shape[1] != 1:
            raise ContractError(f"expected (B,1,H,W) raster, got {tuple(kps_img.shape)}")
        return self.net(kps_img)
