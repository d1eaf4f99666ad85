"""Pose conditioning: keypoint/skeleton heatmaps and the soft noise blend.

Pose enters the model through two independently disableable paths: dense
heatmaps fed to the control branch, and a soft constraint mixed into the
initial noise of the reverse diffusion process.  Heatmap layout is one
Gaussian channel per keypoint followed by a single anti-aliased skeleton
edge channel, so a K-keypoint species produces K+1 channels.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError
from .media import Keypoints


def _segment_distance(yy, xx, p0, p1):
    """Distance from each grid point to the segment p0-p1 (points are (x, y))."""
    dx, dy = p1[0] - p0[0], p1[1] - p0[1]
    len_sq = dx * dx + dy * dy
    if len_sq < 1e-12:
        return np.sqrt((xx - p0[0]) ** 2 + (yy - p0[1]) ** 2)
    t = ((xx - p0[0]) * dx + (yy - p0[1]) * dy) / len_sq
    t = np.clip(t, 0.0, 1.0)
    return np.sqrt((xx - (p0[0] + t * dx)) ** 2 + (yy - (p0[1] + t * dy)) ** 2)


def render_heatmaps(poses, skeleton_edges, height: int, width: int,
                    sigma_heat: float = 1.5) -> np.ndarray:
    """(T, K+1, H, W) Gaussian keypoint channels plus one skeleton channel.

    Visible keypoint k gets exp(-((x-x_k)^2 + (y-y_k)^2) / (2 sigma^2));
    invisible keypoints produce all-zero channels.  The edge channel is the
    max over unit-width anti-aliased segments between connected visible
    joints (coverage = clip(1 - distance, 0, 1)).
    """
    if height < 1 or width < 1:
        raise ShapeError("heatmap dimensions must be positive")
    t = len(poses)
    k = poses[0].k if isinstance(poses[0], Keypoints) else np.asarray(poses[0]).shape[0]
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    maps = np.zeros((t, k + 1, height, width))
    inv_two_sigma_sq = 1.0 / (2.0 * sigma_heat ** 2)
    for ti, kp in enumerate(poses):
        pts = kp.points if isinstance(kp, Keypoints) else np.asarray(kp, dtype=np.float64)
        if pts.shape != (k, 3):
            raise ShapeError(f"frame {ti}: keypoints must be ({k}, 3), got {pts.shape}")
        vis = pts[:, 2] > 0.5
        for j in range(k):
            if not vis[j]:
                continue
            x, y = pts[j, 0], pts[j, 1]
            maps[ti, j] = np.exp(-((xx - x) ** 2 + (yy - y) ** 2) * inv_two_sigma_sq)
        edge = np.zeros((height, width))
        for a, b in skeleton_edges:
            if vis[a] and vis[b]:
                d = _segment_distance(yy, xx, pts[a, :2], pts[b, :2])
                edge = np.maximum(edge, np.clip(1.0 - d, 0.0, 1.0))
        maps[ti, k] = edge
    return maps


def pad_pose_channels(maps: np.ndarray, max_keypoints: int) -> np.ndarray:
    """Zero-pad keypoint channels up to the model's budget; edge stays last.

    The renderer emits K+1 channels for the driving species; species with
    fewer keypoints than the model's `max_keypoints` get zero channels in
    the unused keypoint slots.
    """
    t, c, h, w = maps.shape
    k = c - 1
    if k > max_keypoints:
        raise ShapeError(f"pose source has K={k} > model budget {max_keypoints}")
    if k == max_keypoints:
        return maps
    out = np.zeros((t, max_keypoints + 1, h, w))
    out[:, :k] = maps[:, :k]
    out[:, -1] = maps[:, -1]
    return out


def soft_init(noise: np.ndarray, heatmaps: np.ndarray, soft_lambda: float,
              eps: float = 1e-8) -> np.ndarray:
    """Blend a pose summary into the initial noise, variance-preserving.

    s = per-frame channel mean of the heatmaps, standardized to zero mean
    and unit variance (eps guard keeps all-zero maps at exactly zero), then
    init = sqrt(1 - lambda) * noise + sqrt(lambda) * s broadcast over C.
    """
    if noise.shape[0] != heatmaps.shape[0] or noise.shape[-2:] != heatmaps.shape[-2:]:
        raise ShapeError(f"noise {noise.shape} and heatmaps {heatmaps.shape} disagree")
    s = heatmaps.mean(axis=1)  # (T, H, W)
    mean = s.mean(axis=(1, 2), keepdims=True)
    std = s.std(axis=(1, 2), keepdims=True)
    s = (s - mean) / (std + eps)
    return np.sqrt(1.0 - soft_lambda) * noise + np.sqrt(soft_lambda) * s[:, None]
