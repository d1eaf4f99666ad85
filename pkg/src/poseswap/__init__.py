"""Pose-driven cross-species subject animation at desk scale.

A reference subject (one frame + mask) is aligned — background removed,
recentered, rescaled, detail-boosted — and encoded into identity tokens by a
prompt-tuned frozen vision transformer.  A small pixel-space video diffusion
model, conditioned on pose heatmaps, scene frames, and the extracted texture
through a zero-initialized control branch, then animates that subject with
pose sequences that may come from a different species.
"""

__version__ = "0.1.0"
