"""Procedural articulated-creature clips with exact masks and keypoints.

Each species is a skeleton tree of capsule-shaped limbs.  Per-joint angle
trajectories theta_k(t) = a_k sin(w_k t + phi_k) + offset_k drive 2-D
forward kinematics; the renderer's own joint positions become the keypoint
annotations (no annotation noise), and the anti-aliased capsule coverage is
the mask.  Backgrounds are seeded gradients with soft blobs, kept away from
black so foreground/background separation stays meaningful.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import OutOfFrame, SpeciesMissing, ValidationError
from .media import (ClipRecord, DatasetManifest, Frame, Keypoints, SpeciesInfo,
                    SubjectMask, VideoClip, load_manifest, save_clip,
                    save_manifest)


@dataclass(frozen=True)
class SpeciesTemplate:
    """Skeleton + appearance description of one species.

    `skeleton_edges` must form a tree rooted at joint 0 (every child appears
    after its parent).  `limb_lengths`/`limb_widths`/`rest_angles` are
    indexed by child joint; entry 0 (the root) is unused.
    """

    name: str
    keypoint_count: int
    skeleton_edges: tuple[tuple[int, int], ...]
    limb_lengths: tuple[float, ...]
    limb_widths: tuple[float, ...]
    rest_angles: tuple[float, ...]
    palette: tuple[tuple[float, float, float], ...]
    pattern: str = "plain"  # plain | stripes | spots

    def __post_init__(self):
        k = self.keypoint_count
        if len(self.skeleton_edges) != k - 1:
            raise ValidationError("a tree over K joints needs exactly K-1 edges")
        seen = {0}
        for parent, child in self.skeleton_edges:
            if parent not in seen or child in seen or not (0 <= child < k):
                raise ValidationError("skeleton_edges must list a rooted tree in "
                                      "parent-before-child order")
            seen.add(child)
        if len(seen) != k:
            raise ValidationError("skeleton is not connected")
        for name in ("limb_lengths", "limb_widths", "rest_angles"):
            if len(getattr(self, name)) != k:
                raise ValidationError(f"{name} must have K entries (child-indexed)")
        if any(l <= 0 for l in self.limb_lengths[1:]):
            raise ValidationError("limb lengths must be positive")

    def scaled(self, factor: float) -> "SpeciesTemplate":
        return replace(self,
                       limb_lengths=tuple(l * factor for l in self.limb_lengths),
                       limb_widths=tuple(w * factor for w in self.limb_widths))

    def species_info(self) -> SpeciesInfo:
        return SpeciesInfo(keypoint_count=self.keypoint_count,
                           skeleton_edges=self.skeleton_edges)


@dataclass(frozen=True)
class MotionScript:
    """Per-joint sinusoidal angle trajectories plus a root translation path."""

    amplitudes: np.ndarray   # (K,) radians
    omegas: np.ndarray       # (K,) radians per frame
    phases: np.ndarray       # (K,)
    offsets: np.ndarray      # (K,)
    root_path: np.ndarray    # (T, 2) pixel positions (x, y)

    @property
    def t_frames(self) -> int:
        return self.root_path.shape[0]

    def angles(self, t: int) -> np.ndarray:
        return self.amplitudes * np.sin(self.omegas * t + self.phases) + self.offsets

    @classmethod
    def static(cls, template: SpeciesTemplate, t_frames: int, root_xy) -> "MotionScript":
        k = template.keypoint_count
        return cls(amplitudes=np.zeros(k), omegas=np.zeros(k), phases=np.zeros(k),
                   offsets=np.zeros(k),
                   root_path=np.tile(np.asarray(root_xy, dtype=np.float64), (t_frames, 1)))


def forward_kinematics(template: SpeciesTemplate, angles: np.ndarray,
                       root_xy: np.ndarray) -> np.ndarray:
    """Joint positions (K, 2) as (x, y); angles accumulate along the tree."""
    k = template.keypoint_count
    pos = np.zeros((k, 2))
    abs_angle = np.zeros(k)
    pos[0] = root_xy
    for parent, child in template.skeleton_edges:
        abs_angle[child] = abs_angle[parent] + template.rest_angles[child] + angles[child]
        length = template.limb_lengths[child]
        pos[child] = pos[parent] + length * np.array([math.cos(abs_angle[child]),
                                                      math.sin(abs_angle[child])])
    return pos


def _capsule_coverage(yy, xx, p0, p1, width):
    dx, dy = p1[0] - p0[0], p1[1] - p0[1]
    len_sq = dx * dx + dy * dy
    if len_sq < 1e-12:
        d = np.sqrt((xx - p0[0]) ** 2 + (yy - p0[1]) ** 2)
    else:
        t = np.clip(((xx - p0[0]) * dx + (yy - p0[1]) * dy) / len_sq, 0.0, 1.0)
        d = np.sqrt((xx - (p0[0] + t * dx)) ** 2 + (yy - (p0[1] + t * dy)) ** 2)
    return np.clip(width / 2.0 + 0.5 - d, 0.0, 1.0), (t if len_sq >= 1e-12 else None)


def _limb_color(template: SpeciesTemplate, child: int, along, shape,
                yy, xx) -> np.ndarray:
    base = np.array(template.palette[child % len(template.palette)])
    color = np.broadcast_to(base, shape + (3,)).copy()
    if template.pattern == "stripes" and along is not None:
        mod = 0.75 + 0.25 * np.sin(along * 6.0 * np.pi)
        color *= mod[..., None]
    elif template.pattern == "spots":
        # deterministic pseudo-random dots from pixel coordinates
        s = np.sin(xx * 12.9898 + yy * 78.233) * 43758.5453
        spots = (s - np.floor(s)) > 0.8
        color = np.where(spots[..., None], color * 0.55, color)
    return np.clip(color, 0.0, 1.0)


def render_creature(template: SpeciesTemplate, positions: np.ndarray,
                    height: int, width: int):
    """Rasterize one pose: returns (color (H, W, 3), coverage mask (H, W))."""
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    mask = np.zeros((height, width))
    color = np.zeros((height, width, 3))
    for parent, child in template.skeleton_edges:
        cov, along = _capsule_coverage(yy, xx, positions[parent], positions[child],
                                       template.limb_widths[child])
        limb_rgb = _limb_color(template, child, along, (height, width), yy, xx)
        # later limbs composite over earlier ones where they cover more
        take = cov > mask
        color = np.where(take[..., None], limb_rgb, color)
        mask = np.maximum(mask, cov)
    return color, mask


def render_background(bg_seed: int, height: int, width: int) -> np.ndarray:
    """Seeded gradient plus soft blobs, luminance kept inside [0.15, 0.9]."""
    rng = np.random.default_rng(bg_seed)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    base = np.array([rng.uniform(0.2, 0.8) for _ in range(3)])
    gy = rng.uniform(-0.3, 0.3, size=3)
    gx = rng.uniform(-0.3, 0.3, size=3)
    bg = base[None, None, :] + gy[None, None, :] * (yy / height)[..., None] \
        + gx[None, None, :] * (xx / width)[..., None]
    for _ in range(rng.integers(2, 5)):
        cy, cx = rng.uniform(0, height), rng.uniform(0, width)
        radius = rng.uniform(4, max(height, width) / 2)
        tint = rng.uniform(-0.15, 0.15, size=3)
        blob = np.exp(-(((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * radius ** 2)))
        bg += blob[..., None] * tint[None, None, :]
    return np.clip(bg, 0.15, 0.9)


def _check_in_frame(template, positions, height, width):
    for parent, child in template.skeleton_edges:
        margin = template.limb_widths[child] / 2.0 + 1.0
        for j in (parent, child):
            x, y = positions[j]
            if not (margin <= x <= width - 1 - margin and
                    margin <= y <= height - 1 - margin):
                raise OutOfFrame(f"joint {j} at ({x:.1f}, {y:.1f}) leaves the frame")


def generate_clip(template: SpeciesTemplate, script: MotionScript, t_frames: int,
                  height: int, width: int, bg_seed: int,
                  rng: np.random.Generator, clip_id: str = "clip",
                  fps: float = 8.0) -> VideoClip:
    """Render one clip; keypoints are the kinematics output itself."""
    if script.t_frames < t_frames:
        raise ValidationError("script is shorter than the requested clip")
    bg = render_background(bg_seed, height, width)
    frames, masks, poses = [], [], []
    for t in range(t_frames):
        positions = forward_kinematics(template, script.angles(t), script.root_path[t])
        _check_in_frame(template, positions, height, width)
        color, mask = render_creature(template, positions, height, width)
        composite = bg * (1.0 - mask[..., None]) + color * mask[..., None]
        frames.append(Frame(np.clip(composite, 0.0, 1.0)))
        masks.append(SubjectMask(mask))
        pts = np.concatenate([positions, np.ones((template.keypoint_count, 1))], axis=1)
        poses.append(Keypoints(pts))
    return VideoClip(frames=tuple(frames), masks=tuple(masks), poses=tuple(poses),
                     species_id=template.name, clip_id=clip_id, fps=fps)


def template_reach(template: SpeciesTemplate) -> float:
    """Max root-to-joint path length plus the widest capsule radius."""
    depth = np.zeros(template.keypoint_count)
    for parent, child in template.skeleton_edges:
        depth[child] = depth[parent] + template.limb_lengths[child]
    return float(depth.max() + max(template.limb_widths) / 2.0)


def random_script(template: SpeciesTemplate, rng: np.random.Generator,
                  t_frames: int, height: int, width: int,
                  max_tries: int = 60) -> MotionScript:
    """Sample a motion script whose whole trajectory stays in frame."""
    k = template.keypoint_count
    reach = template_reach(template)
    if 2 * (reach + 3) >= min(height, width):
        raise OutOfFrame(f"{template.name} (reach {reach:.1f} px) cannot fit a "
                         f"{height}x{width} frame")
    for _ in range(max_tries):
        script = MotionScript(
            amplitudes=rng.uniform(0.05, 0.35, size=k),
            omegas=rng.uniform(0.3, 1.2, size=k),
            phases=rng.uniform(0, 2 * np.pi, size=k),
            offsets=rng.uniform(-0.15, 0.15, size=k),
            root_path=_random_root_path(rng, t_frames, height, width, reach))
        try:
            for t in range(t_frames):
                positions = forward_kinematics(template, script.angles(t),
                                               script.root_path[t])
                _check_in_frame(template, positions, height, width)
            return script
        except OutOfFrame:
            continue
    raise OutOfFrame(f"could not keep {template.name} in a {height}x{width} frame "
                     f"after {max_tries} script samples")


def _random_root_path(rng, t_frames, height, width, reach):
    cx = rng.uniform(reach + 2, width - reach - 2)
    cy = rng.uniform(reach + 2, height - reach - 2)
    drift = rng.uniform(-0.6, 0.6, size=2)
    steps = np.arange(t_frames)[:, None] * drift[None, :]
    return np.stack([cx + steps[:, 0], cy + steps[:, 1]], axis=1)


def default_templates() -> tuple[SpeciesTemplate, SpeciesTemplate]:
    """Two species with the dataset's two keypoint counts (9 and 17)."""
    longbird = SpeciesTemplate(
        name="longbird", keypoint_count=9,
        skeleton_edges=((0, 1), (1, 2), (2, 3), (0, 4), (4, 5), (0, 6), (6, 7), (0, 8)),
        #               chest   head    beak    tailA   tailB   legA    legB    wing
        limb_lengths=(0.0, 3.0, 2.5, 1.5, 3.0, 2.5, 2.5, 2.0, 3.0),
        limb_widths=(0.0, 4.5, 3.0, 1.4, 2.6, 1.8, 1.4, 1.2, 2.2),
        rest_angles=(0.0, -0.5, -0.4, 0.1, 2.8, 0.3, 1.8, 0.4, -1.2),
        palette=((0.85, 0.55, 0.25), (0.9, 0.75, 0.35), (0.75, 0.4, 0.3)),
        pattern="stripes")
    quadro = SpeciesTemplate(
        name="quadro", keypoint_count=17,
        skeleton_edges=((0, 1), (1, 2), (2, 3), (0, 4), (4, 5),
                        (1, 6), (6, 7), (1, 8), (8, 9),
                        (0, 10), (10, 11), (0, 12), (12, 13),
                        (2, 14), (2, 15), (0, 16)),
        limb_lengths=(0.0, 3.6, 2.2, 1.4, 2.6, 1.9,
                      1.7, 1.7, 1.7, 1.7, 1.7, 1.7, 1.7, 1.7, 1.2, 1.2, 1.6),
        limb_widths=(0.0, 6.0, 3.4, 1.8, 2.6, 1.6,
                     1.6, 1.3, 1.6, 1.3, 1.6, 1.3, 1.6, 1.3, 1.1, 1.1, 4.2),
        rest_angles=(0.0, 0.0, -0.6, 0.5, 2.9, 0.4,
                     1.3, 0.3, 1.8, -0.3, 1.4, 0.3, 1.9, -0.3, -1.6, -2.2, 1.57),
        palette=((0.45, 0.6, 0.75), (0.55, 0.7, 0.6), (0.65, 0.6, 0.45)),
        pattern="spots")
    return longbird, quadro


def generate_dataset(n_clips: int, templates, seed: int, out_dir,
                     t_frames: int = 8, height: int = 32, width: int = 56,
                     fps: float = 8.0) -> DatasetManifest:
    """Round-robin species, deterministic for a fixed seed; returns the
    re-loaded (fully validated) manifest."""
    from pathlib import Path
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    records: list[ClipRecord] = []
    for i in range(n_clips):
        template = templates[i % len(templates)]
        clip_id = f"clip_{i:03d}"
        script = random_script(template, rng, t_frames, height, width)
        bg_seed = int(rng.integers(0, 2 ** 31))
        clip = generate_clip(template, script, t_frames, height, width,
                             bg_seed, rng, clip_id=clip_id, fps=fps)
        records.append(save_clip(clip, out_dir / clip_id, manifest_dir=out_dir))
    manifest = DatasetManifest(
        version=1, root=out_dir, clips=tuple(records),
        species={t.name: t.species_info() for t in templates})
    save_manifest(manifest, out_dir / "manifest.json")
    return load_manifest(out_dir / "manifest.json")


def make_crossspecies_pair(manifest: DatasetManifest, species_a: str,
                           species_b: str, rng: np.random.Generator):
    """Pick a reference clip of species_a and a driving clip of species_b.

    a == b is the intra-species control case.  The keypoint counts may
    differ; conditioning follows the driving species' K.
    """
    def clips_of(species):
        ids = [c.clip_id for c in manifest.clips if c.species_id == species]
        if not ids:
            raise SpeciesMissing(f"species {species!r} has no clips in the manifest")
        return ids

    ref_id = str(rng.choice(clips_of(species_a)))
    driver_id = str(rng.choice(clips_of(species_b)))
    meta = {
        "reference_clip": ref_id,
        "driver_clip": driver_id,
        "reference_k": manifest.species[species_a].keypoint_count,
        "driver_k": manifest.species[species_b].keypoint_count,
    }
    return ref_id, driver_id, meta
