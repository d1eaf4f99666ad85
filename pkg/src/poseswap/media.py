"""Core value types, dataset manifest schema, and lossless asset I/O.

A dataset on disk is a directory with one JSON manifest plus, per clip, a
set of 8-bit PNG frame rasters, 8-bit PNG mask rasters, and one keypoint
text file (one line per frame, "x y v" triples, 6 decimal digits).  All
paths inside the manifest are relative to the manifest's directory.

Values are immutable after construction: array payloads are copied and
write-protected, so clips can be shared freely across threads.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import (CorruptAsset, InconsistentSpecies, IoError, MissingFile,
                     SchemaError, UnknownClip, ValidationError)

MANIFEST_VERSION = 1
MIN_SIDE = 8


def _frozen(arr: np.ndarray) -> np.ndarray:
    out = np.array(arr, dtype=np.float64, copy=True)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class Frame:
    """One RGB image: (H, W, 3) floats in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        px = _frozen(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValidationError(f"frame must be (H, W, 3), got {px.shape}")
        if px.shape[0] < MIN_SIDE or px.shape[1] < MIN_SIDE:
            raise ValidationError(f"frame sides must be >= {MIN_SIDE}, got {px.shape[:2]}")
        if not np.isfinite(px).all():
            raise ValidationError("frame contains non-finite values")
        if px.min() < 0.0 or px.max() > 1.0:
            raise ValidationError("frame values must lie in [0, 1]")
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class SubjectMask:
    """Soft foreground mask: (H, W) floats in [0, 1]."""

    mask: np.ndarray

    def __post_init__(self):
        m = _frozen(self.mask)
        if m.ndim != 2:
            raise ValidationError(f"mask must be (H, W), got {m.shape}")
        if not np.isfinite(m).all() or m.min() < 0.0 or m.max() > 1.0:
            raise ValidationError("mask values must be finite and in [0, 1]")
        object.__setattr__(self, "mask", m)

    @property
    def foreground_area(self) -> int:
        """Pixel count at the 0.5 threshold."""
        return int((self.mask >= 0.5).sum())


@dataclass(frozen=True)
class Keypoints:
    """Per-frame skeletal points: (K, 3) array of (x px, y px, visibility)."""

    points: np.ndarray

    def __post_init__(self):
        pts = _frozen(self.points)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValidationError(f"keypoints must be (K, 3), got {pts.shape}")
        if not np.isfinite(pts).all():
            raise ValidationError("keypoints contain non-finite values")
        vis = pts[:, 2]
        if not np.isin(vis, (0.0, 1.0)).all():
            raise ValidationError("visibility flags must be 0 or 1")
        object.__setattr__(self, "points", pts)

    @property
    def k(self) -> int:
        return self.points.shape[0]

    def visible(self) -> np.ndarray:
        return self.points[:, 2] > 0.5


@dataclass(frozen=True)
class VideoClip:
    """T frames with aligned masks and keypoints; the universal sample unit."""

    frames: tuple[Frame, ...]
    masks: tuple[SubjectMask, ...]
    poses: tuple[Keypoints, ...]
    species_id: str
    clip_id: str
    fps: float = 8.0

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(self.frames))
        object.__setattr__(self, "masks", tuple(self.masks))
        object.__setattr__(self, "poses", tuple(self.poses))
        t = len(self.frames)
        if t < 1:
            raise ValidationError("clip must contain at least one frame")
        if len(self.masks) != t or len(self.poses) != t:
            raise ValidationError("frames, masks, and poses must have equal length")
        h, w = self.frames[0].height, self.frames[0].width
        k = self.poses[0].k
        for fr, mk, kp in zip(self.frames, self.masks, self.poses):
            if (fr.height, fr.width) != (h, w) or mk.mask.shape != (h, w):
                raise ValidationError("clip frames/masks must share one resolution")
            if kp.k != k:
                raise ValidationError("keypoint count must be uniform across frames")
            vis = kp.visible()
            pts = kp.points
            if vis.any():
                x, y = pts[vis, 0], pts[vis, 1]
                if x.min() < 0 or x.max() > w - 1 or y.min() < 0 or y.max() > h - 1:
                    raise ValidationError("visible keypoints must lie within frame bounds")

    @property
    def t(self) -> int:
        return len(self.frames)

    @property
    def height(self) -> int:
        return self.frames[0].height

    @property
    def width(self) -> int:
        return self.frames[0].width

    @property
    def keypoint_count(self) -> int:
        return self.poses[0].k

    def frame_stack(self) -> np.ndarray:
        """(T, H, W, 3) pixel array."""
        return np.stack([f.pixels for f in self.frames])

    def mask_stack(self) -> np.ndarray:
        """(T, H, W) mask array."""
        return np.stack([m.mask for m in self.masks])

    def pose_stack(self) -> np.ndarray:
        """(T, K, 3) keypoint array."""
        return np.stack([p.points for p in self.poses])


@dataclass(frozen=True)
class SpeciesInfo:
    keypoint_count: int
    skeleton_edges: tuple[tuple[int, int], ...]


@dataclass(frozen=True)
class ClipRecord:
    clip_id: str
    species_id: str
    frame_paths: tuple[str, ...]
    mask_paths: tuple[str, ...]
    keypoint_path: str
    fps: float


@dataclass(frozen=True)
class DatasetManifest:
    version: int
    root: Path
    clips: tuple[ClipRecord, ...]
    species: dict[str, SpeciesInfo] = field(default_factory=dict)

    def clip_ids(self) -> list[str]:
        return [c.clip_id for c in self.clips]

    def record(self, clip_id: str) -> ClipRecord:
        for c in self.clips:
            if c.clip_id == clip_id:
                return c
        raise UnknownClip(f"clip id {clip_id!r} not in manifest")


# --- serialization helpers ---

def _quantize_u8(values: np.ndarray) -> np.ndarray:
    # Round-half-even quantization gives deterministic cross-platform bytes.
    return np.round(values * 255.0).astype(np.uint8)


def _write_png(path: Path, arr_u8: np.ndarray) -> None:
    mode = "RGB" if arr_u8.ndim == 3 else "L"
    Image.fromarray(arr_u8, mode=mode).save(path, format="PNG", optimize=False,
                                            compress_level=6)


def _read_png(path: Path, channels: int) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im = im.convert("RGB" if channels == 3 else "L")
            arr = np.asarray(im, dtype=np.uint8)
    except MemoryError:
        raise
    except Exception as e:
        raise CorruptAsset(f"cannot decode {path}: {e}") from e
    return arr.astype(np.float64) / 255.0


def format_keypoints(poses: tuple[Keypoints, ...] | list[Keypoints]) -> str:
    lines = []
    for kp in poses:
        lines.append(" ".join(f"{v:.6f}" for v in kp.points.ravel()))
    return "\n".join(lines) + "\n"


def parse_keypoints(text: str, path: Path | str = "<string>") -> list[Keypoints]:
    poses = []
    rows = [ln for ln in text.splitlines() if ln.strip()]
    if not rows:
        raise CorruptAsset(f"keypoint file {path} is empty")
    for ln in rows:
        tokens = ln.split()
        if len(tokens) % 3 != 0:
            raise CorruptAsset(f"keypoint file {path}: token count not a multiple of 3")
        try:
            vals = np.array([float(t) for t in tokens], dtype=np.float64)
        except ValueError as e:
            raise CorruptAsset(f"keypoint file {path}: non-numeric token") from e
        try:
            poses.append(Keypoints(vals.reshape(-1, 3)))
        except ValidationError as e:
            raise CorruptAsset(f"keypoint file {path}: {e}") from e
    if len({p.k for p in poses}) != 1:
        raise CorruptAsset(f"keypoint file {path}: keypoint count varies across lines")
    return poses


def _keypoint_count(path: Path) -> int:
    return parse_keypoints(path.read_text(), path)[0].k


# --- operations ---

def save_clip(clip: VideoClip, out_dir: str | Path,
              manifest_dir: str | Path | None = None) -> ClipRecord:
    """Write one clip's assets and return the record to splice into a manifest.

    Frames and masks are stored as deterministic 8-bit PNGs (floats quantized
    round-half-even), keypoints as fixed 6-decimal text.  Paths in the record
    are relative to `manifest_dir` (default: `out_dir`).
    """
    out_dir = Path(out_dir)
    manifest_dir = Path(manifest_dir) if manifest_dir is not None else out_dir
    for fr in clip.frames:  # re-validate defensively: arrays may have been unfrozen
        if not np.isfinite(fr.pixels).all():
            raise ValidationError("clip contains non-finite pixels")
    for mk in clip.masks:
        if not np.isfinite(mk.mask).all():
            raise ValidationError("clip contains non-finite mask values")
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        frame_paths, mask_paths = [], []
        for i, (fr, mk) in enumerate(zip(clip.frames, clip.masks)):
            fp = out_dir / f"frame_{i:03d}.png"
            mp = out_dir / f"mask_{i:03d}.png"
            _write_png(fp, _quantize_u8(fr.pixels))
            _write_png(mp, _quantize_u8(mk.mask))
            frame_paths.append(fp.relative_to(manifest_dir).as_posix())
            mask_paths.append(mp.relative_to(manifest_dir).as_posix())
        kp_path = out_dir / "keypoints.txt"
        kp_path.write_text(format_keypoints(clip.poses))
    except OSError as e:
        raise IoError(f"cannot write clip assets under {out_dir}: {e}") from e
    return ClipRecord(clip_id=clip.clip_id, species_id=clip.species_id,
                      frame_paths=tuple(frame_paths), mask_paths=tuple(mask_paths),
                      keypoint_path=(out_dir / "keypoints.txt").relative_to(manifest_dir).as_posix(),
                      fps=clip.fps)


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    doc = {
        "version": manifest.version,
        "clips": [{
            "clip_id": c.clip_id,
            "species_id": c.species_id,
            "frame_paths": list(c.frame_paths),
            "mask_paths": list(c.mask_paths),
            "keypoint_path": c.keypoint_path,
            "fps": c.fps,
        } for c in manifest.clips],
        "species": {
            sid: {"keypoint_count": info.keypoint_count,
                  "skeleton_edges": [list(e) for e in info.skeleton_edges]}
            for sid, info in manifest.species.items()
        },
    }
    try:
        Path(path).write_text(json.dumps(doc, indent=2) + "\n")
    except OSError as e:
        raise IoError(f"cannot write manifest {path}: {e}") from e


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise SchemaError(msg)


def load_manifest(path: str | Path) -> DatasetManifest:
    """Parse and eagerly validate a dataset manifest.

    Checks, in order: document schema and version, existence of every
    referenced file, per-clip list consistency, and agreement between each
    clip's keypoint count and its species entry.
    """
    path = Path(path)
    if not path.exists():
        raise MissingFile(f"manifest {path} does not exist")
    root = path.parent
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise SchemaError(f"manifest is not valid JSON: {e}") from e
    _require(isinstance(doc, dict), "manifest must be a JSON object")
    _require(doc.get("version") == MANIFEST_VERSION,
             f"manifest version must be {MANIFEST_VERSION}, got {doc.get('version')!r}")
    _require(isinstance(doc.get("clips"), list), "manifest.clips must be a list")
    _require(isinstance(doc.get("species"), dict), "manifest.species must be an object")

    species = {}
    for sid, entry in doc["species"].items():
        _require(isinstance(entry, dict), f"species {sid}: entry must be an object")
        _require(isinstance(entry.get("keypoint_count"), int) and entry["keypoint_count"] >= 1,
                 f"species {sid}: keypoint_count must be a positive integer")
        edges = entry.get("skeleton_edges")
        _require(isinstance(edges, list), f"species {sid}: skeleton_edges must be a list")
        k = entry["keypoint_count"]
        norm_edges = []
        for e in edges:
            _require(isinstance(e, list) and len(e) == 2 and all(isinstance(v, int) for v in e),
                     f"species {sid}: each edge must be a pair of integers")
            _require(0 <= e[0] < k and 0 <= e[1] < k,
                     f"species {sid}: edge {e} out of range for K={k}")
            norm_edges.append((e[0], e[1]))
        species[sid] = SpeciesInfo(keypoint_count=k, skeleton_edges=tuple(norm_edges))

    clips = []
    seen_ids = set()
    for rec in doc["clips"]:
        _require(isinstance(rec, dict), "each clip record must be an object")
        for key in ("clip_id", "species_id", "frame_paths", "mask_paths", "keypoint_path", "fps"):
            _require(key in rec, f"clip record missing field {key!r}")
        cid = rec["clip_id"]
        _require(isinstance(cid, str) and cid, "clip_id must be a non-empty string")
        _require(cid not in seen_ids, f"duplicate clip_id {cid!r}")
        seen_ids.add(cid)
        _require(isinstance(rec["frame_paths"], list) and isinstance(rec["mask_paths"], list),
                 f"clip {cid}: frame_paths/mask_paths must be lists")
        _require(len(rec["frame_paths"]) == len(rec["mask_paths"]) >= 1,
                 f"clip {cid}: frame and mask lists must be non-empty and equal length")
        _require(rec["species_id"] in species,
                 f"clip {cid}: unknown species {rec['species_id']!r}")
        _require(isinstance(rec["fps"], (int, float)) and rec["fps"] > 0,
                 f"clip {cid}: fps must be positive")

        for rel in [*rec["frame_paths"], *rec["mask_paths"], rec["keypoint_path"]]:
            _require(isinstance(rel, str), f"clip {cid}: paths must be strings")
            if not (root / rel).exists():
                raise MissingFile(f"clip {cid}: referenced asset {root / rel} is absent")

        k = _keypoint_count(root / rec["keypoint_path"])
        expected = species[rec["species_id"]].keypoint_count
        if k != expected:
            raise InconsistentSpecies(
                f"clip {cid}: keypoint file has K={k} but species "
                f"{rec['species_id']!r} declares K={expected}")

        clips.append(ClipRecord(clip_id=cid, species_id=rec["species_id"],
                                frame_paths=tuple(rec["frame_paths"]),
                                mask_paths=tuple(rec["mask_paths"]),
                                keypoint_path=rec["keypoint_path"], fps=float(rec["fps"])))

    return DatasetManifest(version=doc["version"], root=root,
                           clips=tuple(clips), species=species)


def load_clip(manifest: DatasetManifest, clip_id: str) -> VideoClip:
    """Decode one clip; raises UnknownClip / CorruptAsset."""
    rec = manifest.record(clip_id)
    root = manifest.root
    frames, masks = [], []
    for fp, mp in zip(rec.frame_paths, rec.mask_paths):
        frames.append(Frame(_read_png(root / fp, channels=3)))
        masks.append(SubjectMask(_read_png(root / mp, channels=1)))
    kp_file = root / rec.keypoint_path
    poses = parse_keypoints(kp_file.read_text(), kp_file)
    if len(poses) != len(frames):
        raise CorruptAsset(f"clip {clip_id}: keypoint file has {len(poses)} lines "
                           f"for {len(frames)} frames")
    expected_k = manifest.species[rec.species_id].keypoint_count
    if poses[0].k != expected_k:
        raise InconsistentSpecies(f"clip {clip_id}: K={poses[0].k} differs from "
                                  f"species K={expected_k}")
    try:
        return VideoClip(frames=tuple(frames), masks=tuple(masks), poses=tuple(poses),
                         species_id=rec.species_id, clip_id=clip_id, fps=rec.fps)
    except ValidationError as e:
        raise CorruptAsset(f"clip {clip_id}: decoded assets are inconsistent: {e}") from e


def held_out_split(manifest: DatasetManifest, fraction: float = 0.2) -> tuple[list[str], list[str]]:
    """Deterministic train/eval split: last `fraction` of clip ids, lexicographically."""
    ids = sorted(manifest.clip_ids())
    n_eval = max(1, math.floor(len(ids) * fraction)) if len(ids) > 1 else 0
    cut = len(ids) - n_eval
    return ids[:cut], ids[cut:]
