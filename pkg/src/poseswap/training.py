"""Two-stage optimization: freezing schedule, checkpoints, deterministic runs.

Stage 1 trains the spatial denoiser, control branch, prompt tokens, and
booster on single frames (temporal layers excluded; they are zero-init
identities anyway).  Stage 2 freezes everything else and trains only the
temporal layers on multi-frame windows.  All randomness flows through one
numpy Generator whose bit state is checkpointed, so save -> load -> step
reproduces continuous training bit-exactly.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import media
from .alignment import remove_scale
from .config import PipelineConfig, StageSettings
from .diffusion import (ConditioningBundle, Schedule, SubjectSwapModel,
                        training_loss)
from .errors import (ClipTooShort, CorruptCheckpoint, MissingStage1Checkpoint,
                     NonFiniteLoss, VersionMismatch)
from .media import DatasetManifest, VideoClip
from .pose import pad_pose_channels, render_heatmaps
from .torchops import resize_bilinear_t, to_tensor

CHECKPOINT_VERSION = 1

STAGE_GROUPS = {
    1: ("spatial", "control", "identity-prompt", "booster"),
    2: ("temporal",),
}


@dataclass
class TrainingExample:
    """One sample: reference crop plus a target window and its conditioning."""

    ref_index: int
    window_start: int
    flip_applied: bool
    canvas: np.ndarray        # (S, S, 3) centered reference crop
    canvas_mask: np.ndarray   # (S, S)
    target: np.ndarray        # (T', 3, H, W) clean frames
    scene: np.ndarray         # (T', 3, H, W) background with subject zeroed
    pose_maps: np.ndarray     # (T', P, H, W) padded heatmaps


@dataclass
class ReferencePacket:
    """Materialized reference conditioning (inference-time view)."""

    enhanced: np.ndarray      # (S_out, S_out, 3)
    texture: np.ndarray       # (S_out, S_out, 3)
    identity_tokens: np.ndarray  # (L, d)
    flip_applied: bool
    source_frame_index: int


@dataclass
class RunManifest:
    seed: int
    config_hash: str
    stage: int
    steps: int
    losses: list[float] = field(default_factory=list)
    checkpoint_path: str = ""
    wall_clock_s: float = 0.0
    measured: dict = field(default_factory=dict)

    def save(self, path: Path) -> None:
        path.write_text(json.dumps(self.__dict__, indent=2) + "\n")

    def final_loss(self, tail: int = 30) -> float:
        tail = min(tail, len(self.losses))
        return float(np.mean(self.losses[-tail:]))


def build_training_example(clip: VideoClip, rng: np.random.Generator,
                           cfg: PipelineConfig, skeleton_edges,
                           clip_len: int, flip_prob: float | None = None) -> TrainingExample:
    """Sample reference frame + target window and assemble conditioning.

    The reference is drawn uniformly from the whole clip (it may fall inside
    the target window); the window start is uniform over valid positions.
    """
    if clip.t < clip_len:
        raise ClipTooShort(f"clip {clip.clip_id} has {clip.t} < {clip_len} frames")
    flip_prob = cfg.alignment.flip_prob if flip_prob is None else flip_prob
    ref_index = int(rng.integers(0, clip.t))
    window_start = int(rng.integers(0, clip.t - clip_len + 1))
    canvas, canvas_mask, flipped = remove_scale(
        clip.frames[ref_index], clip.masks[ref_index], flip_prob, rng,
        min_margin=cfg.alignment.margin)

    window = slice(window_start, window_start + clip_len)
    frames = clip.frame_stack()[window]                      # (T', H, W, 3)
    masks = clip.mask_stack()[window]                        # (T', H, W)
    target = np.moveaxis(frames, -1, 1)
    scene = np.moveaxis(frames * (1.0 - masks[..., None]), -1, 1)
    maps = render_heatmaps(list(clip.poses[window]), skeleton_edges,
                           clip.height, clip.width, cfg.pose.sigma_heat)
    if not cfg.pose.use_heatmap_conditioning:
        maps = np.zeros_like(maps)
    maps = pad_pose_channels(maps, cfg.denoiser.max_keypoints)
    return TrainingExample(ref_index=ref_index, window_start=window_start,
                           flip_applied=flipped, canvas=canvas,
                           canvas_mask=canvas_mask, target=target,
                           scene=scene, pose_maps=maps)


def encode_references(model: SubjectSwapModel, examples: list[TrainingExample],
                      t_frames: int, height: int, width: int):
    """In-graph reference encoding for a batch: (identity (B, L, d), texture (B, T', 3, H, W))."""
    tokens, textures = [], []
    for ex in examples:
        canvas = to_tensor(ex.canvas)
        canvas_mask = torch.from_numpy(ex.canvas_mask).float()
        _, texture, tok = model.encode_reference(canvas, canvas_mask)
        tokens.append(tok)
        textures.append(resize_bilinear_t(texture, height, width))
    identity = torch.stack(tokens)
    texture = torch.stack(textures).unsqueeze(1).expand(-1, t_frames, -1, -1, -1)
    return identity, texture


def assemble_batch(model: SubjectSwapModel, examples: list[TrainingExample]):
    """Returns (x0, ConditioningBundle) for a homogeneous example batch."""
    x0 = torch.from_numpy(np.stack([ex.target for ex in examples])).float()
    t_frames, height, width = x0.shape[1], x0.shape[3], x0.shape[4]
    identity, texture = encode_references(model, examples, t_frames, height, width)
    bundle = ConditioningBundle(
        pose=torch.from_numpy(np.stack([ex.pose_maps for ex in examples])).float(),
        scene=torch.from_numpy(np.stack([ex.scene for ex in examples])).float(),
        texture=texture,
        identity=identity)
    return x0, bundle


def materialize_packet(model: SubjectSwapModel, example: TrainingExample) -> ReferencePacket:
    """Reference packet with current parameters (no gradients)."""
    with torch.no_grad():
        enhanced, texture, tokens = model.encode_reference(
            to_tensor(example.canvas), torch.from_numpy(example.canvas_mask).float())
    return ReferencePacket(
        enhanced=np.clip(np.moveaxis(enhanced.numpy(), 0, -1), 0.0, 1.0),
        texture=np.clip(np.moveaxis(texture.numpy(), 0, -1), 0.0, 1.0),
        identity_tokens=tokens.numpy(),
        flip_applied=example.flip_applied,
        source_frame_index=example.ref_index)


# --- freezing / checkpoints ---

def configure_stage(model: SubjectSwapModel, stage: int) -> list[torch.nn.Parameter]:
    """Set requires_grad so exactly the stage's groups train; returns them.

    Permanently frozen tensors (identity backbone; booster when disabled)
    stay frozen even inside a trainable group.
    """
    if stage not in STAGE_GROUPS:
        raise ValueError(f"unknown stage {stage}")
    active = set(STAGE_GROUPS[stage])
    frozen = model.frozen_flags()
    trainable = []
    for group_name, group in model.parameter_groups().items():
        for name, p in group.items():
            p.requires_grad = (group_name in active) and not frozen[name]
            if p.requires_grad:
                trainable.append(p)
    return trainable


def _storage_key(model: SubjectSwapModel) -> dict[str, str]:
    """Parameter name -> namespaced checkpoint key (unet./temporal./control./identity./booster.)."""
    mapping = {}
    for group_name, group in model.parameter_groups().items():
        for name in group:
            if group_name == "temporal":
                mapping[name] = "temporal." + name.removeprefix("unet.")
            elif group_name == "spatial":
                mapping[name] = name  # already unet.*
            elif group_name == "identity-prompt":
                mapping[name] = name  # identity.*
            else:
                mapping[name] = name  # control.* / booster.*
    return mapping


def save_checkpoint(model: SubjectSwapModel, path: str | Path, stage: int,
                    schedule: Schedule, optimizer=None,
                    np_rng: np.random.Generator | None = None) -> None:
    mapping = _storage_key(model)
    params = dict(model.named_parameters())
    frozen = model.frozen_flags()
    groups = {g: sorted(mapping[n] for n in members)
              for g, members in model.parameter_groups().items()}
    blob = {
        "version": CHECKPOINT_VERSION,
        "stage": stage,
        "tensors": {mapping[n]: p.detach().clone() for n, p in params.items()},
        "frozen": {mapping[n]: frozen[n] for n in params},
        "groups": groups,
        "schedule": schedule.state(),
        "config": model.cfg.to_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "rng_numpy": np_rng.bit_generator.state if np_rng is not None else None,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(blob, path)


def read_checkpoint(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise CorruptCheckpoint(f"checkpoint {path} does not exist")
    try:
        blob = torch.load(path, weights_only=False)
    except Exception as e:
        raise CorruptCheckpoint(f"cannot restore checkpoint {path}: {e}") from e
    if not isinstance(blob, dict) or "version" not in blob:
        raise CorruptCheckpoint(f"checkpoint {path} has no version field")
    if blob["version"] != CHECKPOINT_VERSION:
        raise VersionMismatch(f"checkpoint version {blob['version']} is not "
                              f"{CHECKPOINT_VERSION}")
    return blob


def model_from_checkpoint(path: str | Path):
    """Rebuild (model, cfg, schedule) from a checkpoint's own stored config."""
    from .config import config_from_dict
    blob = read_checkpoint(path)
    cfg = config_from_dict(blob["config"])
    model = SubjectSwapModel(cfg)
    load_checkpoint(path, model)
    schedule = Schedule(**blob["schedule"])
    return model, cfg, schedule


def load_checkpoint(path: str | Path, model: SubjectSwapModel) -> dict:
    """Restore parameters into `model`; returns the raw blob for extras."""
    blob = read_checkpoint(path)
    mapping = _storage_key(model)
    tensors = blob["tensors"]
    missing = set(mapping.values()) - set(tensors)
    unexpected = set(tensors) - set(mapping.values())
    if missing or unexpected:
        raise CorruptCheckpoint(f"checkpoint tensor set mismatch: missing "
                                f"{sorted(missing)[:3]}, unexpected {sorted(unexpected)[:3]}")
    params = dict(model.named_parameters())
    with torch.no_grad():
        for name, key in mapping.items():
            if params[name].shape != tensors[key].shape:
                raise CorruptCheckpoint(f"tensor {key} has shape "
                                        f"{tuple(tensors[key].shape)}, expected "
                                        f"{tuple(params[name].shape)}")
            params[name].copy_(tensors[key])
    return blob


def training_step(model: SubjectSwapModel, optimizer, trainable, cache: "ClipCache",
                  ids: list[str], edges: dict, cfg: PipelineConfig,
                  settings: StageSettings, schedule: Schedule,
                  rng: np.random.Generator) -> float:
    """One optimizer step; all randomness comes from `rng` in a fixed order."""
    batch_ids = [ids[int(i)] for i in rng.integers(0, len(ids), size=settings.batch)]
    examples = []
    for cid in batch_ids:
        clip = cache.get(cid)
        examples.append(build_training_example(
            clip, rng, cfg, edges[clip.species_id], settings.clip_len))
    x0, bundle = assemble_batch(model, examples)
    optimizer.zero_grad(set_to_none=True)
    loss = training_loss(model, x0, bundle, schedule, rng)
    loss.backward()
    if cfg.train.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(trainable, cfg.train.grad_clip)
    optimizer.step()
    value = float(loss.detach())
    if not np.isfinite(value):
        raise NonFiniteLoss(f"loss became {value}")
    return value


def restore_rng(state: dict) -> np.random.Generator:
    rng = np.random.default_rng()
    rng.bit_generator.state = state
    return rng


class ClipCache:
    """Decode each clip once; values are immutable and safely shareable."""

    def __init__(self, manifest: DatasetManifest):
        self.manifest = manifest
        self._cache: dict[str, VideoClip] = {}

    def get(self, clip_id: str) -> VideoClip:
        if clip_id not in self._cache:
            self._cache[clip_id] = media.load_clip(self.manifest, clip_id)
        return self._cache[clip_id]


def train_stage(manifest: DatasetManifest, model: SubjectSwapModel,
                cfg: PipelineConfig, stage: int, rng: np.random.Generator,
                out_dir: str | Path, clip_ids: list[str] | None = None,
                stage1_checkpoint: str | Path | None = None,
                stage_settings: StageSettings | None = None) -> RunManifest:
    """Run one optimization stage; writes checkpoints, loss log, run manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    settings = stage_settings or (cfg.train.stage1 if stage == 1 else cfg.train.stage2)

    if stage == 2:
        if stage1_checkpoint is None or not Path(stage1_checkpoint).exists():
            raise MissingStage1Checkpoint(
                f"stage 2 requires a stage-1 checkpoint, got {stage1_checkpoint!r}")
        blob = load_checkpoint(stage1_checkpoint, model)
        if blob["stage"] != 1:
            raise MissingStage1Checkpoint(
                f"{stage1_checkpoint} holds a stage-{blob['stage']} checkpoint")

    trainable = configure_stage(model, stage)
    optimizer = torch.optim.AdamW(trainable, lr=settings.lr,
                                  betas=(cfg.train.beta1, cfg.train.beta2),
                                  weight_decay=cfg.train.weight_decay)
    schedule = Schedule.from_config(cfg)
    cache = ClipCache(manifest)
    ids = clip_ids if clip_ids is not None else [c.clip_id for c in manifest.clips]
    edges = {sid: info.skeleton_edges for sid, info in manifest.species.items()}

    run = RunManifest(seed=cfg.seed, config_hash=cfg.fingerprint(), stage=stage,
                      steps=settings.steps)
    ckpt_path = out_dir / f"stage{stage}.pt"
    loss_rows = ["step,loss"]
    started = time.monotonic()
    model.train()
    for step in range(settings.steps):
        value = training_step(model, optimizer, trainable, cache, ids, edges,
                              cfg, settings, schedule, rng)
        run.losses.append(value)
        loss_rows.append(f"{step},{value:.8f}")
        if cfg.train.checkpoint_every > 0 and (step + 1) % cfg.train.checkpoint_every == 0:
            save_checkpoint(model, ckpt_path, stage, schedule, optimizer, rng)

    save_checkpoint(model, ckpt_path, stage, schedule, optimizer, rng)
    run.checkpoint_path = str(ckpt_path)
    run.wall_clock_s = time.monotonic() - started
    run.measured["final_loss"] = run.final_loss()
    (out_dir / f"stage{stage}_loss.csv").write_text("\n".join(loss_rows) + "\n")
    run.save(out_dir / f"stage{stage}_run.json")
    return run


def train_two_stages(manifest: DatasetManifest, cfg: PipelineConfig,
                     out_dir: str | Path, clip_ids: list[str] | None = None,
                     stage1_settings: StageSettings | None = None,
                     stage2_settings: StageSettings | None = None,
                     model: SubjectSwapModel | None = None):
    """Full training recipe; returns (model, stage1 RunManifest, stage2 RunManifest)."""
    out_dir = Path(out_dir)
    model = model or SubjectSwapModel(cfg)
    rng = np.random.default_rng(cfg.seed)
    run1 = train_stage(manifest, model, cfg, 1, rng, out_dir, clip_ids,
                       stage_settings=stage1_settings)
    run2 = train_stage(manifest, model, cfg, 2, rng, out_dir, clip_ids,
                       stage1_checkpoint=run1.checkpoint_path,
                       stage_settings=stage2_settings)
    return model, run1, run2
