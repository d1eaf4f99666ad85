"""Pipeline configuration: one versioned, JSON-serializable object.

Every hyperparameter of the pipeline lives here (resolutions, band counts,
token counts, schedules, stage settings) so a run is reproducible from the
config file plus a seed.  Loading is strict: unknown keys, missing keys, or
a wrong version are rejected rather than silently defaulted.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import SchemaError

CONFIG_VERSION = 1


@dataclass
class DataConfig:
    height: int = 32
    width: int = 56
    clip_len: int = 8
    n_clips: int = 40
    fps: float = 8.0


@dataclass
class AlignmentConfig:
    out_size: int = 32
    bands: int = 2
    flip_prob: float = 0.5
    blur_size: int = 5
    blur_sigma: float = 1.0
    margin: int = 2
    # Ablation toggle: off pins the booster to a plain bilinear resize
    # (parameters frozen at zero).
    booster_enabled: bool = True


@dataclass
class IdentityConfig:
    patch_size: int = 8
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0
    # Number of trainable prompt tokens; 0 disables prompt tuning.
    n_learn: int = 8


@dataclass
class PoseConfig:
    sigma_heat: float = 1.5
    soft_lambda: float = 0.3
    # The two independent injection paths, each disableable for ablation.
    use_soft_init: bool = True
    use_heatmap_conditioning: bool = True


@dataclass
class DenoiserConfig:
    base_channels: int = 32
    channel_mults: tuple[int, ...] = (1, 2, 4)
    attn_heads: int = 4
    norm_groups: int = 8
    # Keypoint-channel budget of the control branch; heatmap stacks from
    # species with fewer keypoints are zero-padded up to this count.
    max_keypoints: int = 17


@dataclass
class ScheduleConfig:
    t_steps: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02


@dataclass
class StageSettings:
    steps: int
    batch: int
    lr: float
    clip_len: int


@dataclass
class TrainConfig:
    stage1: StageSettings = field(
        default_factory=lambda: StageSettings(steps=300, batch=8, lr=2e-3, clip_len=1))
    stage2: StageSettings = field(
        default_factory=lambda: StageSettings(steps=200, batch=2, lr=2e-3, clip_len=8))
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    grad_clip: float = 1.0  # 0 disables clipping
    checkpoint_every: int = 100
    log_every: int = 1


@dataclass
class EvalConfig:
    sampler: str = "ddim"
    eval_clips: int = 2
    # Shorter runs for the 2x2 ablation grid (four full trainings).
    ablation_stage1_steps: int = 150
    ablation_stage2_steps: int = 80
    fg_threshold: float = 0.1


@dataclass
class PipelineConfig:
    version: int = CONFIG_VERSION
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    alignment: AlignmentConfig = field(default_factory=AlignmentConfig)
    identity: IdentityConfig = field(default_factory=IdentityConfig)
    pose: PoseConfig = field(default_factory=PoseConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> "PipelineConfig":
        if self.version != CONFIG_VERSION:
            raise SchemaError(f"unsupported config version {self.version}")
        d, a, i, p, n, s, t = (self.data, self.alignment, self.identity,
                               self.pose, self.denoiser, self.schedule, self.train)
        if d.height < 8 or d.width < 8:
            raise SchemaError("data.height/width must be >= 8")
        if d.clip_len < 1:
            raise SchemaError("data.clip_len must be >= 1")
        if a.out_size < 8:
            raise SchemaError("alignment.out_size must be >= 8")
        if a.bands < 1:
            raise SchemaError("alignment.bands must be >= 1")
        if not 0.0 <= a.flip_prob <= 1.0:
            raise SchemaError("alignment.flip_prob must be in [0, 1]")
        if a.out_size % i.patch_size != 0:
            raise SchemaError("alignment.out_size must be divisible by identity.patch_size")
        if i.embed_dim % i.heads != 0:
            raise SchemaError("identity.embed_dim must be divisible by identity.heads")
        if i.n_learn < 0:
            raise SchemaError("identity.n_learn must be >= 0")
        if not 0.0 <= p.soft_lambda < 1.0:
            raise SchemaError("pose.soft_lambda must be in [0, 1)")
        if s.t_steps < 1:
            raise SchemaError("schedule.t_steps must be >= 1")
        if not (0.0 < s.beta_start < 1.0 and 0.0 < s.beta_end < 1.0):
            raise SchemaError("schedule betas must lie in (0, 1)")
        if n.base_channels % n.norm_groups != 0:
            raise SchemaError("denoiser.base_channels must be divisible by norm_groups")
        for st in (t.stage1, t.stage2):
            if st.steps < 1 or st.batch < 1 or st.lr <= 0 or st.clip_len < 1:
                raise SchemaError("stage settings must be positive")
        if t.stage2.clip_len > d.clip_len:
            raise SchemaError("train.stage2.clip_len cannot exceed data.clip_len")
        if self.eval.sampler not in ("ddim", "ancestral"):
            raise SchemaError("eval.sampler must be 'ddim' or 'ancestral'")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def fingerprint(self) -> str:
        """Deterministic hash of the full configuration."""
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise SchemaError(f"{where}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise SchemaError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name in fields:
        if name not in data:
            continue  # fall back to the dataclass default
        value = data[name]
        if name in _NESTED:
            kwargs[name] = _build(_NESTED[name], value, f"{where}.{name}")
        elif name == "channel_mults":
            kwargs[name] = tuple(int(v) for v in value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


_NESTED = {
    "data": DataConfig,
    "alignment": AlignmentConfig,
    "identity": IdentityConfig,
    "pose": PoseConfig,
    "denoiser": DenoiserConfig,
    "schedule": ScheduleConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
    "stage1": StageSettings,
    "stage2": StageSettings,
}


def config_from_dict(data: dict) -> PipelineConfig:
    cfg = _build(PipelineConfig, data, "config")
    return cfg.validate()


def load_config(path: str | Path) -> PipelineConfig:
    """Load and validate a pipeline config; raises SchemaError on any mismatch."""
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise SchemaError(f"config is not valid JSON: {e}") from e
    return config_from_dict(data)


def default_config() -> PipelineConfig:
    return PipelineConfig().validate()
