"""Conditional video denoiser: UNet + zero-init control branch + samplers.

Architecture notes:
- Pixel-space epsilon-prediction DDPM on (B, T, 3, H, W) frame stacks with a
  linear beta schedule.  Spatial layers fold T into the batch; temporal
  attention folds H*W into the batch and attends across T at each location.
- Identity tokens are the cross-attention context in every resolution block
  (any context length >= 1 works).
- The control branch is a copy of the encoder tower run over the stacked
  conditioning maps (pose heatmaps, scene frames, texture); its features are
  added to the encoder features through zero-initialized 1x1 projections, so
  a fresh model ignores conditioning entirely.
- Every temporal attention block ends in a zero-initialized projection with
  a residual add, so a fresh video model reproduces its per-frame image
  model exactly.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import PipelineConfig
from .errors import NonFiniteLoss, RangeError, ShapeError
from .identity import IdentityExtractor
from .torchops import DetailBooster, resize_bilinear_t, sobel_texture_t


class Schedule:
    """Linear beta schedule with derived alphas and alpha-bar products."""

    def __init__(self, t_steps: int = 100, beta_start: float = 1e-4,
                 beta_end: float = 0.02):
        if t_steps < 1:
            raise RangeError("t_steps must be >= 1")
        self.t_steps = t_steps
        self.beta_start = float(beta_start)
        self.beta_end = float(beta_end)
        self.betas = np.linspace(beta_start, beta_end, t_steps, dtype=np.float64)
        if self.betas.min() <= 0.0 or self.betas.max() >= 1.0:
            raise RangeError("betas must lie strictly inside (0, 1)")
        self.alphas = 1.0 - self.betas
        self.alpha_bars = np.cumprod(self.alphas)

    @classmethod
    def from_config(cls, cfg: PipelineConfig) -> "Schedule":
        return cls(cfg.schedule.t_steps, cfg.schedule.beta_start, cfg.schedule.beta_end)

    def state(self) -> dict:
        return {"t_steps": self.t_steps, "beta_start": self.beta_start,
                "beta_end": self.beta_end}


def q_sample(x0: torch.Tensor, t: torch.Tensor, eps: torch.Tensor,
             schedule: Schedule) -> torch.Tensor:
    """Forward process: x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps."""
    t = torch.as_tensor(t, dtype=torch.long)
    if t.dim() == 0:
        t = t.expand(x0.shape[0])
    if int(t.min()) < 0 or int(t.max()) >= schedule.t_steps:
        raise RangeError(f"timestep out of range [0, {schedule.t_steps})")
    ab = torch.from_numpy(schedule.alpha_bars).to(x0.dtype)[t]
    shape = (x0.shape[0],) + (1,) * (x0.dim() - 1)
    return ab.sqrt().view(shape) * x0 + (1.0 - ab).sqrt().view(shape) * eps


# --- building blocks ---

def zero_module(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        nn.init.zeros_(p)
    return module


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10_000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, temb_dim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.temb_proj = nn.Linear(temb_dim, out_ch)
        self.norm2 = nn.GroupNorm(groups, out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb_proj(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class SelfAttention2d(nn.Module):
    def __init__(self, channels: int, heads: int, groups: int):
        super().__init__()
        self.heads = heads
        self.norm = nn.GroupNorm(groups, channels)
        self.qkv = nn.Conv2d(channels, channels * 3, 1)
        self.proj = zero_module(nn.Conv2d(channels, channels, 1))

    def forward(self, x):
        b, c, h, w = x.shape
        qkv = self.qkv(self.norm(x)).reshape(b, 3, self.heads, c // self.heads, h * w)
        q, k, v = qkv.unbind(1)
        scale = (c // self.heads) ** -0.5
        attn = torch.softmax(q.transpose(-2, -1) @ k * scale, dim=-1)
        out = (v @ attn.transpose(-2, -1)).reshape(b, c, h, w)
        return x + self.proj(out)


class CrossAttention2d(nn.Module):
    """Spatial positions attend to the identity token sequence."""

    def __init__(self, channels: int, context_dim: int, heads: int, groups: int):
        super().__init__()
        self.heads = heads
        self.norm = nn.GroupNorm(groups, channels)
        self.to_q = nn.Conv2d(channels, channels, 1)
        self.to_k = nn.Linear(context_dim, channels)
        self.to_v = nn.Linear(context_dim, channels)
        self.proj = zero_module(nn.Conv2d(channels, channels, 1))

    def forward(self, x, context):
        # x: (B*, C, H, W); context: (B*, L, d)
        b, c, h, w = x.shape
        dh = c // self.heads
        q = self.to_q(self.norm(x)).reshape(b, self.heads, dh, h * w)
        k = self.to_k(context).reshape(b, -1, self.heads, dh).permute(0, 2, 3, 1)
        v = self.to_v(context).reshape(b, -1, self.heads, dh).permute(0, 2, 3, 1)
        attn = torch.softmax(q.transpose(-2, -1) @ k * dh ** -0.5, dim=-1)
        out = (v @ attn.transpose(-2, -1)).reshape(b, c, h, w)
        return x + self.proj(out)


class TemporalAttention(nn.Module):
    """Attention across the frame axis at each spatial location.

    The output projection is zero-initialized and the block is residual, so
    at fresh initialization it is exactly the identity.
    """

    def __init__(self, channels: int, heads: int):
        super().__init__()
        self.heads = heads
        self.norm = nn.LayerNorm(channels)
        self.qkv = nn.Linear(channels, channels * 3)
        self.proj = zero_module(nn.Linear(channels, channels))

    def forward(self, x):
        # x: (B, T, C, H, W) -> attend over T per (b, h, w)
        b, t, c, h, w = x.shape
        tokens = x.permute(0, 3, 4, 1, 2).reshape(b * h * w, t, c)
        pos = timestep_embedding(torch.arange(t), c).to(tokens.dtype)
        y = self.norm(tokens) + pos[None]
        qkv = self.qkv(y).reshape(b * h * w, t, 3, self.heads, c // self.heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4).unbind(0)
        scale = (c // self.heads) ** -0.5
        attn = torch.softmax(q @ k.transpose(-2, -1) * scale, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b * h * w, t, c)
        out = self.proj(out)
        out = out.reshape(b, h, w, t, c).permute(0, 3, 4, 1, 2)
        return x + out


class Downsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


def _fold(x):
    b, t = x.shape[:2]
    return x.reshape(b * t, *x.shape[2:]), b, t


def _unfold(x, b, t):
    return x.reshape(b, t, *x.shape[1:])


class EncoderLevel(nn.Module):
    def __init__(self, in_ch, out_ch, temb_dim, context_dim, heads, groups,
                 self_attn: bool, temporal: bool):
        super().__init__()
        self.res = ResBlock(in_ch, out_ch, temb_dim, groups)
        self.cross = CrossAttention2d(out_ch, context_dim, heads, groups)
        self.self_attn = SelfAttention2d(out_ch, heads, groups) if self_attn else None
        self.temporal = TemporalAttention(out_ch, heads) if temporal else None


class DecoderLevel(nn.Module):
    def __init__(self, in_ch, out_ch, temb_dim, context_dim, heads, groups,
                 temporal: bool):
        super().__init__()
        self.res = ResBlock(in_ch, out_ch, temb_dim, groups)
        self.cross = CrossAttention2d(out_ch, context_dim, heads, groups)
        self.temporal = TemporalAttention(out_ch, heads) if temporal else None


class VideoUNet(nn.Module):
    """Epsilon predictor over (B, T, 3, H, W) with per-scale control fusion."""

    def __init__(self, in_channels: int = 3, base_channels: int = 32,
                 channel_mults: tuple[int, ...] = (1, 2, 4), context_dim: int = 64,
                 heads: int = 4, groups: int = 8):
        super().__init__()
        self.channels = [base_channels * m for m in channel_mults]
        temb_dim = base_channels * 4
        self.time_mlp = nn.Sequential(
            nn.Linear(base_channels, temb_dim), nn.SiLU(), nn.Linear(temb_dim, temb_dim))
        self.base_channels = base_channels
        self.stem = nn.Conv2d(in_channels, base_channels, 3, padding=1)

        deepest = len(self.channels) - 1
        enc, downs = [], []
        prev = base_channels
        for i, ch in enumerate(self.channels):
            enc.append(EncoderLevel(prev, ch, temb_dim, context_dim, heads, groups,
                                    self_attn=(i == deepest), temporal=True))
            downs.append(Downsample(ch) if i < deepest else None)
            prev = ch
        self.encoder = nn.ModuleList(enc)
        self.downs = nn.ModuleList([d for d in downs if d is not None])

        ch = self.channels[-1]
        self.mid_res1 = ResBlock(ch, ch, temb_dim, groups)
        self.mid_self = SelfAttention2d(ch, heads, groups)
        self.mid_cross = CrossAttention2d(ch, context_dim, heads, groups)
        self.mid_temporal = TemporalAttention(ch, heads)
        self.mid_res2 = ResBlock(ch, ch, temb_dim, groups)

        dec, ups = [], []
        rev = list(reversed(self.channels))
        prev = rev[0]
        for i, ch in enumerate(rev):
            dec.append(DecoderLevel(prev + ch, ch, temb_dim, context_dim, heads,
                                    groups, temporal=True))
            ups.append(Upsample(ch) if i < deepest else None)
            prev = ch
        self.decoder = nn.ModuleList(dec)
        self.ups = nn.ModuleList([u for u in ups if u is not None])

        self.out_norm = nn.GroupNorm(groups, base_channels + self.channels[0])
        self.out_conv = zero_module(nn.Conv2d(base_channels + self.channels[0],
                                              in_channels, 3, padding=1))

    def forward(self, x: torch.Tensor, t: torch.Tensor, context: torch.Tensor,
                control: list[torch.Tensor] | None = None) -> torch.Tensor:
        """x: (B, T, C, H, W); t: (B,) long; context: (B, L, d);
        control: per-scale residuals [(B, T, ch_i, h_i, w_i)] or None."""
        b, t_frames = x.shape[:2]
        temb = self.time_mlp(timestep_embedding(t, self.base_channels))
        temb_f = temb.repeat_interleave(t_frames, dim=0)
        ctx_f = context.repeat_interleave(t_frames, dim=0)

        h, _, _ = _fold(x)
        h = self.stem(h)
        stem_skip = h
        skips = []
        for i, level in enumerate(self.encoder):
            h = level.res(h, temb_f)
            h = level.cross(h, ctx_f)
            if level.self_attn is not None:
                h = level.self_attn(h)
            if control is not None:
                h = h + _fold(control[i])[0]
            if level.temporal is not None:
                h = _fold(level.temporal(_unfold(h, b, t_frames)))[0]
            skips.append(h)
            if i < len(self.downs):
                h = self.downs[i](h)

        h = self.mid_res1(h, temb_f)
        h = self.mid_self(h)
        h = self.mid_cross(h, ctx_f)
        h = _fold(self.mid_temporal(_unfold(h, b, t_frames)))[0]
        h = self.mid_res2(h, temb_f)

        for i, level in enumerate(self.decoder):
            h = torch.cat([h, skips[-(i + 1)]], dim=1)
            h = level.res(h, temb_f)
            h = level.cross(h, ctx_f)
            if level.temporal is not None:
                h = _fold(level.temporal(_unfold(h, b, t_frames)))[0]
            if i < len(self.ups):
                h = self.ups[i](h)

        h = torch.cat([h, stem_skip], dim=1)
        h = self.out_conv(F.silu(self.out_norm(h)))
        return _unfold(h, b, t_frames)


class ControlBranch(nn.Module):
    """Encoder-tower copy over the conditioning stack with zero-init fusion.

    Purely spatial (no temporal layers); emits one residual per encoder
    scale, already passed through its zero-initialized 1x1 projection.
    """

    def __init__(self, cond_channels: int, base_channels: int = 32,
                 channel_mults: tuple[int, ...] = (1, 2, 4), heads: int = 4,
                 groups: int = 8):
        super().__init__()
        self.channels = [base_channels * m for m in channel_mults]
        temb_dim = base_channels * 4
        self.stem = nn.Conv2d(cond_channels, base_channels, 3, padding=1)
        blocks, downs, fusions = [], [], []
        prev = base_channels
        for i, ch in enumerate(self.channels):
            blocks.append(ResBlock(prev, ch, temb_dim, groups))
            fusions.append(zero_module(nn.Conv2d(ch, ch, 1)))
            downs.append(Downsample(ch) if i < len(self.channels) - 1 else None)
            prev = ch
        self.blocks = nn.ModuleList(blocks)
        self.fusions = nn.ModuleList(fusions)
        self.downs = nn.ModuleList([d for d in downs if d is not None])

    def forward(self, cond: torch.Tensor, temb: torch.Tensor) -> list[torch.Tensor]:
        """cond: (B, T, C_cond, H, W) -> per-scale residuals."""
        b, t = cond.shape[:2]
        h, _, _ = _fold(cond)
        h = self.stem(h)
        temb_f = temb.repeat_interleave(t, dim=0)
        outs = []
        for i, (block, fuse) in enumerate(zip(self.blocks, self.fusions)):
            h = block(h, temb_f)
            outs.append(_unfold(fuse(h), b, t))
            if i < len(self.downs):
                h = self.downs[i](h)
        return outs


@dataclass
class ConditioningBundle:
    """Batch conditioning: all tensors share B and T with the noisy input.

    pose: (B, T, P, H, W) heatmaps (P = max_keypoints + 1, zero-padded);
    scene: (B, T, 3, H, W) background frames with the subject region zeroed;
    texture: (B, T, 3, H, W) reference texture resized and broadcast over T;
    identity: (B, L, d) token context.
    """

    pose: torch.Tensor
    scene: torch.Tensor
    texture: torch.Tensor
    identity: torch.Tensor

    def control_stack(self) -> torch.Tensor:
        return torch.cat([self.pose, self.scene, self.texture], dim=2)

    def check_shapes(self, x: torch.Tensor) -> None:
        b, t = x.shape[:2]
        for name, v in (("pose", self.pose), ("scene", self.scene),
                        ("texture", self.texture)):
            if v.shape[0] != b or v.shape[1] != t or v.shape[-2:] != x.shape[-2:]:
                raise ShapeError(f"conditioning {name} shape {tuple(v.shape)} does not "
                                 f"match input {tuple(x.shape)}")
        if self.identity.shape[0] != b or self.identity.dim() != 3:
            raise ShapeError("identity context must be (B, L, d)")


class SubjectSwapModel(nn.Module):
    """The full trainable system: booster + identity extractor + denoiser.

    Parameters partition into five named groups with no overlap and no
    omission: spatial (UNet minus temporal blocks), temporal, control,
    identity-prompt (the extractor, whose backbone is permanently frozen),
    and booster.
    """

    def __init__(self, cfg: PipelineConfig, seed: int | None = None):
        super().__init__()
        self.cfg = cfg
        seed = cfg.seed if seed is None else seed
        d = cfg.denoiser
        self.booster = DetailBooster(bands=cfg.alignment.bands,
                                     out_size=cfg.alignment.out_size,
                                     blur_size=cfg.alignment.blur_size,
                                     blur_sigma=cfg.alignment.blur_sigma,
                                     enabled=cfg.alignment.booster_enabled)
        self.identity = IdentityExtractor(cfg.identity, cfg.alignment.out_size,
                                          seed=_component_seed(seed, "identity"))
        torch.manual_seed(_component_seed(seed, "unet"))
        self.unet = VideoUNet(in_channels=3, base_channels=d.base_channels,
                              channel_mults=d.channel_mults,
                              context_dim=cfg.identity.embed_dim,
                              heads=d.attn_heads, groups=d.norm_groups)
        torch.manual_seed(_component_seed(seed, "control"))
        self.control = ControlBranch(cond_channels=self.cond_channels,
                                     base_channels=d.base_channels,
                                     channel_mults=d.channel_mults,
                                     heads=d.attn_heads, groups=d.norm_groups)
        # Snapshot of tensors that never train in any stage (identity backbone,
        # booster when disabled); stage configuration toggles requires_grad
        # later, which must not change these flags.
        self._permanently_frozen = frozenset(
            name for name, p in self.named_parameters() if not p.requires_grad)

    @property
    def pose_channels(self) -> int:
        return self.cfg.denoiser.max_keypoints + 1

    @property
    def cond_channels(self) -> int:
        return self.pose_channels + 3 + 3

    def encode_reference(self, canvas: torch.Tensor, canvas_mask: torch.Tensor):
        """In-graph reference encoding: (enhanced, texture, identity tokens).

        canvas: (3, S, S) centered crop; gradients flow into the booster
        parameters through both the identity and texture paths.
        """
        enhanced = self.booster(canvas)
        mask_out = resize_bilinear_t(canvas_mask.unsqueeze(0),
                                     self.booster.out_size, self.booster.out_size)[0]
        texture = sobel_texture_t(enhanced, mask_out)
        tokens = self.identity(enhanced.unsqueeze(0))[0]
        return enhanced, texture, tokens

    def denoise(self, x_t: torch.Tensor, t: torch.Tensor,
                cond: ConditioningBundle, use_control: bool = True) -> torch.Tensor:
        cond.check_shapes(x_t)
        temb_base = timestep_embedding(t, self.unet.base_channels)
        control = None
        if use_control:
            temb = self.unet.time_mlp(temb_base)
            control = self.control(cond.control_stack(), temb)
        return self.unet(x_t, t, cond.identity, control)

    def parameter_groups(self) -> dict[str, dict[str, nn.Parameter]]:
        temporal_params = set()
        for mod_name, module in self.unet.named_modules():
            if isinstance(module, TemporalAttention):
                for p_name, p in module.named_parameters():
                    temporal_params.add(f"unet.{mod_name}.{p_name}")
        groups: dict[str, dict[str, nn.Parameter]] = {
            "spatial": {}, "temporal": {}, "control": {},
            "identity-prompt": {}, "booster": {}}
        for name, p in self.named_parameters():
            if name.startswith("booster."):
                groups["booster"][name] = p
            elif name.startswith("identity."):
                groups["identity-prompt"][name] = p
            elif name.startswith("control."):
                groups["control"][name] = p
            elif name in temporal_params:
                groups["temporal"][name] = p
            else:
                groups["spatial"][name] = p
        return groups

    def frozen_flags(self) -> dict[str, bool]:
        """Per-tensor flags for tensors that never train in any stage."""
        return {name: name in self._permanently_frozen
                for name, _ in self.named_parameters()}

    def parameter_report(self) -> dict[str, int]:
        report = {name: sum(p.numel() for p in group.values())
                  for name, group in self.parameter_groups().items()}
        report["total"] = sum(report.values())
        return report


def _component_seed(seed: int, name: str) -> int:
    """Stable per-component seed so ablation toggles do not shift other inits."""
    tag = zlib.crc32(name.encode())
    return int(np.random.SeedSequence([seed, tag]).generate_state(1)[0])


# --- losses and samplers ---

def denoise_step(model: SubjectSwapModel, x_t: torch.Tensor, t: torch.Tensor,
                 cond: ConditioningBundle, use_control: bool = True) -> torch.Tensor:
    """Predicted noise for one conditioning bundle (same shape as x_t)."""
    return model.denoise(x_t, t, cond, use_control=use_control)


def training_loss(model: SubjectSwapModel, x0: torch.Tensor,
                  cond: ConditioningBundle, schedule: Schedule,
                  rng: np.random.Generator) -> torch.Tensor:
    """Epsilon-prediction MSE with per-sample uniform timesteps."""
    b = x0.shape[0]
    t = torch.from_numpy(rng.integers(0, schedule.t_steps, size=b))
    eps = torch.from_numpy(
        rng.standard_normal(tuple(x0.shape)).astype(np.float32))
    x_t = q_sample(x0, t, eps, schedule)
    eps_hat = model.denoise(x_t, t, cond)
    loss = F.mse_loss(eps_hat, eps)
    if not torch.isfinite(loss):
        raise NonFiniteLoss(f"loss became {loss.item()}")
    return loss


@torch.no_grad()
def sample(model: SubjectSwapModel, cond: ConditioningBundle, schedule: Schedule,
           init: np.ndarray, mode: str = "ddim", rng: np.random.Generator | None = None,
           clip_output: bool = True, eps_fn=None) -> np.ndarray:
    """Reverse diffusion from a soft-init state.

    init: (T, 3, H, W); runs schedule.t_steps reverse iterations.  Ancestral
    mode draws per-step noise from `rng` (skipped at t=0); ddim is fully
    deterministic given the init.  `eps_fn` substitutes the model's
    prediction (test stubs).  Returns (T, 3, H, W) frames, clamped to [0, 1]
    unless `clip_output=False`.
    """
    if mode not in ("ddim", "ancestral"):
        raise RangeError(f"unknown sampler mode {mode!r}")
    if mode == "ancestral" and rng is None:
        raise RangeError("ancestral sampling needs an rng")
    x = torch.from_numpy(init.astype(np.float32)).unsqueeze(0)
    ab = schedule.alpha_bars
    for ti in range(schedule.t_steps - 1, -1, -1):
        t = torch.full((1,), ti, dtype=torch.long)
        if eps_fn is not None:
            eps_hat = eps_fn(x, t)
        else:
            eps_hat = model.denoise(x, t, cond)
        if mode == "ddim":
            x0_hat = (x - math.sqrt(1.0 - ab[ti]) * eps_hat) / math.sqrt(ab[ti])
            ab_prev = ab[ti - 1] if ti > 0 else 1.0
            x = math.sqrt(ab_prev) * x0_hat + math.sqrt(1.0 - ab_prev) * eps_hat
        else:
            alpha = schedule.alphas[ti]
            beta = schedule.betas[ti]
            mean = (x - beta / math.sqrt(1.0 - ab[ti]) * eps_hat) / math.sqrt(alpha)
            if ti > 0:
                var = (1.0 - ab[ti - 1]) / (1.0 - ab[ti]) * beta
                z = torch.from_numpy(
                    rng.standard_normal(tuple(x.shape)).astype(np.float32))
                x = mean + math.sqrt(var) * z
            else:
                x = mean
    out = x.squeeze(0).numpy().astype(np.float64)
    return np.clip(out, 0.0, 1.0) if clip_output else out
