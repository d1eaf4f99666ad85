"""Identity extraction: a frozen vision transformer with trainable prompts.

The backbone (patch embedding, class token, positional embeddings, all
transformer blocks) is fixed at a seeded random initialization and never
trains.  The only trainable tensor is `learn_tokens`: P prompt tokens
appended after the patch tokens, carrying no positional embedding.  The
full output sequence — [cls | patches | learned], same length as the input —
is the cross-attention context for the denoiser, with no pooling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .config import IdentityConfig
from .errors import ShapeError
from .torchops import to_tensor


@dataclass(frozen=True)
class IdentityTokens:
    """Extractor output: (1 + n_patches + n_learn, d), layout [cls | patches | learned]."""

    tokens: np.ndarray


def token_count(cfg: IdentityConfig, input_size: int) -> int:
    return 1 + (input_size // cfg.patch_size) ** 2 + cfg.n_learn


class SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, n, c = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, c // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv.unbind(0)
        attn = torch.softmax((q @ k.transpose(-2, -1)) * self.scale, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, c)
        return self.proj(out)


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class IdentityExtractor(nn.Module):
    def __init__(self, cfg: IdentityConfig, input_size: int, seed: int = 0):
        super().__init__()
        if input_size % cfg.patch_size != 0:
            raise ShapeError("input_size must be divisible by patch_size")
        if cfg.embed_dim % cfg.heads != 0:
            raise ShapeError("embed_dim must be divisible by heads")
        self.cfg = cfg
        self.input_size = input_size
        self.n_patches = (input_size // cfg.patch_size) ** 2
        d = cfg.embed_dim

        self.patch_embed = nn.Conv2d(3, d, cfg.patch_size, stride=cfg.patch_size)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
        self.pos_embed = nn.Parameter(torch.zeros(1, self.n_patches, d))
        self.blocks = nn.ModuleList(
            Block(d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth))
        self.norm = nn.LayerNorm(d)
        # The one trainable tensor; prompts carry no positional embedding.
        self.learn_tokens = nn.Parameter(torch.zeros(cfg.n_learn, d))

        self._seeded_init(seed)
        for name, p in self.named_parameters():
            p.requires_grad = (name == "learn_tokens")

    def _seeded_init(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if p.dim() >= 2 or "token" in name or "embed" in name:
                    p.normal_(0.0, 0.02, generator=gen)
                else:  # biases, norm offsets
                    p.zero_()
            for m in self.modules():
                if isinstance(m, nn.LayerNorm):
                    m.weight.fill_(1.0)

    def trainable_params(self) -> list[nn.Parameter]:
        """Exactly the prompt tokens; empty when n_learn = 0."""
        return [p for p in self.parameters() if p.requires_grad]

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        """(B, 3, S, S) -> (B, 1 + n_patches + n_learn, d)."""
        if img.dim() != 4 or img.shape[-2:] != (self.input_size, self.input_size):
            raise ShapeError(f"expected (B, 3, {self.input_size}, {self.input_size}), "
                             f"got {tuple(img.shape)}")
        b = img.shape[0]
        x = self.patch_embed(img).flatten(2).transpose(1, 2)  # (B, N, d)
        x = x + self.pos_embed
        cls = self.cls_token.expand(b, -1, -1)
        learned = self.learn_tokens.unsqueeze(0).expand(b, -1, -1)
        x = torch.cat([cls, x, learned], dim=1)
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)


def extract_identity(aligned, extractor: IdentityExtractor) -> IdentityTokens:
    """Run the extractor on an aligned reference (inference path, no grad)."""
    img = to_tensor(np.clip(aligned.enhanced, 0.0, 1.0)).unsqueeze(0)
    with torch.no_grad():
        tokens = extractor(img)[0]
    return IdentityTokens(tokens=tokens.numpy())


def mean_pooled_embedding(extractor: IdentityExtractor, frame_hw3: np.ndarray) -> np.ndarray:
    """Mean-pooled token embedding of an arbitrary frame (resized to fit)."""
    img = to_tensor(frame_hw3).unsqueeze(0)
    img = torch.nn.functional.interpolate(img, size=(extractor.input_size,) * 2,
                                          mode="bilinear", align_corners=False)
    with torch.no_grad():
        tokens = extractor(img)[0]
    return tokens.mean(dim=0).numpy()


def cosine(a: np.ndarray, b: np.ndarray, eps: float = 1e-12) -> float:
    return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b) + eps))
