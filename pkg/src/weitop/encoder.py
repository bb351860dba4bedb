"""Desk-scale ViT encoder with a single token-pruning event.

Pre-norm transformer blocks over ``N0`` patch tokens plus a CLS token
(kept at position 0). After block ``prune_layer`` an optional selector picks
which patch tokens survive; the CLS token always does. A second, independent
tap lets the student head read the patch embeddings of a chosen block.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, NamedTuple

import torch
import torch.nn.functional as F
from torch import nn

from .numerics import DTYPE, DomainError, NumericError
from .pruning import keep_count


@dataclass
class EncoderConfig:
    image_side: int = 56
    patch_size: int = 14
    channels: int = 3
    width: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0
    prune_layer: int = 1
    trainable_last_k: int | None = None

    def __post_init__(self):
        if self.image_side % self.patch_size:
            raise DomainError(
                f"image side {self.image_side} is not divisible by patch size {self.patch_size}"
            )
        if self.width % self.heads:
            raise DomainError("width must be divisible by the number of heads")
        if not 0 <= self.prune_layer < self.depth:
            raise DomainError(f"prune_layer must lie in [0, {self.depth}), got {self.prune_layer}")
        if self.trainable_last_k is not None and not 0 <= self.trainable_last_k <= self.depth:
            raise DomainError("trainable_last_k must lie in [0, depth]")

    @property
    def grid(self) -> int:
        return self.image_side // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid**2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels


@dataclass
class TokenSet:
    patch: torch.Tensor  # (B, N, d)
    cls: torch.Tensor  # (B, d)
    kept_indices: torch.Tensor  # (B, N) original patch positions, ascending


class EncoderOutput(NamedTuple):
    tokens: TokenSet
    tapped: torch.Tensor | None  # patch embeddings after the tap block, all N0 tokens
    attention: list[torch.Tensor] | None


class Attention(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(width, 3 * width, dtype=DTYPE)
        self.proj = nn.Linear(width, width, dtype=DTYPE)

    def forward(self, x: torch.Tensor):
        B, n, d = x.shape
        h = self.heads
        q, k, v = self.qkv(x).reshape(B, n, 3, h, d // h).permute(2, 0, 3, 1, 4)
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(d // h), dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(B, n, d)
        return self.proj(out), attn


class Block(nn.Module):
    def __init__(self, width: int, heads: int, mlp_ratio: float):
        super().__init__()
        hidden = int(round(width * mlp_ratio))
        self.norm1 = nn.LayerNorm(width, dtype=DTYPE)
        self.attn = Attention(width, heads)
        self.norm2 = nn.LayerNorm(width, dtype=DTYPE)
        self.fc1 = nn.Linear(width, hidden, dtype=DTYPE)
        self.fc2 = nn.Linear(hidden, width, dtype=DTYPE)

    def forward(self, x: torch.Tensor):
        a, attn = self.attn(self.norm1(x))
        x = x + a
        x = x + self.fc2(F.gelu(self.fc1(self.norm2(x))))
        return x, attn


def patchify(images: torch.Tensor, patch_size: int) -> torch.Tensor:
    """(B, H, W, C) -> (B, N0, p*p*C), patches in row-major grid order."""
    B, H, W, C = images.shape
    if H % patch_size or W % patch_size:
        raise DomainError(f"image {H}x{W} is not divisible into {patch_size}px patches")
    p = patch_size
    x = images.reshape(B, H // p, p, W // p, p, C).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(B, (H // p) * (W // p), p * p * C)


Selector = Callable[[torch.Tensor], torch.Tensor]


class ToyViT(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.patch_proj = nn.Linear(cfg.patch_dim, cfg.width, dtype=DTYPE)
        self.pos_embed = nn.Parameter(torch.randn(cfg.n_patches, cfg.width, dtype=DTYPE) * 0.02)
        self.cls_token = nn.Parameter(torch.randn(cfg.width, dtype=DTYPE) * 0.02)
        self.blocks = nn.ModuleList(
            Block(cfg.width, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth)
        )
        self.norm = nn.LayerNorm(cfg.width, dtype=DTYPE)
        self.apply_freeze()

    def apply_freeze(self) -> None:
        k = self.cfg.depth if self.cfg.trainable_last_k is None else self.cfg.trainable_last_k
        frozen = self.cfg.depth - k
        stem = [self.patch_proj, self.pos_embed, self.cls_token] if frozen else []
        for obj in stem + list(self.blocks[:frozen]):
            params = [obj] if isinstance(obj, nn.Parameter) else obj.parameters()
            for p in params:
                p.requires_grad_(False)

    def patch_embed(self, images: torch.Tensor) -> TokenSet:
        images = torch.as_tensor(images, dtype=DTYPE)
        if images.ndim != 4 or images.shape[1] != self.cfg.image_side or images.shape[2] != self.cfg.image_side:
            raise DomainError(
                f"expected images of shape (B, {self.cfg.image_side}, {self.cfg.image_side}, C), "
                f"got {tuple(images.shape)}"
            )
        patches = patchify(images, self.cfg.patch_size)
        B = patches.shape[0]
        tokens = self.patch_proj(patches) + self.pos_embed
        kept = torch.arange(self.cfg.n_patches).expand(B, -1)
        return TokenSet(tokens, self.cls_token.expand(B, -1), kept)

    def forward(
        self,
        images: torch.Tensor,
        prune_layer: int = 0,
        selector: Selector | None = None,
        tap_layer: int = 0,
        return_attention: bool = False,
    ) -> EncoderOutput:
        """Run all blocks; after block ``prune_layer`` keep ``selector(patch)`` tokens.

        ``selector`` maps the (B, N0, d) patch embeddings to (B, k) ascending
        indices. ``prune_layer=0`` or ``selector=None`` disables pruning.
        """
        ts = self.patch_embed(images)
        x = torch.cat([ts.cls.unsqueeze(1), ts.patch], dim=1)
        kept = ts.kept_indices
        tapped = None
        maps = [] if return_attention else None
        for layer, blk in enumerate(self.blocks, start=1):
            x, attn = blk(x)
            if not torch.isfinite(x).all():
                raise NumericError(f"non-finite activations after block {layer}")
            if maps is not None:
                maps.append(attn)
            if layer == tap_layer:
                tapped = x[:, 1:]
            if layer == prune_layer and selector is not None:
                idx = selector(x[:, 1:])
                x = torch.cat([x[:, :1], gather_tokens(x[:, 1:], idx)], dim=1)
                kept = torch.gather(kept, 1, idx)
        x = self.norm(x)
        return EncoderOutput(TokenSet(x[:, 1:], x[:, 0], kept), tapped, maps)


def gather_tokens(x: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    return torch.gather(x, 1, idx.unsqueeze(-1).expand(-1, -1, x.shape[-1]))


def flop_count(cfg: EncoderConfig, rho: float = 1.0, prune_layer: int | None = None) -> float:
    """Analytic encoder FLOPs for one image.

    Per block: ``4 n d^2 + 2 n^2 d`` for attention and ``2 r n d^2`` for the
    MLP, with ``n = N0 + 1`` up to the pruning block and ``ceil(rho N0) + 1``
    after it.
    """
    layer = cfg.prune_layer if prune_layer is None else prune_layer
    d, r = cfg.width, cfg.mlp_ratio
    n_full = cfg.n_patches + 1
    n_kept = keep_count(rho, cfg.n_patches) + 1

    def block(n: int) -> float:
        return 4 * n * d * d + 2 * n * n * d + 2 * r * n * d * d

    if layer == 0:
        return cfg.depth * block(n_full)
    return layer * block(n_full) + (cfg.depth - layer) * block(n_kept)
