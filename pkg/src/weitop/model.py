"""End-to-end network: toy encoder -> weighted OT aggregation, plus the student head."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np
import torch
from torch import nn

from .aggregation import AggregatorConfig, TierConfig, WeiAD
from .encoder import EncoderConfig, ToyViT
from .pruning import (
    DEFAULT_KAPPA,
    DEFAULT_PRUNE_EPS,
    StudentHead,
    prune_scores,
    random_keep,
    select_topk,
    teacher_importance,
)


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    aggregator: AggregatorConfig = field(default_factory=AggregatorConfig)
    student_hidden: int = 512

    def __post_init__(self):
        if self.aggregator.d_in != self.encoder.width:
            raise ValueError(
                f"aggregator input width {self.aggregator.d_in} != encoder width {self.encoder.width}"
            )

    @property
    def student_layer(self) -> int:
        # the student always needs a tap, even when pruning is disabled by default
        return self.encoder.prune_layer or 1

    def to_flat(self) -> dict[str, str]:
        """Flat ``section.key -> text`` mapping, the checkpoint config block."""
        flat = {f"encoder.{k}": repr(v) for k, v in asdict(self.encoder).items()}
        agg = asdict(self.aggregator)
        tiers = agg.pop("tiers")
        flat.update({f"aggregator.{k}": repr(v) for k, v in agg.items()})
        flat.update({f"tiers.{k}": repr(v) for k, v in tiers.items()})
        flat["student_hidden"] = repr(self.student_hidden)
        return flat

    @classmethod
    def from_flat(cls, flat: dict[str, str]) -> "ModelConfig":
        import ast

        def section(prefix):
            return {
                k[len(prefix) + 1:]: ast.literal_eval(v)
                for k, v in flat.items()
                if k.startswith(prefix + ".")
            }

        tiers = TierConfig(**section("tiers"))
        return cls(
            encoder=EncoderConfig(**section("encoder")),
            aggregator=AggregatorConfig(tiers=tiers, **section("aggregator")),
            student_hidden=ast.literal_eval(flat["student_hidden"]),
        )


def make_config(
    *,
    image_side: int = 56,
    patch_size: int = 14,
    width: int = 64,
    depth: int = 4,
    heads: int = 4,
    mlp_ratio: float = 4.0,
    prune_layer: int = 1,
    trainable_last_k: int | None = None,
    tiers=(6, 5, 4, 1),
    d_low: int = 32,
    d_cls: int = 64,
    hidden: int = 512,
    epsilon: float = 0.1,
    sinkhorn_iters: int = 100,
    ghost_penalty: float = 0.5,
    floor: float = 1e-3,
    channels: int = 3,
) -> ModelConfig:
    enc = EncoderConfig(
        image_side=image_side,
        patch_size=patch_size,
        channels=channels,
        width=width,
        depth=depth,
        heads=heads,
        mlp_ratio=mlp_ratio,
        prune_layer=prune_layer,
        trainable_last_k=trainable_last_k,
    )
    agg = AggregatorConfig(
        d_in=width,
        d_low=d_low,
        d_cls=d_cls,
        hidden=hidden,
        tiers=TierConfig(sizes=tuple(tiers), ghost_penalty=ghost_penalty, floor=floor),
        epsilon=epsilon,
        sinkhorn_iters=sinkhorn_iters,
    )
    return ModelConfig(enc, agg, student_hidden=hidden)


class ModelOutput(NamedTuple):
    descriptor: torch.Tensor
    plan: torch.Tensor
    alpha: torch.Tensor
    tier_weights: torch.Tensor
    tau: torch.Tensor
    kept: torch.Tensor
    teacher: torch.Tensor | None
    student_logits: torch.Tensor | None


class WeiADNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = ToyViT(cfg.encoder)
        self.aggregator = WeiAD(cfg.aggregator)
        self.student = StudentHead(cfg.encoder.width, cfg.student_hidden)

    @property
    def descriptor_dim(self) -> int:
        return self.aggregator.descriptor_dim

    def selector(self, rho, kappa=DEFAULT_KAPPA, eps=DEFAULT_PRUNE_EPS, normalize_norms=False):
        def select(patch: torch.Tensor) -> torch.Tensor:
            zhat = prune_scores(self.student(patch), patch, kappa, eps, normalize_norms)
            return select_topk(zhat, rho)

        return select

    def random_selector(self, rho: float, rng: np.random.Generator):
        def select(patch: torch.Tensor) -> torch.Tensor:
            return random_keep(patch.shape[0], patch.shape[1], rho, rng)

        return select

    def forward(
        self,
        images,
        rho: float | None = None,
        kappa: float = DEFAULT_KAPPA,
        prune_layer: int | None = None,
        eps: float = DEFAULT_PRUNE_EPS,
        normalize_norms: bool = False,
        selector=None,
        weighting: bool = True,
    ) -> ModelOutput:
        """Descriptors for a batch of (B, H, W, C) images.

        ``rho=None`` runs every token through (training and the reference
        inference path) and also returns the teacher/student pair for
        distillation. A float ``rho`` fires the pruning hook, even at 1.0.
        """
        layer = self.cfg.encoder.prune_layer if prune_layer is None else prune_layer
        if selector is None and rho is not None:
            selector = self.selector(rho, kappa, eps, normalize_norms)
        pruning = selector is not None and layer > 0
        enc = self.encoder(
            images,
            prune_layer=layer if pruning else 0,
            selector=selector if pruning else None,
            tap_layer=0 if pruning else self.cfg.student_layer,
        )
        ts = enc.tokens
        agg = self.aggregator(ts.patch, ts.cls, weighting=weighting)
        teacher = student = None
        if not pruning:
            teacher = teacher_importance(agg.plan, agg.tier_weights, agg.tau)
            student = self.student(enc.tapped)
        return ModelOutput(
            agg.descriptor, agg.plan, agg.alpha, agg.tier_weights, agg.tau,
            ts.kept_indices, teacher, student,
        )

    @torch.no_grad()
    def describe(self, images, batch_size: int = 256, **kwargs) -> np.ndarray:
        """Descriptors as a float64 numpy array, evaluated in chunks."""
        self.eval()
        images = torch.as_tensor(np.asarray(images), dtype=torch.float64)
        out = [
            self(images[i:i + batch_size], **kwargs).descriptor
            for i in range(0, len(images), batch_size)
        ]
        return torch.cat(out).numpy()
