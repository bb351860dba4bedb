"""Weighted optimal-transport aggregation of patch tokens into a global descriptor.

Tokens are projected to a low dimension, scored against ``M`` clusters and
softly assigned by a regularized transport plan with a ghost token and a
dustbin cluster. Clusters are ranked by how much mass real tokens send them
(minus a penalty on ghost mass), grouped into fixed-size rank tiers, and each
tier scales its clusters' aggregated features by a learnable weight. Tier
weights are parameterized to be non-increasing and floored at ``floor``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .numerics import DTYPE, DomainError, as_tensor
from .ot import (
    DEFAULT_EPSILON,
    DEFAULT_MAX_ITERS,
    TransportPlan,
    build_extended_scores,
    default_marginals,
    sinkhorn_solve,
)

FULL_SCALE_TIERS = (24, 20, 16, 4)
TOY_TIERS = (6, 5, 4, 1)


class MLP(nn.Module):
    """Two linear layers with a ReLU in between."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int):
        super().__init__()
        self.fc1 = nn.Linear(d_in, d_hidden, dtype=DTYPE)
        self.fc2 = nn.Linear(d_hidden, d_out, dtype=DTYPE)

    @property
    def d_in(self) -> int:
        return self.fc1.in_features

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.relu(self.fc1(x)))


def inverse_softplus(y: float) -> float:
    return math.log(math.expm1(y))


@dataclass
class TierConfig:
    sizes: tuple[int, ...] = TOY_TIERS
    theta0: float = 0.0
    # None -> every delta set so consecutive tiers differ by 1/T at init
    theta_delta: list[float] | None = None
    floor: float = 1e-3
    ghost_penalty: float = 0.5

    def __post_init__(self):
        self.sizes = tuple(int(c) for c in self.sizes)
        if any(c < 1 for c in self.sizes):
            raise DomainError(f"tier sizes must be positive, got {self.sizes}")
        if not self.floor > 0:
            raise DomainError("tier weight floor must be positive")
        if self.ghost_penalty < 0:
            raise DomainError("ghost penalty must be non-negative")
        if self.theta_delta is None:
            step = inverse_softplus(1.0 / len(self.sizes))
            self.theta_delta = [step] * (len(self.sizes) - 1)
        if len(self.theta_delta) != len(self.sizes) - 1:
            raise DomainError("need one weight delta per tier after the first")

    @property
    def n_clusters(self) -> int:
        return sum(self.sizes)

    @property
    def n_tiers(self) -> int:
        return len(self.sizes)


def tier_weights(theta0, theta_delta, floor: float) -> torch.Tensor:
    """``w_t = max(exp(theta0) - sum_{k<=t} softplus(theta_delta_k), floor)``.

    Differentiable in both theta arguments; clamped entries get zero gradient.
    """
    theta0 = as_tensor(theta0)
    theta_delta = as_tensor(theta_delta).reshape(-1)
    base = torch.exp(theta0).reshape(1)
    drops = torch.cumsum(F.softplus(theta_delta), dim=0)
    return torch.clamp(torch.cat([base, base - drops]), min=floor)


def tier_weights_from_config(cfg: TierConfig) -> torch.Tensor:
    return tier_weights(cfg.theta0, cfg.theta_delta, cfg.floor)


def cluster_importance(plan, ghost_penalty: float) -> torch.Tensor:
    """Mass each real cluster receives from real tokens minus the penalized ghost mass."""
    P = plan.plan if isinstance(plan, TransportPlan) else as_tensor(plan)
    real = P[..., :-1, :-1].sum(dim=-2)
    ghost = P[..., -1, :-1]
    return real - ghost_penalty * ghost


def assign_tiers(alpha, sizes: Sequence[int]) -> torch.Tensor:
    """Tier index per cluster: rank by ``alpha`` descending, cut into ``sizes``.

    The sort is stable, so equal scores keep cluster-index order.
    """
    alpha = as_tensor(alpha).detach()
    sizes = [int(c) for c in sizes]
    M = alpha.shape[-1]
    if sum(sizes) != M:
        raise DomainError(f"tier sizes {sizes} sum to {sum(sizes)}, expected {M}")
    order = torch.argsort(alpha, dim=-1, descending=True, stable=True)
    tier_of_rank = torch.repeat_interleave(
        torch.arange(len(sizes)), torch.tensor(sizes)
    ).expand_as(order)
    tau = torch.empty_like(order)
    tau.scatter_(-1, order, tier_of_rank)
    return tau


def assemble_descriptor(plan, X_low, cls_low, w, tau, normalize: bool = True) -> torch.Tensor:
    """Concatenate ``v_j = sum_i w_tau(j) P_ij x_i`` over clusters, then the CLS projection.

    Shapes: plan ``(..., N+1, M+1)``, ``X_low`` ``(..., N, d_low)``, ``cls_low``
    ``(..., d_cls)``, ``w`` ``(T,)``, ``tau`` ``(..., M)``. The result has
    length ``M * d_low + d_cls`` and unit L2 norm when ``normalize`` is set.
    """
    P = plan.plan if isinstance(plan, TransportPlan) else as_tensor(plan)
    X_low, cls_low, w = as_tensor(X_low), as_tensor(cls_low), as_tensor(w)
    interior = P[..., :-1, :-1]
    N, M = interior.shape[-2:]
    if X_low.shape[-2] != N:
        raise DomainError(f"plan has {N} token rows but {X_low.shape[-2]} tokens were given")
    if tau.shape[-1] != M:
        raise DomainError(f"tier map covers {tau.shape[-1]} clusters, plan has {M}")
    cluster_w = w[tau]
    v = torch.einsum("...nm,...nd->...md", interior, X_low) * cluster_w.unsqueeze(-1)
    g = torch.cat([v.flatten(-2), cls_low], dim=-1)
    if normalize:
        g = F.normalize(g, dim=-1, eps=0.0)
    return g


def descriptor_length(n_clusters: int, d_low: int, d_cls: int) -> int:
    return n_clusters * d_low + d_cls


class AggregationOutput(NamedTuple):
    descriptor: torch.Tensor  # (B, M*d_low + d_cls)
    plan: torch.Tensor  # (B, N+1, M+1)
    alpha: torch.Tensor  # (B, M)
    tier_weights: torch.Tensor  # (T,)
    tau: torch.Tensor  # (B, M)


@dataclass
class AggregatorConfig:
    d_in: int = 64
    d_low: int = 32
    d_cls: int = 64
    hidden: int = 512
    tiers: TierConfig = field(default_factory=TierConfig)
    epsilon: float = DEFAULT_EPSILON
    sinkhorn_iters: int = DEFAULT_MAX_ITERS
    dustbin_init: float = 1.0

    @property
    def n_clusters(self) -> int:
        return self.tiers.n_clusters


class WeiAD(nn.Module):
    """Learnable part of the aggregator: projections, score head, dustbin score, tier weights."""

    def __init__(self, cfg: AggregatorConfig):
        super().__init__()
        self.cfg = cfg
        self.token_proj = MLP(cfg.d_in, cfg.hidden, cfg.d_low)
        self.cls_proj = MLP(cfg.d_in, cfg.hidden, cfg.d_cls)
        self.score_head = MLP(cfg.d_low, cfg.hidden, cfg.n_clusters)
        self.dustbin = nn.Parameter(torch.tensor(cfg.dustbin_init, dtype=DTYPE))
        self.theta0 = nn.Parameter(torch.tensor(cfg.tiers.theta0, dtype=DTYPE))
        self.theta_delta = nn.Parameter(torch.tensor(cfg.tiers.theta_delta, dtype=DTYPE))

    @property
    def descriptor_dim(self) -> int:
        return descriptor_length(self.cfg.n_clusters, self.cfg.d_low, self.cfg.d_cls)

    def project_tokens(self, patch: torch.Tensor, cls: torch.Tensor):
        if patch.shape[-1] != self.cfg.d_in or cls.shape[-1] != self.cfg.d_in:
            raise DomainError(
                f"token width {patch.shape[-1]} does not match projection input {self.cfg.d_in}"
            )
        return self.token_proj(patch), self.cls_proj(cls)

    def tier_weights(self) -> torch.Tensor:
        return tier_weights(self.theta0, self.theta_delta, self.cfg.tiers.floor)

    def transport(self, X_low: torch.Tensor) -> TransportPlan:
        S = self.score_head(X_low)
        ext = build_extended_scores(S, self.dustbin)
        marg = default_marginals(ext.n_tokens, ext.n_clusters)
        return sinkhorn_solve(
            ext, marg, self.cfg.epsilon, self.cfg.sinkhorn_iters, tol=None
        )

    def forward(self, patch: torch.Tensor, cls: torch.Tensor, weighting: bool = True) -> AggregationOutput:
        X_low, cls_low = self.project_tokens(patch, cls)
        plan = self.transport(X_low).plan
        alpha = cluster_importance(plan, self.cfg.tiers.ghost_penalty)
        tau = assign_tiers(alpha, self.cfg.tiers.sizes)
        w = self.tier_weights() if weighting else torch.ones(self.cfg.tiers.n_tiers, dtype=DTYPE)
        g = assemble_descriptor(plan, X_low, cls_low, w, tau)
        return AggregationOutput(g, plan, alpha, w, tau)
