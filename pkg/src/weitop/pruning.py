"""Self-distilled token importance and inference-time token pruning.

A small student head reads early-layer patch embeddings and predicts one
logit per token. During training it is distilled toward the teacher signal
the aggregator produces for free: each token's tier-weighted transport mass.
At inference the min-max normalized logits are mixed with token norms and
only the top ``ceil(rho * N0)`` patch tokens continue through the encoder.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .aggregation import MLP
from .numerics import DomainError, as_tensor, l2_norm, log_softmax_temp, min_max_normalize
from .ot import absorbed_token_mass

DEFAULT_KAPPA = 0.5
DEFAULT_TEMPERATURE = 0.1
DEFAULT_PRUNE_EPS = 1e-8


class StudentHead(MLP):
    """Token importance predictor: one logit per token."""

    def __init__(self, d_in: int, d_hidden: int = 512):
        super().__init__(d_in, d_hidden, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return super().forward(x).squeeze(-1)


@dataclass(frozen=True)
class PruneDecision:
    scores: torch.Tensor  # (..., N0)
    rho: float
    kept: torch.Tensor  # (..., k) ascending token indices
    kappa: float


def teacher_importance(plan, w, tau) -> torch.Tensor:
    """Tier-weighted mass each real token sends to the real clusters.

    Detached: it is a supervision target, never a path for gradients.
    """
    w = as_tensor(w)
    return absorbed_token_mass(plan, w[tau]).detach()


def distill_loss(teacher, student_logits, T: float = DEFAULT_TEMPERATURE) -> torch.Tensor:
    """``T^2 / N0 * KL(softmax(I/T) || softmax(z/T))``, averaged over any batch dims."""
    teacher, student_logits = as_tensor(teacher), as_tensor(student_logits)
    if teacher.shape != student_logits.shape:
        raise DomainError(
            f"teacher {tuple(teacher.shape)} and student {tuple(student_logits.shape)} differ"
        )
    log_pt = log_softmax_temp(teacher, T)
    log_ps = log_softmax_temp(student_logits, T)
    kl = (torch.exp(log_pt) * (log_pt - log_ps)).sum(dim=-1)
    n0 = teacher.shape[-1]
    return (T * T / n0) * kl.mean()


def prune_scores(
    student_logits,
    tokens,
    kappa: float = DEFAULT_KAPPA,
    eps: float = DEFAULT_PRUNE_EPS,
    normalize_norms: bool = False,
) -> torch.Tensor:
    """``kappa * minmax(z) + (1 - kappa) * ||x_i||``.

    The norm term is used raw unless ``normalize_norms`` asks for it to be
    min-max scaled as well.
    """
    if not 0.0 <= kappa <= 1.0:
        raise DomainError(f"kappa must lie in [0, 1], got {kappa}")
    norms = l2_norm(tokens)
    if normalize_norms:
        norms = min_max_normalize(norms, eps)
    return kappa * min_max_normalize(student_logits, eps) + (1.0 - kappa) * norms


def keep_count(rho: float, n0: int) -> int:
    if not 0.0 < rho <= 1.0:
        raise DomainError(f"retention ratio must lie in (0, 1], got {rho}")
    # round first so e.g. 0.7 * 10 does not ceil to 8
    return min(n0, max(1, math.ceil(round(rho * n0, 9))))


def select_topk(zhat, rho: float, n0: int | None = None) -> torch.Tensor:
    """Indices of the ``ceil(rho * n0)`` best-scoring tokens, ascending.

    Ties go to the lower index, so kept sets are nested as ``rho`` shrinks.
    """
    zhat = as_tensor(zhat)
    n0 = zhat.shape[-1] if n0 is None else n0
    k = keep_count(rho, n0)
    order = torch.argsort(zhat.detach(), dim=-1, descending=True, stable=True)
    return torch.sort(order[..., :k], dim=-1).values


def random_keep(batch: int, n0: int, rho: float, rng: np.random.Generator) -> torch.Tensor:
    """Uniformly random kept sets, the baseline pruning is compared against."""
    k = keep_count(rho, n0)
    rows = [np.sort(rng.choice(n0, size=k, replace=False)) for _ in range(batch)]
    return torch.as_tensor(np.stack(rows), dtype=torch.long)


def decide(student_logits, tokens, rho, kappa=DEFAULT_KAPPA, eps=DEFAULT_PRUNE_EPS,
           normalize_norms=False) -> PruneDecision:
    zhat = prune_scores(student_logits, tokens, kappa, eps, normalize_norms)
    return PruneDecision(zhat, rho, select_topk(zhat, rho), kappa)
