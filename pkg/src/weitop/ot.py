"""Entropy-regularized optimal transport between tokens and clusters.

The score matrix is extended with one extra source row (the ghost token) and
one extra target column (the dustbin cluster), all sharing a single scalar
score. The plan is recovered in factorized form
``P = diag(u) exp(S / eps) diag(v)`` with ``u`` and ``v`` found by Sinkhorn
iterations carried out entirely on ``log u`` and ``log v``.

Every function here accepts leading batch dimensions.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .numerics import DomainError, as_tensor, log_sum_exp

DEFAULT_EPSILON = 0.1
DEFAULT_MAX_ITERS = 100
DEFAULT_TOL = 1e-6


@dataclass(frozen=True)
class ExtendedScores:
    matrix: torch.Tensor  # (..., N+1, M+1)
    dustbin_score: torch.Tensor

    @property
    def n_tokens(self) -> int:
        return self.matrix.shape[-2] - 1

    @property
    def n_clusters(self) -> int:
        return self.matrix.shape[-1] - 1


@dataclass(frozen=True)
class Marginals:
    a: torch.Tensor  # (N+1,)
    b: torch.Tensor  # (M+1,)

    @property
    def log_a(self) -> torch.Tensor:
        return torch.log(self.a)

    @property
    def log_b(self) -> torch.Tensor:
        return torch.log(self.b)


@dataclass(frozen=True)
class TransportPlan:
    plan: torch.Tensor  # (..., N+1, M+1), ghost row last, dustbin column last
    log_u: torch.Tensor
    log_v: torch.Tensor
    epsilon: float
    iterations_used: int
    max_marginal_violation: float
    converged: bool
    violation_trace: list[float] = field(default_factory=list, repr=False)

    @property
    def interior(self) -> torch.Tensor:
        """Real-token by real-cluster block."""
        return self.plan[..., :-1, :-1]


def build_extended_scores(S, z) -> ExtendedScores:
    """Append a ghost row, a dustbin column and their corner, all equal to ``z``."""
    S = as_tensor(S)
    if S.ndim < 2 or S.shape[-1] == 0 or S.shape[-2] == 0:
        raise DomainError(f"score matrix must be non-empty N x M, got shape {tuple(S.shape)}")
    z = as_tensor(z)
    if z.ndim != 0:
        raise DomainError("dustbin score must be a scalar")
    if not (torch.isfinite(S).all() and torch.isfinite(z)):
        raise DomainError("scores must be finite")
    *batch, n, m = S.shape
    col = z.expand(*batch, n, 1)
    row = z.expand(*batch, 1, m + 1)
    ext = torch.cat([torch.cat([S, col], dim=-1), row], dim=-2)
    return ExtendedScores(ext, z)


def default_marginals(n_tokens: int, n_clusters: int) -> Marginals:
    """Unit mass per real token/cluster; ghost and dustbin carry the other side's count.

    Both vectors are divided by ``N + M`` so each sums to one.
    """
    if n_tokens < 1 or n_clusters < 1:
        raise DomainError("need at least one token and one cluster")
    total = float(n_tokens + n_clusters)
    a = torch.ones(n_tokens + 1, dtype=torch.float64)
    a[-1] = n_clusters
    b = torch.ones(n_clusters + 1, dtype=torch.float64)
    b[-1] = n_tokens
    return Marginals(a / total, b / total)


def _marginal_violation(log_kernel, log_u, log_v, a, b) -> tuple[float, float]:
    """Max-abs and L1 deviation of the plan's row/column sums from ``a``, ``b``."""
    log_p = log_kernel + log_u.unsqueeze(-1) + log_v.unsqueeze(-2)
    row_err = (torch.exp(log_sum_exp(log_p, dim=-1)) - a).abs()
    col_err = (torch.exp(log_sum_exp(log_p, dim=-2)) - b).abs()
    max_abs = torch.maximum(row_err.amax(), col_err.amax())
    l1 = row_err.sum(dim=-1) + col_err.sum(dim=-1)
    return float(max_abs), float(l1.amax())


def sinkhorn_solve(
    scores: ExtendedScores,
    marg: Marginals,
    epsilon: float = DEFAULT_EPSILON,
    max_iters: int = DEFAULT_MAX_ITERS,
    tol: float | None = DEFAULT_TOL,
    track: bool = False,
) -> TransportPlan:
    """Solve the regularized transport problem, stopping once marginals are met.

    With ``tol=None`` exactly ``max_iters`` iterations run (the training
    schedule). Non-convergence is not an error: the plan comes back with
    ``converged=False`` and its final violation recorded.

    ``track=True`` fills ``violation_trace`` with the L1 marginal error after
    each iteration. Unlike the max-abs error used for the stopping test, the
    L1 error of Sinkhorn iterates never increases.
    """
    if max_iters < 1:
        raise DomainError("max_iters must be at least 1")
    if not epsilon > 0:
        raise DomainError(f"epsilon must be positive, got {epsilon}")
    if tol is not None and not tol > 0:
        raise DomainError(f"tol must be positive, got {tol}")
    S = scores.matrix
    if not torch.isfinite(S).all():
        raise DomainError("scores must be finite")
    if marg.a.shape[-1] != S.shape[-2] or marg.b.shape[-1] != S.shape[-1]:
        raise DomainError("marginal sizes do not match the score matrix")

    log_kernel = S / epsilon
    log_a, log_b = marg.log_a, marg.log_b
    log_v = torch.zeros_like(log_kernel[..., 0, :])
    trace: list[float] = []
    violation = float("inf")
    used = 0
    for used in range(1, max_iters + 1):
        log_u = log_a - log_sum_exp(log_kernel + log_v.unsqueeze(-2), dim=-1)
        log_v = log_b - log_sum_exp(log_kernel + log_u.unsqueeze(-1), dim=-2)
        if tol is None and not track:
            continue
        with torch.no_grad():
            violation, l1 = _marginal_violation(log_kernel, log_u, log_v, marg.a, marg.b)
        if track:
            trace.append(l1)
        if tol is not None and violation <= tol:
            break
    if tol is None and not track:
        with torch.no_grad():
            violation, _ = _marginal_violation(log_kernel, log_u, log_v, marg.a, marg.b)
    plan = torch.exp(log_kernel + log_u.unsqueeze(-1) + log_v.unsqueeze(-2))
    converged = tol is None or violation <= tol
    return TransportPlan(plan, log_u, log_v, float(epsilon), used, violation, converged, trace)


def absorbed_token_mass(plan, weights) -> torch.Tensor:
    """Per real token, the cluster-weighted mass it sends: ``sum_j w_j P_ij``.

    ``weights`` holds one entry per real cluster (already expanded from tiers).
    The ghost row and the dustbin column are excluded.
    """
    P = plan.plan if isinstance(plan, TransportPlan) else as_tensor(plan)
    weights = as_tensor(weights)
    interior = P[..., :-1, :-1]
    if weights.shape[-1] != interior.shape[-1]:
        raise DomainError(
            f"expected {interior.shape[-1]} cluster weights, got {weights.shape[-1]}"
        )
    return (interior * weights.unsqueeze(-2)).sum(dim=-1)
