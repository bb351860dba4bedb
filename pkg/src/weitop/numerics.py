"""Dense numeric kernels shared by every other module.

Everything here works on float64 torch tensors so the same code path serves
inference, training and finite-difference checks. Array-likes are accepted
and converted on entry.
"""
from __future__ import annotations

import numpy as np
import torch

DTYPE = torch.float64

# Bump when the seeding scheme changes; stored in checkpoints.
RNG_SCHEME = "pcg64-seedseq-v1"


class DomainError(ValueError):
    """An input lies outside the domain an operation is defined on."""


class NumericError(FloatingPointError):
    """A computation produced non-finite values."""


def as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if x.dtype == DTYPE else x.to(DTYPE)
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def log_sum_exp(v, dim: int = -1) -> torch.Tensor:
    """``log(sum(exp(v)))`` along ``dim`` using a max shift.

    Exact for the constant-vector case and safe for entries near +-1000.
    """
    v = as_tensor(v)
    if v.numel() == 0 or v.shape[dim] == 0:
        raise DomainError("log_sum_exp of an empty vector")
    m = v.amax(dim=dim, keepdim=True).detach()
    out = m + torch.log(torch.exp(v - m).sum(dim=dim, keepdim=True))
    return out.squeeze(dim)


def softmax_temp(v, T: float, dim: int = -1) -> torch.Tensor:
    """Temperature softmax ``exp(v/T) / sum(exp(v/T))``."""
    if not T > 0:
        raise DomainError(f"temperature must be positive, got {T}")
    v = as_tensor(v) / T
    return torch.exp(v - log_sum_exp(v, dim=dim).unsqueeze(dim))


def log_softmax_temp(v, T: float, dim: int = -1) -> torch.Tensor:
    if not T > 0:
        raise DomainError(f"temperature must be positive, got {T}")
    v = as_tensor(v) / T
    return v - log_sum_exp(v, dim=dim).unsqueeze(dim)


def min_max_normalize(v, eps: float = 1e-8, dim: int = -1) -> torch.Tensor:
    """``(v - min) / (max - min + eps)``; a constant vector maps to zeros."""
    v = as_tensor(v)
    if v.numel() == 0:
        raise DomainError("min_max_normalize of an empty vector")
    lo = v.amin(dim=dim, keepdim=True)
    hi = v.amax(dim=dim, keepdim=True)
    return (v - lo) / (hi - lo + eps)


def l2_norm(v, dim: int = -1) -> torch.Tensor:
    v = as_tensor(v)
    return torch.sqrt((v * v).sum(dim=dim))


def check_finite(x: torch.Tensor, what: str) -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise NumericError(f"non-finite values in {what}")
    return x


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


def spawn_rngs(seed: int, n: int) -> list[np.random.Generator]:
    """Independent per-worker streams derived from one seed."""
    children = np.random.SeedSequence(seed).spawn(n)
    return [np.random.Generator(np.random.PCG64(s)) for s in children]


def torch_generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(np.random.SeedSequence(seed).generate_state(1, np.uint64)[0] >> 1))
    return g
