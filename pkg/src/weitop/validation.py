"""Input checks shared by the estimators and the CLI."""
from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array, check_consistent_length

from .numerics import DomainError


def check_images(X, image_side: int | None = None, channels: int | None = None) -> np.ndarray:
    """``(n, H, W, C)`` float64 images; a single ``(H, W, C)`` image gains a batch axis."""
    X = np.asarray(X)
    if X.ndim == 3:
        X = X[None]
    X = check_array(X, allow_nd=True, dtype=np.float64, ensure_min_samples=1)
    if X.ndim != 4:
        raise ValueError(f"expected (n, H, W, C) images, got shape {X.shape}")
    if X.shape[1] != X.shape[2]:
        raise ValueError(f"images must be square, got {X.shape[1]}x{X.shape[2]}")
    if image_side is not None and X.shape[1] != image_side:
        raise ValueError(f"expected {image_side}x{image_side} images, got {X.shape[1]}x{X.shape[2]}")
    if channels is not None and X.shape[3] != channels:
        raise ValueError(f"expected {channels} channels, got {X.shape[3]}")
    return X


def check_labels(y, n: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1:
        raise ValueError("labels must be one-dimensional")
    check_consistent_length(np.empty(n), y)
    return y


def check_descriptors(G, dim: int | None = None) -> np.ndarray:
    G = check_array(G, dtype=np.float64)
    if dim is not None and G.shape[1] != dim:
        raise ValueError(f"expected descriptors of length {dim}, got {G.shape[1]}")
    return G


def check_rho(rho) -> float:
    rho = float(rho)
    if not 0.0 < rho <= 1.0:
        raise DomainError(f"retention ratio must lie in (0, 1], got {rho}")
    return rho


def check_tiers(tiers, n_clusters: int | None = None) -> tuple[int, ...]:
    """Parse ``"24,20,16,4"`` or a sequence; sizes must be positive and sum to ``n_clusters``."""
    if isinstance(tiers, str):
        try:
            tiers = [int(t) for t in tiers.split(",") if t.strip()]
        except ValueError as e:
            raise ValueError(f"tier sizes must be integers: {tiers!r}") from e
    tiers = tuple(int(t) for t in tiers)
    if not tiers or min(tiers) < 1:
        raise ValueError("tier sizes must be positive")
    if n_clusters is not None and sum(tiers) != n_clusters:
        raise ValueError(f"tier sizes sum to {sum(tiers)}, expected {n_clusters} clusters")
    return tiers
