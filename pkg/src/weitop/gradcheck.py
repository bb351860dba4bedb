"""Finite-difference check of the full training loss against autograd."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .model import WeiADNet
from .numerics import make_rng
from .training import TrainConfig, compute_losses


@dataclass
class GradEntry:
    name: str
    index: tuple[int, ...]
    analytic: float
    numeric: float
    error: float


@dataclass
class GradCheckReport:
    entries: list[GradEntry]
    rel_tol: float
    seconds: float
    per_tensor: dict[str, float] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max((e.error for e in self.entries), default=0.0)

    @property
    def failures(self) -> list[GradEntry]:
        return [e for e in self.entries if not e.error < self.rel_tol]

    @property
    def passed(self) -> bool:
        return not self.failures

    def summary(self) -> str:
        lines = [
            f"{len(self.entries)} entries over {len(self.per_tensor)} tensors, "
            f"max rel error {self.max_error:.3e} (tol {self.rel_tol:g}), {self.seconds:.1f}s"
        ]
        for e in self.failures:
            lines.append(
                f"  FAIL {e.name}{list(e.index)}: analytic {e.analytic:.6e} "
                f"numeric {e.numeric:.6e} error {e.error:.3e}"
            )
        return "\n".join(lines)


def relative_error(a: float, n: float, floor: float = 1e-6) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


def grad_check(
    model: WeiADNet,
    images,
    labels,
    cfg: TrainConfig | None = None,
    rel_tol: float = 1e-4,
    samples_per_tensor: int = 20,
    h: float = 1e-5,
    seed: int = 0,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare ``dL_total/dp`` with central differences on sampled entries.

    Tensors with at most ``samples_per_tensor`` entries are checked in full.
    The teacher signal is detached in training, so the numeric side holds
    it at its unperturbed value too.
    """
    cfg = cfg or TrainConfig()
    if not all(p.dtype == torch.float64 for p in model.parameters()):
        raise TypeError("gradient checks need a float64 model")
    images = torch.as_tensor(np.asarray(images), dtype=torch.float64)
    labels = np.asarray(labels)
    rng = make_rng(seed)
    start = time.perf_counter()

    model.zero_grad()
    loss, _, _, out = compute_losses(model, images, labels, cfg)
    loss.backward()
    teacher = out.teacher.detach()

    def value() -> float:
        with torch.no_grad():
            return float(compute_losses(model, images, labels, cfg, teacher=teacher)[0])

    entries: list[GradEntry] = []
    per_tensor: dict[str, float] = {}
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        grad = torch.zeros_like(p) if p.grad is None else p.grad.detach().clone()
        flat = p.data.view(-1)
        picks = (
            np.arange(flat.numel()) if flat.numel() <= samples_per_tensor
            else np.sort(rng.choice(flat.numel(), samples_per_tensor, replace=False))
        )
        worst = 0.0
        for k in picks:
            k = int(k)
            orig = float(flat[k])
            flat[k] = orig + h
            up = value()
            flat[k] = orig - h
            down = value()
            flat[k] = orig
            numeric = (up - down) / (2 * h)
            analytic = float(grad.view(-1)[k])
            err = relative_error(analytic, numeric, floor)
            worst = max(worst, err)
            idx = tuple(int(i) for i in np.unravel_index(k, tuple(p.shape))) if p.ndim else ()
            entries.append(GradEntry(name, idx, analytic, numeric, err))
        per_tensor[name] = worst
    model.zero_grad()
    return GradCheckReport(entries, rel_tol, time.perf_counter() - start, per_tensor)
