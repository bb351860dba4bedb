"""Losses and the desk-scale training loop."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .data import SynthDataset
from .model import ModelConfig, WeiADNet
from .numerics import DTYPE, DomainError, NumericError, as_tensor, log_sum_exp, make_rng
from .pruning import DEFAULT_TEMPERATURE, distill_loss
from .retrieval import evaluate

log = logging.getLogger(__name__)

FULL_SCALE_LR = 6e-5


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, trace: list[dict]):
        super().__init__(message)
        self.trace = trace


@dataclass
class MsLossConfig:
    alpha: float = 1.0
    beta: float = 20.0
    ms_margin: float = 0.0
    mining: bool = False
    mining_epsilon: float = 0.1

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta > 0):
            raise DomainError("alpha and beta must be positive")


def _log1p_sum_exp(x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Row-wise ``log(1 + sum_{mask} exp(x))``."""
    x = torch.where(mask, x, torch.full_like(x, -math.inf))
    zero = torch.zeros_like(x[:, :1])
    return log_sum_exp(torch.cat([zero, x], dim=1), dim=1)


def ms_loss(descriptors, labels, cfg: MsLossConfig | None = None) -> torch.Tensor:
    """Multi-similarity loss over all in-batch pairs, averaged over anchors.

    Similarities are cosines, so descriptors must already be unit-norm.
    """
    cfg = cfg or MsLossConfig()
    g = as_tensor(descriptors)
    labels = torch.as_tensor(np.asarray(labels))
    if g.ndim != 2 or len(g) < 1:
        raise DomainError("need a (B, D) batch with at least one anchor")
    if (g.detach().norm(dim=1) - 1.0).abs().max() > 1e-6:
        raise DomainError("descriptors must be unit-norm")
    sim = g @ g.T
    same = labels[:, None] == labels[None, :]
    eye = torch.eye(len(g), dtype=torch.bool)
    pos, neg = same & ~eye, ~same
    if cfg.mining:
        s = sim.detach()
        hardest_pos = torch.where(pos, s, torch.full_like(s, math.inf)).amin(dim=1, keepdim=True)
        hardest_neg = torch.where(neg, s, torch.full_like(s, -math.inf)).amax(dim=1, keepdim=True)
        neg = neg & (s + cfg.mining_epsilon > hardest_pos)
        pos = pos & (s - cfg.mining_epsilon < hardest_neg)
    lam = cfg.ms_margin
    pos_term = _log1p_sum_exp(-cfg.alpha * (sim - lam), pos) / cfg.alpha
    neg_term = _log1p_sum_exp(cfg.beta * (sim - lam), neg) / cfg.beta
    return (pos_term + neg_term).mean()


def total_loss(retr, distill, gamma: float = 0.1):
    if gamma < 0:
        raise DomainError("gamma must be non-negative")
    return retr + gamma * distill


@dataclass
class TrainConfig:
    epochs: int = 4
    places_per_batch: int = 15
    views_per_place: int = 4
    # passes over the place list per epoch; >1 only to give tiny synthetic sets enough steps
    place_repeats: int = 1
    lr: float = FULL_SCALE_LR
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    gamma: float = 0.1
    temperature: float = DEFAULT_TEMPERATURE
    ms: MsLossConfig = field(default_factory=MsLossConfig)
    seed: int = 0


def compute_losses(model: WeiADNet, images, labels, cfg: TrainConfig, teacher=None):
    """``(total, retrieval, distill, output)`` for one batch.

    ``teacher`` overrides the detached teacher signal; finite-difference
    checks pass the unperturbed one so both sides treat it as a constant.
    """
    out = model(images)
    retr = ms_loss(out.descriptor, labels, cfg.ms)
    t = out.teacher if teacher is None else teacher
    distill = distill_loss(t, out.student_logits, cfg.temperature)
    return total_loss(retr, distill, cfg.gamma), retr, distill, out


def iterate_batches(labels: np.ndarray, views_per_place: int, places_per_batch: int,
                    rng: np.random.Generator, repeats: int = 1):
    """One epoch of P-places-by-K-views index batches; every place appears ``repeats`` times."""
    places = np.concatenate([rng.permutation(np.unique(labels)) for _ in range(repeats)])
    for start in range(0, len(places), places_per_batch):
        idx = []
        for place in places[start:start + places_per_batch]:
            members = np.flatnonzero(labels == place)
            k = min(views_per_place, len(members))
            idx.extend(np.sort(rng.choice(members, size=k, replace=False)))
        yield np.asarray(idx)


def build_model(cfg: ModelConfig, seed: int) -> WeiADNet:
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return WeiADNet(cfg)


def heldout_recall(model: WeiADNet, queries: SynthDataset, refs: SynthDataset, **kw) -> dict:
    qd = model.describe(queries.images, **kw)
    rd = model.describe(refs.images, **kw)
    return evaluate(qd, queries.labels, rd, refs.labels, (1, 5))


@dataclass
class TrainResult:
    model: WeiADNet
    trace: list[dict]
    initial: dict


def _probe(model, images, labels, cfg) -> tuple[float, float]:
    model.eval()
    with torch.no_grad():
        _, retr, distill, _ = compute_losses(model, images, labels, cfg)
    return float(retr), float(distill)


def train(
    train_set: SynthDataset,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    heldout: tuple[SynthDataset, SynthDataset] | None = None,
    model: WeiADNet | None = None,
) -> TrainResult:
    """AdamW with linear LR decay to zero over all steps.

    The trace has one row per epoch with the retrieval and distillation
    losses on a fixed probe batch, the tier weights and held-out Recall@1.
    """
    torch.set_num_threads(1)
    model = build_model(model_cfg, cfg.seed) if model is None else model
    rng = make_rng(cfg.seed)
    labels = np.asarray(train_set.labels)
    images = torch.as_tensor(train_set.images, dtype=DTYPE)

    probe_idx = next(iterate_batches(labels, cfg.views_per_place, cfg.places_per_batch,
                                     make_rng(cfg.seed + 1)))
    probe = (images[probe_idx], labels[probe_idx])

    n_places = len(np.unique(labels))
    steps_per_epoch = math.ceil(n_places * cfg.place_repeats / cfg.places_per_batch)
    total_steps = max(1, steps_per_epoch * cfg.epochs)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=cfg.lr, betas=cfg.betas, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda step: 1.0 - step / total_steps)

    retr0, distill0 = _probe(model, *probe, cfg)
    initial = {"l_retr": retr0, "l_distill": distill0}
    if heldout is not None:
        initial["recall_at_1"] = heldout_recall(model, *heldout)[1]
    trace: list[dict] = []
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        for idx in iterate_batches(labels, cfg.views_per_place, cfg.places_per_batch, rng,
                                   cfg.place_repeats):
            try:
                loss, retr, distill, _ = compute_losses(model, images[idx], labels[idx], cfg)
            except NumericError as e:
                raise TrainingDiverged(f"epoch {epoch}: {e}", trace) from e
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss in epoch {epoch}", trace)
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
        try:
            retr_e, distill_e = _probe(model, *probe, cfg)
        except NumericError as e:
            raise TrainingDiverged(f"probe after epoch {epoch}: {e}", trace) from e
        row = {"epoch": epoch, "l_retr": retr_e, "l_distill": distill_e}
        w = model.aggregator.tier_weights().detach().numpy()
        row.update({f"w_{t}": float(v) for t, v in enumerate(w)})
        row["recall_at_1"] = (
            heldout_recall(model, *heldout)[1]
            if heldout is not None else float("nan")
        )
        if not (math.isfinite(retr_e) and math.isfinite(distill_e)):
            trace.append(row)
            raise TrainingDiverged(f"non-finite probe loss after epoch {epoch}", trace)
        log.info("epoch %d: %s", epoch, row)
        trace.append(row)
    model.eval()
    return TrainResult(model, trace, initial)
