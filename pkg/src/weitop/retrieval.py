"""Exact nearest-neighbour retrieval, Recall@K, latency and the retention sweep."""
from __future__ import annotations

import csv
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch

from .encoder import flop_count
from .numerics import DomainError, make_rng

SWEEP_HEADER = ["rho", "recall_at_1", "recall_at_5", "latency_ms_median", "flops", "prune_layer"]
TABLE_RHOS = (1.0, 0.95, 0.7, 0.5, 0.4)


def n_workers() -> int:
    """Worker cap from ``WEITOP_THREADS`` (default 1)."""
    try:
        return max(1, int(os.environ.get("WEITOP_THREADS", "1")))
    except ValueError:
        return 1


@dataclass
class DescriptorDb:
    descriptors: np.ndarray  # (R, D), unit rows
    place_ids: np.ndarray  # (R,)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.descriptors = np.ascontiguousarray(self.descriptors, dtype=np.float64)
        self.place_ids = np.asarray(self.place_ids)
        if self.descriptors.ndim != 2 or len(self.place_ids) != len(self.descriptors):
            raise DomainError("descriptors must be (R, D) with one place id per row")
        if len(self.descriptors):
            norms = np.linalg.norm(self.descriptors, axis=1)
            if np.abs(norms - 1.0).max() > 1e-6:
                raise DomainError("database descriptors must be unit-norm")

    def __len__(self) -> int:
        return len(self.place_ids)


def _search_block(queries: np.ndarray, refs: np.ndarray, k: int):
    ids = np.empty((len(queries), k), dtype=np.int64)
    dists = np.empty((len(queries), k))
    for i, q in enumerate(queries):
        d = ((refs - q) ** 2).sum(axis=1)
        order = np.argsort(d, kind="stable")[:k]
        ids[i], dists[i] = order, d[order]
    return ids, dists


def knn_search(query, db: DescriptorDb, k: int):
    """Exact top-``k`` references by squared Euclidean distance.

    Returns ``(ids, distances)`` with reference row indices, nearest first;
    equal distances resolve to the lower index. A 1-D query gives 1-D output.
    """
    if len(db) == 0:
        raise DomainError("empty descriptor database")
    q = np.asarray(query, dtype=np.float64)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    if q.shape[1] != db.descriptors.shape[1]:
        raise DomainError(f"query dim {q.shape[1]} != database dim {db.descriptors.shape[1]}")
    if not 1 <= k <= len(db):
        raise DomainError(f"k must lie in [1, {len(db)}], got {k}")
    workers = min(n_workers(), len(q))
    if workers > 1:
        chunks = np.array_split(np.arange(len(q)), workers)
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(lambda c: _search_block(q[c], db.descriptors, k), chunks))
        ids = np.concatenate([p[0] for p in parts])
        dists = np.concatenate([p[1] for p in parts])
    else:
        ids, dists = _search_block(q, db.descriptors, k)
    return (ids[0], dists[0]) if single else (ids, dists)


def positives_by_label(query_labels, ref_labels) -> list[set[int]]:
    ref_labels = np.asarray(ref_labels)
    return [set(np.flatnonzero(ref_labels == lab).tolist()) for lab in np.asarray(query_labels)]


def recall_at_k(ranked, positives: Sequence[set], ks: Iterable[int] = (1, 5)) -> dict[int, float]:
    """Fraction of queries with a positive among their first ``k`` results."""
    ranked = np.asarray(ranked)
    if len(ranked) != len(positives):
        raise DomainError("one positive set per query is required")
    for i, pos in enumerate(positives):
        if not pos:
            raise DomainError(f"query {i} has no positives")
    out = {}
    for k in ks:
        hits = [bool(pos.intersection(row[:k].tolist())) for row, pos in zip(ranked, positives)]
        out[int(k)] = float(np.mean(hits))
    return out


def evaluate(query_desc, query_labels, ref_desc, ref_labels, ks=(1, 5)) -> dict[int, float]:
    db = DescriptorDb(ref_desc, ref_labels)
    kmax = min(max(ks), len(db))
    ranked, _ = knn_search(query_desc, db, kmax)
    return recall_at_k(ranked, positives_by_label(query_labels, ref_labels), ks)


@dataclass
class LatencyReport:
    median_ms: float
    p90_ms: float
    samples_ms: list[float]

    @property
    def noise_bound(self) -> float:
        """Relative spread (p90 - median) / median, the run-to-run noise declared."""
        return (self.p90_ms - self.median_ms) / self.median_ms if self.median_ms else 0.0


def latency_bench(model, images, rho: float | None = 1.0, repeats: int = 20, warmup: int = 2,
                  **forward_kwargs) -> LatencyReport:
    """Per-image wall time from input tensor to descriptor, single-worker.

    Image conversion happens before the timed region; database search is not
    part of it. ``rho`` of 1.0 or None times the unpruned path.
    """
    x = torch.as_tensor(np.asarray(images), dtype=torch.float64)
    rho = None if rho is None or rho >= 1.0 else rho
    prev = torch.get_num_threads()
    torch.set_num_threads(1)
    model.eval()
    try:
        with torch.no_grad():
            for _ in range(warmup):
                model(x, rho=rho, **forward_kwargs)
            samples = []
            for _ in range(repeats):
                t0 = time.perf_counter()
                model(x, rho=rho, **forward_kwargs)
                samples.append((time.perf_counter() - t0) * 1e3 / len(x))
    finally:
        torch.set_num_threads(prev)
    return LatencyReport(float(np.median(samples)), float(np.percentile(samples, 90)), samples)


@dataclass
class SweepRow:
    rho: float
    recall_at_1: float
    recall_at_5: float
    latency_ms_median: float
    flops: float
    prune_layer: int


@dataclass
class SweepResult:
    rows: list[SweepRow]

    def column(self, name: str) -> list:
        return [getattr(r, name) for r in self.rows]

    def for_layer(self, layer: int) -> "SweepResult":
        return SweepResult([r for r in self.rows if r.prune_layer == layer])

    def write_csv(self, path_or_stream) -> None:
        """Write to a path or an open text stream."""
        if hasattr(path_or_stream, "write"):
            self._write(path_or_stream)
        else:
            with open(path_or_stream, "w", newline="", encoding="ascii") as fh:
                self._write(fh)

    def _write(self, fh) -> None:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_HEADER)
        for r in self.rows:
            w.writerow([repr(float(r.rho)), repr(r.recall_at_1), repr(r.recall_at_5),
                        f"{r.latency_ms_median:.6f}", repr(float(r.flops)), r.prune_layer])


def rho_sweep(
    model,
    queries,
    references,
    rhos: Sequence[float] = TABLE_RHOS,
    repeats: int = 5,
    prune_layers: Sequence[int] | None = None,
    kappa: float = 0.5,
    random_pruning: bool = False,
    seed: int = 0,
    ks=(1, 5),
) -> SweepResult:
    """Re-describe queries and references at each retention ratio with one checkpoint.

    ``queries`` and ``references`` are ``(images, labels)`` pairs. With
    ``random_pruning`` the kept sets are drawn uniformly instead of scored.
    """
    layers = [model.cfg.encoder.prune_layer] if prune_layers is None else list(prune_layers)
    q_img, q_lab = queries
    r_img, r_lab = references
    rows = []
    for layer in layers:
        for rho in sorted(set(float(r) for r in rhos), reverse=True):
            if rho == 1.0:
                kw = dict(rho=None)
            elif random_pruning:
                rng = make_rng(seed)
                kw = dict(selector=model.random_selector(rho, rng), prune_layer=layer)
            else:
                kw = dict(rho=rho, kappa=kappa, prune_layer=layer)
            qd = model.describe(q_img, **kw)
            rd = model.describe(r_img, **kw)
            rec = evaluate(qd, q_lab, rd, r_lab, ks)
            if repeats > 0:
                lat = latency_bench(model, q_img, rho=rho, repeats=repeats, kappa=kappa,
                                    prune_layer=layer).median_ms
            else:
                lat = float("nan")
            rows.append(SweepRow(rho, rec[1], rec.get(5, float("nan")), lat,
                                 flop_count(model.cfg.encoder, rho, layer), layer))
    return SweepResult(rows)
