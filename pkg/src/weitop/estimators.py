"""scikit-learn style wrappers.

``WeiADEncoder`` maps images to global descriptors; ``PlaceRetriever``
indexes descriptors and answers nearest-neighbour queries. They chain in a
``Pipeline``: fitting trains the encoder and indexes the references,
``predict`` returns the place id of the top-1 reference.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .data import SynthDataset
from .model import WeiADNet, make_config
from .pruning import DEFAULT_KAPPA
from .retrieval import DescriptorDb, knn_search, positives_by_label, recall_at_k
from .training import FULL_SCALE_LR, MsLossConfig, TrainConfig, build_model, train
from .validation import check_descriptors, check_images, check_labels, check_rho


class WeiADEncoder(TransformerMixin, BaseEstimator):
    def __init__(
        self,
        image_side=56,
        patch_size=14,
        width=64,
        depth=4,
        heads=4,
        tiers=(6, 5, 4, 1),
        d_low=32,
        d_cls=64,
        hidden=512,
        epsilon=0.1,
        sinkhorn_iters=100,
        ghost_penalty=0.5,
        prune_layer=1,
        epochs=4,
        places_per_batch=15,
        views_per_place=4,
        place_repeats=1,
        lr=FULL_SCALE_LR,
        gamma=0.1,
        temperature=0.1,
        rho=1.0,
        kappa=DEFAULT_KAPPA,
        seed=0,
    ):
        self.image_side = image_side
        self.patch_size = patch_size
        self.width = width
        self.depth = depth
        self.heads = heads
        self.tiers = tiers
        self.d_low = d_low
        self.d_cls = d_cls
        self.hidden = hidden
        self.epsilon = epsilon
        self.sinkhorn_iters = sinkhorn_iters
        self.ghost_penalty = ghost_penalty
        self.prune_layer = prune_layer
        self.epochs = epochs
        self.places_per_batch = places_per_batch
        self.views_per_place = views_per_place
        self.place_repeats = place_repeats
        self.lr = lr
        self.gamma = gamma
        self.temperature = temperature
        self.rho = rho
        self.kappa = kappa
        self.seed = seed

    def model_config(self, channels: int = 3):
        return make_config(
            image_side=self.image_side, patch_size=self.patch_size, width=self.width,
            depth=self.depth, heads=self.heads, prune_layer=self.prune_layer,
            tiers=tuple(self.tiers), d_low=self.d_low, d_cls=self.d_cls, hidden=self.hidden,
            epsilon=self.epsilon, sinkhorn_iters=self.sinkhorn_iters,
            ghost_penalty=self.ghost_penalty, channels=channels,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs, places_per_batch=self.places_per_batch,
            views_per_place=self.views_per_place, place_repeats=self.place_repeats,
            lr=self.lr, gamma=self.gamma, temperature=self.temperature,
            ms=MsLossConfig(), seed=self.seed,
        )

    def fit(self, X, y):
        """Train on images ``X`` labelled by place id ``y``. ``epochs=0`` keeps the initialization."""
        X = check_images(X, self.image_side)
        y = check_labels(y, len(X))
        cfg = self.model_config(X.shape[3])
        if self.epochs == 0:
            self.model_ = build_model(cfg, self.seed)
            self.trace_, self.initial_ = [], {}
        else:
            views = np.zeros(len(y), dtype=np.int64)
            ds = SynthDataset(X, y, views, np.zeros((len(y), cfg.encoder.n_patches), bool), {})
            res = train(ds, cfg, self.train_config())
            self.model_, self.trace_, self.initial_ = res.model, res.trace, res.initial
        self.model_.eval()
        self.n_features_out_ = self.model_.descriptor_dim
        return self

    @classmethod
    def from_model(cls, model: WeiADNet, **params) -> "WeiADEncoder":
        """Wrap an already trained network, e.g. one loaded from a checkpoint."""
        enc, agg = model.cfg.encoder, model.cfg.aggregator
        est = cls(
            image_side=enc.image_side, patch_size=enc.patch_size, width=enc.width,
            depth=enc.depth, heads=enc.heads, tiers=tuple(agg.tiers.sizes), d_low=agg.d_low,
            d_cls=agg.d_cls, hidden=agg.hidden, epsilon=agg.epsilon,
            sinkhorn_iters=agg.sinkhorn_iters, ghost_penalty=agg.tiers.ghost_penalty,
            prune_layer=enc.prune_layer, **params,
        )
        est.model_ = model.eval()
        est.trace_, est.initial_ = [], {}
        est.n_features_out_ = model.descriptor_dim
        return est

    def transform(self, X):
        check_is_fitted(self, "model_")
        X = check_images(X, self.image_side)
        rho = check_rho(self.rho)
        # rho=1 keeps every token; skip the hook entirely
        kw = {} if rho == 1.0 else dict(rho=rho, kappa=self.kappa)
        return self.model_.describe(X, **kw)


class PlaceRetriever(BaseEstimator):
    """Exact nearest-neighbour lookup over unit-norm descriptors."""

    def __init__(self, n_neighbors=5):
        self.n_neighbors = n_neighbors

    def fit(self, X, y):
        X = check_descriptors(X)
        y = check_labels(y, len(X))
        self.db_ = DescriptorDb(X, y)
        self.n_features_in_ = X.shape[1]
        return self

    def kneighbors(self, X, n_neighbors=None, return_distance=True):
        check_is_fitted(self, "db_")
        X = check_descriptors(X, self.n_features_in_)
        k = self.n_neighbors if n_neighbors is None else n_neighbors
        ids, dists = knn_search(X, self.db_, min(k, len(self.db_)))
        return (dists, ids) if return_distance else ids

    def predict(self, X):
        ids = self.kneighbors(X, 1, return_distance=False)
        return self.db_.place_ids[ids[:, 0]]

    def recall(self, X, y, ks=(1, 5)) -> dict[int, float]:
        k = min(max(ks), len(self.db_))
        ids = self.kneighbors(X, k, return_distance=False)
        return recall_at_k(ids, positives_by_label(y, self.db_.place_ids), ks)

    def score(self, X, y) -> float:
        """Recall@1."""
        return self.recall(X, y, (1,))[1]
