"""Synthetic place-recognition data.

Each place owns a latent field of patch textures. With ``vocab_size`` set,
every patch of the field is drawn independently from a shared codebook of
that many textures, so a single token says only ``log2(vocab_size)`` bits
about the place and retrieval needs many tokens to agree. A view of the place copies
the field, applies a global gain jitter and pixel noise, and overwrites a
random subset of patches with low-norm i.i.d. noise, the stand-in for
uninformative sky/road regions. Distinct places draw independent fields.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .numerics import make_rng


@dataclass
class SynthDataset:
    images: np.ndarray  # (n, H, W, C) float64
    labels: np.ndarray  # (n,) place ids
    views: np.ndarray  # (n,) view index within the place
    distractor_mask: np.ndarray  # (n, N0) True where the patch is a distractor
    params: dict

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, mask) -> "SynthDataset":
        return SynthDataset(
            self.images[mask], self.labels[mask], self.views[mask],
            self.distractor_mask[mask], dict(self.params),
        )

    def checksum(self) -> str:
        h = hashlib.sha256()
        for arr in (self.images, self.labels, self.views, self.distractor_mask):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def save(self, path) -> None:
        np.savez(
            path, images=self.images, labels=self.labels, views=self.views,
            distractor_mask=self.distractor_mask,
            params=np.array(repr(self.params)),
        )

    @classmethod
    def load(cls, path) -> "SynthDataset":
        import ast

        with np.load(path, allow_pickle=False) as z:
            return cls(
                z["images"], z["labels"], z["views"], z["distractor_mask"],
                ast.literal_eval(str(z["params"])),
            )


def make_synth_dataset(
    num_places: int,
    views_per_place: int,
    noise: float = 0.5,
    distractor_frac: float = 0.3,
    seed: int = 0,
    *,
    image_side: int = 56,
    patch_size: int = 14,
    channels: int = 3,
    jitter: float = 0.0,
    distractor_scale: float = 0.1,
    vocab_size: int | None = None,
) -> SynthDataset:
    if num_places < 1 or views_per_place < 1:
        raise ValueError("num_places and views_per_place must be at least 1")
    if not 0.0 <= distractor_frac < 1.0:
        raise ValueError("distractor_frac must lie in [0, 1)")
    if image_side % patch_size:
        raise ValueError("image side must be divisible by the patch size")
    rng = make_rng(seed)
    g = image_side // patch_size
    n0 = g * g
    n_distract = int(round(distractor_frac * n0))
    p = patch_size

    n = num_places * views_per_place
    patches = np.empty((n, n0, p, p, channels))
    mask = np.zeros((n, n0), dtype=bool)
    labels = np.repeat(np.arange(num_places), views_per_place)
    views = np.tile(np.arange(views_per_place), num_places)
    codebook = None
    if vocab_size is not None:
        if vocab_size < 1:
            raise ValueError("vocab_size must be at least 1")
        codebook = rng.standard_normal((vocab_size, p, p, channels))
    for place in range(num_places):
        if codebook is None:
            latent = rng.standard_normal((n0, p, p, channels))
        else:
            latent = codebook[rng.integers(0, vocab_size, size=n0)]
        for v in range(views_per_place):
            k = place * views_per_place + v
            gain = 1.0 + jitter * rng.uniform(-1.0, 1.0)
            view = gain * latent + noise * rng.standard_normal(latent.shape)
            if n_distract:
                idx = rng.choice(n0, size=n_distract, replace=False)
                view[idx] = distractor_scale * rng.standard_normal((n_distract, p, p, channels))
                mask[k, idx] = True
            patches[k] = view
    images = patches.reshape(n, g, g, p, p, channels).transpose(0, 1, 3, 2, 4, 5)
    images = np.ascontiguousarray(images.reshape(n, image_side, image_side, channels))
    params = dict(
        num_places=num_places, views_per_place=views_per_place, noise=noise,
        distractor_frac=distractor_frac, seed=seed, image_side=image_side,
        patch_size=patch_size, channels=channels, jitter=jitter,
        distractor_scale=distractor_scale, vocab_size=vocab_size,
    )
    return SynthDataset(images, labels, views, mask, params)


def split_places(ds: SynthDataset, holdout_frac: float = 0.3, seed: int = 0):
    """Place-disjoint train / held-out split. Held-out places are chosen at random."""
    places = np.unique(ds.labels)
    n_hold = max(1, int(round(holdout_frac * len(places))))
    held = make_rng(seed).choice(places, size=n_hold, replace=False)
    is_held = np.isin(ds.labels, held)
    return ds.subset(~is_held), ds.subset(is_held)


def query_reference_split(ds: SynthDataset, n_reference_views: int = 2):
    """First ``n_reference_views`` views of each place form the database, the rest query it."""
    is_ref = ds.views < n_reference_views
    return ds.subset(~is_ref), ds.subset(is_ref)


# Synthetic benchmark: 50 places x 6 views. Views 0-3 of every place train
# the model and form the reference database; views 4-5 are held-out queries.
BENCHMARK = dict(
    num_places=50, views_per_place=6, noise=0.3, distractor_frac=0.15,
    image_side=70, vocab_size=64,
)
TRAIN_VIEWS = 4


def benchmark_split(ds: SynthDataset, train_views: int = TRAIN_VIEWS):
    """``(train, queries, references)``; the references are the training views."""
    queries, refs = query_reference_split(ds, train_views)
    return refs, queries, refs
