"""Patch extraction and class-balanced batch sampling."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from dla.errors import DataError
from dla.volume import AIR_HU, BONE, SOFT, VESSEL, Volume

__all__ = [
    "BalancedBatchSampler",
    "Batch",
    "PatchSource",
    "extract_patch",
    "extract_patches",
]

CLASSES = (VESSEL, BONE, SOFT)


def _check_patch_shape(p, s):
    if p < 1 or s < 1 or p % 2 == 0 or s % 2 == 0:
        raise ValueError(f"patch size and slice count must be odd and positive, got P={p}, S={s}")


def _padded(fill: Volume, p: int, s: int) -> np.ndarray:
    rp, rs = p // 2, s // 2
    return np.pad(fill.values, ((rs, rs), (rp, rp), (rp, rp)), constant_values=np.float32(AIR_HU))


def extract_patches(fill: Volume, centers, p: int = 41, s: int = 5, padded=None) -> np.ndarray:
    """Patches of shape (n, S, P, P) around linear voxel indices ``centers``.

    The window covers P x P voxels in-plane and S slices along z; positions
    outside the volume read as air.
    """
    _check_patch_shape(p, s)
    centers = np.asarray(centers, dtype=np.int64).ravel()
    if centers.size and (centers.min() < 0 or centers.max() >= fill.n_voxels):
        raise IndexError("patch centre outside the volume")
    if padded is None:
        padded = _padded(fill, p, s)
    windows = sliding_window_view(padded, (s, p, p))
    z, y, x = np.unravel_index(centers, fill.shape)
    return windows[z, y, x]


def extract_patch(fill: Volume, center: int, p: int = 41, s: int = 5) -> np.ndarray:
    return extract_patches(fill, [center], p, s)[0]


class PatchSource:
    """Labeled patch centres drawn from one or more fill volumes.

    Patches are cut on demand, so a large labeled set never has to be held
    in memory as patches.

    Parameters
    ----------
    volumes : sequence of Volume
    entries : sequence of LabeledVoxelSet
        One per volume.
    """

    def __init__(self, volumes: Sequence[Volume], entries, patch_size: int = 41, n_slices: int = 5):
        if len(volumes) != len(entries):
            raise ValueError("need one LabeledVoxelSet per volume")
        _check_patch_shape(patch_size, n_slices)
        self.volumes = list(volumes)
        self.patch_size = patch_size
        self.n_slices = n_slices
        case, index, label = [], [], []
        for k, (vol, ents) in enumerate(zip(volumes, entries)):
            if tuple(ents.shape) != vol.shape:
                raise DataError(f"labeled set {k} does not match its volume dims")
            case.append(np.full(len(ents), k, dtype=np.int32))
            index.append(ents.indices)
            label.append(ents.classes)
        self.case = np.concatenate(case) if case else np.zeros(0, np.int32)
        self.index = np.concatenate(index) if index else np.zeros(0, np.int64)
        self.labels = np.concatenate(label) if label else np.zeros(0, np.uint8)
        self._padded = [None] * len(self.volumes)

    def __len__(self):
        return int(self.labels.size)

    @property
    def shape(self):
        return (len(self), self.n_slices, self.patch_size, self.patch_size)

    def _pad(self, k):
        if self._padded[k] is None:
            self._padded[k] = _padded(self.volumes[k], self.patch_size, self.n_slices)
        return self._padded[k]

    def take(self, rows) -> np.ndarray:
        """Patches for the given row numbers, in the given order, as float64."""
        rows = np.asarray(rows, dtype=np.int64)
        out = np.empty((rows.size, self.n_slices, self.patch_size, self.patch_size))
        for k in np.unique(self.case[rows]):
            sel = np.flatnonzero(self.case[rows] == k)
            out[sel] = extract_patches(
                self.volumes[k], self.index[rows[sel]], self.patch_size, self.n_slices, self._pad(k)
            )
        return out

    def __getitem__(self, rows):
        return self.take(np.arange(len(self))[rows])


@dataclass
class Batch:
    rows: np.ndarray
    labels: np.ndarray


class BalancedBatchSampler:
    """Batches in which each slot picks one of the three classes uniformly.

    Within a class, members are drawn without replacement; a pool is
    reshuffled when exhausted.  One epoch is one full pass over the vessel
    pool.

    Parameters
    ----------
    labels : array of class codes in {1, 2, 3}
        Label of every row of the underlying dataset.
    seed : int
    """

    def __init__(self, labels, seed=0):
        labels = np.asarray(labels)
        self.rng = np.random.default_rng(seed)
        self.pools: Dict[int, np.ndarray] = {}
        for c in CLASSES:
            pool = np.flatnonzero(labels == c)
            if pool.size == 0:
                raise DataError(f"class {c} has an empty sampling pool")
            self.pools[c] = pool
        self._order = {c: self.rng.permutation(self.pools[c]) for c in CLASSES}
        self._cursor = {c: 0 for c in CLASSES}
        self.passes = {c: 0 for c in CLASSES}

    @property
    def epoch(self) -> int:
        return self.passes[VESSEL]

    def iterations_per_epoch(self, batch_size: int) -> float:
        """Expected iterations per pass over the vessel pool."""
        return len(self.pools[VESSEL]) * len(CLASSES) / batch_size

    def _draw(self, c, n) -> List[int]:
        out = []
        while n:
            order, cur = self._order[c], self._cursor[c]
            take = min(n, order.size - cur)
            out.extend(order[cur:cur + take].tolist())
            cur += take
            n -= take
            if cur == order.size:
                self.passes[c] += 1
                self._order[c] = self.rng.permutation(self.pools[c])
                cur = 0
            self._cursor[c] = cur
        return out

    def next_batch(self, batch_size: int) -> Batch:
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        slots = self.rng.integers(0, len(CLASSES), size=batch_size)
        rows = np.empty(batch_size, dtype=np.int64)
        for i, c in enumerate(CLASSES):
            where = np.flatnonzero(slots == i)
            if where.size:
                rows[where] = self._draw(c, where.size)
        labels = np.array(CLASSES, dtype=np.uint8)[slots]
        return Batch(rows, labels)
