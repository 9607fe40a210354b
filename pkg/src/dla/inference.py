"""Voxel-wise classification of an ROI and assembly of the vessels-only volume."""

from __future__ import annotations

import multiprocessing
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from dla.errors import ShapeMismatchError
from dla.nn import Architecture, check_params, forward, softmax
from dla.patches import _padded, extract_patches
from dla.volume import AIR_HU, ROI, VESSEL, Volume

__all__ = ["ClassProbVolume", "InferenceResult", "classify_volume", "make_dla"]


@dataclass(frozen=True, eq=False)
class ClassProbVolume:
    """Per-voxel class probabilities over an ROI, shape ROI.shape + (3,)."""

    roi: ROI
    probs: np.ndarray


@dataclass(frozen=True, eq=False)
class InferenceResult:
    probs: ClassProbVolume
    labels: np.ndarray  # uint8 class codes over the ROI
    voxels_per_s: float

    def full_labels(self, shape) -> np.ndarray:
        """Label volume of ``shape`` with zeros outside the ROI."""
        out = np.zeros(shape, dtype=np.uint8)
        out[self.probs.roi.slices] = self.labels
        return out


# Per-process state, set once by _init_worker so tiles only carry indices.
_STATE = {}


def _init_worker(params, arch, fill):
    _STATE.update(params=params, arch=arch, fill=fill,
                  padded=_padded(fill, arch.patch_size, arch.n_slices))


def _classify_tile(centers):
    s = _STATE
    with threadpool_limits(limits=1):
        x = extract_patches(s["fill"], centers, s["arch"].patch_size, s["arch"].n_slices, s["padded"])
        return softmax(forward(s["params"], s["arch"], x.astype(np.float64)))


def classify_volume(params, arch: Architecture, fill: Volume, roi: ROI = None, workers: int = 1,
                    tile_size: int = 512) -> InferenceResult:
    """Classify every ROI voxel from its own patch.

    Tiles are fixed by the ROI and ``tile_size`` and each is computed with a
    single BLAS thread, so results do not depend on ``workers``.  Labels take
    the argmax with ties going to the lowest class code.
    """
    check_params(params, arch)
    roi = ROI.full(fill.shape) if roi is None else roi
    roi.check_within(fill.shape)
    if workers < 1 or tile_size < 1:
        raise ValueError("workers and tile_size must be positive")
    centers = roi.linear_indices(fill.shape)
    tiles = [centers[i:i + tile_size] for i in range(0, centers.size, tile_size)]

    start = time.perf_counter()
    if workers == 1:
        _init_worker(params, arch, fill)
        try:
            parts = [_classify_tile(t) for t in tiles]
        finally:
            _STATE.clear()
    else:
        ctx = multiprocessing.get_context("fork")
        with ProcessPoolExecutor(max_workers=workers, mp_context=ctx, initializer=_init_worker,
                                 initargs=(params, arch, fill)) as pool:
            parts = list(pool.map(_classify_tile, tiles))
    elapsed = time.perf_counter() - start

    probs = np.concatenate(parts).astype(np.float32).reshape(roi.shape + (arch.n_classes,))
    # np.argmax returns the first maximum, i.e. the lowest class code
    labels = (np.argmax(probs, axis=-1) + 1).astype(np.uint8)
    rate = centers.size / elapsed if elapsed > 0 else float("inf")
    return InferenceResult(ClassProbVolume(roi, probs), labels, rate)


def make_dla(fill: Volume, labels: np.ndarray, roi: ROI = None) -> Volume:
    """Vessels-only volume: fill HU on vessel-labeled voxels, air elsewhere.

    ``labels`` covers ``roi`` (the whole volume when omitted).
    """
    roi = ROI.full(fill.shape) if roi is None else roi
    roi.check_within(fill.shape)
    labels = np.asarray(labels)
    if labels.shape != roi.shape:
        raise ShapeMismatchError(f"labels {labels.shape} do not match ROI {roi.shape}")
    out = np.full(fill.shape, np.float32(AIR_HU), dtype=np.float32)
    region = fill.values[roi.slices]
    out[roi.slices] = np.where(labels == VESSEL, region, np.float32(AIR_HU))
    return fill.with_values(out)
