"""Rule-based training labels from a mask/fill volume pair.

Vessels come from thresholding the subtraction volume, bone from the fill
volume with vessels removed, soft tissue from an eroded HU window of the fill
volume.  Small connected components are discarded as artifacts.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Tuple

import numpy as np
from scipy import ndimage

from dla.errors import ConfigError, EmptyClassError, ShapeMismatchError
from dla.volume import BONE, SOFT, VESSEL, Volume, subtract, threshold_mask

__all__ = [
    "ComponentLabeling",
    "LabelGenConfig",
    "LabeledVoxelSet",
    "build_and_undersample",
    "connected_components",
    "erode",
    "extract_bone",
    "extract_soft_tissue",
    "extract_vasculature",
    "generate_labels",
]

CLASS_NAMES = {VESSEL: "vessel", BONE: "bone", SOFT: "soft"}

_STRUCTURES = {
    6: ndimage.generate_binary_structure(3, 1),
    18: ndimage.generate_binary_structure(3, 2),
    26: ndimage.generate_binary_structure(3, 3),
}


@dataclass(frozen=True)
class LabelGenConfig:
    vessel_threshold_hu: float = 600.0
    vessel_min_component_voxels: int = 50
    bone_threshold_hu: float = 400.0
    bone_min_component_voxels: int = 500
    soft_range_hu: Tuple[float, float] = (-400.0, 500.0)
    erosion_radius_voxels: int = 1
    undersample_seed: int = 0

    def __post_init__(self):
        for name in ("vessel_threshold_hu", "bone_threshold_hu"):
            if not np.isfinite(getattr(self, name)):
                raise ConfigError(f"{name} must be finite")
        for name in ("vessel_min_component_voxels", "bone_min_component_voxels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        lo, hi = self.soft_range_hu
        if not lo <= hi:
            raise ConfigError("soft_range_hu must satisfy lo <= hi")
        if self.erosion_radius_voxels < 0:
            raise ConfigError("erosion_radius_voxels must be >= 0")


@dataclass(frozen=True, eq=False)
class ComponentLabeling:
    """Component id per voxel (0 = background) and the size of each id."""

    ids: np.ndarray
    sizes: np.ndarray = field(repr=False)

    @property
    def n_components(self) -> int:
        return int(self.sizes.size)


@dataclass(frozen=True, eq=False)
class LabeledVoxelSet:
    """Labeled voxels addressed by linear index into a volume of ``shape``."""

    indices: np.ndarray
    classes: np.ndarray
    shape: Tuple[int, int, int]

    def __post_init__(self):
        indices = np.asarray(self.indices, dtype=np.int64)
        classes = np.asarray(self.classes, dtype=np.uint8)
        if indices.shape != classes.shape or indices.ndim != 1:
            raise ShapeMismatchError("indices and classes must be aligned 1D arrays")
        n = int(np.prod(self.shape))
        if indices.size and (indices.min() < 0 or indices.max() >= n):
            raise ValueError("voxel index out of range")
        if np.unique(indices).size != indices.size:
            raise ValueError("voxel indices must be unique")
        if classes.size and not np.isin(classes, (VESSEL, BONE, SOFT)).all():
            raise ValueError("classes must be in {1, 2, 3}")
        object.__setattr__(self, "indices", indices)
        object.__setattr__(self, "classes", classes)
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))

    def __len__(self):
        return int(self.indices.size)

    def counts(self):
        return {c: int((self.classes == c).sum()) for c in (VESSEL, BONE, SOFT)}

    def to_tsv(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            nz, ny, nx = self.shape
            fh.write(f"# dims\t{nx}\t{ny}\t{nz}\n")
            for idx, cls in zip(self.indices.tolist(), self.classes.tolist()):
                fh.write(f"{idx}\t{cls}\n")

    @classmethod
    def from_tsv(cls, path, shape=None):
        indices, classes = [], []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                if line.startswith("#"):
                    parts = line[1:].split()
                    if parts and parts[0] == "dims" and shape is None:
                        nx, ny, nz = (int(p) for p in parts[1:4])
                        shape = (nz, ny, nx)
                    continue
                idx, c = line.split("\t")
                indices.append(int(idx))
                classes.append(int(c))
        if shape is None:
            raise ValueError(f"{path}: no dims line and no shape given")
        return cls(np.array(indices, dtype=np.int64), np.array(classes, dtype=np.uint8), shape)


def connected_components(mask: np.ndarray, connectivity: int = 26) -> ComponentLabeling:
    """Label connected foreground regions.

    Ids are dense, start at 1 and follow the order in which a component is
    first met in a linear (x-fastest) scan.
    """
    if connectivity not in _STRUCTURES:
        raise ValueError("connectivity must be 6, 18 or 26")
    mask = np.asarray(mask, dtype=bool)
    ids, k = ndimage.label(mask, structure=_STRUCTURES[connectivity])
    ids = ids.astype(np.int32, copy=False)
    if k:
        # enforce first-encounter numbering regardless of the labeller's internals
        flat = ids.ravel()
        nz = np.flatnonzero(flat)
        _, first = np.unique(flat[nz], return_index=True)
        order = np.argsort(first, kind="stable")
        remap = np.zeros(k + 1, dtype=np.int32)
        remap[order + 1] = np.arange(1, k + 1, dtype=np.int32)
        ids = remap[ids]
    sizes = np.bincount(ids.ravel(), minlength=k + 1)[1:].astype(np.int64)
    return ComponentLabeling(ids, sizes)


def _keep_large_components(mask, min_size):
    cc = connected_components(mask, 26)
    keep = np.zeros(cc.n_components + 1, dtype=bool)
    keep[1:] = cc.sizes >= min_size
    return keep[cc.ids]


def extract_vasculature(subtracted: Volume, cfg: LabelGenConfig = LabelGenConfig()) -> np.ndarray:
    """Supra-threshold subtraction voxels in sufficiently large 26-components."""
    candidates = threshold_mask(subtracted, cfg.vessel_threshold_hu)
    return _keep_large_components(candidates, cfg.vessel_min_component_voxels)


def extract_bone(fill: Volume, vessels: np.ndarray, cfg: LabelGenConfig = LabelGenConfig()) -> np.ndarray:
    if vessels.shape != fill.shape:
        raise ShapeMismatchError(f"vessel mask {vessels.shape} vs fill {fill.shape}")
    values = np.where(vessels, np.float32(0.0), fill.values)
    candidates = values >= cfg.bone_threshold_hu
    return _keep_large_components(candidates, cfg.bone_min_component_voxels)


def erode(mask: np.ndarray, radius_voxels: int) -> np.ndarray:
    """Binary erosion by a cube of side ``2 r + 1``.

    A voxel survives when every in-volume voxel within Chebyshev distance
    ``r`` is set; positions outside the volume do not erode.
    """
    if radius_voxels < 0:
        raise ValueError("radius must be >= 0")
    mask = np.asarray(mask, dtype=bool)
    if radius_voxels == 0:
        return mask.copy()
    size = 2 * radius_voxels + 1
    return ndimage.binary_erosion(mask, structure=np.ones((size,) * 3, dtype=bool), border_value=1)


def extract_soft_tissue(
    fill: Volume, vessels: np.ndarray, bone: np.ndarray, cfg: LabelGenConfig = LabelGenConfig()
) -> np.ndarray:
    for name, m in (("vessel", vessels), ("bone", bone)):
        if m.shape != fill.shape:
            raise ShapeMismatchError(f"{name} mask {m.shape} vs fill {fill.shape}")
    lo, hi = cfg.soft_range_hu
    soft = erode(threshold_mask(fill, lo, hi), cfg.erosion_radius_voxels)
    return soft & ~vessels & ~bone


def build_and_undersample(
    vessels: np.ndarray, bone: np.ndarray, soft: np.ndarray, cfg: LabelGenConfig = LabelGenConfig()
) -> Tuple[np.ndarray, LabeledVoxelSet]:
    """Assemble a label volume and draw the class-balanced voxel sample.

    Overlaps are resolved vessel > bone > soft.  Every vessel voxel is kept;
    bone and soft are sampled without replacement down to the vessel count.
    A minority class smaller than the vessel count is taken whole with a
    warning.

    Raises
    ------
    EmptyClassError
        If any of the three classes has no voxels.
    """
    if not (vessels.shape == bone.shape == soft.shape):
        raise ShapeMismatchError("class masks must share dims")
    bone = bone & ~vessels
    soft = soft & ~vessels & ~bone
    labels = np.zeros(vessels.shape, dtype=np.uint8)
    labels[soft] = SOFT
    labels[bone] = BONE
    labels[vessels] = VESSEL

    flat = labels.ravel()
    pools = {c: np.flatnonzero(flat == c) for c in (VESSEL, BONE, SOFT)}
    for c, pool in pools.items():
        if pool.size == 0:
            raise EmptyClassError(CLASS_NAMES[c])

    rng = np.random.default_rng(cfg.undersample_seed)
    n = pools[VESSEL].size
    chosen = [pools[VESSEL]]
    for c in (BONE, SOFT):
        pool = pools[c]
        if pool.size < n:
            warnings.warn(
                f"only {pool.size} {CLASS_NAMES[c]} voxels for {n} vessel voxels; taking all",
                stacklevel=2,
            )
            chosen.append(pool)
        else:
            chosen.append(np.sort(rng.choice(pool, size=n, replace=False)))
    indices = np.concatenate(chosen)
    classes = np.concatenate(
        [np.full(a.size, c, dtype=np.uint8) for a, c in zip(chosen, (VESSEL, BONE, SOFT))]
    )
    return labels, LabeledVoxelSet(indices, classes, vessels.shape)


def generate_labels(
    mask: Volume, fill: Volume, cfg: LabelGenConfig = LabelGenConfig(), roi=None
) -> Tuple[np.ndarray, LabeledVoxelSet]:
    """Full label pipeline for one case.

    When ``roi`` is given, class masks are cleared outside it before
    undersampling, mirroring region-restricted evaluation labels.
    """
    vessels = extract_vasculature(subtract(fill, mask), cfg)
    bone = extract_bone(fill, vessels, cfg)
    soft = extract_soft_tissue(fill, vessels, bone, cfg)
    if roi is not None:
        inside = roi.mask(fill.shape)
        vessels, bone, soft = vessels & inside, bone & inside, soft & inside
    return build_and_undersample(vessels, bone, soft, cfg)
