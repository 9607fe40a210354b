"""Synthetic head phantoms with exact tissue labels.

A phantom is an ellipsoidal skull shell around soft tissue, with one recursive
tube tree per root vessel entering through the bottom face of the volume.
The mask acquisition holds unenhanced tissue; the fill acquisition is the
mask plus contrast on vessel voxels.  Where a vessel crosses the skull it runs
through a foramen lined with a thin soft-tissue sheath.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import List, Tuple

import numpy as np
from scipy import ndimage

from dla.errors import PhantomError
from dla.volume import AIR_HU, BONE, DEFAULT_SPACING_MM, SOFT, VESSEL, Volume

__all__ = [
    "PhantomCase",
    "PhantomSpec",
    "RigidTransform",
    "apply_motion",
    "generate_phantom",
]


@dataclass(frozen=True)
class RigidTransform:
    """Translation in mm plus a small rotation about the z axis through the
    volume centre."""

    translation_mm: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    rotation_deg_z: float = 0.0

    def __post_init__(self):
        t = tuple(float(v) for v in self.translation_mm)
        if len(t) != 3 or not all(math.isfinite(v) for v in t):
            raise ValueError("translation_mm must be three finite numbers")
        if not math.isfinite(self.rotation_deg_z) or abs(self.rotation_deg_z) > 5.0:
            raise ValueError("rotation_deg_z must be finite with |angle| <= 5")
        object.__setattr__(self, "translation_mm", t)
        object.__setattr__(self, "rotation_deg_z", float(self.rotation_deg_z))

    @property
    def is_identity(self) -> bool:
        return self.rotation_deg_z == 0.0 and self.translation_mm == (0.0, 0.0, 0.0)

    def inverse(self) -> "RigidTransform":
        th = math.radians(self.rotation_deg_z)
        c, s = math.cos(th), math.sin(th)
        tx, ty, tz = self.translation_mm
        # p = R^-1 (p' - t), so the inverse translation is -R^-1 t
        return RigidTransform(
            (-(c * tx + s * ty), -(-s * tx + c * ty), -tz), -self.rotation_deg_z
        )


@dataclass(frozen=True)
class PhantomSpec:
    dims: Tuple[int, int, int] = (96, 96, 64)
    spacing_mm: float = DEFAULT_SPACING_MM
    seed: int = 0
    n_root_branches: int = 2
    branch_depth: int = 3
    radius_mm: Tuple[float, float] = (0.5, 2.5)
    vessel_fill_hu: Tuple[float, float] = (800.0, 1500.0)
    skull_semiaxes_mm: Tuple[float, float, float] = (20.0, 20.0, 13.0)
    skull_thickness_mm: float = 4.0
    bone_hu: Tuple[float, float] = (700.0, 1600.0)
    soft_hu: Tuple[float, float] = (0.0, 80.0)
    aneurysm_count: Tuple[int, int] = (0, 2)
    aneurysm_radius_mm: Tuple[float, float] = (1.0, 2.0)
    foramen_gap_mm: float = 1.0
    noise_sigma_hu: float = 15.0
    motion: RigidTransform = field(default_factory=RigidTransform)

    def __post_init__(self):
        object.__setattr__(self, "spacing_mm", float(np.float32(self.spacing_mm)))
        for name in ("dims", "radius_mm", "vessel_fill_hu", "skull_semiaxes_mm", "bone_hu", "soft_hu",
                     "aneurysm_count", "aneurysm_radius_mm"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        for name in ("radius_mm", "vessel_fill_hu", "bone_hu", "soft_hu", "aneurysm_count", "aneurysm_radius_mm"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise PhantomError(f"{name} range is empty: {lo} > {hi}")
        if self.radius_mm[0] <= 0 or self.aneurysm_radius_mm[0] <= 0:
            raise PhantomError("radii must be positive")
        if min(self.dims) < 1 or self.spacing_mm <= 0:
            raise PhantomError("dims and spacing must be positive")
        if self.n_root_branches < 1 or self.branch_depth < 1:
            raise PhantomError("need at least one root branch of depth >= 1")
        if self.aneurysm_count[0] < 0:
            raise PhantomError("aneurysm count must be >= 0")
        if self.noise_sigma_hu < 0 or self.foramen_gap_mm < 0:
            raise PhantomError("noise sigma and foramen gap must be >= 0")
        if self.skull_thickness_mm <= 0 or min(self.skull_semiaxes_mm) <= self.skull_thickness_mm:
            raise PhantomError("skull thickness must be positive and smaller than every semi-axis")
        half = [(n - 1) / 2 * self.spacing_mm for n in self.dims]
        if any(a > h for a, h in zip(self.skull_semiaxes_mm, half)):
            raise PhantomError(
                f"skull semi-axes {self.skull_semiaxes_mm} mm do not fit dims {self.dims}"
            )


@dataclass(frozen=True, eq=False)
class PhantomCase:
    mask: Volume
    fill: Volume
    truth: np.ndarray
    spec: PhantomSpec

    def equals(self, other: "PhantomCase") -> bool:
        return (
            self.mask.equals(other.mask)
            and self.fill.equals(other.fill)
            and np.array_equal(self.truth, other.truth)
        )


# --------------------------------------------------------------------------
# geometry helpers; coordinates are (x, y, z) in voxel units


@dataclass
class _Segment:
    start: np.ndarray
    end: np.ndarray
    radius: float
    value: float
    depth: int
    root: int


class _Geometry:
    def __init__(self, spec: PhantomSpec):
        nx, ny, nz = spec.dims
        self.spec = spec
        self.center = np.array([(nx - 1) / 2, (ny - 1) / 2, (nz - 1) / 2])
        self.outer = np.array(spec.skull_semiaxes_mm) / spec.spacing_mm
        self.inner = (np.array(spec.skull_semiaxes_mm) - spec.skull_thickness_mm) / spec.spacing_mm
        self.gap = spec.foramen_gap_mm / spec.spacing_mm
        n = spec.n_root_branches
        self.sector_width = 2 * math.pi / n

    def in_interior(self, p, margin):
        axes = self.inner - margin
        if np.any(axes <= 0):
            return False
        return float(np.sum(((p - self.center) / axes) ** 2)) <= 1.0

    def sector_clearance(self, p, root):
        """Distance in the xy plane from ``p`` to the edges of the root's sector."""
        n = self.spec.n_root_branches
        if n == 1:
            return math.inf
        a0 = root * self.sector_width
        a1 = a0 + self.sector_width
        d = p[:2] - self.center[:2]
        u0 = np.array([math.cos(a0), math.sin(a0)])
        u1 = np.array([math.cos(a1), math.sin(a1)])
        c0 = u0[0] * d[1] - u0[1] * d[0]
        c1 = d[0] * u1[1] - d[1] * u1[0]
        return min(c0, c1)

    def fits(self, p, radius, root):
        margin = radius + self.gap + 1.0
        return self.in_interior(p, margin) and self.sector_clearance(p, root) >= margin


def _random_perpendicular(rng, d):
    a = np.array([1.0, 0.0, 0.0]) if abs(d[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(d, a)
    u /= np.linalg.norm(u)
    w = np.cross(d, u)
    phi = rng.uniform(0, 2 * math.pi)
    return math.cos(phi) * u + math.sin(phi) * w, u, w


def _grow_tree(rng, geo: _Geometry, spec: PhantomSpec, root: int) -> List[_Segment]:
    s = spec.spacing_mm
    r_max, r_min = spec.radius_mm[1] / s, spec.radius_mm[0] / s
    decay = (r_min / r_max) ** (1.0 / (spec.branch_depth - 1)) if spec.branch_depth > 1 else 1.0
    vlo, vhi = spec.vessel_fill_hu

    bisector = (root + 0.5) * geo.sector_width
    c = geo.center
    rho = min(0.35 * geo.inner[0], 0.35 * geo.inner[1])
    if spec.n_root_branches == 1:
        rho = 0.0
    if spec.n_root_branches > 1 and rho * math.sin(min(geo.sector_width / 2, math.pi / 2)) < r_max + geo.gap + 1.0:
        raise PhantomError("root vessels do not fit side by side inside the skull")
    xy = c[:2] + rho * np.array([math.cos(bisector), math.sin(bisector)])
    start = np.array([xy[0], xy[1], -1.0])
    end = None
    for _ in range(100):
        z_end = c[2] - rng.uniform(0.25, 0.45) * geo.inner[2]
        jitter = rng.normal(0, 0.1 * rho + 0.5, size=2)
        cand = np.array([xy[0] + jitter[0], xy[1] + jitter[1], z_end])
        if geo.fits(cand, r_max, root) and geo.sector_clearance(start, root) >= r_max + geo.gap + 1.0:
            end = cand
            break
    if end is None:
        raise PhantomError("vessel tree cannot fit inside the skull interior")

    segments = [_Segment(start, end, r_max, rng.uniform(vlo, vhi), 1, root)]
    frontier = [segments[0]]
    while frontier:
        parent = frontier.pop(0)
        if parent.depth >= spec.branch_depth:
            continue
        d = parent.end - parent.start
        length = float(np.linalg.norm(d))
        d /= length
        child_r = max(r_min, min(r_max, parent.radius * decay * rng.uniform(0.9, 1.1)))
        if parent.depth + 1 == spec.branch_depth:
            child_r = max(child_r, r_min)
        base_len = 0.5 * float(min(geo.inner[0], geo.inner[1])) * 0.75 ** (parent.depth - 1)
        perp, _, _ = _random_perpendicular(rng, d)
        for k in range(2):
            sign = 1.0 if k == 0 else -1.0
            placed = None
            scale = 1.0
            max_angle = 80.0
            for attempt in range(400):
                if attempt and attempt % 50 == 0:
                    # relax: shorter branches, wider turning angles
                    scale *= 0.75
                    max_angle = min(max_angle + 20.0, 160.0)
                theta = math.radians(rng.uniform(40.0, max_angle))
                wobble, _, _ = _random_perpendicular(rng, d)
                side = sign * perp + (0.3 + attempt / 100.0) * wobble
                side -= np.dot(side, d) * d
                side /= np.linalg.norm(side)
                direction = math.cos(theta) * d + math.sin(theta) * side
                seg_len = max(3.0, scale * base_len * rng.uniform(0.6, 0.9))
                cand = parent.end + seg_len * direction
                if geo.fits(cand, child_r, root):
                    placed = cand
                    break
            if placed is None:
                raise PhantomError("vessel tree cannot fit inside the skull interior")
            child = _Segment(parent.end.copy(), placed, child_r, rng.uniform(vlo, vhi), parent.depth + 1, root)
            segments.append(child)
            frontier.append(child)
    return segments


def _capsule_mask(shape, start, end, radius):
    """Voxels whose centre lies within ``radius`` of the segment start-end.

    Returns the bounding-box slices and the boolean mask inside that box.
    """
    nz, ny, nx = shape
    lo = np.floor(np.minimum(start, end) - radius - 1).astype(int)
    hi = np.ceil(np.maximum(start, end) + radius + 2).astype(int)
    lo = np.maximum(lo, 0)
    hi = np.minimum(hi, [nx, ny, nz])
    if np.any(hi <= lo):
        return None, None
    z, y, x = np.meshgrid(
        np.arange(lo[2], hi[2]), np.arange(lo[1], hi[1]), np.arange(lo[0], hi[0]), indexing="ij"
    )
    p = np.stack([x, y, z], axis=-1).astype(np.float64)
    d = end - start
    dd = float(np.dot(d, d))
    t = np.clip(((p - start) @ d) / dd, 0.0, 1.0) if dd > 0 else np.zeros(p.shape[:-1])
    nearest = start + t[..., None] * d
    dist2 = np.sum((p - nearest) ** 2, axis=-1)
    box = (slice(lo[2], hi[2]), slice(lo[1], hi[1]), slice(lo[0], hi[0]))
    return box, dist2 <= radius * radius


def _smooth_field(rng, shape, lo, hi, sigma=4.0):
    g = ndimage.gaussian_filter(rng.standard_normal(shape), sigma=sigma, mode="nearest")
    span = g.max() - g.min()
    u = (g - g.min()) / span if span > 0 else np.zeros(shape)
    return lo + (hi - lo) * u


def generate_phantom(spec: PhantomSpec) -> PhantomCase:
    """Build a deterministic mask/fill/truth triple from ``spec``.

    Raises
    ------
    PhantomError
        If the vessel tree cannot be placed inside the skull interior.
    """
    rng = np.random.default_rng(spec.seed)
    geo = _Geometry(spec)
    nx, ny, nz = spec.dims
    shape = (nz, ny, nx)

    z, y, x = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx), indexing="ij")
    rel = np.stack([x - geo.center[0], y - geo.center[1], z - geo.center[2]], axis=0)
    outer_r = sum((rel[i] / geo.outer[i]) ** 2 for i in range(3))
    inner_r = sum((rel[i] / geo.inner[i]) ** 2 for i in range(3))
    interior = inner_r <= 1.0
    shell = (outer_r <= 1.0) & ~interior
    del rel, outer_r, inner_r, x, y, z

    segments: List[_Segment] = []
    for root in range(spec.n_root_branches):
        segments.extend(_grow_tree(rng, geo, spec, root))

    vessels = np.zeros(shape, dtype=bool)
    sheath = np.zeros(shape, dtype=bool)
    vessel_value = np.zeros(shape, dtype=np.float64)
    for seg in segments:
        box, m = _capsule_mask(shape, seg.start, seg.end, seg.radius)
        if box is not None:
            vessels[box] |= m
            vessel_value[box] = np.where(m, np.maximum(vessel_value[box], seg.value), vessel_value[box])
        box, m = _capsule_mask(shape, seg.start, seg.end, seg.radius + geo.gap)
        if box is not None:
            sheath[box] |= m

    lo_count, hi_count = spec.aneurysm_count
    n_aneurysms = int(rng.integers(lo_count, hi_count + 1))
    candidates = [s for s in segments if s.depth > 1] or segments
    for _ in range(n_aneurysms):
        for _attempt in range(50):
            seg = candidates[int(rng.integers(len(candidates)))]
            r = rng.uniform(*spec.aneurysm_radius_mm) / spec.spacing_mm
            offset, _, _ = _random_perpendicular(rng, (seg.end - seg.start) / np.linalg.norm(seg.end - seg.start))
            center = seg.end + offset * seg.radius
            if geo.fits(center, r, seg.root):
                box, m = _capsule_mask(shape, center, center, r)
                vessels[box] |= m
                vessel_value[box] = np.where(m, np.maximum(vessel_value[box], seg.value), vessel_value[box])
                box, m = _capsule_mask(shape, center, center, r + geo.gap)
                sheath[box] |= m
                break

    sheath &= shell & ~vessels
    bone = shell & ~sheath & ~vessels
    soft = (interior | sheath) & ~vessels

    truth = np.zeros(shape, dtype=np.uint8)
    truth[soft] = SOFT
    truth[bone] = BONE
    truth[vessels] = VESSEL

    soft_field = _smooth_field(rng, shape, *spec.soft_hu)
    bone_field = _smooth_field(rng, shape, *spec.bone_hu)
    mask_values = np.full(shape, AIR_HU, dtype=np.float64)
    mask_values[soft | vessels] = soft_field[soft | vessels]
    mask_values[bone] = bone_field[bone]
    mask_values = mask_values.astype(np.float32)
    fill_values = mask_values.copy()
    fill_values[vessels] = vessel_value[vessels].astype(np.float32)

    mask = Volume(mask_values, spec.spacing_mm)
    fill = Volume(fill_values, spec.spacing_mm)
    if not spec.motion.is_identity:
        mask = apply_motion(mask, spec.motion)
    if spec.noise_sigma_hu > 0:
        noise_mask = rng.normal(0.0, spec.noise_sigma_hu, size=shape)
        noise_fill = rng.normal(0.0, spec.noise_sigma_hu, size=shape)
        mask = Volume(mask.values + noise_mask.astype(np.float32), spec.spacing_mm)
        fill = Volume(fill.values + noise_fill.astype(np.float32), spec.spacing_mm)
    return PhantomCase(mask=mask, fill=fill, truth=truth, spec=spec)


def apply_motion(v: Volume, t: RigidTransform) -> Volume:
    """Resample ``v`` after the rigid transform ``t``.

    ``out[p]`` is the trilinear sample of ``v`` at ``t^-1(p)``; samples
    beyond the grid blend towards air (-1000 HU).
    """
    if t.is_identity:
        return v
    nz, ny, nx = v.shape
    cx, cy = (nx - 1) / 2, (ny - 1) / 2
    tx, ty, tz = (c / v.spacing_mm for c in t.translation_mm)
    th = math.radians(t.rotation_deg_z)
    c, s = math.cos(th), math.sin(th)

    z, y, x = np.meshgrid(np.arange(nz, dtype=np.float64), np.arange(ny, dtype=np.float64),
                          np.arange(nx, dtype=np.float64), indexing="ij")
    dx = x - cx - tx
    dy = y - cy - ty
    sx = cx + (c * dx + s * dy)
    sy = cy + (-s * dx + c * dy)
    sz = z - tz

    # pad one voxel below and two above so floor/floor+1 always index the padded grid
    padded = np.pad(v.values.astype(np.float64), ((1, 2), (1, 2), (1, 2)), constant_values=AIR_HU)
    coords = []
    for sc, n in ((sz, nz), (sy, ny), (sx, nx)):
        sc = np.clip(sc, -1.0, float(n))
        i0 = np.floor(sc)
        coords.append((i0.astype(np.intp) + 1, sc - i0))
    (iz, fz), (iy, fy), (ix, fx) = coords
    out = np.zeros(v.shape, dtype=np.float64)
    for oz, wz in ((0, 1.0 - fz), (1, fz)):
        for oy, wy in ((0, 1.0 - fy), (1, fy)):
            for ox, wx in ((0, 1.0 - fx), (1, fx)):
                out += (wz * wy * wx) * padded[iz + oz, iy + oy, ix + ox]
    return Volume(out.astype(np.float32), v.spacing_mm)


def shifted_spec(spec: PhantomSpec, shift_voxels=(0.0, 0.0, 0.0), **changes) -> PhantomSpec:
    """Copy of ``spec`` whose mask is translated by ``shift_voxels``."""
    motion = RigidTransform(tuple(float(s) * spec.spacing_mm for s in shift_voxels))
    return replace(spec, motion=motion, **changes)
