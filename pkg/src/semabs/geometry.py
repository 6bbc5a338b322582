"""Box algebra, IoU and voxelization.

Boxes use a z-y-x Euler convention: a local point ``u`` maps to world
coordinates as ``center + Rx(ax) @ Ry(ay) @ Rz(az) @ u``, so the local axes
are the columns of the rotation matrix.  Angles are stored canonicalized to
``[-pi/2, pi/2)``; every canonicalization step is a symmetry of the box, so
the geometry never changes.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

HALF_PI = 0.5 * np.pi
DEFAULT_IOU_SAMPLES = 48


def _frozen(values, shape=(3,)) -> np.ndarray:
    arr = np.array(values, dtype=float).reshape(shape)
    arr.setflags(write=False)
    return arr


def _wrap_half_turn(x: float) -> tuple[float, int]:
    """Shift ``x`` by a multiple of pi into [-pi/2, pi/2); return value and shift count."""
    k = int(np.floor((x + HALF_PI) / np.pi))
    y = x - k * np.pi
    # floating point can land exactly on the open end
    if y >= HALF_PI:
        y -= np.pi
        k += 1
    elif y < -HALF_PI:
        y += np.pi
        k -= 1
    return y, k


def canonical_angles(angles: Sequence[float]) -> np.ndarray:
    """Map Euler angles to the canonical range without changing the box.

    Adding pi to ``ax`` equals negating ``ay`` and ``az`` followed by a
    half-turn about local x; adding pi to ``ay`` negates ``az``; adding pi
    to ``az`` is itself a half-turn about local z.  All three half-turns
    map a box onto itself.
    """
    a, b, c = (float(v) for v in angles)
    a, k = _wrap_half_turn(a)
    if k % 2:
        b, c = -b, -c
    b, k = _wrap_half_turn(b)
    if k % 2:
        c = -c
    c, _ = _wrap_half_turn(c)
    return np.array([a, b, c])


def rotation_matrix(angles: Sequence[float]) -> np.ndarray:
    ax, ay, az = angles
    ca, sa = np.cos(ax), np.sin(ax)
    cb, sb = np.cos(ay), np.sin(ay)
    cc, sc = np.cos(az), np.sin(az)
    rx = np.array([[1.0, 0.0, 0.0], [0.0, ca, -sa], [0.0, sa, ca]])
    ry = np.array([[cb, 0.0, sb], [0.0, 1.0, 0.0], [-sb, 0.0, cb]])
    rz = np.array([[cc, -sc, 0.0], [sc, cc, 0.0], [0.0, 0.0, 1.0]])
    return rx @ ry @ rz


def euler_from_matrix(rot: np.ndarray) -> np.ndarray:
    """Inverse of :func:`rotation_matrix` (not canonicalized)."""
    return euler_from_matrices(np.asarray(rot, float)[None])[0]


def euler_from_matrices(rots: np.ndarray) -> np.ndarray:
    """Row-wise :func:`euler_from_matrix` for an ``(m, 3, 3)`` stack."""
    sb = np.clip(rots[:, 0, 2], -1.0, 1.0)
    b = np.arcsin(sb)
    regular = np.abs(sb) < 1.0 - 1e-12
    a = np.where(regular, np.arctan2(-rots[:, 1, 2], rots[:, 2, 2]), np.arctan2(rots[:, 2, 1], rots[:, 1, 1]))
    # gimbal lock: only a +/- c is defined, put it all on ax
    c = np.where(regular, np.arctan2(-rots[:, 0, 1], rots[:, 0, 0]), 0.0)
    return np.stack([a, b, c], axis=1)


@dataclass(frozen=True)
class Aabb:
    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        lo, hi = _frozen(self.min), _frozen(self.max)
        if np.any(lo > hi):
            raise ValueError(f"Aabb min {lo} exceeds max {hi}")
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)

    @property
    def extent(self) -> np.ndarray:
        return self.max - self.min

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.min + self.max)

    @property
    def volume(self) -> float:
        return float(np.prod(self.extent))

    def __eq__(self, other):
        if not isinstance(other, Aabb):
            return NotImplemented
        return np.array_equal(self.min, other.min) and np.array_equal(self.max, other.max)

    __hash__ = None


@dataclass(frozen=True)
class OrientedBox:
    """9-parameter box: center, full extents along local axes, Euler angles."""

    center: np.ndarray
    size: np.ndarray
    angles: np.ndarray = (0.0, 0.0, 0.0)

    def __post_init__(self):
        center = _frozen(self.center)
        size = _frozen(self.size)
        if not np.all(np.isfinite(center)) or not np.all(np.isfinite(size)):
            raise ValueError("box parameters must be finite")
        if np.any(size <= 0):
            raise ValueError(f"box size must be strictly positive, got {size}")
        angles = np.array(self.angles, dtype=float).reshape(3)
        if not np.all(np.isfinite(angles)):
            raise ValueError("box angles must be finite")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "size", size)
        object.__setattr__(self, "angles", _frozen(canonical_angles(angles)))

    @classmethod
    def from_bounds(cls, lo, hi) -> "OrientedBox":
        lo, hi = np.asarray(lo, float), np.asarray(hi, float)
        return cls(0.5 * (lo + hi), hi - lo)

    @cached_property
    def rotation(self) -> np.ndarray:
        return _frozen(rotation_matrix(self.angles), (3, 3))

    @property
    def volume(self) -> float:
        return float(np.prod(self.size))

    @property
    def is_axis_aligned(self) -> bool:
        return not np.any(self.angles)

    def corners(self) -> np.ndarray:
        signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], float)
        return self.center + (signs * (0.5 * self.size)) @ self.rotation.T

    def to_local(self, points) -> np.ndarray:
        return (np.asarray(points, float) - self.center) @ self.rotation

    def contains(self, points, margin: float = 0.0) -> np.ndarray:
        """Boolean mask of points inside the box (boundary included), optionally grown by ``margin``."""
        local = self.to_local(np.atleast_2d(points))
        return np.all(np.abs(local) <= 0.5 * self.size + margin, axis=1)

    def params(self) -> np.ndarray:
        return np.concatenate([self.center, self.size, self.angles])

    def with_params(self, center=None, size=None, angles=None) -> "OrientedBox":
        return OrientedBox(
            self.center if center is None else center,
            self.size if size is None else size,
            self.angles if angles is None else angles,
        )

    def __eq__(self, other):
        if not isinstance(other, OrientedBox):
            return NotImplemented
        return (
            np.array_equal(self.center, other.center)
            and np.array_equal(self.size, other.size)
            and np.array_equal(self.angles, other.angles)
        )

    __hash__ = None


def boxes_equivalent(a: OrientedBox, b: OrientedBox, atol: float = 1e-9) -> bool:
    """True when two parameterizations describe the same solid (corner sets agree)."""
    ca, cb = a.corners(), b.corners()
    dist = np.linalg.norm(ca[:, None, :] - cb[None, :, :], axis=2)
    return bool(np.all(dist.min(axis=1) <= atol) and np.all(dist.min(axis=0) <= atol))


def obb_to_aabb(box: OrientedBox) -> Aabb:
    half = np.abs(box.rotation) @ (0.5 * box.size)
    return Aabb(box.center - half, box.center + half)


def aabb_iou(a: Aabb, b: Aabb) -> float:
    overlap = np.clip(np.minimum(a.max, b.max) - np.maximum(a.min, b.min), 0.0, None)
    inter = float(np.prod(overlap))
    union = a.volume + b.volume - inter
    if union <= 0.0:
        # two degenerate boxes: identical ones still count as a full match
        return 1.0 if a == b else 0.0
    return inter / union


# ---------------------------------------------------------------------------
# oriented IoU on a stratified lattice


def _stack(boxes: Sequence[OrientedBox]):
    centers = np.array([b.center for b in boxes]).reshape(-1, 3)
    halves = np.array([0.5 * b.size for b in boxes]).reshape(-1, 3)
    rots = np.array([b.rotation for b in boxes]).reshape(-1, 3, 3)
    return centers, halves, rots


def _aabb_arrays(centers, halves, rots):
    ext = np.einsum("pij,pj->pi", np.abs(rots), halves)
    return centers - ext, centers + ext


def _row_intervals(centers, halves, rots, lo, step, n):
    """For every sample row along x, the x-interval inside each box, clipped to ``[lo_x, lo_x + n*step_x]``.

    Rows pass through the ``n x n`` cell centers of the y-z face of
    ``[lo, lo + n*step]``.  A box is convex, so its intersection with a line
    is one interval; the three slab constraints ``|u_i| <= h_i`` are linear
    in x, and each slab's bounds split into a y term plus a z term.
    """
    j = np.arange(n) + 0.5
    dy = lo[:, None, 1] + j[None, :] * step[:, None, 1] - centers[:, None, 1]  # (P, n)
    dz = lo[:, None, 2] + j[None, :] * step[:, None, 2] - centers[:, None, 2]
    x_lo = lo[:, 0][:, None, None]
    x_hi = (lo[:, 0] + n * step[:, 0])[:, None, None]
    lower = np.broadcast_to(x_lo, (len(lo), n, n)).copy()
    upper = np.broadcast_to(x_hi, (len(lo), n, n)).copy()
    for i in range(3):
        beta = rots[:, 0, i]
        # a slab parallel to x gets a negligible tilt: its bounds land far outside the row
        beta = np.where(np.abs(beta) < 1e-12, np.where(beta < 0, -1e-12, 1e-12), beta)
        inv = -1.0 / beta
        # slab center along the row: x = cx - (r1 dy + r2 dz) / beta
        y_term = centers[:, 0][:, None] + rots[:, 1, i][:, None] * dy * inv[:, None]
        z_term = (rots[:, 2, i][:, None] * dz) * inv[:, None]
        half = np.abs(halves[:, i] * inv)[:, None]
        np.maximum(lower, (y_term - half)[:, :, None] + z_term[:, None, :], out=lower)
        np.minimum(upper, (y_term + half)[:, :, None] + z_term[:, None, :], out=upper)
    return lower, upper


def _covered(lower, upper):
    """Summed length of the row intervals ``[lower, upper]``."""
    return np.maximum(upper - lower, 0.0).sum(axis=(1, 2))


def obb_iou_many(
    boxes_a: Sequence[OrientedBox],
    boxes_b: Sequence[OrientedBox],
    samples_per_axis: int = DEFAULT_IOU_SAMPLES,
    chunk_rows: int = 2_000_000,
) -> np.ndarray:
    """Element-wise oriented IoU for paired box lists.

    Each pair is sampled on a ``samples_per_axis``^2 grid of cell-center
    rows along x spanning the Aabb enclosing both boxes.  Along each row the
    covered lengths are integrated exactly from interval bounds, which is the
    limit of a ``samples_per_axis``^2 x m point lattice as m grows.
    """
    if samples_per_axis < 8:
        raise ValueError("samples_per_axis must be >= 8")
    if len(boxes_a) != len(boxes_b):
        raise ValueError("paired box lists differ in length")
    if len(boxes_a) == 0:
        return np.zeros(0)
    ca, ha, ra = _stack(boxes_a)
    cb, hb, rb = _stack(boxes_b)
    return _iou_arrays(ca, ha, ra, cb, hb, rb, samples_per_axis, chunk_rows)


def _iou_arrays(ca, ha, ra, cb, hb, rb, n, chunk_rows=2_000_000):
    lo_a, hi_a = _aabb_arrays(ca, ha, ra)
    lo_b, hi_b = _aabb_arrays(cb, hb, rb)
    out = np.zeros(len(ca))
    touching = np.all(np.minimum(hi_a, hi_b) > np.maximum(lo_a, lo_b), axis=1)
    idx = np.flatnonzero(touching)
    per_chunk = max(1, chunk_rows // (n * n))
    for s in range(0, len(idx), per_chunk):
        sel = idx[s : s + per_chunk]
        lo = np.minimum(lo_a[sel], lo_b[sel])
        hi = np.maximum(hi_a[sel], hi_b[sel])
        step = (hi - lo) / n
        la, ua = _row_intervals(ca[sel], ha[sel], ra[sel], lo, step, n)
        lb, ub = _row_intervals(cb[sel], hb[sel], rb[sel], lo, step, n)
        len_a = _covered(la, ua)
        len_b = _covered(lb, ub)
        len_ab = _covered(np.maximum(la, lb), np.minimum(ua, ub))
        union = len_a + len_b - len_ab
        out[sel] = np.where(union > 0, len_ab / np.where(union > 0, union, 1.0), 0.0)
    return out


def obb_iou(a: OrientedBox, b: OrientedBox, samples_per_axis: int = DEFAULT_IOU_SAMPLES) -> float:
    return float(obb_iou_many([a], [b], samples_per_axis)[0])


def iou_matrix(
    boxes_a: Sequence[OrientedBox],
    boxes_b: Sequence[OrientedBox],
    samples_per_axis: int = DEFAULT_IOU_SAMPLES,
) -> np.ndarray:
    """All-pairs oriented IoU, shape ``(len(boxes_a), len(boxes_b))``."""
    out = np.zeros((len(boxes_a), len(boxes_b)))
    if not len(boxes_a) or not len(boxes_b):
        return out
    ca, ha, ra = _stack(boxes_a)
    cb, hb, rb = _stack(boxes_b)
    ia, ib = np.meshgrid(np.arange(len(boxes_a)), np.arange(len(boxes_b)), indexing="ij")
    ia, ib = ia.ravel(), ib.ravel()
    vals = _iou_arrays(ca[ia], ha[ia], ra[ia], cb[ib], hb[ib], rb[ib], samples_per_axis)
    out[ia, ib] = vals
    return out


# ---------------------------------------------------------------------------
# voxels


@dataclass(frozen=True)
class VoxelGrid:
    """Dense boolean occupancy over a cube; cell ``(i, j, k)`` has center
    ``origin + (idx + 0.5) * cell``."""

    occupancy: np.ndarray
    origin: np.ndarray = (0.0, 0.0, 0.0)
    cell: float = None

    def __post_init__(self):
        occ = np.array(self.occupancy, dtype=bool)
        if occ.ndim != 3 or len(set(occ.shape)) != 1:
            raise ValueError(f"occupancy must be a cube, got shape {occ.shape}")
        occ.setflags(write=False)
        object.__setattr__(self, "occupancy", occ)
        object.__setattr__(self, "origin", _frozen(self.origin))
        cell = 1.0 / occ.shape[0] if self.cell is None else float(self.cell)
        object.__setattr__(self, "cell", cell)

    @property
    def resolution(self) -> int:
        return self.occupancy.shape[0]

    @property
    def count(self) -> int:
        return int(self.occupancy.sum())

    def world_to_grid(self, points) -> np.ndarray:
        return np.floor((np.asarray(points, float) - self.origin) / self.cell).astype(int)

    def grid_to_world(self, idx) -> np.ndarray:
        return self.origin + (np.asarray(idx, float) + 0.5) * self.cell

    def cell_range(self, lo, hi):
        """Index ranges ``[start, stop)`` of cells whose centers lie in ``[lo, hi]``, clipped to the grid."""
        start = np.ceil((np.asarray(lo) - self.origin) / self.cell - 0.5 - 1e-9).astype(int)
        stop = np.floor((np.asarray(hi) - self.origin) / self.cell - 0.5 + 1e-9).astype(int) + 1
        return np.clip(start, 0, self.resolution), np.clip(stop, 0, self.resolution)

    def __eq__(self, other):
        if not isinstance(other, VoxelGrid):
            return NotImplemented
        return (
            np.array_equal(self.occupancy, other.occupancy)
            and np.array_equal(self.origin, other.origin)
            and self.cell == other.cell
        )

    __hash__ = None


def _cells_in_box(resolution, origin, cell, box: OrientedBox):
    aabb = obb_to_aabb(box)
    start = np.ceil((aabb.min - origin) / cell - 0.5 - 1e-9).astype(int)
    stop = np.floor((aabb.max - origin) / cell - 0.5 + 1e-9).astype(int) + 1
    start, stop = np.clip(start, 0, resolution), np.clip(stop, 0, resolution)
    if np.any(stop <= start):
        return np.zeros((0, 3), int), np.zeros((0, 3))
    axes = [np.arange(s, e) for s, e in zip(start, stop)]
    idx = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    pts = origin + (idx + 0.5) * cell
    inside = box.contains(pts)
    return idx[inside], pts[inside]


def voxelize_parts(
    parts: Iterable[OrientedBox],
    resolution: int = 64,
    origin=(0.0, 0.0, 0.0),
    extent: float = 1.0,
) -> VoxelGrid:
    """Occupy every cell whose center lies inside at least one box."""
    if resolution < 8:
        raise ValueError("resolution must be >= 8")
    origin = np.asarray(origin, float)
    cell = extent / resolution
    occ = np.zeros((resolution,) * 3, dtype=bool)
    for box in parts:
        idx, _ = _cells_in_box(resolution, origin, cell, box)
        occ[idx[:, 0], idx[:, 1], idx[:, 2]] = True
    return VoxelGrid(occ, origin, cell)


def box_occupancy(grid: VoxelGrid, box: OrientedBox):
    """Occupied fraction of the cells inside ``box`` and the local-frame bounds of those cells.

    Returns ``(fraction, bounds)``; ``bounds`` is an :class:`Aabb` of occupied
    cell centers expressed in the box frame, or ``None`` when nothing inside
    the box is occupied.
    """
    idx, pts = _cells_in_box(grid.resolution, grid.origin, grid.cell, box)
    if len(idx) == 0:
        return 0.0, None
    occupied = grid.occupancy[idx[:, 0], idx[:, 1], idx[:, 2]]
    fraction = float(occupied.sum()) / len(idx)
    if not occupied.any():
        return fraction, None
    local = box.to_local(pts[occupied])
    return fraction, Aabb(local.min(axis=0), local.max(axis=0))
