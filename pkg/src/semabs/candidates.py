"""Candidate generation, IoU labeling, regression targets and batch sampling."""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geometry import (
    DEFAULT_IOU_SAMPLES,
    OrientedBox,
    VoxelGrid,
    box_occupancy,
    euler_from_matrices,
    iou_matrix,
)

log = logging.getLogger(__name__)

POSITIVE_IOU = 0.5
NEGATIVE_IOU = 0.3
DEFAULT_MIN_CELLS = 4
MIN_SIZE = 1e-4

POSITIVE, NEGATIVE, IGNORED = "positive", "negative", "ignored"


@dataclass(frozen=True, eq=False)
class Candidate:
    box: OrientedBox
    label: str
    source: int = -1


@dataclass(frozen=True)
class RegressionTarget:
    dc: np.ndarray
    ds: np.ndarray
    da: np.ndarray

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.dc, self.ds, self.da])

    @classmethod
    def from_vector(cls, v) -> "RegressionTarget":
        v = np.asarray(v, float)
        return cls(v[0:3], v[3:6], v[6:9])


# ---------------------------------------------------------------------------
# shrink to fit


class OccupancyIndex:
    """Summed-volume table for O(1) occupied-cell counts over index boxes."""

    def __init__(self, grid: VoxelGrid):
        self.grid = grid
        occ = grid.occupancy.astype(np.int32)
        table = np.zeros(tuple(s + 1 for s in occ.shape), dtype=np.int32)
        table[1:, 1:, 1:] = occ.cumsum(0).cumsum(1).cumsum(2)
        self.table = table

    def count(self, lo, hi) -> np.ndarray:
        """Occupied cells in ``[lo, hi)`` index ranges; ``lo``/``hi`` are ``(M, 3)``."""
        t = self.table
        x0, y0, z0 = lo.T
        x1, y1, z1 = hi.T
        return (
            t[x1, y1, z1] - t[x0, y1, z1] - t[x1, y0, z1] - t[x1, y1, z0]
            + t[x0, y0, z1] + t[x0, y1, z0] + t[x1, y0, z0] - t[x0, y0, z0]
        )

    def tight_ranges(self, lo, hi):
        """Smallest index ranges inside ``[lo, hi)`` holding all occupied cells (binary search per face)."""
        steps = int(np.ceil(np.log2(self.grid.resolution + 1))) + 1
        new_lo, new_hi = lo.copy(), hi.copy()
        for axis in range(3):
            # first occupied slab: smallest m with cells in [lo, m] along axis
            a, b = lo[:, axis].copy(), hi[:, axis] - 1
            for _ in range(steps):
                mid = (a + b) // 2
                probe_hi = hi.copy()
                probe_hi[:, axis] = mid + 1
                hit = self.count(lo, probe_hi) > 0
                b = np.where(hit, mid, b)
                a = np.where(hit, a, np.minimum(mid + 1, b))
            new_lo[:, axis] = a
            # last occupied slab
            a, b = lo[:, axis].copy(), hi[:, axis] - 1
            for _ in range(steps):
                mid = (a + b + 1) // 2
                probe_lo = lo.copy()
                probe_lo[:, axis] = mid
                hit = self.count(probe_lo, hi) > 0
                a = np.where(hit, mid, a)
                b = np.where(hit, b, np.maximum(mid - 1, a))
            new_hi[:, axis] = a + 1
        return new_lo, new_hi


def shrink_boxes(grid: VoxelGrid, lows, highs, min_cells: int = DEFAULT_MIN_CELLS, index: OccupancyIndex = None):
    """Tighten axis-aligned boxes ``[lows, highs]`` to the occupied cells whose centers they contain.

    The result spans the full extent of those cells (half a cell around the
    outermost centers), clipped so no box grows.  Returns ``(keep, new_lo,
    new_hi)`` where ``keep`` flags boxes holding at least ``min_cells``
    occupied cells.
    """
    index = index or OccupancyIndex(grid)
    lows, highs = np.atleast_2d(lows), np.atleast_2d(highs)
    start, stop = grid.cell_range(lows, highs)
    nonempty = np.all(stop > start, axis=1)
    counts = np.zeros(len(lows), dtype=int)
    counts[nonempty] = index.count(start[nonempty], stop[nonempty])
    keep = counts >= max(min_cells, 1)
    new_lo = np.zeros_like(lows)
    new_hi = np.zeros_like(highs)
    if keep.any():
        t_lo, t_hi = index.tight_ranges(start[keep], stop[keep])
        new_lo[keep] = np.maximum(grid.origin + t_lo * grid.cell, lows[keep])
        new_hi[keep] = np.minimum(grid.origin + t_hi * grid.cell, highs[keep])
    return keep, new_lo, new_hi


def shrink_to_fit(grid: VoxelGrid, box: OrientedBox, min_cells: int = DEFAULT_MIN_CELLS):
    """Reference shrink for any box orientation; ``None`` when too few occupied cells remain."""
    fraction, bounds = box_occupancy(grid, box)
    if bounds is None:
        return None
    # occupied count recovered by direct enumeration
    local_lo = np.maximum(bounds.min - 0.5 * grid.cell, -0.5 * box.size)
    local_hi = np.minimum(bounds.max + 0.5 * grid.cell, 0.5 * box.size)
    mid = 0.5 * (local_lo + local_hi)
    shrunk = OrientedBox(box.center + box.rotation @ mid, local_hi - local_lo, box.angles)
    return shrunk


def place_and_shrink(template, grid: VoxelGrid, min_cells: int = DEFAULT_MIN_CELLS,
                     index: OccupancyIndex = None, dedupe: bool = True) -> list:
    """Candidates from one template on one shape.

    Boxes that shrink to identical bounds are merged, keeping the first
    template index as ``source``.
    """
    centers, sizes = template.box_arrays()
    keep, lo, hi = shrink_boxes(grid, centers - 0.5 * sizes, centers + 0.5 * sizes, min_cells, index)
    idx = np.flatnonzero(keep)
    lo, hi = lo[idx], hi[idx]
    if dedupe and len(idx):
        first = _dedupe_bounds(grid, lo, hi)
        idx, lo, hi = idx[first], lo[first], hi[first]
    return [Candidate(OrientedBox.from_bounds(l, h), template.label, int(i)) for i, l, h in zip(idx, lo, hi)]


def _dedupe_bounds(grid: VoxelGrid, lo, hi) -> np.ndarray:
    key = np.round(np.concatenate([lo, hi], axis=1) / grid.cell, 6)
    _, first = np.unique(key, axis=0, return_index=True)
    return np.sort(first)


def uniform_voxel_candidates(grid: VoxelGrid, primitives: dict, resolution: int = 32, shrink: bool = True,
                             min_cells: int = DEFAULT_MIN_CELLS, index: OccupancyIndex = None,
                             max_per_label: int = 0, rng=None) -> list:
    """Baseline candidates: every label's primitives centered on each occupied coarse voxel.

    With ``shrink`` the boxes go through the same shrink-to-fit and
    de-duplication as template candidates, so only placement differs.
    ``max_per_label > 0`` draws that many placements per label at random
    (from ``rng``) before shrinking, preserving the original order.
    """
    r = grid.resolution
    if r % resolution:
        raise ValueError("coarse resolution must divide the grid resolution")
    f = r // resolution
    coarse = grid.occupancy.reshape(resolution, f, resolution, f, resolution, f).any(axis=(1, 3, 5))
    cell = grid.cell * f
    centers = grid.origin + (np.argwhere(coarse) + 0.5) * cell
    index = (index or OccupancyIndex(grid)) if shrink else None
    out = []
    for label in sorted(primitives):
        prim = np.asarray(primitives[label], float)
        c = np.repeat(centers, len(prim), axis=0)
        s = np.tile(prim, (len(centers), 1))
        lo, hi = c - 0.5 * s, c + 0.5 * s
        src = np.arange(len(c))
        if max_per_label and len(src) > max_per_label:
            rng = rng if rng is not None else np.random.default_rng(0)
            src = np.sort(rng.choice(len(src), max_per_label, replace=False))
            lo, hi = lo[src], hi[src]
        if shrink:
            keep, lo, hi = shrink_boxes(grid, lo, hi, min_cells, index)
            src, lo, hi = src[keep], lo[keep], hi[keep]
            first = _dedupe_bounds(grid, lo, hi)
            src, lo, hi = src[first], lo[first], hi[first]
        out += [Candidate(OrientedBox.from_bounds(a, b), label, int(i)) for i, a, b in zip(src, lo, hi)]
    return out


# ---------------------------------------------------------------------------
# labeling


@dataclass
class Labeling:
    status: np.ndarray  # object array of POSITIVE / NEGATIVE / IGNORED
    best_iou: np.ndarray
    best_gt: np.ndarray  # index into the ground-truth part list, -1 when none

    @property
    def positives(self) -> np.ndarray:
        return np.flatnonzero(self.status == POSITIVE)

    @property
    def negatives(self) -> np.ndarray:
        return np.flatnonzero(self.status == NEGATIVE)


def classify_iou(iou, positive: float = POSITIVE_IOU, negative: float = NEGATIVE_IOU):
    iou = np.asarray(iou, float)
    out = np.full(iou.shape, IGNORED, dtype=object)
    out[iou > positive] = POSITIVE
    out[iou < negative] = NEGATIVE
    return out


def label_candidates(cands: Sequence[Candidate], parts: Sequence, positive: float = POSITIVE_IOU,
                     negative: float = NEGATIVE_IOU, samples_per_axis: int = DEFAULT_IOU_SAMPLES) -> Labeling:
    """Compare each candidate with same-label ground truth only; the best IoU decides."""
    best_iou = np.zeros(len(cands))
    best_gt = np.full(len(cands), -1)
    by_label = {}
    for i, c in enumerate(cands):
        by_label.setdefault(c.label, []).append(i)
    for label, ci in by_label.items():
        gi = [j for j, (lab, _) in enumerate(parts) if lab == label]
        if not gi:
            continue
        m = iou_matrix([cands[i].box for i in ci], [parts[j][1] for j in gi], samples_per_axis)
        arg = m.argmax(axis=1)
        best_iou[ci] = m[np.arange(len(ci)), arg]
        best_gt[ci] = np.where(best_iou[ci] > 0, np.asarray(gi)[arg], -1)
    return Labeling(classify_iou(best_iou, positive, negative), best_iou, best_gt)


# ---------------------------------------------------------------------------
# regression targets


def _signed_permutations():
    mats = []
    for perm in itertools.permutations(range(3)):
        for signs in itertools.product((1.0, -1.0), repeat=3):
            p = np.zeros((3, 3))
            p[list(perm), range(3)] = signs
            if np.linalg.det(p) > 0:
                mats.append(p)
    return np.array(mats)


PROPER_SIGNED_PERMUTATIONS = _signed_permutations()  # (24, 3, 3)


def match_directions(ref_rot: np.ndarray, rot: np.ndarray) -> np.ndarray:
    """Signed permutation ``P`` (det +1) aligning the axes of ``rot @ P`` with ``ref_rot``.

    Maximizes the summed absolute axis dot products; among the sign choices
    that tie there, the largest signed sum (smallest residual rotation) wins.
    """
    return match_directions_many(ref_rot, np.asarray(rot)[None])[0]


def match_directions_many(ref_rot: np.ndarray, rots: np.ndarray) -> np.ndarray:
    """:func:`match_directions` for an ``(m, 3, 3)`` stack of rotations."""
    m = np.einsum("ij,njk,pkl->npil", ref_rot.T, rots, PROPER_SIGNED_PERMUTATIONS)
    diag = np.diagonal(m, axis1=2, axis2=3)
    absum = np.abs(diag).sum(axis=2)
    signed = diag.sum(axis=2)
    tied = absum >= absum.max(axis=1, keepdims=True) - 1e-9
    return PROPER_SIGNED_PERMUTATIONS[np.argmax(np.where(tied, signed, -np.inf), axis=1)]


def matched_box_params(ref: OrientedBox, box: OrientedBox):
    """Re-express ``box`` in the parameterization whose axes best match ``ref``: ``(sizes, euler)``."""
    sizes, angles = matched_params_many(ref, [box])
    return sizes[0], angles[0]


def matched_params_many(ref: OrientedBox, boxes: Sequence[OrientedBox]):
    """:func:`matched_box_params` for many boxes: ``(sizes (m, 3), euler (m, 3))``."""
    rots = np.array([b.rotation for b in boxes]).reshape(-1, 3, 3)
    p = match_directions_many(ref.rotation, rots)
    sizes = np.einsum("nji,nj->ni", np.abs(p), np.array([b.size for b in boxes]).reshape(-1, 3))
    return sizes, euler_from_matrices(rots @ p)


def wrap_angle(x):
    """Wrap to (-pi, pi]."""
    y = np.asarray(x, float) - 2 * np.pi * np.floor((np.asarray(x, float) + np.pi) / (2 * np.pi))
    return np.where(y <= -np.pi, y + 2 * np.pi, y)


def regression_target(cand, gt: OrientedBox) -> RegressionTarget:
    box = cand.box if isinstance(cand, Candidate) else cand
    sizes, angles = matched_box_params(box, gt)
    return RegressionTarget(gt.center - box.center, sizes - box.size, wrap_angle(angles - box.angles))


def apply_offsets(box: OrientedBox, offsets) -> OrientedBox:
    """Inverse of :func:`regression_target`; sizes are kept strictly positive."""
    v = offsets.as_vector() if isinstance(offsets, RegressionTarget) else np.asarray(offsets, float)
    return OrientedBox(box.center + v[0:3], np.maximum(box.size + v[3:6], MIN_SIZE), box.angles + v[6:9])


# ---------------------------------------------------------------------------
# training batches


@dataclass
class ShapeSamples:
    """Labeled candidates of one training shape, indexed by position in ``labels``."""

    labels: np.ndarray
    positive: np.ndarray  # bool mask
    negative: np.ndarray  # bool mask


@dataclass
class Batch:
    shape_index: np.ndarray
    cand_index: np.ndarray
    is_positive: np.ndarray
    shortfall: int = 0
    notes: list = field(default_factory=list)

    def __len__(self):
        return len(self.cand_index)


def _draw_uniform_over_labels(rng, labels, mask, count):
    """Draw up to ``count`` indices from ``mask``: label uniformly first, then a member, without replacement."""
    pools = {}
    for i in np.flatnonzero(mask):
        pools.setdefault(labels[i], []).append(i)
    picked = []
    while len(picked) < count and pools:
        keys = sorted(pools)
        key = keys[int(rng.integers(len(keys)))]
        members = pools[key]
        picked.append(members.pop(int(rng.integers(len(members)))))
        if not members:
            del pools[key]
    return picked


def sample_training_batch(pool: Sequence[ShapeSamples], seed, batch_size: int = 64,
                          shapes_per_batch: int = 8) -> Batch:
    """``shapes_per_batch`` distinct shapes, equal positive/negative quota each.

    Missing positives are replaced with extra negatives; the number replaced
    is recorded in ``Batch.shortfall``.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    usable = [i for i, s in enumerate(pool) if s.positive.any() or s.negative.any()]
    if len(usable) < shapes_per_batch:
        raise ValueError(f"need {shapes_per_batch} shapes with labeled candidates, have {len(usable)}")
    per_shape = batch_size // shapes_per_batch
    n_pos = per_shape // 2
    chosen = np.sort(rng.choice(usable, shapes_per_batch, replace=False))
    si, ci, pos = [], [], []
    shortfall = 0
    for s in chosen:
        samples = pool[s]
        p = _draw_uniform_over_labels(rng, samples.labels, samples.positive, n_pos)
        n = _draw_uniform_over_labels(rng, samples.labels, samples.negative, per_shape - len(p))
        if len(p) + len(n) < per_shape:
            # too few negatives as well: top up with more positives
            p += _draw_uniform_over_labels(
                rng, samples.labels, samples.positive & ~np.isin(np.arange(len(samples.labels)), p),
                per_shape - len(p) - len(n),
            )
        shortfall += max(0, n_pos - len(p))
        si += [s] * (len(p) + len(n))
        ci += p + n
        pos += [1] * len(p) + [0] * len(n)
    batch = Batch(np.array(si), np.array(ci), np.array(pos))
    batch.shortfall = shortfall
    if shortfall:
        batch.notes.append(f"{shortfall} positive slots filled with negatives")
    return batch
