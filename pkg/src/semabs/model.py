"""Feature volumes, 3D RoI pooling and the two-layer scoring/regression head."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.ndimage import uniform_filter

from .candidates import RegressionTarget, apply_offsets
from .fusion import ScoredCandidate
from .geometry import OrientedBox, VoxelGrid, obb_to_aabb

log = logging.getLogger(__name__)

WINDOWS = (3, 5, 9)
N_CHANNELS = 1 + len(WINDOWS) + 3
POOL = 3
HIDDEN = 128
N_OUT = 10
CHECKPOINT_VERSION = 1
P_CLAMP = 1e-7


@dataclass(frozen=True)
class FeatureVolume:
    """``(r, r, r, C)`` features over the same cells as the source grid."""

    data: np.ndarray
    origin: np.ndarray
    cell: float

    @property
    def resolution(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[-1]


def build_feature_volume(grid: VoxelGrid, resolution: int = None) -> FeatureVolume:
    """Occupancy, zero-padded window means of occupancy, and normalized cell coordinates."""
    if resolution is not None and grid.resolution != resolution:
        raise ValueError(f"grid resolution {grid.resolution} != configured {resolution}")
    r = grid.resolution
    occ = grid.occupancy.astype(float)
    chans = [occ]
    for w in WINDOWS:
        chans.append(np.clip(uniform_filter(occ, size=w, mode="constant", cval=0.0), 0.0, 1.0))
    g = (np.arange(r) + 0.5) / r
    for axis in range(3):
        shape = [1, 1, 1]
        shape[axis] = r
        chans.append(np.broadcast_to(g.reshape(shape), (r, r, r)))
    return FeatureVolume(np.stack(chans, axis=-1), grid.origin, grid.cell)


def _splits(h: int) -> list:
    b = [int(np.floor(h * i / POOL + 0.5)) for i in range(POOL + 1)]
    return [(b[i], b[i + 1]) for i in range(POOL)]


def _pool_axis(x: np.ndarray, axis: int) -> np.ndarray:
    parts = [None] * POOL
    for i, (s, e) in enumerate(_splits(x.shape[axis])):
        if e > s:
            parts[i] = np.take(x, np.arange(s, e), axis=axis).max(axis=axis)
    filled = [i for i in range(POOL) if parts[i] is not None]
    for i in range(POOL):
        if parts[i] is None:
            # nearest nonempty sub-window, lower index on ties
            parts[i] = parts[min(filled, key=lambda j: (abs(j - i), j))]
    return np.stack(parts, axis=axis)


def footprint(fv: FeatureVolume, box: OrientedBox):
    """Cell index ranges ``[start, stop)`` of the box's Aabb (cells with centers inside)."""
    aabb = obb_to_aabb(box)
    r = fv.resolution
    raw_start = np.ceil((aabb.min - fv.origin) / fv.cell - 0.5 - 1e-9).astype(int)
    raw_stop = np.floor((aabb.max - fv.origin) / fv.cell - 0.5 + 1e-9).astype(int) + 1
    start, stop = np.clip(raw_start, 0, r), np.clip(raw_stop, 0, r)
    if np.any(aabb.max < fv.origin) or np.any(aabb.min > fv.origin + r * fv.cell):
        raise ValueError("box footprint lies outside the feature volume")
    # thinner than a cell: use the cell holding the Aabb center
    thin = stop <= start
    if thin.any():
        mid = np.clip(np.floor((aabb.center - fv.origin) / fv.cell).astype(int), 0, r - 1)
        start = np.where(thin, mid, start)
        stop = np.where(thin, mid + 1, stop)
    return start, stop


def roi_pool_3d(fv: FeatureVolume, box: OrientedBox) -> np.ndarray:
    """Max-pool the box footprint into a ``3 x 3 x 3 x C`` map."""
    start, stop = footprint(fv, box)
    region = fv.data[start[0] : stop[0], start[1] : stop[1], start[2] : stop[2]]
    for axis in range(3):
        region = _pool_axis(region, axis)
    return region


def _pool_block(blocks: np.ndarray) -> np.ndarray:
    # blocks: (n, h0, h1, h2, C), identical footprint shape
    for axis in range(1, 4):
        blocks = _pool_axis(blocks, axis)
    return blocks


def pool_many(fv: FeatureVolume, boxes: Sequence[OrientedBox], chunk_cells: int = 4_000_000) -> np.ndarray:
    """Flattened pooled features, shape ``(len(boxes), 27 * C)``.

    Boxes sharing a footprint shape are gathered and pooled together.
    """
    c = fv.channels
    out = np.empty((len(boxes), POOL**3 * c))
    if not len(boxes):
        return out
    fp = [footprint(fv, b) for b in boxes]
    start = np.array([f[0] for f in fp])
    dims = np.array([f[1] for f in fp]) - start
    shapes, inverse = np.unique(dims, axis=0, return_inverse=True)
    inverse = inverse.ravel()
    for k, h in enumerate(shapes):
        members = np.flatnonzero(inverse == k)
        win = np.lib.stride_tricks.sliding_window_view(fv.data, tuple(h), axis=(0, 1, 2))
        step = max(1, chunk_cells // (int(np.prod(h)) * c))
        for i in range(0, len(members), step):
            m = members[i : i + step]
            s = start[m]
            # (n, C, h0, h1, h2) -> (n, h0, h1, h2, C)
            blocks = np.moveaxis(win[s[:, 0], s[:, 1], s[:, 2]], 1, -1)
            out[m] = _pool_block(blocks).reshape(len(m), -1)
    return out


# ---------------------------------------------------------------------------
# head


@dataclass
class HeadParams:
    w1: np.ndarray  # (27 C, 128)
    b1: np.ndarray
    w2: np.ndarray  # (128, 10)
    b2: np.ndarray

    @classmethod
    def init(cls, seed: int = 0, n_in: int = POOL**3 * N_CHANNELS, hidden: int = HIDDEN) -> "HeadParams":
        rng = np.random.default_rng(seed)
        w2 = np.zeros((hidden, N_OUT))
        # offset outputs start at zero: an untrained regressor leaves boxes unchanged
        w2[:, 0] = rng.normal(0.0, 0.01, hidden)
        return cls(rng.normal(0.0, np.sqrt(2.0 / n_in), (n_in, hidden)), np.zeros(hidden), w2, np.zeros(N_OUT))

    @classmethod
    def zeros(cls, n_in: int = POOL**3 * N_CHANNELS, hidden: int = HIDDEN) -> "HeadParams":
        return cls(np.zeros((n_in, hidden)), np.zeros(hidden), np.zeros((hidden, N_OUT)), np.zeros(N_OUT))

    def arrays(self) -> list:
        return [self.w1, self.b1, self.w2, self.b2]

    def copy(self) -> "HeadParams":
        return HeadParams(*(a.copy() for a in self.arrays()))

    def save(self, path) -> None:
        np.savez(path, version=CHECKPOINT_VERSION, w1=self.w1, b1=self.b1, w2=self.w2, b2=self.b2)

    @classmethod
    def load(cls, path) -> "HeadParams":
        with np.load(path) as z:
            version = int(z["version"])
            if version != CHECKPOINT_VERSION:
                raise ValueError(f"unsupported checkpoint version {version}")
            return cls(z["w1"], z["b1"], z["w2"], z["b2"])


@dataclass(frozen=True)
class Prediction:
    score: float
    offsets: RegressionTarget


def sigmoid(z):
    z = np.asarray(z, float)
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


def forward(params: HeadParams, x: np.ndarray):
    """Batch forward pass; returns ``(logits, offsets, cache)``."""
    pre = x @ params.w1 + params.b1
    hid = np.maximum(pre, 0.0)
    out = hid @ params.w2 + params.b2
    return out[:, 0], out[:, 1:], (x, pre, hid)


def head_forward(params: HeadParams, pooled: np.ndarray) -> Prediction:
    x = np.asarray(pooled, float).reshape(1, -1)
    if x.shape[1] != params.w1.shape[0]:
        raise ValueError(f"pooled input has {x.shape[1]} values, head expects {params.w1.shape[0]}")
    logit, off, _ = forward(params, x)
    return Prediction(float(sigmoid(logit[0])), RegressionTarget.from_vector(off[0]))


def smooth_l1(x):
    a = np.abs(x)
    return np.where(a < 1.0, 0.5 * x * x, a - 0.5)


def multi_task_loss(pred: Prediction, is_positive: int, target: RegressionTarget = None, lam: float = 1.0) -> float:
    """Binary log loss plus ``lam`` times the smooth-L1 regression loss for positives."""
    if bool(is_positive) != (target is not None):
        raise ValueError("a regression target is required exactly for positive candidates")
    p = float(np.clip(pred.score, P_CLAMP, 1.0 - P_CLAMP))
    y = float(is_positive)
    loss = -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))
    if is_positive:
        resid = pred.offsets.as_vector() - target.as_vector()
        loss += lam * y * float(smooth_l1(resid).sum())
    return loss


def batch_loss(params: HeadParams, x, y, targets, lam: float = 1.0, grad: bool = True):
    """Mean multi-task loss over a batch and, optionally, its gradient.

    The classification term is computed from logits (``softplus(z) - y z``)
    so it stays finite for saturated scores.  ``targets`` rows of negatives
    are ignored.
    """
    logit, off, (xin, pre, hid) = forward(params, x)
    n = len(y)
    y = np.asarray(y, float)
    cls = np.logaddexp(0.0, logit) - y * logit
    resid = off - targets
    reg = smooth_l1(resid).sum(axis=1)
    loss = float(np.mean(cls + lam * y * reg))
    if not grad:
        return loss
    d_logit = (sigmoid(logit) - y) / n
    d_off = lam * y[:, None] * np.clip(resid, -1.0, 1.0) / n
    d_out = np.concatenate([d_logit[:, None], d_off], axis=1)
    g_w2 = hid.T @ d_out
    g_b2 = d_out.sum(axis=0)
    d_hid = d_out @ params.w2.T
    d_pre = d_hid * (pre > 0)
    g_w1 = xin.T @ d_pre
    g_b1 = d_pre.sum(axis=0)
    return loss, HeadParams(g_w1, g_b1, g_w2, g_b2)


def train(params: HeadParams, batches: Sequence, steps: int, learning_rate: float = 0.05, seed: int = 0,
          momentum: float = 0.9, lam: float = 1.0):
    """Momentum gradient descent over ``batches`` of ``(x, y, targets)``.

    Batches are visited in a seeded random order, reshuffled every pass.
    Returns the trained parameters and the per-step loss trace.
    """
    if not len(batches):
        raise ValueError("train needs at least one batch")
    params = params.copy()
    velocity = [np.zeros_like(a) for a in params.arrays()]
    rng = np.random.default_rng(seed)
    order = []
    trace = np.empty(steps)
    for step in range(steps):
        if not order:
            order = list(rng.permutation(len(batches)))
        x, y, t = batches[order.pop()]
        loss, g = batch_loss(params, x, y, t, lam)
        if not np.isfinite(loss):
            raise FloatingPointError(f"non-finite loss {loss} at step {step}; lower the learning rate")
        for p, v, gp in zip(params.arrays(), velocity, g.arrays()):
            v *= momentum
            v -= learning_rate * gp
            p += v
        trace[step] = loss
    return params, trace


def write_loss_trace(trace, path) -> None:
    rows = ["step,loss"] + [f"{i},{v:.10g}" for i, v in enumerate(trace)]
    Path(path).write_text("\n".join(rows) + "\n")


def predict_candidates(params: HeadParams, fv: FeatureVolume, cands: Sequence, features: np.ndarray = None) -> list:
    """Score candidates and apply the predicted offsets to their boxes."""
    if not len(cands):
        return []
    x = pool_many(fv, [c.box for c in cands]) if features is None else features
    logit, off, _ = forward(params, x)
    scores = sigmoid(logit)
    out = []
    for c, s, o in zip(cands, scores, off):
        out.append(ScoredCandidate(apply_offsets(c.box, o), c.label, float(np.clip(s, P_CLAMP, 1 - P_CLAMP))))
    return out
