"""Per-label abstraction templates learned from annotated part boxes.

Positions come from a diagonal Gaussian mixture over part centers whose
component count is chosen by affinity propagation; sizes are summarized by
k-means centroids ("scale primitives").  A template is the cross product of
high-density lattice positions and primitives.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import OrientedBox, obb_to_aabb

log = logging.getLogger(__name__)

VAR_FLOOR = 1e-6
DEFAULT_GRID_N = 100
DEFAULT_REL_THRESHOLD = 0.15
DEFAULT_N_PRIMITIVES = 20


# ---------------------------------------------------------------------------
# affinity propagation


def ap_similarity(points) -> tuple[np.ndarray, float]:
    """Negative squared distances and the median off-diagonal similarity."""
    x = np.asarray(points, float).reshape(len(points), -1)
    s = -((x[:, None, :] - x[None, :, :]) ** 2).sum(axis=-1)
    if len(x) < 2:
        return s, 0.0
    off = s[~np.eye(len(x), dtype=bool)]
    return s, float(np.median(off))


def ap_cluster(points, damping: float = 0.9, max_iter: int = 1000, convergence_iter: int = 50,
               preference: float = None) -> np.ndarray:
    """Affinity propagation exemplars, returned as sorted point indices.

    Duplicate points are collapsed before message passing (messages between
    exact copies are symmetric and cannot elect a single exemplar); the
    lowest original index represents each copy group.
    """
    if not 0.5 <= damping < 1.0:
        raise ValueError("damping must lie in [0.5, 1)")
    x = np.asarray(points, float)
    if x.ndim == 1:
        x = x[:, None]
    if len(x) == 0:
        raise ValueError("ap_cluster needs at least one point")
    _, median = ap_similarity(x)
    pref = median if preference is None else float(preference)

    uniq, first, inverse = np.unique(x, axis=0, return_index=True, return_inverse=True)
    if len(uniq) == 1:
        return np.array([0])
    # np.unique sorts rows; restore first-occurrence order so results follow input order
    order = np.argsort(first)
    uniq, first = uniq[order], first[order]
    s = -((uniq[:, None, :] - uniq[None, :, :]) ** 2).sum(axis=-1)
    np.fill_diagonal(s, pref)
    exemplars = _refine_exemplars(s, _ap_messages(s, damping, max_iter, convergence_iter))
    return np.sort(first[exemplars])


def _refine_exemplars(s, exemplars):
    """Re-elect each cluster's exemplar as its member with the largest within-cluster similarity."""
    exemplars = np.array(exemplars)
    assign = np.argmax(s[:, exemplars], axis=1)
    assign[exemplars] = np.arange(len(exemplars))
    for k in range(len(exemplars)):
        members = np.flatnonzero(assign == k)
        within = s[np.ix_(members, members)].sum(axis=0)
        # argmax keeps the lowest index on ties
        exemplars[k] = members[int(np.argmax(within))]
    return np.unique(exemplars)


def _ap_messages(s, damping, max_iter, convergence_iter):
    n = len(s)
    r = np.zeros_like(s)
    a = np.zeros_like(s)
    rows = np.arange(n)
    scale = max(np.abs(s).max(), 1e-300)
    last, stable = None, 0
    for _ in range(max_iter):
        # responsibilities
        as_ = a + s
        top = np.argmax(as_, axis=1)
        first_max = as_[rows, top]
        as_[rows, top] = -np.inf
        second_max = as_.max(axis=1)
        r_new = s - first_max[:, None]
        r_new[rows, top] = s[rows, top] - second_max
        r_prev, a_prev = r, a
        r = damping * r + (1 - damping) * r_new
        # availabilities
        rp = np.maximum(r, 0)
        np.fill_diagonal(rp, np.diag(r))
        col = rp.sum(axis=0)
        a_new = col[None, :] - rp
        diag = np.diag(a_new).copy()
        a_new = np.minimum(a_new, 0)
        np.fill_diagonal(a_new, diag)
        a = damping * a + (1 - damping) * a_new

        current = np.flatnonzero(np.diag(a) + np.diag(r) > 0)
        # a fixed exemplar set alone is not enough: heavy damping keeps it
        # frozen through long transients
        settled = max(np.abs(r - r_prev).max(), np.abs(a - a_prev).max()) <= 1e-9 * scale
        if last is not None and np.array_equal(current, last):
            stable += 1
            if stable >= convergence_iter and settled and len(current):
                break
        else:
            stable = 0
        last = current
    if last is None or len(last) == 0:
        log.debug("affinity propagation found no exemplar; falling back to the best self-evidence")
        return np.array([int(np.argmax(np.diag(a) + np.diag(r)))])
    return last


def ap_assign(points, exemplars) -> np.ndarray:
    """Index into ``exemplars`` of the most similar exemplar for every point."""
    x = np.asarray(points, float).reshape(len(points), -1)
    e = x[np.asarray(exemplars)]
    d = ((x[:, None, :] - e[None, :, :]) ** 2).sum(axis=-1)
    labels = np.argmin(d, axis=1)
    labels[np.asarray(exemplars)] = np.arange(len(exemplars))
    return labels


def exemplar_objective(points, exemplars, preference: float = None) -> float:
    """Net similarity: preference per exemplar plus each other point's best exemplar similarity."""
    s, median = ap_similarity(points)
    pref = median if preference is None else preference
    ex = np.asarray(exemplars)
    others = np.setdiff1d(np.arange(len(s)), ex)
    total = pref * len(ex)
    if len(others):
        total += s[np.ix_(others, ex)].max(axis=1).sum()
    return float(total)


# ---------------------------------------------------------------------------
# diagonal Gaussian mixture


@dataclass(frozen=True)
class Gmm:
    weights: np.ndarray  # (K,)
    means: np.ndarray  # (K, 3)
    variances: np.ndarray  # (K, 3)

    @property
    def n_components(self) -> int:
        return len(self.weights)

    def log_component_density(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, float))
        diff2 = (x[:, None, :] - self.means[None]) ** 2 / self.variances[None]
        log_norm = -0.5 * (np.log(2 * np.pi * self.variances).sum(axis=1))
        return np.log(self.weights)[None] + log_norm[None] - 0.5 * diff2.sum(axis=2)

    def log_density(self, x) -> np.ndarray:
        lc = self.log_component_density(x)
        m = lc.max(axis=1, keepdims=True)
        return (m + np.log(np.exp(lc - m).sum(axis=1, keepdims=True)))[:, 0]

    def density(self, x) -> np.ndarray:
        return np.exp(self.log_density(x))

    def log_likelihood(self, x) -> float:
        return float(self.log_density(x).sum())


def farthest_point_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Indices of ``k`` points: a seeded random start, then repeatedly the farthest point."""
    chosen = [int(rng.integers(len(x)))]
    d = ((x - x[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        nxt = int(np.argmax(d))
        chosen.append(nxt)
        d = np.minimum(d, ((x - x[nxt]) ** 2).sum(axis=1))
    return np.array(chosen)


def _hard_assignment_init(x, seeds, var_floor):
    # one nearest-seed assignment gives local, not global, starting spreads
    owner = np.argmin(((x[:, None, :] - seeds[None, :, :]) ** 2).sum(axis=-1), axis=1)
    k = len(seeds)
    counts = np.bincount(owner, minlength=k).astype(float)
    means = np.array([x[owner == j].mean(axis=0) for j in range(k)])
    variances = np.array([np.maximum(x[owner == j].var(axis=0), var_floor) for j in range(k)])
    return Gmm(counts / counts.sum(), means, variances)


def fit_gmm(centers, k: int, seed: int = 0, max_iter: int = 200, tol: float = 1e-6,
            var_floor: float = VAR_FLOOR, return_trace: bool = False):
    """EM for a diagonal-covariance mixture.

    The variance floor is applied as a clip in the M-step, which is the
    exact constrained maximizer per dimension, so the log-likelihood stays
    monotone.  With ``return_trace`` the per-iteration log-likelihoods are
    returned as well.
    """
    x = np.asarray(centers, float)
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > len(x):
        raise ValueError(f"k={k} exceeds the number of points ({len(x)})")
    rng = np.random.default_rng(seed)
    gmm = _hard_assignment_init(x, x[farthest_point_init(x, k, rng)], var_floor)
    trace = [gmm.log_likelihood(x)]
    for _ in range(max_iter):
        lc = gmm.log_component_density(x)
        lse = lc.max(axis=1, keepdims=True)
        resp = np.exp(lc - lse)
        resp /= resp.sum(axis=1, keepdims=True)
        nk = resp.sum(axis=0)
        # a starved component keeps its previous parameters
        alive = nk > 1e-12
        w = np.where(alive, nk, 1e-300) / len(x)
        w = w / w.sum()
        safe = np.where(alive, nk, 1.0)
        new_means = np.where(alive[:, None], (resp.T @ x) / safe[:, None], gmm.means)
        var = (resp.T @ (x**2)) / safe[:, None] - new_means**2
        # second-moment form can dip below zero by roundoff
        var = np.where(alive[:, None], np.maximum(var, var_floor), gmm.variances)
        gmm = Gmm(w, new_means, var)
        ll = gmm.log_likelihood(x)
        gain = ll - trace[-1]
        trace.append(ll)
        if gain < tol:
            break
    return (gmm, np.array(trace)) if return_trace else gmm


def lattice_points(grid_n: int) -> np.ndarray:
    g = (np.arange(grid_n) + 0.5) / grid_n
    return np.stack(np.meshgrid(g, g, g, indexing="ij"), axis=-1).reshape(-1, 3)


def sample_candidate_positions(gmm: Gmm, grid_n: int = DEFAULT_GRID_N,
                               rel_threshold: float = DEFAULT_REL_THRESHOLD) -> np.ndarray:
    """Lattice positions in the unit cube whose density reaches ``rel_threshold`` times the lattice peak."""
    if grid_n < 10:
        raise ValueError("grid_n must be >= 10")
    if not 0 < rel_threshold < 1:
        raise ValueError("rel_threshold must lie in (0, 1)")
    pts = lattice_points(grid_n)
    logd = np.concatenate([gmm.log_density(chunk) for chunk in np.array_split(pts, max(1, len(pts) // 200_000))])
    keep = logd >= logd.max() + np.log(rel_threshold)
    if not keep.any():
        log.warning("no lattice position passed the density threshold")
    return pts[keep]


# ---------------------------------------------------------------------------
# scale primitives


def kmeans(x, k: int, seed: int = 0, max_iter: int = 100):
    """Lloyd iterations from a seeded farthest-point start; returns ``(centroids, assignment)``."""
    x = np.asarray(x, float)
    rng = np.random.default_rng(seed)
    cent = x[farthest_point_init(x, k, rng)].copy()
    assign = None
    for _ in range(max_iter):
        d = ((x[:, None, :] - cent[None]) ** 2).sum(axis=2)
        new_assign = np.argmin(d, axis=1)
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for j in range(k):
            members = x[assign == j]
            if len(members):
                cent[j] = members.mean(axis=0)
    return cent, assign


def cluster_scale_primitives(sizes, n: int = DEFAULT_N_PRIMITIVES, seed: int = 0) -> np.ndarray:
    sizes = np.asarray(sizes, float).reshape(-1, 3)
    if len(sizes) == 0:
        raise ValueError("no sizes to cluster")
    distinct = np.unique(sizes, axis=0)
    k = min(n, len(distinct))
    if k == len(distinct):
        return distinct
    cent, _ = kmeans(sizes, k, seed)
    return cent


# ---------------------------------------------------------------------------
# templates


@dataclass
class AbstractionTemplate:
    label: str
    positions: np.ndarray  # (P, 3)
    scale_primitives: np.ndarray  # (N, 3)
    gmm: Gmm = None

    @property
    def n_boxes(self) -> int:
        return len(self.positions) * len(self.scale_primitives)

    def box_arrays(self):
        """Template boxes as ``(centers, sizes)`` arrays in position-major order."""
        centers = np.repeat(self.positions, len(self.scale_primitives), axis=0)
        sizes = np.tile(self.scale_primitives, (len(self.positions), 1))
        return centers, sizes

    @property
    def boxes(self) -> list:
        return [OrientedBox(c, s) for c, s in zip(*self.box_arrays())]


def assemble_template(label: str, positions, primitives, gmm: Gmm = None) -> AbstractionTemplate:
    positions = np.asarray(positions, float).reshape(-1, 3)
    primitives = np.asarray(primitives, float).reshape(-1, 3)
    if len(positions) == 0 or len(primitives) == 0:
        raise ValueError(f"template for {label!r} needs positions and primitives")
    return AbstractionTemplate(label, positions, primitives, gmm)


def learn_templates(shapes, grid_n: int = DEFAULT_GRID_N, rel_threshold: float = DEFAULT_REL_THRESHOLD,
                    n_primitives: int = DEFAULT_N_PRIMITIVES, seed: int = 0) -> dict:
    """One template per label seen in ``shapes``; part OBBs are reduced to AABBs first."""
    centers, sizes = {}, {}
    for shape in shapes:
        for label, box in shape.parts:
            aabb = obb_to_aabb(box)
            centers.setdefault(label, []).append(aabb.center)
            sizes.setdefault(label, []).append(aabb.extent)
    templates = {}
    for label in sorted(centers):
        c = np.array(centers[label])
        k = len(ap_cluster(c))
        gmm = fit_gmm(c, k, seed)
        positions = sample_candidate_positions(gmm, grid_n, rel_threshold)
        prims = cluster_scale_primitives(sizes[label], n_primitives, seed)
        if len(positions) == 0:
            continue
        templates[label] = assemble_template(label, positions, prims, gmm)
        log.info("template %s: K=%d, %d positions x %d primitives", label, k, len(positions), len(prims))
    return templates


def template_to_dict(t: AbstractionTemplate) -> dict:
    d = {
        "label": t.label,
        "positions": t.positions.tolist(),
        "scale_primitives": t.scale_primitives.tolist(),
    }
    if t.gmm is not None:
        d["gmm"] = {
            "weights": t.gmm.weights.tolist(),
            "means": t.gmm.means.tolist(),
            "variances": t.gmm.variances.tolist(),
        }
    return d


def template_from_dict(d: dict) -> AbstractionTemplate:
    gmm = None
    if "gmm" in d:
        g = d["gmm"]
        gmm = Gmm(np.array(g["weights"]), np.array(g["means"]), np.array(g["variances"]))
    return assemble_template(d["label"], d["positions"], d["scale_primitives"], gmm)
