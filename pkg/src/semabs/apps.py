"""Instance segmentation of mesh faces, abstraction-level shape matching, and IoU evaluation."""

from __future__ import annotations

import csv
from collections import Counter, deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import DEFAULT_IOU_SAMPLES, iou_matrix

LABELED, PENDING, UNASSIGNED = 0, 1, 2
DEFAULT_K = 10


@dataclass
class FaceLabeling:
    """Per-face ``(label, instance)`` plus a state: labeled, boundary-pending or unassigned.

    ``containing[f]`` lists the indices of the abstractions whose box holds
    the face centroid; the voting fallback uses it.
    """

    label: list
    instance: np.ndarray
    state: np.ndarray
    containing: list = field(default_factory=list)

    @property
    def n_faces(self) -> int:
        return len(self.label)

    def copy(self) -> "FaceLabeling":
        return FaceLabeling(list(self.label), self.instance.copy(), self.state.copy(), list(self.containing))

    def counts(self) -> dict:
        return {name: int(np.sum(self.state == s)) for name, s in
                (("labeled", LABELED), ("pending", PENDING), ("unassigned", UNASSIGNED))}


def _item(a):
    # accept Abstraction objects or plain (label, box[, instance]) tuples
    if hasattr(a, "box"):
        return a.label, a.box, getattr(a, "instance", None)
    label, box = a[0], a[1]
    return label, box, a[2] if len(a) > 2 else None


def assign_faces(mesh, abstractions: Sequence, margin: float = 0.0) -> FaceLabeling:
    """Centroid-in-box membership: one box labels the face, several leave it pending, none unassigned."""
    cent = mesh.centroids()
    n = len(cent)
    items = [_item(a) for a in abstractions]
    inside = np.zeros((len(items), n), bool)
    for j, (_, box, _) in enumerate(items):
        inside[j] = box.contains(cent, margin) if n else np.zeros(0, bool)
    label = [None] * n
    instance = np.full(n, -1)
    state = np.full(n, UNASSIGNED)
    containing = [np.flatnonzero(inside[:, f]).tolist() for f in range(n)]
    for f, hits in enumerate(containing):
        if len(hits) == 1:
            lab, _, inst = items[hits[0]]
            label[f] = lab
            instance[f] = hits[0] if inst is None else inst
            state[f] = LABELED
        elif len(hits) > 1:
            state[f] = PENDING
    return FaceLabeling(label, instance, state, containing)


def face_adjacency(faces: np.ndarray) -> list:
    """Neighbors of each face across shared edges, in ascending face order."""
    edges = {}
    for f, tri in enumerate(np.asarray(faces)):
        for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
            edges.setdefault((min(a, b), max(a, b)), []).append(f)
    nbrs = [set() for _ in range(len(faces))]
    for owners in edges.values():
        for f in owners:
            nbrs[f].update(g for g in owners if g != f)
    return [sorted(s) for s in nbrs]


def nearest_labeled(adj: list, start: int, is_labeled: np.ndarray, k: int) -> list:
    """Up to ``k`` labeled faces in breadth-first order from ``start`` (ties by face index)."""
    seen = {start}
    frontier = [start]
    found = []
    while frontier and len(found) < k:
        nxt = []
        for f in frontier:
            for g in adj[f]:
                if g not in seen:
                    seen.add(g)
                    nxt.append(g)
        nxt.sort()
        found += [g for g in nxt if is_labeled[g]][: k - len(found)]
        frontier = nxt
    return found


def _vote(faces, labeling):
    keys = [(labeling.label[g], int(labeling.instance[g])) for g in faces]
    tally = Counter(keys)
    top = max(tally.values())
    tied = [key for key, c in tally.items() if c == top]
    if len(tied) == 1:
        return tied[0]
    if keys[0] in tied:
        return keys[0]
    return min(tied, key=lambda key: (key[1], key[0]))


def knn_vote(mesh, labeling: FaceLabeling, k: int = DEFAULT_K, abstractions: Sequence = None,
             include_unassigned: bool = True, adjacency: list = None) -> FaceLabeling:
    """Resolve undecided faces by majority over their ``k`` nearest labeled faces.

    Distance is the breadth-first hop count over shared-edge adjacency.
    Sweeps repeat until every undecided face is resolved or no sweep makes
    progress.  Faces that can reach no labeled face (closed shells fully
    inside other boxes) fall back to the smallest-volume abstraction holding
    their centroid when ``abstractions`` is given.
    """
    out = labeling.copy()
    if not np.any(out.state == LABELED):
        raise ValueError("knn_vote needs at least one uniquely labeled face")
    adj = face_adjacency(mesh.faces) if adjacency is None else adjacency
    undecided = {PENDING, UNASSIGNED} if include_unassigned else {PENDING}
    todo = [f for f in range(out.n_faces) if out.state[f] in undecided]
    while todo:
        is_labeled = out.state == LABELED
        decided = {}
        for f in todo:
            near = nearest_labeled(adj, f, is_labeled, k)
            if near:
                decided[f] = _vote(near, out)
        if not decided:
            break
        for f, (lab, inst) in decided.items():
            out.label[f], out.instance[f], out.state[f] = lab, inst, LABELED
        todo = [f for f in todo if f not in decided]
    if todo and abstractions is not None:
        items = [_item(a) for a in abstractions]
        for f in todo:
            hits = out.containing[f] if out.containing else []
            if not hits:
                continue
            j = min(hits, key=lambda j: (items[j][1].volume, j))
            lab, _, inst = items[j]
            out.label[f], out.instance[f], out.state[f] = lab, j if inst is None else inst, LABELED
    return out


def segment_mesh(mesh, abstractions: Sequence, k: int = DEFAULT_K, margin: float = 0.0) -> FaceLabeling:
    return knn_vote(mesh, assign_faces(mesh, abstractions, margin), k, abstractions)


def segmentation_accuracy(shape, labeling: FaceLabeling) -> float:
    """Fraction of faces whose label equals the label of the part that produced them."""
    truth = [shape.parts[p][0] for p in shape.mesh.face_part]
    if not truth:
        return 1.0
    return float(np.mean([a == b for a, b in zip(labeling.label, truth)]))


def segmentation_label_counts(shape, labeling: FaceLabeling) -> dict:
    """Per ground-truth label, ``(correct faces, total faces)``."""
    out = {}
    for f, p in enumerate(shape.mesh.face_part):
        truth = shape.parts[p][0]
        hit, total = out.get(truth, (0, 0))
        out[truth] = (hit + (labeling.label[f] == truth), total + 1)
    return out


def write_face_labels(labeling: FaceLabeling, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["face", "label", "instance"])
        for f in range(labeling.n_faces):
            w.writerow([f, labeling.label[f] or "", int(labeling.instance[f])])


# ---------------------------------------------------------------------------
# shape matching


@dataclass
class MatchSet:
    pairs: list  # sorted (source id, target id)
    groups: list  # (sorted source ids, sorted target ids), one per connected component
    unmatched_source: list = field(default_factory=list)  # labels only in the source
    unmatched_target: list = field(default_factory=list)

    def reversed(self) -> "MatchSet":
        return MatchSet(
            sorted((b, a) for a, b in self.pairs),
            sorted((t, s) for s, t in self.groups),
            list(self.unmatched_target),
            list(self.unmatched_source),
        )


def normalize_centers(centers: np.ndarray) -> np.ndarray:
    """Translate the centroid to the origin and divide by the RMS distance to it."""
    c = np.asarray(centers, float) - np.mean(centers, axis=0)
    rms = np.sqrt(np.mean(np.sum(c * c, axis=1)))
    return c / rms if rms > 0 else c


def _nearest(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1)
    return np.argmin(d, axis=1)  # lowest index on ties


def _components(pairs):
    parent = {}

    def find(x):
        while parent.setdefault(x, x) != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for s, t in pairs:
        parent[find(("s", s))] = find(("t", t))
    comps = {}
    for s, t in pairs:
        comps.setdefault(find(("s", s)), (set(), set()))
        comps[find(("s", s))][0].add(s)
        comps[find(("s", s))][1].add(t)
    return sorted((tuple(sorted(a)), tuple(sorted(b))) for a, b in comps.values())


def match_shapes(src: Sequence, dst: Sequence) -> MatchSet:
    """Two-way nearest-neighbor matching of same-label abstraction centers.

    Ids are the abstractions' instance ids (list positions for plain tuples).
    """
    def groups(items):
        out = {}
        for i, a in enumerate(items):
            label, box, inst = _item(a)
            out.setdefault(label, []).append((i if inst is None else inst, box.center))
        return out

    gs, gd = groups(src), groups(dst)
    pairs = set()
    for label in sorted(set(gs) & set(gd)):
        ids_s = [i for i, _ in gs[label]]
        ids_d = [i for i, _ in gd[label]]
        cs = normalize_centers(np.array([c for _, c in gs[label]]))
        cd = normalize_centers(np.array([c for _, c in gd[label]]))
        for i, j in enumerate(_nearest(cs, cd)):
            pairs.add((ids_s[i], ids_d[j]))
        for j, i in enumerate(_nearest(cd, cs)):
            pairs.add((ids_s[i], ids_d[j]))
    pairs = sorted(pairs)
    return MatchSet(pairs, _components(pairs), sorted(set(gs) - set(gd)), sorted(set(gd) - set(gs)))


def write_matches(matches: MatchSet, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["source", "target"])
        w.writerows(matches.pairs)


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class IouReport:
    per_label: dict  # label -> mean IoU in percent
    mean: float
    counts: dict  # label -> number of ground-truth parts


def matched_ious(predicted: Sequence, gt_parts: Sequence, samples_per_axis: int = DEFAULT_IOU_SAMPLES) -> dict:
    """Per label, the IoU credited to each ground-truth part under greedy one-to-one matching."""
    pred = [_item(a)[:2] for a in predicted]
    out = {}
    for label in dict.fromkeys(lab for lab, _ in gt_parts):
        gts = [b for lab, b in gt_parts if lab == label]
        ps = [b for lab, b in pred if lab == label]
        credit = np.zeros(len(gts))
        if ps:
            m = iou_matrix(ps, gts, samples_per_axis)
            order = np.argsort(-m, axis=None, kind="stable")
            used_p, used_g = set(), set()
            for flat in order:
                i, j = divmod(int(flat), len(gts))
                if m[i, j] <= 0:
                    break
                if i in used_p or j in used_g:
                    continue
                used_p.add(i)
                used_g.add(j)
                credit[j] = m[i, j]
        out[label] = credit.tolist()
    return out


def summarize_ious(per_label_ious: dict) -> IouReport:
    per = {lab: 100.0 * float(np.mean(v)) for lab, v in per_label_ious.items() if len(v)}
    mean = float(np.mean(list(per.values()))) if per else 0.0
    return IouReport(per, mean, {lab: len(v) for lab, v in per_label_ious.items()})


def merge_ious(many: Sequence[dict]) -> dict:
    out = {}
    for d in many:
        for lab, v in d.items():
            out.setdefault(lab, []).extend(v)
    return out


def eval_avg_iou(predicted: Sequence, gt_parts: Sequence, samples_per_axis: int = DEFAULT_IOU_SAMPLES) -> IouReport:
    """Per-label mean IoU (percent) over ground-truth parts and the mean over labels."""
    return summarize_ious(matched_ious(predicted, gt_parts, samples_per_axis))
