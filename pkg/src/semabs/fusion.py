"""Composite inference: greedy NMS and semantic abstraction integration (SAI)."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .candidates import matched_params_many, wrap_angle
from .geometry import DEFAULT_IOU_SAMPLES, OrientedBox, iou_matrix, obb_iou_many

NMS_IOU = 0.5
GROUP_IOU = 0.25
MIN_LEADER_SCORE = 0.5


@dataclass(frozen=True, eq=False)
class ScoredCandidate:
    box: OrientedBox
    label: str
    score: float

    def __post_init__(self):
        if not 0.0 < self.score < 1.0:
            raise ValueError(f"score must lie in (0, 1), got {self.score}")


@dataclass
class FusionGroup:
    leader: ScoredCandidate
    members: list = field(default_factory=list)


@dataclass(frozen=True, eq=False)
class Abstraction:
    """A fused, labeled box with its instance id and leader score."""

    box: OrientedBox
    label: str
    score: float
    instance: int


def _by_label(cands):
    groups = {}
    for i, c in enumerate(cands):
        groups.setdefault(c.label, []).append(i)
    return groups


def _descending(cands, idx):
    # stable: equal scores keep input order
    return sorted(idx, key=lambda i: -cands[i].score)


def _leader_ious(cands, leader, rest, samples):
    return obb_iou_many([cands[leader].box] * len(rest), [cands[i].box for i in rest], samples)


def nms(cands: Sequence[ScoredCandidate], iou_threshold: float = NMS_IOU,
        samples_per_axis: int = DEFAULT_IOU_SAMPLES, min_score: float = 0.0) -> list:
    """Greedy per-label suppression of boxes overlapping a kept one by more than ``iou_threshold``.

    Kept boxes scoring below ``min_score`` are discarded; since suppression
    only flows from higher to lower scores, the sweep simply stops there.
    """
    kept = []
    for label, idx in _by_label(cands).items():
        remaining = _descending(cands, idx)
        while remaining and cands[remaining[0]].score >= min_score:
            top, rest = remaining[0], remaining[1:]
            kept.append(top)
            if not rest:
                break
            ious = _leader_ious(cands, top, rest, samples_per_axis)
            remaining = [i for i, v in zip(rest, ious) if v <= iou_threshold]
    return [cands[i] for i in sorted(kept, key=lambda i: (-cands[i].score, i))]


def sai_group(cands: Sequence[ScoredCandidate], iou_threshold: float = GROUP_IOU,
              samples_per_axis: int = DEFAULT_IOU_SAMPLES, min_leader_score: float = 0.0) -> list:
    """Partition each label's candidates into groups around successive top scorers.

    Grouping stops once the best remaining score is below
    ``min_leader_score``; those groups would be discarded anyway, and the
    groups formed earlier do not depend on them.
    """
    groups = []
    for label, idx in _by_label(cands).items():
        remaining = _descending(cands, idx)
        while remaining and cands[remaining[0]].score >= min_leader_score:
            top, rest = remaining[0], remaining[1:]
            members = [top]
            if rest:
                ious = _leader_ious(cands, top, rest, samples_per_axis)
                members += [i for i, v in zip(rest, ious) if v >= iou_threshold]
                remaining = [i for i, v in zip(rest, ious) if v < iou_threshold]
            else:
                remaining = []
            groups.append(FusionGroup(cands[top], [cands[i] for i in members]))
    groups.sort(key=lambda g: -g.leader.score)
    return groups


def _aligned_params(leader: OrientedBox, boxes):
    sizes, angles = matched_params_many(leader, boxes)
    # keep each angle on the leader's branch so circular means stay local
    angles = leader.angles + wrap_angle(angles - leader.angles)
    return sizes, angles


def sai_fuse(group: FusionGroup, use_scores: bool = True) -> OrientedBox:
    """Score-weighted average of the group's boxes.

    Centers and sizes are weighted arithmetic means with weights normalized
    by their sum; each Euler angle is a weighted circular mean.  Members are
    first expressed in the axis ordering that best matches the leader so
    that sizes refer to the same physical directions.
    """
    members = group.members or [group.leader]
    if len(members) == 1:
        return members[0].box
    w = np.array([m.score if use_scores else 1.0 for m in members])
    w = w / w.sum()
    centers = np.array([m.box.center for m in members])
    sizes, angles = _aligned_params(group.leader.box, [m.box for m in members])
    center = w @ centers
    size = w @ sizes
    angle = np.arctan2(w @ np.sin(angles), w @ np.cos(angles))
    return OrientedBox(center, size, angle)


def fuse(cands: Sequence[ScoredCandidate], mode: str = "sai", use_scores: bool = True,
         group_iou: float = GROUP_IOU, nms_iou: float = NMS_IOU, min_score: float = MIN_LEADER_SCORE,
         samples_per_axis: int = DEFAULT_IOU_SAMPLES) -> list:
    """Final abstractions with instance ids, ordered by descending leader score."""
    if mode == "nms":
        kept = nms(cands, nms_iou, samples_per_axis, min_score)
        return [Abstraction(c.box, c.label, c.score, i) for i, c in enumerate(kept)]
    if mode != "sai":
        raise ValueError(f"unknown fusion mode {mode!r}")
    groups = sai_group(cands, group_iou, samples_per_axis, min_score)
    return [
        Abstraction(sai_fuse(g, use_scores), g.leader.label, g.leader.score, i) for i, g in enumerate(groups)
    ]
