"""Synthetic annotated shapes, annotation documents and mesh export."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .geometry import OrientedBox, VoxelGrid, box_occupancy, obb_to_aabb, voxelize_parts

MAX_ROTATION_JITTER = np.pi / 6


class AnnotationError(ValueError):
    """Malformed annotation document."""


class VocabularyError(AnnotationError):
    """Part label outside the category vocabulary."""


@dataclass(frozen=True)
class PartSpec:
    """Placement rule for one semantic label.

    ``positions`` lists one base center per potential instance; a shape with
    ``n`` instances uses the first ``n``.  Position jitter is absolute, scale
    jitter relative, rotation jitter per Euler component; all uniform.
    """

    label: str
    count: tuple
    positions: tuple
    size: tuple
    angles: tuple = (0.0, 0.0, 0.0)
    jitter_position: float = 0.0
    jitter_scale: float = 0.0
    jitter_rotation: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        lo, hi = self.count
        if not 0 <= lo <= hi:
            raise ValueError(f"{self.label}: bad count range {self.count}")
        if hi > len(self.positions):
            raise ValueError(f"{self.label}: {hi} instances but {len(self.positions)} positions")
        if np.any(np.asarray(self.size, float) <= 0):
            raise ValueError(f"{self.label}: zero-size part")
        if self.jitter_position < 0 or not 0 <= self.jitter_scale < 1:
            raise ValueError(f"{self.label}: jitter out of range")
        rot = np.asarray(self.jitter_rotation, float)
        if np.any(rot < 0) or np.any(rot > MAX_ROTATION_JITTER):
            raise ValueError(f"{self.label}: rotation jitter must lie in [0, pi/6]")


@dataclass(frozen=True)
class CategorySpec:
    name: str
    labels: tuple
    parts: tuple

    def __post_init__(self):
        for part in self.parts:
            if part.label not in self.labels:
                raise VocabularyError(f"{self.name}: label {part.label!r} not in vocabulary")


@dataclass
class Mesh:
    vertices: np.ndarray  # (V, 3)
    faces: np.ndarray  # (F, 3) vertex indices
    face_part: np.ndarray  # (F,) index into the shape's part list

    def centroids(self) -> np.ndarray:
        return self.vertices[self.faces].mean(axis=1)

    def __eq__(self, other):
        if not isinstance(other, Mesh):
            return NotImplemented
        return (
            np.array_equal(self.vertices, other.vertices)
            and np.array_equal(self.faces, other.faces)
            and np.array_equal(self.face_part, other.face_part)
        )


@dataclass
class AnnotatedShape:
    id: str
    category: str
    grid: VoxelGrid
    parts: list  # of (label, OrientedBox)
    mesh: Optional[Mesh] = field(default=None)

    @property
    def labels(self) -> list:
        return [label for label, _ in self.parts]

    @property
    def boxes(self) -> list:
        return [box for _, box in self.parts]

    def __eq__(self, other):
        if not isinstance(other, AnnotatedShape):
            return NotImplemented
        return (
            self.id == other.id
            and self.category == other.category
            and self.grid == other.grid
            and len(self.parts) == len(other.parts)
            and all(la == lb and ba == bb for (la, ba), (lb, bb) in zip(self.parts, other.parts))
            and self.mesh == other.mesh
        )


# 12 outward-facing triangles over the corner order of OrientedBox.corners()
_CUBOID_TRIANGLES = np.array(
    [
        [0, 1, 3], [0, 3, 2],  # -x
        [4, 6, 7], [4, 7, 5],  # +x
        [0, 4, 5], [0, 5, 1],  # -y
        [2, 3, 7], [2, 7, 6],  # +y
        [0, 2, 6], [0, 6, 4],  # -z
        [1, 5, 7], [1, 7, 3],  # +z
    ]
)


def cuboid_mesh(boxes: Sequence[OrientedBox]) -> Mesh:
    verts, faces, owner = [], [], []
    for i, box in enumerate(boxes):
        verts.append(box.corners())
        faces.append(_CUBOID_TRIANGLES + 8 * i)
        owner.append(np.full(12, i))
    if not verts:
        return Mesh(np.zeros((0, 3)), np.zeros((0, 3), int), np.zeros(0, int))
    return Mesh(np.concatenate(verts), np.concatenate(faces), np.concatenate(owner))


def _fit_unit_cube(boxes, margin=0.02):
    """Uniformly rescale about the cube center when any part leaves [margin, 1 - margin]."""
    aabbs = [obb_to_aabb(b) for b in boxes]
    lo = np.min([a.min for a in aabbs], axis=0)
    hi = np.max([a.max for a in aabbs], axis=0)
    if np.all(lo >= margin) and np.all(hi <= 1.0 - margin):
        return boxes
    mid = 0.5 * (lo + hi)
    scale = (1.0 - 2 * margin) / float(np.max(hi - lo))
    scale = min(scale, 1.0)
    return [
        OrientedBox(0.5 + (b.center - mid) * scale, b.size * scale, b.angles) for b in boxes
    ]


def generate_shape(spec: CategorySpec, seed: int, resolution: int = 64, shape_id: str = None) -> AnnotatedShape:
    rng = np.random.default_rng(seed)
    labels, boxes = [], []
    for part in spec.parts:
        lo, hi = part.count
        n = int(rng.integers(lo, hi + 1))
        for k in range(n):
            # draw all jitter even for zero magnitude so streams stay aligned
            dp = rng.uniform(-1, 1, 3) * part.jitter_position
            ds = 1.0 + rng.uniform(-1, 1, 3) * part.jitter_scale
            da = rng.uniform(-1, 1, 3) * np.asarray(part.jitter_rotation, float)
            size = np.asarray(part.size, float) * ds
            if np.any(size <= 0):
                raise ValueError(f"{spec.name}/{part.label}: degenerate part size {size}")
            boxes.append(
                OrientedBox(np.asarray(part.positions[k], float) + dp, size, np.asarray(part.angles, float) + da)
            )
            labels.append(part.label)
    if not boxes:
        raise ValueError(f"{spec.name}: spec produced no parts")
    boxes = _fit_unit_cube(boxes)
    grid = voxelize_parts(boxes, resolution)
    for label, box in zip(labels, boxes):
        fraction, _ = box_occupancy(grid, box)
        if fraction <= 0:
            raise ValueError(f"{spec.name}/{label}: part has no occupied cells at resolution {resolution}")
    sid = shape_id if shape_id is not None else f"{spec.name}-{seed}"
    return AnnotatedShape(sid, spec.name, grid, list(zip(labels, boxes)), cuboid_mesh(boxes))


def generate_dataset(spec: CategorySpec, count: int, seed: int, resolution: int = 64) -> list:
    """``count`` shapes with per-shape seeds spawned from ``seed``."""
    seeds = np.random.SeedSequence([seed, _name_key(spec.name)]).generate_state(count)
    return [
        generate_shape(spec, int(s), resolution, shape_id=f"{spec.name}-{i:04d}") for i, s in enumerate(seeds)
    ]


def _name_key(name: str) -> int:
    # stable across interpreter runs, unlike hash()
    return int.from_bytes(name.encode(), "little") % (2**32)


def split_dataset(shapes: Sequence, train_fraction: float, seed: int):
    """Shuffle deterministically and cut into ``(train, test)``; order inside each part follows the input."""
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must lie in (0, 1)")
    n = len(shapes)
    if n < 2:
        raise ValueError("need at least 2 shapes to split")
    n_train = int(np.clip(round(n * train_fraction), 1, n - 1))
    perm = np.random.default_rng(seed).permutation(n)
    train_idx = np.sort(perm[:n_train])
    test_idx = np.sort(perm[n_train:])
    return [shapes[i] for i in train_idx], [shapes[i] for i in test_idx]


# ---------------------------------------------------------------------------
# annotation documents


def box_to_dict(label: str, box: OrientedBox, **extra) -> dict:
    d = {"label": label, "center": box.center.tolist(), "size": box.size.tolist(), "angles": box.angles.tolist()}
    d.update(extra)
    return d


def box_from_dict(d: dict, where: str = "part") -> OrientedBox:
    for key in ("center", "size", "angles"):
        if key not in d:
            raise AnnotationError(f"missing field: {where}.{key}")
        value = d[key]
        if not isinstance(value, list) or len(value) != 3:
            raise AnnotationError(f"field {where}.{key} must be a list of 3 numbers")
    try:
        return OrientedBox(d["center"], d["size"], d["angles"])
    except (TypeError, ValueError) as exc:
        raise AnnotationError(f"invalid box in {where}: {exc}") from exc


def shape_to_dict(shape: AnnotatedShape) -> dict:
    return {
        "id": shape.id,
        "category": shape.category,
        "resolution": shape.grid.resolution,
        "parts": [box_to_dict(label, box) for label, box in shape.parts],
    }


def shape_from_dict(doc: dict, categories: dict = None) -> AnnotatedShape:
    categories = BUILTIN_CATEGORIES if categories is None else categories
    if not isinstance(doc, dict):
        raise AnnotationError("annotation document must be an object")
    for key in ("id", "category", "parts"):
        if key not in doc:
            raise AnnotationError(f"missing field: {key}")
    category = doc["category"]
    if category not in categories:
        raise VocabularyError(f"unknown category: {category!r}")
    vocab = categories[category].labels
    parts = []
    for i, item in enumerate(doc["parts"]):
        if "label" not in item:
            raise AnnotationError(f"missing field: parts[{i}].label")
        if item["label"] not in vocab:
            raise VocabularyError(f"label {item['label']!r} not in vocabulary of {category!r}")
        parts.append((item["label"], box_from_dict(item, f"parts[{i}]")))
    resolution = int(doc.get("resolution", 64))
    boxes = [b for _, b in parts]
    return AnnotatedShape(doc["id"], category, voxelize_parts(boxes, resolution), parts, cuboid_mesh(boxes))


def write_annotation(shape: AnnotatedShape, path) -> None:
    Path(path).write_text(json.dumps(shape_to_dict(shape), indent=1))


def read_annotation(path, categories: dict = None) -> AnnotatedShape:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise AnnotationError(f"{path}: not a valid document ({exc})") from exc
    return shape_from_dict(doc, categories)


def write_obj(mesh: Mesh, labels: Sequence[str], path) -> None:
    """Wavefront OBJ with one group per part; ``labels[i]`` names part ``i``."""
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
    for part in np.unique(mesh.face_part):
        lines.append(f"g part{part}_{labels[part]}")
        for a, b, c in mesh.faces[mesh.face_part == part] + 1:
            lines.append(f"f {a} {b} {c}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_obj(path):
    """Read back ``(vertices, faces, group_names)`` from :func:`write_obj` output."""
    verts, faces, groups, owner = [], [], [], []
    for line in Path(path).read_text().splitlines():
        if line.startswith("v "):
            verts.append([float(v) for v in line.split()[1:4]])
        elif line.startswith("g "):
            groups.append(line[2:].strip())
        elif line.startswith("f "):
            faces.append([int(v.split("/")[0]) - 1 for v in line.split()[1:4]])
            owner.append(len(groups) - 1)
    return np.array(verts), np.array(faces, int), groups, np.array(owner, int)


# ---------------------------------------------------------------------------
# built-in categories

TOY_VEHICLE = CategorySpec(
    name="toy-vehicle",
    labels=("body", "wheel", "door", "seat", "steering_wheel", "spoiler"),
    parts=(
        PartSpec("body", (1, 1), ((0.5, 0.5, 0.47),), (0.72, 0.34, 0.22),
                 jitter_position=0.015, jitter_scale=0.05, jitter_rotation=(0.0, 0.0, 0.02)),
        PartSpec("wheel", (4, 4),
                 ((0.26, 0.31, 0.32), (0.74, 0.31, 0.32), (0.26, 0.69, 0.32), (0.74, 0.69, 0.32)),
                 (0.15, 0.07, 0.15), jitter_position=0.012, jitter_scale=0.08, jitter_rotation=(0.0, 0.0, 0.05)),
        PartSpec("door", (2, 2), ((0.52, 0.31, 0.48), (0.52, 0.69, 0.48)), (0.22, 0.06, 0.14),
                 jitter_position=0.012, jitter_scale=0.08, jitter_rotation=(0.0, 0.0, 0.04)),
        # seat and steering wheel sit entirely inside the body and never reach its surface
        PartSpec("seat", (1, 1), ((0.44, 0.5, 0.46),), (0.18, 0.24, 0.12),
                 jitter_position=0.01, jitter_scale=0.06, jitter_rotation=(0.0, 0.0, 0.03)),
        PartSpec("steering_wheel", (1, 1), ((0.6, 0.5, 0.5),), (0.06, 0.12, 0.1),
                 jitter_position=0.006, jitter_scale=0.06, jitter_rotation=(0.0, 0.0, 0.0)),
        PartSpec("spoiler", (0, 1), ((0.17, 0.5, 0.62),), (0.1, 0.3, 0.06),
                 jitter_position=0.01, jitter_scale=0.08, jitter_rotation=(0.0, 0.0, 0.03)),
    ),
)

TOY_CHAIR = CategorySpec(
    name="toy-chair",
    labels=("seat", "back", "leg", "armrest", "stretcher"),
    parts=(
        PartSpec("seat", (1, 1), ((0.5, 0.5, 0.45),), (0.44, 0.44, 0.07),
                 jitter_position=0.015, jitter_scale=0.06, jitter_rotation=(0.0, 0.0, 0.03)),
        PartSpec("back", (1, 1), ((0.5, 0.3, 0.72),), (0.44, 0.07, 0.46),
                 jitter_position=0.015, jitter_scale=0.06, jitter_rotation=(0.06, 0.0, 0.03)),
        PartSpec("leg", (4, 4),
                 ((0.31, 0.31, 0.22), (0.69, 0.31, 0.22), (0.31, 0.69, 0.22), (0.69, 0.69, 0.22)),
                 (0.06, 0.06, 0.38), jitter_position=0.012, jitter_scale=0.06, jitter_rotation=(0.0, 0.0, 0.05)),
        PartSpec("armrest", (0, 2), ((0.27, 0.5, 0.6), (0.73, 0.5, 0.6)), (0.06, 0.34, 0.06),
                 jitter_position=0.01, jitter_scale=0.06, jitter_rotation=(0.0, 0.0, 0.03)),
        PartSpec("stretcher", (0, 2), ((0.31, 0.5, 0.14), (0.69, 0.5, 0.14)), (0.06, 0.32, 0.06),
                 jitter_position=0.01, jitter_scale=0.06, jitter_rotation=(0.0, 0.0, 0.03)),
    ),
)

BUILTIN_CATEGORIES = {spec.name: spec for spec in (TOY_VEHICLE, TOY_CHAIR)}
