"""Configuration, per-category processing steps and the ablation experiment."""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .apps import (
    matched_ious,
    merge_ious,
    segment_mesh,
    segmentation_accuracy,
    segmentation_label_counts,
    summarize_ious,
)
from .candidates import (
    NEGATIVE,
    POSITIVE,
    OccupancyIndex,
    ShapeSamples,
    label_candidates,
    place_and_shrink,
    regression_target,
    sample_training_batch,
    uniform_voxel_candidates,
)
from .data import BUILTIN_CATEGORIES, generate_dataset, split_dataset
from .fusion import fuse
from .model import HeadParams, build_feature_volume, pool_many, predict_candidates, train
from .template import learn_templates

log = logging.getLogger(__name__)


@dataclass
class PipelineConfig:
    seed: int = 0
    categories: tuple = ("toy-vehicle", "toy-chair")
    shapes_per_category: int = 200
    train_fraction: float = 0.8
    resolution: int = 64
    grid_n: int = 100
    n_primitives: int = 20
    rel_threshold: float = 0.15
    min_cells: int = 4
    positive_iou: float = 0.5
    negative_iou: float = 0.3
    nms_iou: float = 0.5
    group_iou: float = 0.25
    min_score: float = 0.5
    lam: float = 1.0
    train_shapes: int = 0  # 0 uses every training shape
    steps: int = 3000
    learning_rate: float = 0.02
    momentum: float = 0.9
    batch_size: int = 64
    shapes_per_batch: int = 8
    label_cap: int = 24
    candidates: str = "template"
    uniform_resolution: int = 32
    uniform_cap: int = 600
    fusion: str = "sai"
    confidence: str = "scored"
    iou_samples: int = 48
    vote_k: int = 10
    face_margin: float = 1.0 / 64
    train_counts: tuple = (8, 16, 32, 64, 160)

    _CHOICES = {"candidates": ("template", "uniform"), "fusion": ("nms", "sai"), "confidence": ("scored", "unit")}

    def validate(self) -> "PipelineConfig":
        for key, allowed in self._CHOICES.items():
            if getattr(self, key) not in allowed:
                raise ValueError(f"{key} must be one of {allowed}, got {getattr(self, key)!r}")
        for name in self.categories:
            if name not in BUILTIN_CATEGORIES:
                raise ValueError(f"unknown category {name!r}")
        if not 0 < self.train_fraction < 1:
            raise ValueError("train_fraction must lie in (0, 1)")
        if not self.negative_iou <= self.positive_iou:
            raise ValueError("negative_iou must not exceed positive_iou")
        return self

    def replace(self, **changes) -> "PipelineConfig":
        return dataclasses.replace(self, **changes).validate()

    # key = value text

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ", ".join(str(x) for x in v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, base: "PipelineConfig" = None) -> "PipelineConfig":
        values = {}
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"config line {n}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            values[key] = value
        return (base or cls()).with_strings(values)

    def with_strings(self, values: dict) -> "PipelineConfig":
        kinds = {f.name: type(f.default) for f in dataclasses.fields(self)}
        changes = {}
        for key, value in values.items():
            if key not in kinds:
                raise ValueError(f"unknown config key {key!r}")
            kind = kinds[key]
            if kind is tuple:
                items = [s.strip() for s in str(value).split(",") if s.strip()]
                current = getattr(self, key)
                conv = type(current[0]) if current else str
                changes[key] = tuple(conv(s) for s in items)
            elif kind is bool:
                changes[key] = str(value).lower() in ("1", "true", "yes")
            else:
                changes[key] = kind(value)
        return self.replace(**changes)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        return cls.from_text(Path(path).read_text())

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())


# ---------------------------------------------------------------------------
# per-category steps


def category_data(cfg: PipelineConfig, name: str):
    """All shapes of a category and their ``(train, test)`` split."""
    shapes = generate_dataset(BUILTIN_CATEGORIES[name], cfg.shapes_per_category, cfg.seed, cfg.resolution)
    train_set, test_set = split_dataset(shapes, cfg.train_fraction, cfg.seed)
    return shapes, train_set, test_set


def category_templates(cfg: PipelineConfig, train_shapes: Sequence) -> dict:
    return learn_templates(train_shapes, cfg.grid_n, cfg.rel_threshold, cfg.n_primitives, cfg.seed)


def shape_candidates(cfg: PipelineConfig, shape, templates: dict, mode: str = None) -> list:
    """Candidates of one shape from the learned templates or from the uniform voxel baseline."""
    mode = mode or cfg.candidates
    index = OccupancyIndex(shape.grid)
    if mode == "template":
        return [c for label in sorted(templates)
                for c in place_and_shrink(templates[label], shape.grid, cfg.min_cells, index)]
    if mode != "uniform":
        raise ValueError(f"unknown candidate mode {mode!r}")
    prims = {label: t.scale_primitives for label, t in templates.items()}
    # equal per-label budget, drawn reproducibly per shape
    rng = np.random.default_rng([cfg.seed, _shape_key(shape.id)])
    return uniform_voxel_candidates(shape.grid, prims, cfg.uniform_resolution, True, cfg.min_cells, index,
                                    cfg.uniform_cap, rng)


def _shape_key(shape_id: str) -> int:
    return int.from_bytes(shape_id.encode()[-8:], "little")


@dataclass
class TrainingPool:
    """Pooled features and labels of the sampled training candidates of every training shape."""

    features: np.ndarray
    is_positive: np.ndarray
    targets: np.ndarray
    offsets: np.ndarray  # row offset of each shape's block
    samples: list  # ShapeSamples per shape
    ious: np.ndarray = field(default=None)  # best same-label IoU of each row

    def rows(self, shape_index, cand_index):
        return self.offsets[shape_index] + cand_index

    def subset(self, n_shapes: int) -> "TrainingPool":
        end = self.offsets[n_shapes]
        return TrainingPool(self.features[:end], self.is_positive[:end], self.targets[:end],
                            self.offsets[: n_shapes + 1], self.samples[:n_shapes],
                            None if self.ious is None else self.ious[:end])


def build_training_pool(cfg: PipelineConfig, train_shapes: Sequence, templates: dict, mode: str = None) -> TrainingPool:
    feats, pos, tgts, ious, samples, offsets = [], [], [], [], [], [0]
    for shape in train_shapes:
        cands = shape_candidates(cfg, shape, templates, mode)
        rng = np.random.default_rng([cfg.seed, _shape_key(shape.id), 1])
        by_label = {}
        for i, c in enumerate(cands):
            by_label.setdefault(c.label, []).append(i)
        chosen = []
        for label in sorted(by_label):
            idx = by_label[label]
            if len(idx) > cfg.label_cap:
                idx = sorted(rng.choice(idx, cfg.label_cap, replace=False).tolist())
            chosen += idx
        sub = [cands[i] for i in chosen]
        lab = label_candidates(sub, shape.parts, cfg.positive_iou, cfg.negative_iou, cfg.iou_samples)
        use = np.flatnonzero((lab.status == POSITIVE) | (lab.status == NEGATIVE))
        sub = [sub[i] for i in use]
        status = lab.status[use]
        t = np.zeros((len(sub), 9))
        for r, i in enumerate(use):
            if lab.status[i] == POSITIVE:
                t[r] = regression_target(sub[r], shape.parts[lab.best_gt[i]][1]).as_vector()
        fv = build_feature_volume(shape.grid, cfg.resolution)
        feats.append(pool_many(fv, [c.box for c in sub]))
        pos.append(status == POSITIVE)
        tgts.append(t)
        ious.append(lab.best_iou[use])
        samples.append(ShapeSamples(np.array([c.label for c in sub]), status == POSITIVE, status == NEGATIVE))
        offsets.append(offsets[-1] + len(sub))
    return TrainingPool(np.concatenate(feats), np.concatenate(pos), np.concatenate(tgts),
                        np.array(offsets), samples, np.concatenate(ious))


class _BatchView:
    """Sequence of ``(x, y, targets)`` batches materialized on access."""

    def __init__(self, pool: TrainingPool, batches: list):
        self.pool, self.batches = pool, batches

    def __len__(self):
        return len(self.batches)

    def __getitem__(self, i):
        b = self.batches[i]
        rows = self.pool.rows(b.shape_index, b.cand_index)
        return self.pool.features[rows], b.is_positive.astype(float), self.pool.targets[rows]


def train_head(cfg: PipelineConfig, pool: TrainingPool, seed_offset: int = 0):
    """Train a fresh head on batches sampled from ``pool``; returns ``(params, loss_trace, shortfall)``."""
    rng = np.random.default_rng([cfg.seed, 2, seed_offset])
    batches = [sample_training_batch(pool.samples, rng, cfg.batch_size, cfg.shapes_per_batch)
               for _ in range(cfg.steps)]
    params = HeadParams.init(cfg.seed)
    params, trace = train(params, _BatchView(pool, batches), cfg.steps, cfg.learning_rate, cfg.seed,
                          cfg.momentum, cfg.lam)
    return params, trace, int(sum(b.shortfall for b in batches))


def predict_shape(cfg: PipelineConfig, params: HeadParams, shape, cands: Sequence) -> list:
    fv = build_feature_volume(shape.grid, cfg.resolution)
    return predict_candidates(params, fv, cands)


def fuse_predictions(cfg: PipelineConfig, scored: Sequence, fusion: str = None, confidence: str = None) -> list:
    fusion = fusion or cfg.fusion
    confidence = confidence or cfg.confidence
    return fuse(scored, fusion, confidence == "scored", cfg.group_iou, cfg.nms_iou, cfg.min_score, cfg.iou_samples)


# ---------------------------------------------------------------------------
# ablation experiment

VARIANTS = ("sai-scored", "sai-unit", "nms-scored", "uniform-sai-scored")


@dataclass
class ExperimentResult:
    iou: dict  # (category, variant) -> IouReport
    sweep: dict  # category -> list of (train count, mean IoU)
    segmentation: dict  # category -> mean face-label accuracy
    seconds: float
    notes: list = field(default_factory=list)
    segmentation_by_label: dict = field(default_factory=dict)  # category -> label -> face accuracy

    def mean(self, variant: str) -> float:
        vals = [r.mean for (cat, v), r in self.iou.items() if v == variant]
        return float(np.mean(vals)) if vals else float("nan")

    def sweep_mean(self) -> list:
        counts = sorted({n for pts in self.sweep.values() for n, _ in pts})
        return [(n, float(np.mean([dict(pts)[n] for pts in self.sweep.values() if n in dict(pts)])))
                for n in counts]


def _evaluate(cfg, shapes, scored_per_shape, fusion, confidence):
    many = []
    for shape, scored in zip(shapes, scored_per_shape):
        many.append(matched_ious(fuse_predictions(cfg, scored, fusion, confidence), shape.parts, cfg.iou_samples))
    return summarize_ious(merge_ious(many))


def run_experiment(cfg: PipelineConfig, variants: Sequence = VARIANTS, sweep: bool = True,
                   segment: bool = True) -> ExperimentResult:
    """Train per category, then compare fusion, confidence and candidate-source variants on the test split."""
    cfg.validate()
    t0 = time.perf_counter()
    result = ExperimentResult({}, {}, {}, 0.0)
    for name in cfg.categories:
        _, train_set, test_set = category_data(cfg, name)
        templates = category_templates(cfg, train_set)
        pool = build_training_pool(cfg, train_set, templates, "template")
        params, _, shortfall = train_head(cfg, pool)
        if shortfall:
            result.notes.append(f"{name}: {shortfall} positive batch slots padded with negatives")
        test_cands = [shape_candidates(cfg, s, templates, "template") for s in test_set]
        scored = [predict_shape(cfg, params, s, c) for s, c in zip(test_set, test_cands)]
        for variant in variants:
            if variant.startswith("uniform"):
                continue
            fusion, confidence = variant.split("-")
            result.iou[(name, variant)] = _evaluate(cfg, test_set, scored, fusion, confidence)
            log.info("%s %s mean IoU %.1f", name, variant, result.iou[(name, variant)].mean)
        if segment:
            acc, per_label = [], {}
            for shape, sc in zip(test_set, scored):
                abstractions = fuse_predictions(cfg, sc, "sai", "scored")
                if not abstractions:
                    acc.append(0.0)
                    continue
                lab = segment_mesh(shape.mesh, abstractions, cfg.vote_k, cfg.face_margin)
                acc.append(segmentation_accuracy(shape, lab))
                for label, (hit, total) in segmentation_label_counts(shape, lab).items():
                    h, t = per_label.get(label, (0, 0))
                    per_label[label] = (h + hit, t + total)
            result.segmentation[name] = float(np.mean(acc))
            result.segmentation_by_label[name] = {k: h / t for k, (h, t) in sorted(per_label.items())}
        if "uniform-sai-scored" in variants:
            upool = build_training_pool(cfg, train_set, templates, "uniform")
            uparams, _, _ = train_head(cfg, upool)
            uscored = [predict_shape(cfg, uparams, s, shape_candidates(cfg, s, templates, "uniform"))
                       for s in test_set]
            result.iou[(name, "uniform-sai-scored")] = _evaluate(cfg, test_set, uscored, "sai", "scored")
            log.info("%s uniform mean IoU %.1f", name, result.iou[(name, "uniform-sai-scored")].mean)
        if sweep:
            points = []
            for n in cfg.train_counts:
                n = min(n, len(train_set))
                if n == len(train_set) and "sai-scored" in variants:
                    points.append((n, result.iou[(name, "sai-scored")].mean))
                    continue
                # fewer training shapes means weaker templates as well as a weaker head
                subset = train_set[:n]
                sub_templates = category_templates(cfg, subset)
                p, _, _ = train_head(cfg, build_training_pool(cfg, subset, sub_templates, "template"))
                sc = [predict_shape(cfg, p, s, shape_candidates(cfg, s, sub_templates, "template")) for s in test_set]
                points.append((n, _evaluate(cfg, test_set, sc, "sai", "scored").mean))
                log.info("%s sweep n=%d mean IoU %.1f", name, n, points[-1][1])
            result.sweep[name] = points
    result.seconds = time.perf_counter() - t0
    return result
