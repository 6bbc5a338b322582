"""Learn templates and a small head on toy vehicles, then abstract and segment one held-out shape.

    python demos/abstract_one_shape.py
"""

import logging

import numpy as np

from semabs.apps import eval_avg_iou, segment_mesh, segmentation_accuracy
from semabs.pipeline import (
    PipelineConfig,
    build_training_pool,
    category_data,
    category_templates,
    fuse_predictions,
    predict_shape,
    shape_candidates,
    train_head,
)

logging.basicConfig(level=logging.INFO, format="%(message)s")

# a small configuration so the demo runs in well under a minute
cfg = PipelineConfig(categories=("toy-vehicle",), shapes_per_category=40, steps=800)
_, train_set, test_set = category_data(cfg, "toy-vehicle")
templates = category_templates(cfg, train_set)
pool = build_training_pool(cfg, train_set, templates)
params, trace, _ = train_head(cfg, pool)
print(f"loss {trace[:50].mean():.3f} -> {trace[-50:].mean():.3f} over {len(trace)} steps")

shape = test_set[0]
cands = shape_candidates(cfg, shape, templates)
abstractions = fuse_predictions(cfg, predict_shape(cfg, params, shape, cands))
print(f"\n{shape.id}: {len(cands)} candidates -> {len(abstractions)} abstractions")
for a in abstractions:
    print(f"  #{a.instance:<2d} {a.label:15s} score {a.score:.3f}  center {np.round(a.box.center, 3)}  size {np.round(a.box.size, 3)}")

report = eval_avg_iou(abstractions, shape.parts)
print("\nIoU per label:", {k: round(v, 1) for k, v in report.per_label.items()}, f"mean {report.mean:.1f}")

faces = segment_mesh(shape.mesh, abstractions, cfg.vote_k, cfg.face_margin)
print(f"faces labeled correctly: {segmentation_accuracy(shape, faces):.3f}")
