"""Pipeline stages with on-disk artifacts under one output directory."""

from __future__ import annotations

import csv
import io
import json
import logging
from pathlib import Path

import numpy as np

from .apps import (
    match_shapes,
    matched_ious,
    merge_ious,
    segment_mesh,
    segmentation_accuracy,
    summarize_ious,
    write_face_labels,
    write_matches,
)
from .candidates import Candidate, ShapeSamples
from .data import box_from_dict, box_to_dict, read_annotation, write_annotation, write_obj
from .fusion import Abstraction, ScoredCandidate
from .geometry import OrientedBox
from .model import HeadParams, write_loss_trace
from .pipeline import (
    PipelineConfig,
    TrainingPool,
    build_training_pool,
    category_data,
    category_templates,
    fuse_predictions,
    predict_shape,
    shape_candidates,
    train_head,
)
from .template import template_from_dict, template_to_dict

log = logging.getLogger(__name__)

STAGES = ("gen-data", "learn-template", "gen-candidates", "train", "infer", "fuse", "eval", "segment", "match",
          "report")


class MissingArtifactError(FileNotFoundError):
    """A stage input is absent; the message names the stage that produces it."""


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise MissingArtifactError(f"missing {path}; run stage '{stage}' first")
    return path


def _box_rows(boxes):
    return np.array([b.params() for b in boxes]).reshape(-1, 9)


def _boxes(rows):
    return [OrientedBox(r[0:3], r[3:6], r[6:9]) for r in rows]


class Workspace:
    """Artifact layout for one output directory."""

    def __init__(self, root, cfg: PipelineConfig):
        self.root = Path(root)
        self.cfg = cfg

    def data_dir(self, cat):
        return self.root / "data" / cat

    def split_path(self, cat):
        return self.data_dir(cat) / "split.json"

    def template_path(self, cat):
        return self.root / "templates" / f"{cat}.json"

    def pool_path(self, cat):
        return self.root / "candidates" / f"{cat}-{self.cfg.candidates}-train.npz"

    def test_cands_path(self, cat):
        return self.root / "candidates" / f"{cat}-{self.cfg.candidates}-test.npz"

    def model_path(self, cat):
        n = f"-n{self.cfg.train_shapes}" if self.cfg.train_shapes else ""
        return self.root / "models" / f"{cat}-{self.cfg.candidates}{n}.npz"

    def predictions_path(self, cat):
        return self.root / "predictions" / f"{cat}-{self.cfg.candidates}.npz"

    @property
    def variant(self):
        return f"{self.cfg.candidates}-{self.cfg.fusion}-{self.cfg.confidence}"

    def abstraction_dir(self, cat):
        return self.root / "abstractions" / self.variant / cat

    def eval_path(self, cat):
        return self.root / "eval" / f"{cat}-{self.variant}.json"

    # shapes

    def shapes(self, cat, which):
        split = json.loads(_require(self.split_path(cat), "gen-data").read_text())
        return [read_annotation(_require(self.data_dir(cat) / "shapes" / f"{sid}.json", "gen-data"))
                for sid in split[which]]

    def templates(self, cat):
        docs = json.loads(_require(self.template_path(cat), "learn-template").read_text())
        return {d["label"]: template_from_dict(d) for d in docs}


# ---------------------------------------------------------------------------
# stages


def gen_data(ws: Workspace):
    for cat in ws.cfg.categories:
        shapes, train_set, test_set = category_data(ws.cfg, cat)
        d = ws.data_dir(cat)
        (d / "shapes").mkdir(parents=True, exist_ok=True)
        (d / "meshes").mkdir(parents=True, exist_ok=True)
        for s in shapes:
            write_annotation(s, d / "shapes" / f"{s.id}.json")
            write_obj(s.mesh, s.labels, d / "meshes" / f"{s.id}.obj")
        ws.split_path(cat).write_text(json.dumps(
            {"train": [s.id for s in train_set], "test": [s.id for s in test_set]}, indent=1))
        log.info("%s: %d train / %d test shapes", cat, len(train_set), len(test_set))


def learn_template(ws: Workspace):
    (ws.root / "templates").mkdir(parents=True, exist_ok=True)
    for cat in ws.cfg.categories:
        templates = category_templates(ws.cfg, ws.shapes(cat, "train"))
        ws.template_path(cat).write_text(json.dumps([template_to_dict(t) for t in templates.values()]))


def gen_candidates(ws: Workspace):
    (ws.root / "candidates").mkdir(parents=True, exist_ok=True)
    for cat in ws.cfg.categories:
        templates = ws.templates(cat)
        pool = build_training_pool(ws.cfg, ws.shapes(cat, "train"), templates)
        labels = np.concatenate([s.labels for s in pool.samples]) if pool.samples else np.zeros(0, str)
        np.savez_compressed(
            ws.pool_path(cat), features=pool.features, is_positive=pool.is_positive, targets=pool.targets,
            offsets=pool.offsets, labels=labels.astype(str),
            negative=np.concatenate([s.negative for s in pool.samples]), ious=pool.ious,
        )
        test = ws.shapes(cat, "test")
        rows, labels, owner = [], [], []
        for i, s in enumerate(test):
            cands = shape_candidates(ws.cfg, s, templates)
            rows.append(_box_rows([c.box for c in cands]))
            labels += [c.label for c in cands]
            owner += [i] * len(cands)
        np.savez_compressed(ws.test_cands_path(cat), params=np.concatenate(rows), labels=np.array(labels, str),
                            owner=np.array(owner, int), ids=np.array([s.id for s in test], str))


def _load_pool(path) -> TrainingPool:
    with np.load(_require(path, "gen-candidates")) as z:
        off = z["offsets"]
        samples = [ShapeSamples(z["labels"][a:b], z["is_positive"][a:b], z["negative"][a:b])
                   for a, b in zip(off[:-1], off[1:])]
        return TrainingPool(z["features"], z["is_positive"], z["targets"], off, samples, z["ious"])


def train_stage(ws: Workspace):
    (ws.root / "models").mkdir(parents=True, exist_ok=True)
    for cat in ws.cfg.categories:
        pool = _load_pool(ws.pool_path(cat))
        if ws.cfg.train_shapes:
            pool = pool.subset(min(ws.cfg.train_shapes, len(pool.samples)))
        params, trace, shortfall = train_head(ws.cfg, pool)
        if shortfall:
            log.warning("%s: %d positive batch slots padded with negatives", cat, shortfall)
        params.save(ws.model_path(cat))
        write_loss_trace(trace, ws.model_path(cat).with_suffix(".loss.csv"))


def _test_candidates(ws, cat):
    with np.load(_require(ws.test_cands_path(cat), "gen-candidates")) as z:
        params, labels, owner, ids = z["params"], z["labels"], z["owner"], z["ids"]
    per = [[] for _ in ids]
    for p, lab, o in zip(params, labels, owner):
        per[o].append(Candidate(OrientedBox(p[0:3], p[3:6], p[6:9]), str(lab)))
    return list(ids), per


def infer(ws: Workspace):
    (ws.root / "predictions").mkdir(parents=True, exist_ok=True)
    for cat in ws.cfg.categories:
        params = HeadParams.load(_require(ws.model_path(cat), "train"))
        ids, per = _test_candidates(ws, cat)
        test = {s.id: s for s in ws.shapes(cat, "test")}
        rows, labels, scores, owner = [np.zeros((0, 9))], [], [], []
        for i, (sid, cands) in enumerate(zip(ids, per)):
            scored = predict_shape(ws.cfg, params, test[sid], cands)
            rows.append(_box_rows([c.box for c in scored]))
            labels += [c.label for c in scored]
            scores += [c.score for c in scored]
            owner += [i] * len(scored)
        np.savez_compressed(ws.predictions_path(cat), params=np.concatenate(rows), labels=np.array(labels, str),
                            scores=np.array(scores), owner=np.array(owner, int), ids=np.array(ids, str))


def _predictions(ws, cat):
    with np.load(_require(ws.predictions_path(cat), "infer")) as z:
        params, labels, scores, owner, ids = z["params"], z["labels"], z["scores"], z["owner"], z["ids"]
    per = [[] for _ in ids]
    for p, lab, s, o in zip(params, labels, scores, owner):
        per[o].append(ScoredCandidate(OrientedBox(p[0:3], p[3:6], p[6:9]), str(lab), float(s)))
    return list(ids), per


def fuse_stage(ws: Workspace):
    for cat in ws.cfg.categories:
        ids, per = _predictions(ws, cat)
        d = ws.abstraction_dir(cat)
        d.mkdir(parents=True, exist_ok=True)
        for sid, scored in zip(ids, per):
            out = fuse_predictions(ws.cfg, scored)
            write_abstractions(d / f"{sid}.json", sid, cat, out, ws.cfg.resolution)


def write_abstractions(path, shape_id, category, abstractions, resolution=64) -> None:
    """Fused boxes in the annotation document layout, plus score and instance id per part."""
    doc = {
        "id": shape_id,
        "category": category,
        "resolution": resolution,
        "parts": [box_to_dict(a.label, a.box, score=a.score, instance=a.instance) for a in abstractions],
    }
    Path(path).write_text(json.dumps(doc, indent=1))


def read_abstractions(path) -> list:
    doc = json.loads(Path(path).read_text())
    return [Abstraction(box_from_dict(p, f"parts[{i}]"), p["label"], float(p.get("score", 1.0)),
                        int(p.get("instance", i))) for i, p in enumerate(doc["parts"])]


def _abstractions(ws, cat, shapes):
    d = ws.abstraction_dir(cat)
    return [read_abstractions(_require(d / f"{s.id}.json", "fuse")) for s in shapes]


def eval_stage(ws: Workspace):
    (ws.root / "eval").mkdir(parents=True, exist_ok=True)
    for cat in ws.cfg.categories:
        test = ws.shapes(cat, "test")
        many = [matched_ious(a, s.parts, ws.cfg.iou_samples) for s, a in zip(test, _abstractions(ws, cat, test))]
        rep = summarize_ious(merge_ious(many))
        ws.eval_path(cat).write_text(json.dumps({
            "category": cat, "variant": ws.variant, "per_label": rep.per_label, "mean": rep.mean,
            "counts": rep.counts, "n_shapes": len(test),
        }, indent=1))
        log.info("%s %s mean IoU %.2f", cat, ws.variant, rep.mean)


def segment_stage(ws: Workspace):
    for cat in ws.cfg.categories:
        test = ws.shapes(cat, "test")
        d = ws.root / "segments" / ws.variant / cat
        d.mkdir(parents=True, exist_ok=True)
        rows = [["shape", "accuracy"]]
        for s, abstractions in zip(test, _abstractions(ws, cat, test)):
            if not abstractions:
                rows.append([s.id, 0.0])
                continue
            lab = segment_mesh(s.mesh, abstractions, ws.cfg.vote_k, ws.cfg.face_margin)
            write_face_labels(lab, d / f"{s.id}.csv")
            rows.append([s.id, f"{segmentation_accuracy(s, lab):.6f}"])
        with open(d / "accuracy.csv", "w", newline="") as fh:
            csv.writer(fh).writerows(rows)


def match_stage(ws: Workspace):
    for cat in ws.cfg.categories:
        test = ws.shapes(cat, "test")
        abstractions = _abstractions(ws, cat, test)
        d = ws.root / "matches" / ws.variant / cat
        d.mkdir(parents=True, exist_ok=True)
        # each test shape against the next one
        for i in range(len(test) - 1):
            m = match_shapes(abstractions[i], abstractions[i + 1])
            write_matches(m, d / f"{test[i].id}__{test[i + 1].id}.csv")


def report_metrics(root) -> tuple:
    """``(csv_text, human_text)`` tables over every eval artifact under ``root``."""
    rows = []
    for path in sorted((Path(root) / "eval").glob("*.json")):
        rows.append(json.loads(path.read_text()))
    labels = sorted({lab for r in rows for lab in r["per_label"]})
    header = ["category", "variant"] + [f"iou_{lab}" for lab in labels] + ["mean_iou", "n_shapes", "n_parts"]
    table = [header]
    for r in rows:
        table.append([r["category"], r["variant"]]
                     + [f"{r['per_label'][lab]:.2f}" if lab in r["per_label"] else "" for lab in labels]
                     + [f"{r['mean']:.2f}", str(r["n_shapes"]), str(sum(r["counts"].values()))])
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(table)
    widths = [max(len(row[i]) for row in table) for i in range(len(header))]
    human = "\n".join("  ".join(cell.rjust(w) for cell, w in zip(row, widths)) for row in table) + "\n"
    return buf.getvalue(), human


def report(ws: Workspace):
    text, human = report_metrics(ws.root)
    (ws.root / "report.csv").write_text(text)
    (ws.root / "report.txt").write_text(human)
    print(human, end="")


STAGE_FUNCS = {
    "gen-data": gen_data,
    "learn-template": learn_template,
    "gen-candidates": gen_candidates,
    "train": train_stage,
    "infer": infer,
    "fuse": fuse_stage,
    "eval": eval_stage,
    "segment": segment_stage,
    "match": match_stage,
    "report": report,
}


def stage_range(selection: str) -> list:
    """``"all"``, one stage name, or ``"first:last"`` (either end may be empty)."""
    if selection in (None, "", "all"):
        return list(STAGES)
    first, sep, last = selection.partition(":")
    if not sep:
        first = last = selection
    for name in (first, last):
        if name and name not in STAGES:
            raise ValueError(f"unknown stage {name!r}; choose from {', '.join(STAGES)}")
    a = STAGES.index(first) if first else 0
    b = STAGES.index(last) if last else len(STAGES) - 1
    if a > b:
        raise ValueError(f"stage range {selection!r} runs backwards")
    return list(STAGES[a : b + 1])


def run_pipeline(cfg: PipelineConfig, out, stages="all") -> list:
    """Run the selected stages in order; returns the stage names run."""
    cfg.validate()
    ws = Workspace(out, cfg)
    ws.root.mkdir(parents=True, exist_ok=True)
    cfg.save(ws.root / "config.txt")
    names = stage_range(stages) if isinstance(stages, str) or stages is None else list(stages)
    for name in names:
        log.info("stage %s", name)
        STAGE_FUNCS[name](ws)
    return names
