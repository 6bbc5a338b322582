import json

import numpy as np
import pytest

from semabs.cli import main
from semabs.pipeline import PipelineConfig, run_experiment
from semabs.stages import (
    STAGES,
    MissingArtifactError,
    read_abstractions,
    report_metrics,
    run_pipeline,
    stage_range,
    write_abstractions,
)
from semabs.fusion import Abstraction
from semabs.geometry import OrientedBox

SMALL = dict(categories=("toy-chair",), shapes_per_category=20, grid_n=30, steps=60, shapes_per_batch=4,
             batch_size=32, label_cap=8, iou_samples=16)


def small_config(**kw):
    return PipelineConfig(**dict(SMALL, **kw)).validate()


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    run_pipeline(small_config(), out)
    return out


# --- configuration ----------------------------------------------------------------


def test_config_text_round_trip(tmp_path):
    cfg = small_config(fusion="nms", learning_rate=0.125, train_counts=(2, 4))
    cfg.save(tmp_path / "c.txt")
    assert PipelineConfig.load(tmp_path / "c.txt") == cfg
    text = "# comment\nseed = 7  # trailing\n\ncategories = toy-vehicle\n"
    got = PipelineConfig.from_text(text)
    assert got.seed == 7 and got.categories == ("toy-vehicle",)


def test_config_rejects_bad_values():
    with pytest.raises(ValueError):
        PipelineConfig(fusion="mean").validate()
    with pytest.raises(ValueError):
        PipelineConfig().with_strings({"nope": "1"})
    with pytest.raises(ValueError):
        PipelineConfig.from_text("seed 3")
    with pytest.raises(ValueError):
        PipelineConfig(categories=("boat",)).validate()


def test_defaults_follow_the_method():
    cfg = PipelineConfig()
    assert (cfg.resolution, cfg.grid_n, cfg.n_primitives) == (64, 100, 20)
    assert (cfg.positive_iou, cfg.negative_iou, cfg.nms_iou, cfg.group_iou) == (0.5, 0.3, 0.5, 0.25)
    assert (cfg.batch_size, cfg.shapes_per_batch) == (64, 8)


def test_stage_range():
    assert stage_range("all") == list(STAGES)
    assert stage_range("train:fuse") == ["train", "infer", "fuse"]
    assert stage_range("eval:") == ["eval", "segment", "match", "report"]
    assert stage_range("infer") == ["infer"]
    with pytest.raises(ValueError):
        stage_range("fuse:train")
    with pytest.raises(ValueError):
        stage_range("bake")


# --- stages -----------------------------------------------------------------------


def test_full_run_writes_every_artifact(run_dir):
    for rel in ("config.txt", "data/toy-chair/split.json", "templates/toy-chair.json",
                "candidates/toy-chair-template-train.npz", "models/toy-chair-template.npz",
                "predictions/toy-chair-template.npz", "eval/toy-chair-template-sai-scored.json",
                "segments/template-sai-scored/toy-chair/accuracy.csv", "report.csv"):
        assert (run_dir / rel).exists(), rel
    assert list((run_dir / "matches/template-sai-scored/toy-chair").glob("*.csv"))
    split = json.loads((run_dir / "data/toy-chair/split.json").read_text())
    assert len(split["train"]) == 16 and len(split["test"]) == 4


def test_rerun_is_identical(run_dir, tmp_path):
    run_pipeline(small_config(), tmp_path)
    a = json.loads((run_dir / "eval/toy-chair-template-sai-scored.json").read_text())
    b = json.loads((tmp_path / "eval/toy-chair-template-sai-scored.json").read_text())
    assert a == b


def test_fusion_modes_give_comparable_rows(run_dir):
    run_pipeline(small_config(fusion="nms"), run_dir, "fuse:eval")
    csv_text, human = report_metrics(run_dir)
    rows = csv_text.strip().splitlines()
    assert rows[0].startswith("category,variant,iou_")
    variants = {r.split(",")[1] for r in rows[1:]}
    assert {"template-sai-scored", "template-nms-scored"} <= variants
    doc = json.loads((run_dir / "eval/toy-chair-template-nms-scored.json").read_text())
    assert f"{doc['mean']:.2f}" in csv_text and "template-nms-scored" in human


def test_report_without_eval_is_header_only(tmp_path):
    text, _ = report_metrics(tmp_path)
    assert text == "category,variant,mean_iou,n_shapes,n_parts\n"


def test_missing_artifact_names_the_stage(tmp_path):
    with pytest.raises(MissingArtifactError, match="run stage 'gen-data'"):
        run_pipeline(small_config(), tmp_path, "learn-template")
    run_pipeline(small_config(), tmp_path, "gen-data")
    with pytest.raises(MissingArtifactError, match="run stage 'learn-template'"):
        run_pipeline(small_config(), tmp_path, "gen-candidates")


def test_abstraction_file_round_trip(tmp_path):
    a = [Abstraction(OrientedBox((0.5, 0.5, 0.5), (0.1, 0.2, 0.3), (0.1, 0, 0)), "seat", 0.75, 3)]
    write_abstractions(tmp_path / "a.json", "s", "toy-chair", a)
    (b,) = read_abstractions(tmp_path / "a.json")
    assert b.box == a[0].box and (b.label, b.score, b.instance) == ("seat", 0.75, 3)


# --- command line -------------------------------------------------------------------


def test_cli_stage_and_errors(tmp_path, capsys):
    cfg = tmp_path / "small.txt"
    small_config().save(cfg)
    assert main(["gen-data", "--out", str(tmp_path / "o"), "--config", str(cfg)]) == 0
    assert (tmp_path / "o/data/toy-chair/split.json").exists()
    assert main(["train", "--out", str(tmp_path / "o"), "--config", str(cfg)]) == 2
    assert "run stage" in capsys.readouterr().err
    assert main(["gen-data", "--out", str(tmp_path / "p"), "--set", "seed"]) == 2
    assert main(["run", "--out", str(tmp_path / "q"), "--config", str(cfg), "--stage", "gen-data",
                 "--seed", "3", "--fusion", "nms"]) == 0
    saved = PipelineConfig.load(tmp_path / "q/config.txt")
    assert saved.seed == 3 and saved.fusion == "nms"


def test_small_experiment_runs_every_variant():
    cfg = small_config(train_counts=(4, 16), uniform_cap=60)
    res = run_experiment(cfg)
    assert {v for _, v in res.iou} == {"sai-scored", "sai-unit", "nms-scored", "uniform-sai-scored"}
    assert [n for n, _ in res.sweep["toy-chair"]] == [4, 16]
    assert 0 <= res.segmentation["toy-chair"] <= 1
    assert np.isfinite(res.mean("sai-scored"))
