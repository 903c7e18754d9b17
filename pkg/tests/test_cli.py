import json

import numpy as np
import pytest

from conceptseg.cli import build_parser, main
from conceptseg.dataio import (
    FeatureMap,
    read_feature_file,
    read_manifest,
    write_feature_file,
    write_manifest,
)

SYNTH_FLAGS = ["--images", "6", "--clusters", "2..3", "--dim", "8", "--grid", "6",
               "--pool", "4", "--noise", "0.02", "--seed", "1"]
TRAIN_FLAGS = ["--k", "2", "--steps", "1", "--iters", "4", "--batch", "2",
               "--lr", "1e-3", "--seed", "0"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main(["synth", "--out", str(data)] + SYNTH_FLAGS) == 0
    run = root / "run"
    assert main(["train", "--data", str(data / "manifest.txt"),
                 "--out", str(run)] + TRAIN_FLAGS) == 0
    return root, data, run


def test_synth_writes_files_manifest_snapshot(workspace):
    _, data, _ = workspace
    meta, files = read_manifest(data / "manifest.txt")
    assert len(files) == 6
    assert meta["kind"] == "synthetic"
    assert (data / files[0]).exists()
    snapshot = json.loads((data / "run_config.json").read_text())
    assert snapshot["command"] == "synth"
    assert "--images" in snapshot["argv"]


def test_synth_sixty_four_image_contract(tmp_path):
    out = tmp_path / "synth64"
    assert main(["synth", "--out", str(out), "--images", "64", "--clusters", "2..4",
                 "--dim", "8", "--grid", "6", "--pool", "4", "--seed", "3"]) == 0
    _, files = read_manifest(out / "manifest.txt")
    assert len(files) == 64


def test_train_defaults_match_protocol():
    parser = build_parser()
    args = parser.parse_args(["train", "--data", "x", "--out", "y"])
    assert args.k == 5 and args.steps == 6
    assert args.iters == 2500 and args.batch == 32
    assert args.lr == 1e-4 and args.wd == 0.01


def test_train_outputs(workspace):
    _, _, run = workspace
    assert (run / "checkpoint.ackp").exists()
    lines = (run / "loss.csv").read_text().splitlines()
    assert lines[0] == "iteration,loss" and len(lines) == 5
    summary = json.loads((run / "train_summary.json").read_text())
    assert "final_loss" in summary


def test_infer_eval_roundtrip(workspace):
    root, data, run = workspace
    pred = root / "pred"
    assert main(["infer", "--checkpoint", str(run / "checkpoint.ackp"),
                 "--data", str(data / "manifest.txt"), "--out", str(pred)]) == 0
    info = json.loads((pred / "inference.json").read_text())
    assert info["images_per_second"] > 0
    assert len(info["per_image"]) == 6

    ev = root / "eval"
    assert main(["eval", "--pred", str(pred), "--gt", str(data / "manifest.txt"),
                 "--out", str(ev), "--matched"]) == 0
    report = json.loads((ev / "eval.json").read_text())
    assert "miou" in report and 0.0 <= report["miou"] <= 1.0
    assert (ev / "per_class_iou.csv").exists()


def test_baseline_command(workspace):
    root, data, _ = workspace
    out = root / "baseline"
    assert main(["baseline", "--data", str(data / "manifest.txt"), "--out", str(out),
                 "--method", "kmeans", "--k", "2", "--seed", "5"]) == 0
    report = json.loads((out / "baseline.json").read_text())
    assert report["method"] == "kmeans"
    pngs = list(out.glob("*.png"))
    assert len(pngs) == 6


def test_classify_kmeans_command(workspace):
    root, data, run = workspace
    out = root / "ck"
    assert main(["classify-kmeans", "--checkpoint", str(run / "checkpoint.ackp"),
                 "--data", str(data / "manifest.txt"), "--out", str(out),
                 "--classes", "2", "--restarts", "2", "--seed", "0"]) == 0
    classes = json.loads((out / "classes.json").read_text())
    assert len(classes) == 6
    assert all(v >= 1 for img in classes.values() for v in img.values())  # bg=0 reserved


def test_classify_text_command(workspace, tmp_path):
    root, data, run = workspace
    class_file = tmp_path / "classes.acft"
    rng = np.random.default_rng(7)
    write_feature_file(FeatureMap(
        image_id="text-classes", grid_h=1, grid_w=1, dim=8,
        features=np.zeros((1, 8)),
        region_embeddings=rng.normal(size=(3, 8)),
        meta={"class_names": ["a", "b", "c"]},
    ), class_file)
    out = root / "ct"
    assert main(["classify-text", "--checkpoint", str(run / "checkpoint.ackp"),
                 "--data", str(data / "manifest.txt"), "--out", str(out),
                 "--class-embeddings", str(class_file)]) == 0
    assert (out / "classes.json").exists()


def test_classify_knn_command(workspace, tmp_path):
    root, data, run = workspace
    bank_file = tmp_path / "bank.acft"
    rng = np.random.default_rng(8)
    write_feature_file(FeatureMap(
        image_id="bank", grid_h=1, grid_w=1, dim=8,
        features=np.zeros((1, 8)),
        region_embeddings=rng.normal(size=(5, 8)),
        meta={"region_classes": [1, 2, 1, 3, 2]},
    ), bank_file)
    out = root / "cn"
    assert main(["classify-knn", "--checkpoint", str(run / "checkpoint.ackp"),
                 "--data", str(data / "manifest.txt"), "--out", str(out),
                 "--bank", str(bank_file), "--k", "3"]) == 0
    assert (out / "classes.json").exists()


def test_sweep_command(workspace):
    root, data, _ = workspace
    out = root / "sweep"
    assert main(["sweep-prototypes", "--data", str(data / "manifest.txt"),
                 "--out", str(out), "--k-values", "2,3", "--iters", "3",
                 "--batch", "2", "--steps", "1", "--lr", "1e-3"]) == 0
    rows = json.loads((out / "sweep.json").read_text())
    assert [r["k"] for r in rows] == [2, 3]
    assert (out / "sweep.csv").exists()
    assert (out / "checkpoint_k2.ackp").exists()


def test_unknown_flag_exits_nonzero():
    with pytest.raises(SystemExit) as exc:
        main(["train", "--bogus-flag", "1"])
    assert exc.value.code != 0


def test_snapshot_rerun_reproduces_bitwise(tmp_path):
    args = ["synth", "--images", "4", "--clusters", "2..2", "--dim", "8",
            "--grid", "6", "--pool", "2", "--seed", "9"]
    a, b = tmp_path / "a", tmp_path / "b"
    main(args + ["--out", str(a)])
    main(args + ["--out", str(b)])
    _, files = read_manifest(a / "manifest.txt")
    for rel in files:
        assert (a / rel).read_bytes() == (b / rel).read_bytes()
    assert (a / "manifest.txt").read_text() == (b / "manifest.txt").read_text()
