import json

import numpy as np
import pytest

from wobseg.cli import main
from wobseg.predictor import BASE_CONFIG, HEAD_CONFIG, init_params, save_params
from wobseg.raster_store import open_slide

SYNTH = {"width_um": 160, "height_um": 160, "gland_count": [6, 8], "n_train": 2, "n_test": 1}


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "synth.json").write_text(json.dumps(SYNTH))
    assert main(["synth", str(root / "synth.json"), str(root / "data")]) == 0
    return root


def test_synth_rerun_identical(dataset, tmp_path):
    assert main(["synth", str(dataset / "synth.json"), str(tmp_path / "again")]) == 0
    for f in (dataset / "data" / "train_000.slab").iterdir():
        assert f.read_bytes() == (tmp_path / "again" / "train_000.slab" / f.name).read_bytes()


def test_synth_existing_needs_force(dataset):
    assert main(["synth", str(dataset / "synth.json"), str(dataset / "data")]) == 2


def test_synth_malformed_params(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{\n  "width_um": 100,\n  "rim_prob": ,\n}\n')
    assert main(["synth", str(bad), str(tmp_path / "out")]) == 1
    assert "line 3" in capsys.readouterr().err
    bad.write_text('{"rim_prob": 3}')
    assert main(["synth", str(bad), str(tmp_path / "out")]) == 1


def test_annotate_prints_iou(dataset, tmp_path, capsys):
    slide = dataset / "data" / "train_000.slab"
    assert main(["annotate", str(slide), "--out", str(tmp_path / "a.slab")]) == 0
    line = capsys.readouterr().out.strip()
    assert float(line.rsplit(":", 1)[1]) >= 0.90
    out = open_slide(tmp_path / "a.slab")
    assert "wob_generated" in out.masks
    assert "wob_generated" not in open_slide(slide).masks


def test_annotate_override_union(dataset, tmp_path):
    slide = dataset / "data" / "train_000.slab"
    assert main(["annotate", str(slide), "--out", str(tmp_path / "o.slab"), "--override", "wob"]) == 0
    s = open_slide(tmp_path / "o.slab")
    assert np.all(s.mask("wob_generated", 0) >= s.mask("wob", 0))


def test_annotate_missing_amacr(dataset, tmp_path):
    src = dataset / "data" / "train_000.slab"
    dst = tmp_path / "noamacr.slab"
    dst.mkdir()
    for f in src.iterdir():
        (dst / f.name).write_bytes(f.read_bytes())
    meta = json.loads((dst / "manifest.json").read_text())
    meta["channel_roles"] = {k: v for k, v in meta["channel_roles"].items() if v != "AMACR"}
    (dst / "manifest.json").write_text(json.dumps(meta))
    assert main(["annotate", str(dst), "--out", str(tmp_path / "x.slab")]) == 1


def write_run(root, **over):
    run = {"dataset": "data/dataset.json", "predictor": "base", "output": "p.wobp", "stats": "s.csv",
           "sampler": {"total_iterations": 6, "patch_size": 24, "batch_size": 2}}
    run.update(over)
    path = root / f"run_{len(list(root.glob('run_*')))}.json"
    path.write_text(json.dumps(run))
    return path


def test_train_predict_eval(dataset, tmp_path):
    (dataset / "aug.txt").write_text("rot90\nmirror\n")
    run = write_run(dataset, augment="aug.txt")
    assert main(["train", str(run)]) == 0
    stats = (dataset / "s.csv").read_text().splitlines()
    iters = [int(r.split(",")[-1]) for r in stats[1:]]
    assert iters == sorted(iters) and iters[-1] == 6

    slide = dataset / "data" / "test_002.slab"
    assert main(["predict", str(dataset / "p.wobp"), str(slide), "--out", str(tmp_path / "pred.slab")]) == 0
    pred = open_slide(tmp_path / "pred.slab")
    assert pred.masks["prob"][1] is not None and pred.masks["prob"][0] is None

    (tmp_path / "list.json").write_text(json.dumps(["pred.slab"]))
    assert main(["eval", str(tmp_path / "list.json"), "--out", str(tmp_path / "rep")]) == 0
    assert {f.name for f in (tmp_path / "rep").iterdir()} == {"pr_curve.csv", "summary.json", "per_slide.csv",
                                                            "boxplot.csv"}
    assert main(["eval", str(tmp_path / "list.json"), "--out", str(tmp_path / "rep2"), "--truth", "nope"]) == 1


def test_finetune_and_hash_mismatch(dataset, tmp_path):
    save_params(init_params(BASE_CONFIG, 1), tmp_path / "base.wobp")
    save_params(init_params(HEAD_CONFIG, 1), tmp_path / "head.wobp")
    run = write_run(dataset)
    assert main(["train", str(run), "--init-from", str(tmp_path / "base.wobp")]) == 0
    assert main(["train", str(run), "--init-from", str(tmp_path / "head.wobp")]) == 1


def test_compound_train_and_predict(dataset, tmp_path):
    save_params(init_params(BASE_CONFIG, 1), tmp_path / "base.wobp")
    run = write_run(dataset, predictor="head", output="h.wobp",
                    sampler={"total_iterations": 4, "patch_size": 16, "batch_size": 2})
    assert main(["train", str(run), "--compound", str(tmp_path / "base.wobp")]) == 0
    slide = dataset / "data" / "test_002.slab"
    assert main(["predict", str(dataset / "h.wobp"), str(slide), "--compound", str(tmp_path / "base.wobp"),
                 "--out", str(tmp_path / "c.slab")]) == 0
    assert open_slide(tmp_path / "c.slab").masks["prob"][2] is not None
    # swapped roles: a base file in the head slot
    assert main(["predict", str(tmp_path / "base.wobp"), str(slide), "--compound", str(dataset / "h.wobp"),
                 "--out", str(tmp_path / "d.slab")]) == 1


def test_pool_infeasible_exit_code(dataset):
    run = write_run(dataset, sampler={"total_iterations": 4, "patch_size": 16, "batch_size": 2, "n_min": 8,
                                      "capacity": 4})
    assert main(["train", str(run)]) == 3


def test_perfect_and_constant_predictions(tmp_path):
    from wobseg.raster_store import Level, Slide, save_slide

    labels = np.zeros((10, 10), np.uint8)
    labels[:3] = 1
    img = np.zeros((10, 10, 3), np.uint8)
    for name, plane in (("perfect", labels * 255), ("const", np.full((10, 10), 128, np.uint8))):
        s = Slide(name, [Level(1.0, img)], {0: "red", 1: "green", 2: "blue"},
                  {"wob": [labels], "prob": [plane.astype(np.uint8)]}, frozenset({"prob"}))
        save_slide(s, tmp_path / f"{name}.slab")
        (tmp_path / f"{name}.json").write_text(json.dumps([f"{name}.slab"]))
        assert main(["eval", str(tmp_path / f"{name}.json"), "--out", str(tmp_path / name)]) == 0
    assert json.loads((tmp_path / "perfect" / "summary.json").read_text())["auc"] == 1.0
    assert json.loads((tmp_path / "const" / "summary.json").read_text())["auc"] == pytest.approx(0.3, abs=1e-12)
