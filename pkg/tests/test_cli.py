import json
import subprocess
import sys

import numpy as np
import pytest

from autonet.cli import main
from autonet.volumes import load_volume


def _phantoms(out, count=4, seed=7, extra=()):
    args = ["phantom", "--count", str(count), "--dims", "24", "--seed", str(seed), "--distractors", "1",
            "--noise", "4", "--out", str(out), *extra]
    return main(args)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert _phantoms(out) == 0
    return out


@pytest.fixture(scope="module")
def cascade_dir(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("casc")
    code = main([
        "train", "--manifest", str(dataset / "manifest.json"), "--fold", "0", "--arch", "voxelwise",
        "--small", "--max-steps", "3", "--epsilon", "1e-9", "--epochs", "1", "--samples", "100",
        "--samples-total", "300", "--out", str(out),
    ])
    assert code == 0
    return out


def test_phantom_outputs(dataset):
    manifest = json.loads((dataset / "manifest.json").read_text())
    assert len(manifest["cases"]) == 4
    assert {c["fold"] for c in manifest["cases"]} == {0, 1}
    for c in manifest["cases"]:
        v, _ = load_volume(dataset / c["volume"])
        _, m = load_volume(dataset / c["mask"])
        assert v.dims == m.dims == (24, 24, 24)
    assert (dataset / "run_config.json").exists()


def test_phantom_deterministic(tmp_path):
    assert _phantoms(tmp_path / "a", 2) == 0
    assert _phantoms(tmp_path / "b", 2) == 0
    for name in ("phantom000.raw", "phantom001_mask.raw", "manifest.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_phantom_too_large(tmp_path, capsys):
    code = main(["phantom", "--dims", "16", "--axes", "20", "5", "5", "--out", str(tmp_path)])
    assert code == 2
    assert "exceeds dims" in capsys.readouterr().err


def test_config_replay(tmp_path):
    assert _phantoms(tmp_path / "a", 2) == 0
    cfg = tmp_path / "a" / "run_config.json"
    assert main(["phantom", "--config", str(cfg), "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "phantom001.raw").read_bytes() == (tmp_path / "b" / "phantom001.raw").read_bytes()


def test_sample(dataset, tmp_path):
    assert main(["sample", "--manifest", str(dataset / "manifest.json"), "--total", "400", "--out", str(tmp_path)]) == 0
    plan = json.loads((tmp_path / "phantom000_plan.json").read_text())
    assert plan["counts"] == {"border": 200, "brain": 100, "nonbrain": 100}


def test_train_layout(cascade_dir):
    hist = json.loads((cascade_dir / "history.json").read_text())
    assert 1 <= len(hist["H"]) <= 3
    assert (cascade_dir / "step-0" / "model.json").exists()
    assert json.loads((cascade_dir / "run_config.json").read_text())["arch"] == "voxelwise"


def test_train_unet_schedule_echoed(dataset, tmp_path):
    code = main([
        "train", "--manifest", str(dataset / "manifest.json"), "--fold", "1", "--arch", "unet", "--small",
        "--max-steps", "1", "--epochs", "15", "--lr", "0.001", "--lr-decay", "0.9", "--lr-decay-steps", "2000",
        "--out", str(tmp_path),
    ])
    assert code == 0
    meta = json.loads((tmp_path / "step-0" / "model.json").read_text())["metadata"]["schedule"]
    assert meta["stages"][0]["learning_rate"] == 0.001 and meta["stages"][0]["epochs"] == 15
    assert (meta["decay_rate"], meta["decay_steps"]) == (0.9, 2000)


def test_train_missing_labels(dataset, tmp_path, capsys):
    manifest = json.loads((dataset / "manifest.json").read_text())
    for c in manifest["cases"]:
        c["volume"] = str(dataset / c["volume"])
        c.pop("mask")
    (tmp_path / "m.json").write_text(json.dumps(manifest))
    code = main(["train", "--manifest", str(tmp_path / "m.json"), "--out", str(tmp_path / "o")])
    assert code == 2
    assert "missing labels" in capsys.readouterr().err
    assert not (tmp_path / "o" / "history.json").exists()


def test_predict_and_evaluate(dataset, cascade_dir, tmp_path):
    pred = tmp_path / "pred"
    code = main(["predict", "--cascade", str(cascade_dir), "--manifest", str(dataset / "manifest.json"),
                 "--fold", "1", "--steps", "2", "--out", str(pred)])
    assert code == 0
    assert json.loads((pred / "timing.json").read_text())["models_used"] == 3
    post, _ = load_volume(pred / "phantom001_posterior.nii.gz")
    assert post.data.min() >= 0 and post.data.max() <= 1
    ev = tmp_path / "ev"
    assert main(["evaluate", "--manifest", str(dataset / "manifest.json"), "--fold", "1",
                 "--predictions", str(pred), "--out", str(ev)]) == 0
    report = json.loads((ev / "report.json").read_text())
    assert len(report["cases"]) == 2
    assert set(report["summary"]["dice"]) == {"mean", "stdev", "n"}
    assert (ev / "log_error_map.nii.gz").exists()


def test_predict_too_many_steps(dataset, cascade_dir, tmp_path):
    code = main(["predict", "--cascade", str(cascade_dir), "--manifest", str(dataset / "manifest.json"),
                 "--steps", "5", "--out", str(tmp_path)])
    assert code == 2


def test_evaluate_perfect_predictions(dataset, tmp_path):
    import shutil

    manifest = json.loads((dataset / "manifest.json").read_text())
    from autonet.volumes import save_volume

    for c in manifest["cases"]:
        _, m = load_volume(dataset / c["mask"])
        save_volume(m, tmp_path / f"{c['id']}_mask.nii.gz")
    out = tmp_path / "ev"
    assert main(["evaluate", "--manifest", str(dataset / "manifest.json"), "--predictions", str(tmp_path),
                 "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert all(r["dice"] == 1.0 for r in report["cases"])
    shutil.rmtree(out)


def test_evaluate_dims_mismatch(dataset, tmp_path, capsys):
    from autonet.volumes import BinaryMask, save_volume

    manifest = json.loads((dataset / "manifest.json").read_text())
    for c in manifest["cases"]:
        _, m = load_volume(dataset / c["mask"])
        save_volume(m, tmp_path / f"{c['id']}_mask.nii.gz")
    save_volume(BinaryMask(np.zeros((5, 5, 5))), tmp_path / "phantom002_mask.nii.gz")
    code = main(["evaluate", "--manifest", str(dataset / "manifest.json"), "--predictions", str(tmp_path),
                 "--out", str(tmp_path / "ev")])
    assert code == 2
    assert "phantom002" in capsys.readouterr().err


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "autonet", "phantom", "--count", "1", "--dims", "20",
                        "--distractors", "0", "--out", str(tmp_path)], capture_output=True, text=True)
    assert r.returncode == 0, r.stderr
    r = subprocess.run([sys.executable, "-m", "autonet", "nonsense"], capture_output=True, text=True)
    assert r.returncode == 2
