import json
import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from reschest.cli import main
from reschest.synthetic import write_image_tree

REDUCED = {"stage_widths": [8, 16, 32, 64], "blocks_per_stage": [1, 1, 1, 1], "head_hidden": 32}
CLASS_NAMES = ["COVID19", "Fibrosis", "Normal", "Pneumonia", "Tuberculosis"]


def write_config(path, **extra):
    cfg = {"max_epochs": 50, "batch_size": 4, "image_size": 48, "seed": 0, "model": REDUCED} | extra
    path.write_text(json.dumps(cfg))
    return path


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """One training run on the 10-image fixture tree, shared by the
    evaluate and predict tests."""
    base = tmp_path_factory.mktemp("cli")
    data = base / "data"
    write_image_tree(data, 2, size=48, seed=0, rgb_every=2)
    config = write_config(base / "run.json")
    out = base / "out"
    code = main(["train", "--config", str(config), "--data-root", str(data), "--out", str(out), "--max-epochs", "1"])
    return code, data, out


def run_cli(*args, env=None):
    return subprocess.run(
        [sys.executable, "-m", "reschest", *args],
        capture_output=True,
        text=True,
        env={**os.environ, **(env or {})},
        timeout=300,
    )


def test_train_smoke(trained):
    code, _, out = trained
    assert code == 0
    for name in ("checkpoint.rcnc", "train_log.jsonl", "run.log", "report.txt", "report.json"):
        assert (out / name).is_file(), name
    assert len((out / "train_log.jsonl").read_text().splitlines()) == 1


def test_flag_overrides_config_and_is_echoed(trained):
    _, _, out = trained
    line = next(ln for ln in (out / "run.log").read_text().splitlines() if "effective config:" in ln)
    effective = json.loads(line.split("effective config: ", 1)[1])
    assert effective["max_epochs"] == 1
    assert effective["model"]["stage_widths"] == REDUCED["stage_widths"]


def test_report_files_follow_table_layout(trained):
    _, _, out = trained
    rows = [ln.split() for ln in (out / "report.txt").read_text().splitlines() if ln.strip()]
    assert [r[0] for r in rows[1:6]] == CLASS_NAMES
    assert [r[0] for r in rows[6:9]] == ["accuracy", "macro", "weighted"]
    doc = json.loads((out / "report.json").read_text())
    assert [c["name"] for c in doc["classes"]] == CLASS_NAMES


def test_evaluate_matches_training_report(trained, tmp_path, capsys):
    _, data, out = trained
    json_out = tmp_path / "eval.json"
    code = main(
        ["evaluate", "--checkpoint", str(out / "checkpoint.rcnc"), "--data-root", str(data), "--split", "test",
         "--json-out", str(json_out)]
    )
    assert code == 0
    assert json.loads(json_out.read_text()) == json.loads((out / "report.json").read_text())
    printed = capsys.readouterr().out
    assert printed.startswith((out / "report.txt").read_text())
    assert "true/pred" in printed


def test_evaluate_all_images(trained, capsys):
    _, data, out = trained
    assert main(["evaluate", "--checkpoint", str(out / "checkpoint.rcnc"), "--data-root", str(data)]) == 0
    rows = [ln.split() for ln in capsys.readouterr().out.splitlines() if ln.strip()]
    assert next(r for r in rows if r[0] == "accuracy")[-1] == "10"


def test_evaluate_empty_class_footnote(trained, tmp_path, capsys):
    _, _, out = trained
    data = tmp_path / "data"
    write_image_tree(data, 2, size=48, seed=3)
    for p in (data / "Fibrosis").iterdir():
        p.unlink()
    assert main(["evaluate", "--checkpoint", str(out / "checkpoint.rcnc"), "--data-root", str(data)]) == 0
    text = capsys.readouterr().out
    fib = next(ln for ln in text.splitlines() if ln.strip().startswith("Fibrosis"))
    assert fib.split()[-1] == "0*"
    assert "division by zero" in text and "Fibrosis" in text


def test_predict(trained, capsys):
    _, data, out = trained
    images = sorted(str(p) for p in data.rglob("*.*"))[:3]
    args = ["predict", "--checkpoint", str(out / "checkpoint.rcnc"), *images, images[0], "--json"]
    assert main(args) == 0
    first = json.loads(capsys.readouterr().out)
    assert main(args) == 0
    second = json.loads(capsys.readouterr().out)
    assert first == second
    assert len(first) == 4 and first[0] == first[3]
    for r in first:
        assert abs(sum(r["scores"].values()) - 1.0) < 1e-5
        assert r["prediction"] == max(r["scores"], key=r["scores"].get)
        assert set(r["scores"]) == set(CLASS_NAMES)


def test_predict_sigmoid_and_text(trained, capsys):
    _, data, out = trained
    image = str(sorted(data.rglob("*.png"))[0])
    assert main(["predict", "--checkpoint", str(out / "checkpoint.rcnc"), image, "--sigmoid", "--json"]) == 0
    r = json.loads(capsys.readouterr().out)[0]
    assert r["score_type"] == "sigmoid"
    assert all(0 < v < 1 for v in r["scores"].values())
    assert main(["predict", "--checkpoint", str(out / "checkpoint.rcnc"), image]) == 0
    assert capsys.readouterr().out.startswith(image + ": ")


def test_missing_class_dir_exit_3(tmp_path):
    data = tmp_path / "data"
    write_image_tree(data, 2, size=48)
    for p in (data / "Fibrosis").iterdir():
        p.unlink()
    (data / "Fibrosis").rmdir()
    proc = run_cli("train", "--config", str(write_config(tmp_path / "c.json")), "--data-root", str(data),
                   "--out", str(tmp_path / "out"))
    assert proc.returncode == 3
    assert "Fibrosis" in proc.stderr


def test_config_errors_exit_2(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert run_cli("train", "--config", str(bad), "--data-root", str(tmp_path)).returncode == 2
    unknown = write_config(tmp_path / "u.json", learning_rate=0.1)
    proc = run_cli("train", "--config", str(unknown), "--data-root", str(tmp_path), "--out", str(tmp_path / "o"))
    assert proc.returncode == 2 and "learning_rate" in proc.stderr
    assert run_cli("train", "--config", str(write_config(tmp_path / "n.json"))).returncode == 2
    invalid = write_config(tmp_path / "i.json", max_epochs=0)
    proc = run_cli("train", "--config", str(invalid), "--data-root", str(tmp_path), "--out", str(tmp_path / "o"))
    assert proc.returncode == 2


def test_corrupt_checkpoint_exit_3(tmp_path):
    ck = tmp_path / "broken.rcnc"
    ck.write_bytes(b"RCNC\x01\x00")
    proc = run_cli("evaluate", "--checkpoint", str(ck), "--data-root", str(tmp_path))
    assert proc.returncode == 3 and "truncated" in proc.stderr
    assert run_cli("predict", "--checkpoint", str(tmp_path / "none.rcnc"), "x.png").returncode == 3


def test_divergence_exit_4(tmp_path):
    data = tmp_path / "data"
    write_image_tree(data, 4, size=48)
    config = write_config(tmp_path / "c.json", lr=1e12, momentum=0.0)
    proc = run_cli("train", "--config", str(config), "--data-root", str(data), "--out", str(tmp_path / "out"),
                   "--max-epochs", "3")
    assert proc.returncode == 4, proc.stderr
    assert "non-finite" in proc.stderr


def test_binary_train_is_reproducible(tmp_path):
    data = tmp_path / "data"
    write_image_tree(data, 2, size=48, seed=5)
    config = write_config(tmp_path / "c.json")
    outs = []
    for run in ("a", "b"):
        out = tmp_path / run
        proc = run_cli("train", "--config", str(config), "--data-root", str(data), "--out", str(out),
                       "--max-epochs", "2", "--seed", "7", env={"RESCHEST_THREADS": "2"})
        assert proc.returncode == 0, proc.stderr
        outs.append(out)
    for name in ("checkpoint.rcnc", "report.txt", "report.json"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes(), name
    strip = lambda p: [  # noqa: E731
        {k: v for k, v in json.loads(ln).items() if k != "wall_time"} for ln in (p / "train_log.jsonl").read_text().splitlines()
    ]
    assert strip(outs[0]) == strip(outs[1])
    assert np.isfinite([r["train_loss"] for r in strip(outs[0])]).all()
    assert Path(outs[0] / "run.log").read_text().count("effective config") == 1
