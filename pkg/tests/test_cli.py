import hashlib

import numpy as np
import pytest

from maskreg.cli import run
from maskreg.dataset import ImageBuffer, load_image, save_image
from maskreg.model import load
from maskreg.synthetic import local_linear_task


def write_manifest(directory, pairs, name="m.csv"):
    rows = []
    for i, (x, y) in enumerate(pairs):
        save_image(x, directory / f"x{i:03d}.png")
        save_image(y, directory / f"y{i:03d}.png")
        rows.append(f"x{i:03d}.png,y{i:03d}.png")
    path = directory / name
    path.write_text("\n".join(rows) + "\n")
    return path


@pytest.fixture(scope="module")
def manifest(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    pairs, _ = local_linear_task(30, size=8, seed=4)
    return write_manifest(d, pairs)


def digest(directory):
    h = hashlib.sha256()
    for p in sorted(directory.iterdir()):
        if p.is_file():
            h.update(p.name.encode() + p.read_bytes())
    return h.hexdigest()


def test_train_synth_eval(manifest, tmp_path, capsys):
    before = digest(manifest.parent)
    model = tmp_path / "x.lrm"
    assert run(["train", "--solver", "mr", "--rf", "5", "--lambda", "1.2",
                "--manifest", str(manifest), "--out", str(model), "--time"]) == 0
    m = load(model)
    assert m.geometry.taps_per_side == 5
    out = capsys.readouterr().out
    assert "train_seconds" in out
    assert run(["synth", "--model", str(model), "--in", str(manifest.parent / "x000.png"),
                "--out", str(tmp_path / "s.png"), "--time"]) == 0
    assert load_image(tmp_path / "s.png").shape == (1, 8, 8)
    assert "synth_ms" in capsys.readouterr().out
    assert run(["eval", "--model", str(model), "--manifest", str(manifest)]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0].endswith("mse_x100")
    assert lines[1].startswith("test,3,gray,5,1,")
    assert float(lines[1].split(",")[-1]) < 1.0
    assert digest(manifest.parent) == before


def test_inspect_mask(capsys):
    assert run(["inspect", "mask", "--size", "5x5", "--rf", "3"]) == 0
    out = capsys.readouterr().out.splitlines()
    row7 = out[2 + 6]
    cells = row7.split("|")[1]
    ones = [i // 3 + 1 for i in range(len(cells)) if cells[i] == "1"]
    assert ones == [1, 2, 3, 6, 7, 8, 11, 12, 13]
    assert out[-1] == "parameters 194"


@pytest.mark.parametrize("solver,lam", [("mr", "0.5"), ("lasso", "0.05")])
def test_deterministic_across_jobs(manifest, tmp_path, monkeypatch, solver, lam):
    base = ["train", "--solver", solver, "--rf", "3", "--lambda", lam, "--seed", "3",
            "--manifest", str(manifest)]
    assert run(base + ["--jobs", "1", "--out", str(tmp_path / "a.lrm")]) == 0
    assert run(base + ["--jobs", "8", "--out", str(tmp_path / "b.lrm")]) == 0
    monkeypatch.setenv("LRF_JOBS", "3")
    assert run(base + ["--out", str(tmp_path / "c.lrm")]) == 0
    a = (tmp_path / "a.lrm").read_bytes()
    assert a == (tmp_path / "b.lrm").read_bytes() == (tmp_path / "c.lrm").read_bytes()


def test_cv(manifest, tmp_path, capsys):
    assert run(["cv", "--solver", "mr", "--grid", "default", "--manifest", str(manifest),
                "--csv", str(tmp_path / "cv.csv"), "--out", str(tmp_path / "best.lrm")]) == 0
    out = capsys.readouterr().out
    assert "best_lambda" in out and "test_mse_x100" in out
    rows = (tmp_path / "cv.csv").read_text().strip().splitlines()
    assert len(rows) == 11
    load(tmp_path / "best.lrm")


def test_cv_custom_omp_grid(manifest, capsys):
    assert run(["cv", "--solver", "omp", "--grid", "1,3,5", "--manifest", str(manifest)]) == 0
    assert "lambda,val_mse_x100" in capsys.readouterr().out


def test_refine_and_inspect_model(manifest, tmp_path, capsys):
    model = tmp_path / "m.lrm"
    run(["train", "--lambda", "0.5", "--manifest", str(manifest), "--out", str(model)])
    x = str(manifest.parent / "x001.png")
    assert run(["synth", "--model", str(model), "--in", x, "--out", str(tmp_path / "s.png")]) == 0
    assert run(["refine", "--model", str(model), "--in", x, "--synth", str(tmp_path / "s.png"),
                "--out", str(tmp_path / "r.png"), "--alpha-out", str(tmp_path / "a.png"),
                "--radius", "1", "--sigma", "0.7"]) == 0
    assert load_image(tmp_path / "r.png").shape == (1, 8, 8)
    assert load_image(tmp_path / "a.png").shape == (1, 8, 8)
    assert run(["inspect", "model", "--model", str(model), "--bias-out", str(tmp_path / "b.png")]) == 0
    out = capsys.readouterr().out
    assert "parameters 548" in out  # (2 + 6*3 + 2)**2 = 484 weights + 64 biases
    assert load_image(tmp_path / "b.png").data.max() == 1.0


def test_usage_errors(capsys):
    assert run(["train", "--bogus"]) == 2
    assert run(["train", "--lambda", "1"]) == 2
    assert run([]) == 2


def test_data_and_io_errors(tmp_path, manifest, capsys):
    assert run(["train", "--lambda", "1", "--manifest", str(tmp_path / "none.csv"),
                "--out", str(tmp_path / "o.lrm")]) == 5
    assert "ImageIOError" in capsys.readouterr().err
    assert run(["train", "--lambda", "1", "--strategy", "joint-color", "--manifest", str(manifest),
                "--out", str(tmp_path / "o.lrm")]) == 0
    assert run(["train", "--lambda", "1", "--strategy", "per-channel", "--manifest", str(manifest),
                "--out", str(tmp_path / "o.lrm")]) == 3
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error: DataError:")
    (tmp_path / "bad.lrm").write_bytes(b"nope")
    assert run(["synth", "--model", str(tmp_path / "bad.lrm"), "--in", str(manifest.parent / "x000.png"),
                "--out", str(tmp_path / "s.png")]) == 5
    assert run(["train", "--lambda", "-1", "--manifest", str(manifest),
                "--out", str(tmp_path / "o.lrm")]) == 2


def test_rgb_strategies(tmp_path):
    pairs, _ = local_linear_task(12, size=6, channels=3, seed=1)
    m = write_manifest(tmp_path, pairs)
    for strategy in ("per-channel", "replicate-gray", "joint-color"):
        out = tmp_path / f"{strategy}.lrm"
        assert run(["train", "--lambda", "0.5", "--strategy", strategy, "--split", "1,0,0",
                    "--manifest", str(m), "--out", str(out)]) == 0
        assert load(out).strategy.value == strategy
        assert run(["synth", "--model", str(out), "--in", str(tmp_path / "x000.png"),
                    "--out", str(tmp_path / "s.png")]) == 0
        assert load_image(tmp_path / "s.png").channels == 3
