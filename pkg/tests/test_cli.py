import hashlib
from pathlib import Path

import numpy as np
import pytest

from fazekas_mil.cli import run
from fazekas_mil.imaging import read_image

TINY = ["--set", "side=16", "--set", "channels=2,3", "--set", "features=4", "--set", "attention_hidden=3",
        "--set", "classifier_hidden=5", "--set", "epochs=1", "--set", "pretrain_steps=2"]


def tree_digest(root: Path) -> dict[str, str]:
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def cohort(tmp_path_factory):
    out = tmp_path_factory.mktemp("cohort")
    assert run(["synth", "--subjects", "24", "--side", "16", "--seed", "3", "--out", str(out)]) == 0
    return out


def test_synth_is_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(["synth", "--subjects", "16", "--seed", "1", "--out", str(a)]) == 0
    assert run(["synth", "--subjects", "16", "--seed", "1", "--out", str(b)]) == 0
    da, db = tree_digest(a), tree_digest(b)
    assert da == db and len(da) == 16 * 7 + 3  # slices, manifest, hidden grades, config echo


def test_unknown_flag_prints_usage(capsys):
    assert run(["synth", "--subjects", "4", "--out", "x", "--bogus"]) == 2
    err = capsys.readouterr().err
    assert "usage" in err and "error:" in err


def test_missing_command_is_a_usage_error(capsys):
    assert run([]) == 2


def test_missing_file_is_an_io_error(tmp_path, capsys):
    code = run(["eval", "--model", str(tmp_path / "none.fzkm"), "--manifest", str(tmp_path / "m.csv")])
    assert code == 3
    assert capsys.readouterr().err.startswith("error: ")


def test_bad_config_is_a_config_error(cohort, tmp_path, capsys):
    assert run(["pretrain", "--manifest", str(cohort / "manifest.csv"), "--out", str(tmp_path),
                "--set", "no_such_key=1"]) == 4
    cfg = tmp_path / "c.txt"
    cfg.write_text("lr=-1\n")
    assert run(["pretrain", "--manifest", str(cohort / "manifest.csv"), "--out", str(tmp_path),
                "--config", str(cfg)]) == 4


def test_preprocess_writes_images_and_steps(cohort, tmp_path):
    out = tmp_path / "pre"
    assert run(["preprocess", "--manifest", str(cohort / "manifest.csv"), "--out", str(out),
                "--dump-steps", str(tmp_path / "steps")]) == 0
    assert (out / "manifest.csv").is_file()
    assert len(list((tmp_path / "steps").glob("*_step3.png"))) == 24 * 7


def test_transform_demo(cohort, tmp_path):
    image = next((cohort / "images").glob("*.png"))
    assert run(["transform-demo", "--image", str(image), "--out", str(tmp_path), "--seed", "2"]) == 0
    names = {p.stem for p in tmp_path.glob("*.png")}
    assert {"nonlinear", "shuffle", "inpaint", "outpaint", "composed_input", "composed_target"} <= names
    assert np.array_equal(read_image(tmp_path / "composed_target.png"), read_image(image))


def test_train_eval_attend_roundtrip(cohort, tmp_path):
    out = tmp_path / "run"
    args = ["train", "--manifest", str(cohort / "manifest.csv"), "--out", str(out), "--folds", "2",
            "--save-model", "--seed", "4"] + TINY
    assert run(args) == 0
    for name in ("config.txt", "split.txt", "predictions.csv", "audit.txt", "report.txt", "model.fzkm"):
        assert (out / name).is_file(), name
    assert "LEAK" not in (out / "audit.txt").read_text()
    assert "seed=4" in (out / "config.txt").read_text()
    report = dict(line.split("=", 1) for line in (out / "report.txt").read_text().splitlines())
    assert 0.0 <= float(report["macro_f1"]) <= 1.0

    assert run(["eval", "--predictions", str(out / "predictions.csv"), "--report", str(tmp_path / "r.txt")]) == 0
    assert "macro_f1=" in (tmp_path / "r.txt").read_text()
    assert run(["eval", "--model", str(out / "model.fzkm"), "--manifest", str(cohort / "manifest.csv"),
                "--split", str(out / "split.txt")] + TINY) == 0
    assert run(["attend", "--model", str(out / "model.fzkm"), "--manifest", str(cohort / "manifest.csv"),
                "--out", str(tmp_path / "attn.tsv")] + TINY) == 0
    rows = (tmp_path / "attn.tsv").read_text().splitlines()
    assert len(rows) == 1 + 24 * 14


def test_train_is_reproducible(cohort, tmp_path):
    base = ["train", "--manifest", str(cohort / "manifest.csv"), "--folds", "2", "--no-ssl"] + TINY
    assert run(base + ["--out", str(tmp_path / "a")]) == 0
    assert run(base + ["--out", str(tmp_path / "b")]) == 0
    for name in ("predictions.csv", "report.txt", "split.txt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_pretrain_command(cohort, tmp_path):
    assert run(["pretrain", "--manifest", str(cohort / "manifest.csv"), "--out", str(tmp_path),
                "--steps", "3"] + TINY) == 0
    assert len((tmp_path / "losses.txt").read_text().split()) == 3
    assert (tmp_path / "pretrained.fzkm").read_bytes()[:4] == b"FZKM"


def test_gradcheck_command(capsys):
    assert run(["gradcheck", "--seeds", "2"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert len(out) == 19 and all(line.startswith("PASS") for line in out)
