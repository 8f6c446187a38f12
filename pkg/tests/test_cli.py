import hashlib
import json

import pytest

from lusgate.cli import main
from lusgate.dataset import load_manifest

SMALL = ["--size", "32"]
FAST = ["--epochs", "1"]


def _digest(directory):
    return {p.relative_to(directory).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(directory.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """A tiny gen -> train -> eval run shared by the tests below."""
    root = tmp_path_factory.mktemp("cli")
    d = {k: root / k for k in ("site_b", "site_a", "qa", "diag", "eval", "loop", "report")}
    assert main(["gen", "--site", "B", "--positive", "4", "--control", "0", "--frames", "20",
                 "--insufficient-fraction", "0.25", "--seed", "1", "--out", str(d["site_b"]), *SMALL]) == 0
    assert main(["gen", "--site", "A", "--positive", "3", "--control", "3", "--frames", "20",
                 "--seed", "2", "--out", str(d["site_a"]), *SMALL]) == 0
    b, a = str(d["site_b"] / "manifest.tsv"), str(d["site_a"] / "manifest.tsv")
    assert main(["train", "qa-bin", "--manifest", b, "--out", str(d["qa"]), *FAST]) == 0
    assert main(["train", "qa-nd", "--manifest", b, "--out", str(d["qa"]), *FAST]) == 0
    assert main(["train", "diag", "--manifest", a, "--out", str(d["diag"]), "--folds", "3", *FAST]) == 0
    assert main(["eval", "--manifest", a, "--qa-dir", str(d["qa"]), "--diag-dir", str(d["diag"]),
                 "--out", str(d["eval"])]) == 0
    return d


def test_gen_default_site_b_is_reproducible(tmp_path, monkeypatch):
    args = ["gen", "--site", "B", "--positive", "22", "--control", "0", "--frames", "100", "--seed", "5",
            "--out", "data"]
    for run in ("a", "b"):
        (tmp_path / run).mkdir()
        monkeypatch.chdir(tmp_path / run)
        assert main(args) == 0
    m = load_manifest(tmp_path / "a" / "data" / "manifest.tsv")
    assert len(m.records) == 2200 and len(m.patients) == 22
    assert _digest(tmp_path / "a") == _digest(tmp_path / "b")
    echo = json.loads((tmp_path / "a" / "data" / "config_gen.json").read_text())
    assert echo["effective"]["phantom"]["seed"] == 5


def test_unwritable_out_fails(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["gen", "--frames", "1", "--out", str(blocker / "sub")]) != 0
    assert "lusgate: error" in capsys.readouterr().err


def test_missing_manifest_fails(tmp_path, capsys):
    assert main(["train", "qa-bin", "--manifest", str(tmp_path / "none.tsv"), "--out", str(tmp_path)]) != 0
    assert "manifest not found" in capsys.readouterr().err


def test_qa_nd_logs_the_exclusion(pipeline):
    m = load_manifest(pipeline["site_b"] / "manifest.tsv")
    n_bad = sum(r.quality == "insufficient" for r in m.records)
    assert n_bad == 20
    log = (pipeline["qa"] / "qa_nd_log.txt").read_text().splitlines()
    assert log[:2] == [f"frames {len(m.records) - n_bad}", f"excluded_insufficient {n_bad}"]
    echo = json.loads((pipeline["qa"] / "config_train_qa-nd.json").read_text())
    assert echo["effective"]["excluded_insufficient"] == n_bad


def test_train_outputs(pipeline):
    qa = {p.name for p in pipeline["qa"].iterdir()}
    assert {"qa_bin.lgm", "nd_reconstructor.lgm", "nd_discriminator.lgm", "nd_meta.json"} <= qa
    diag = {p.name for p in pipeline["diag"].iterdir()}
    assert {"dbin_fold0.lgm", "dbin_fold1.lgm", "dbin_fold2.lgm", "folds.tsv", "cv_scores.tsv"} <= diag


def test_eval_outputs(pipeline):
    rows = (pipeline["eval"] / "table.tsv").read_text().splitlines()
    assert [r.split()[0] for r in rows[1:]] == ["bin", "nd", "bin+nd"]
    text = (pipeline["eval"] / "table.txt").read_text()
    assert "QA^bin+nd" in text and "no QA" in text
    summary = json.loads((pipeline["eval"] / "summary.json").read_text())
    assert summary["threshold"] == 0.5 and len(summary["variants"]) == 3


def test_zero_threshold_gate_matches_ungated(pipeline, tmp_path):
    a = str(pipeline["site_a"] / "manifest.tsv")
    assert main(["eval", "--manifest", a, "--qa-dir", str(pipeline["qa"]), "--diag-dir", str(pipeline["diag"]),
                 "--qa-variant", "bin", "--qa-threshold", "0", "--out", str(tmp_path)]) == 0
    summary = json.loads((tmp_path / "summary.json").read_text())
    (row,) = summary["variants"]
    assert row["rejected"] == 0
    assert row["diag_accuracy"] == summary["baseline"]["diag_accuracy"]
    assert row["sens_at_spec"] == summary["baseline"]["sens_at_spec"]


def test_simulate_single_attempt(pipeline, tmp_path):
    assert main(["simulate", "--qa-dir", str(pipeline["qa"]), "--locations", "5", "--max-attempts", "1",
                 "--out", str(tmp_path), "--seed", "3", *SMALL]) == 0
    lines = (tmp_path / "loop_log.txt").read_text().splitlines()[1:]
    attempts = [line for line in lines if " outcome " not in line]
    assert len(attempts) == 5 and all(line.split()[1] == "0" for line in attempts)
    summary = dict(line.split(" ", 1) for line in (tmp_path / "loop_summary.txt").read_text().splitlines())
    assert summary["total_attempts"] == "5" and summary["max_attempts"] == "1"


def test_saliency_exports_two_files(pipeline, tmp_path, capsys):
    a = str(pipeline["site_a"] / "manifest.tsv")
    model = str(pipeline["diag"] / "dbin_fold0.lgm")
    frame = load_manifest(a).records[0].frame_id
    assert main(["saliency", "--manifest", a, "--model", model, "--frame", frame, "--out", str(tmp_path)]) == 0
    assert sorted(p.suffix for p in tmp_path.iterdir() if p.suffix in (".pgm", ".ppm")) == [".pgm", ".ppm"]
    assert main(["saliency", "--manifest", a, "--model", model, "--frame", "nope", "--out", str(tmp_path)]) != 0
    assert "unknown frame id" in capsys.readouterr().err


def test_corrupt_model_is_an_error(pipeline, tmp_path, capsys):
    bad = tmp_path / "bad.lgm"
    bad.write_bytes(b"garbage\n")
    a = str(pipeline["site_a"] / "manifest.tsv")
    frame = load_manifest(a).records[0].frame_id
    assert main(["saliency", "--manifest", a, "--model", str(bad), "--frame", frame, "--out", str(tmp_path)]) != 0
    assert "model" in capsys.readouterr().err


def test_report(pipeline, tmp_path):
    assert main(["simulate", "--qa-dir", str(pipeline["qa"]), "--locations", "3", "--out",
                 str(pipeline["loop"]), *SMALL]) == 0
    assert main(["report", "--eval-dir", str(pipeline["eval"]), "--loop-dir", str(pipeline["loop"]),
                 "--out", str(pipeline["report"])]) == 0
    names = {p.name for p in pipeline["report"].iterdir()}
    assert {"report.txt", "roc.png", "accuracy.png", "config_report.json"} <= names
    text = (pipeline["report"] / "report.txt").read_text()
    assert "closed-loop summary" in text and "QA^bin+nd" in text


def test_version_and_usage(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    with pytest.raises(SystemExit) as exc:
        main(["eval"])
    assert exc.value.code == 2
