from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lusgate.dataset import (
    MANIFEST_HEADER,
    Frame,
    FrameLabel,
    Manifest,
    ManifestError,
    Record,
    frames_for,
    load_manifest,
    patient_kfold,
    stack,
    write_manifest,
)
from lusgate.pnm import write_pgm


def _write(tmp_path, rows):
    (tmp_path / "frames").mkdir(exist_ok=True)
    records = []
    for i, (pid, site, quality, diagnosis) in enumerate(rows):
        rel = f"frames/f{i}.pgm"
        write_pgm(tmp_path / rel, np.full((4, 4), i / 10))
        records.append(Record(f"f{i}", rel, pid, site, quality, diagnosis))
    return write_manifest(Manifest(tuple(records), tmp_path), tmp_path / "manifest.tsv")


ROWS = [("p1", "A", "sufficient", "positive"), ("p1", "A", "insufficient", "positive"),
        ("p2", "A", "sufficient", "control"), ("p3", "B", "sufficient", "unknown")]


def test_manifest_round_trip(tmp_path):
    path = _write(tmp_path, ROWS)
    m = load_manifest(path)
    assert m.patients == ["p1", "p2", "p3"]
    assert [r.timestamp_index for r in m.records] == [0, 1, 0, 0]
    assert m.text() == path.read_text()
    frame, label = m.load(m.by_id("f2"))
    assert frame.patient_id == "p2" and label == FrameLabel("sufficient", "control")
    np.testing.assert_allclose(frame.pixels, np.rint(0.2 * 255) / 255)
    summary = m.site_summaries()
    assert summary["A"] == {"frames": 3, "insufficient": 1, "positive": 2, "control": 1, "patients": 2}
    with pytest.raises(KeyError):
        m.by_id("nope")


@pytest.mark.parametrize("edit, match", [
    (lambda t: t.replace(MANIFEST_HEADER, "lusgate-manifest v9"), "schema"),
    (lambda t: t.replace("\tsufficient\tcontrol", "\tblurry\tcontrol"), "quality"),
    (lambda t: t.replace("\tcontrol", "\tmaybe"), "diagnosis"),
    (lambda t: t.replace("\tB\t", "\tC\t"), "site"),
    (lambda t: t.replace("f1\t", "f0\t"), "duplicate"),
    (lambda t: t.replace("p2\tA", "p3\tA"), "two sites"),
    (lambda t: t.replace("\tp3\tB", "p3\tB"), "fields"),
    (lambda t: t.replace("frames/f3.pgm", "frames/missing.pgm"), "missing"),
    (lambda t: MANIFEST_HEADER + "\n", "empty"),
])
def test_manifest_errors(tmp_path, edit, match):
    path = _write(tmp_path, ROWS)
    path.write_text(edit(path.read_text()))
    with pytest.raises(ManifestError, match=match):
        load_manifest(path)


def test_missing_manifest(tmp_path):
    with pytest.raises(ManifestError, match="not found"):
        load_manifest(tmp_path / "none.tsv")


def test_frames_for_filters(tmp_path):
    m = load_manifest(_write(tmp_path, ROWS))
    assert [f.frame_id for f, _ in frames_for(m, ["p1"])] == ["f0", "f1"]
    assert [f.frame_id for f, _ in frames_for(m, ["p1", "p2"], quality="sufficient")] == ["f0", "f2"]
    assert [f.frame_id for f, _ in frames_for(m, m.patients, diagnosis="control")] == ["f2"]
    assert [f.frame_id for f, _ in frames_for(m, m.patients, lambda lab: not lab.sufficient)] == ["f1"]
    assert stack(frames_for(m, ["p1"])).shape == (2, 4, 4)
    with pytest.raises(KeyError, match="p9"):
        frames_for(m, ["p9"])


def test_frame_validation():
    with pytest.raises(ValueError):
        Frame(np.zeros(4), "f", "p")
    with pytest.raises(ValueError, match="outside"):
        Frame(np.full((2, 2), 1.5), "f", "p")
    f = Frame(np.zeros((2, 2)), "f", "p")
    with pytest.raises(ValueError):
        f.pixels[0, 0] = 1
    with pytest.raises(ValueError):
        FrameLabel("good")


@settings(max_examples=80, deadline=None)
@given(n_pos=st.integers(0, 15), n_ctl=st.integers(0, 15), k=st.integers(2, 6), seed=st.integers(0, 2**32))
def test_kfold_partitions_and_stratifies(n_pos, n_ctl, k, seed):
    patients = [(f"P{i}", "positive") for i in range(n_pos)] + [(f"C{i}", "control") for i in range(n_ctl)]
    if k > len(patients):
        with pytest.raises(ValueError):
            patient_kfold(patients, k, seed)
        return
    split = patient_kfold(patients, k, seed)
    assert len(split.folds) == k
    # a partition: every patient in exactly one fold
    seen = Counter(p for fold in split.folds for p in fold)
    assert set(seen) == {p for p, _ in patients} and set(seen.values()) == {1}
    sizes = [len(f) for f in split.folds]
    assert max(sizes) - min(sizes) <= 1
    for diag in ("positive", "control"):
        per = [sum(1 for p in f if dict(patients)[p] == diag) for f in split.folds]
        assert max(per) - min(per) <= 1
    for i in range(k):
        assert not split.train(i) & split.test(i)
        assert split.train(i) | split.test(i) == split.patients
    assert split == patient_kfold(patients, k, seed)


def test_kfold_errors():
    with pytest.raises(ValueError, match="duplicate"):
        patient_kfold([("a", "positive"), ("a", "control")], 2, 0)
    with pytest.raises(ValueError, match="at least 2"):
        patient_kfold([("a", "positive"), ("b", "control")], 1, 0)
