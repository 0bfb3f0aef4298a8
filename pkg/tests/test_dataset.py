import json
import struct

import numpy as np
import pytest

from dbilstm import dataset as D
from dbilstm.errors import ContractError, DataError, LoadError, ManifestError, ShapeError


def _write_manifest(tmp_path, subjects=("b", "a"), gestures=3, reps=D.ALL_REPS, T=16, C=4, extra=()):
    files = []
    rng = np.random.default_rng(0)
    for s in subjects:
        for g in range(gestures):
            for r in reps:
                rel = f"{s}/g{g}_r{r}.emgr"
                D.write_repetition(tmp_path / rel, rng.normal(size=(T, C)).astype(np.float32), 2048.0)
                files.append({"subject": s, "gesture": g, "rep": r, "path": rel})
    files.extend(extra)
    doc = {"subjects": list(subjects), "gestures": gestures, "sample_rate_hz": 2048.0, "files": files}
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps(doc))
    return path


def test_manifest_counts_and_order(tmp_path):
    m = D.load_manifest(_write_manifest(tmp_path))
    assert len(m.files) == 30
    assert m.subjects == ["a", "b"]


def test_manifest_duplicate(tmp_path):
    dup = {"subject": "a", "gesture": 0, "rep": 1, "path": "a/g0_r1.emgr"}
    with pytest.raises(ManifestError, match="duplicate"):
        D.load_manifest(_write_manifest(tmp_path, extra=[dup]))


def test_manifest_empty_subjects(tmp_path):
    p = tmp_path / "m.json"
    p.write_text(json.dumps({"subjects": [], "gestures": 1, "files": []}))
    with pytest.raises(ManifestError):
        D.load_manifest(p)


@pytest.mark.parametrize(
    "bad",
    [
        {"subject": "zz", "gesture": 0, "rep": 1, "path": "x"},
        {"subject": "a", "gesture": 9, "rep": 1, "path": "x"},
        {"subject": "a", "gesture": 0, "rep": 6, "path": "x"},
        {"subject": "a", "gesture": 0},
    ],
)
def test_manifest_malformed_entries(tmp_path, bad):
    with pytest.raises(ManifestError):
        D.load_manifest(_write_manifest(tmp_path, reps=(1,), extra=[bad]))


def test_manifest_missing_file_and_json(tmp_path):
    path = _write_manifest(tmp_path, reps=(1,))
    (tmp_path / "a" / "g0_r1.emgr").unlink()
    with pytest.raises(ManifestError, match="missing file"):
        D.load_manifest(path)
    with pytest.raises(ManifestError):
        D.load_manifest(tmp_path / "nope.json")
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(ManifestError):
        D.load_manifest(tmp_path / "bad.json")


def test_manifest_save_roundtrip(tmp_path):
    m = D.load_manifest(_write_manifest(tmp_path))
    D.save_manifest(m, tmp_path / "copy.json")
    again = D.load_manifest(tmp_path / "copy.json")
    assert again.subjects == m.subjects and again.files == m.files


def test_repetition_roundtrip_bit_identical(tmp_path):
    sig = np.random.default_rng(1).normal(size=(50, 128)).astype(np.float32).astype(np.float64)
    D.write_repetition(tmp_path / "r.emgr", sig, 2048.0)
    got, fs = D.read_repetition_file(tmp_path / "r.emgr")
    assert fs == 2048.0
    assert got.tobytes() == sig.tobytes()
    D.write_repetition(tmp_path / "r2.emgr", got, fs)
    assert (tmp_path / "r.emgr").read_bytes() == (tmp_path / "r2.emgr").read_bytes()


def test_repetition_header_layout(tmp_path):
    D.write_repetition(tmp_path / "r.emgr", np.zeros((3, 2)), 1000.0)
    raw = (tmp_path / "r.emgr").read_bytes()
    assert raw[:4] == b"EMGR"
    assert struct.unpack("<IIId", raw[4:24]) == (1, 2, 3, 1000.0)
    assert len(raw) == 24 + 3 * 2 * 4


def test_repetition_load_errors(tmp_path):
    D.write_repetition(tmp_path / "r.emgr", np.ones((4, 2)), 2048.0)
    raw = (tmp_path / "r.emgr").read_bytes()
    (tmp_path / "magic.emgr").write_bytes(b"XXXX" + raw[4:])
    (tmp_path / "short.emgr").write_bytes(raw[:-3])
    nan = bytearray(raw)
    nan[24:28] = np.array([np.nan], dtype="<f4").tobytes()
    (tmp_path / "nan.emgr").write_bytes(bytes(nan))
    for name in ("magic", "short", "nan"):
        with pytest.raises(LoadError):
            D.read_repetition_file(tmp_path / f"{name}.emgr")


def test_flatten_grids_placement():
    T = 5
    zeros = np.zeros((T, 8, 8))
    assert np.all(D.flatten_grids(zeros, zeros) == 0) and D.flatten_grids(zeros, zeros).shape == (T, 128)
    v = zeros.copy()
    v[:, 0, 0] = 1
    out = D.flatten_grids(v, zeros)
    assert np.flatnonzero(out.any(axis=0)).tolist() == [0]
    d = zeros.copy()
    d[:, 7, 7] = 1
    out = D.flatten_grids(zeros, d)
    assert np.flatnonzero(out.any(axis=0)).tolist() == [64 + 7 * 8 + 7]
    v2 = zeros.copy()
    v2[:, 2, 5] = 1
    assert np.flatnonzero(D.flatten_grids(v2, zeros).any(axis=0)).tolist() == [2 * 8 + 5]


def test_flatten_grids_length_mismatch():
    with pytest.raises(ShapeError):
        D.flatten_grids(np.zeros((4, 8, 8)), np.zeros((5, 8, 8)))


def test_split_full_fraction(tmp_path):
    m = D.load_manifest(_write_manifest(tmp_path))
    train, test = D.make_split(m, D.SplitPlan(100), seed=3)
    assert {r.rep_index for r in train} == {1, 3, 5}
    assert {r.rep_index for r in test} == {2, 4}
    assert all(r.split == "train" for r in train) and all(r.split == "test" for r in test)


@pytest.mark.parametrize("fraction,k", [(33, 1), (67, 2)])
def test_split_partial_fraction_is_seeded(fraction, k):
    picks = set()
    for seed in range(30):
        a = D.SplitPlan(fraction).resolve(seed).train_reps
        assert a == D.SplitPlan(fraction).resolve(seed).train_reps
        assert len(a) == k and set(a) <= {1, 3, 5}
        picks.add(a)
    assert len(picks) == 3


def test_split_disjoint_per_subject_gesture(tmp_path):
    m = D.load_manifest(_write_manifest(tmp_path))
    for fraction in (33, 67, 100):
        train, test = D.make_split(m, D.SplitPlan(fraction), seed=fraction)
        tr = {(r.subject_id, r.gesture_id, r.rep_index) for r in train}
        te = {(r.subject_id, r.gesture_id, r.rep_index) for r in test}
        assert not tr & te


def test_split_plan_validation():
    with pytest.raises(ContractError):
        D.SplitPlan(50)
    with pytest.raises(ContractError):
        D.SplitPlan(33, train_reps=(1, 3))
    with pytest.raises(ContractError):
        D.SplitPlan(33, train_reps=(2,))


def test_split_missing_repetition(tmp_path):
    m = D.load_manifest(_write_manifest(tmp_path, reps=(1, 2, 3, 4)))
    with pytest.raises(DataError):
        D.make_split(m, D.SplitPlan(100), 0)
