"""Canonical repetition files, dataset manifests and repetition-level splits.

Repetition file layout (little-endian)::

    b"EMGR" | u32 version=1 | u32 channels | u32 samples | f64 sample_rate_hz
    | samples*channels float32, time-major

The manifest is JSON::

    {"subjects": [...], "gestures": G, "sample_rate_hz": fs,
     "files": [{"subject": s, "gesture": g, "rep": r, "path": "..."}]}

Relative paths resolve against the manifest's directory.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ContractError, DataError, LoadError, ManifestError, ShapeError

MAGIC = b"EMGR"
VERSION = 1
_HEADER = struct.Struct("<4sIIId")
ALL_REPS = (1, 2, 3, 4, 5)
TRAIN_REPS = (1, 3, 5)
TEST_REPS = (2, 4)
FRACTION_TO_NREPS = {33: 1, 67: 2, 100: 3}


@dataclass
class Repetition:
    subject_id: str
    gesture_id: int
    rep_index: int
    signal: np.ndarray  # T x C, float64
    sample_rate_hz: float = 2048.0
    split: str | None = None  # provenance: "train" / "test" once assigned

    @property
    def n_samples(self) -> int:
        return self.signal.shape[0]

    @property
    def n_channels(self) -> int:
        return self.signal.shape[1]


@dataclass(frozen=True)
class FileRef:
    subject: str
    gesture: int
    rep: int
    path: Path


@dataclass
class DatasetManifest:
    subjects: list[str]
    gestures: int
    sample_rate_hz: float
    files: list[FileRef]
    root: Path = field(default_factory=Path)

    def lookup(self, subject: str, gesture: int, rep: int) -> FileRef:
        try:
            return self._index[(subject, gesture, rep)]
        except KeyError:
            raise DataError(f"no repetition file for subject={subject} gesture={gesture} rep={rep}") from None

    @property
    def _index(self) -> dict:
        idx = getattr(self, "_idx_cache", None)
        if idx is None or len(idx) != len(self.files):
            idx = {(f.subject, f.gesture, f.rep): f for f in self.files}
            object.__setattr__(self, "_idx_cache", idx)
        return idx

    def to_dict(self) -> dict:
        return {
            "subjects": list(self.subjects),
            "gestures": self.gestures,
            "sample_rate_hz": self.sample_rate_hz,
            "files": [
                {"subject": f.subject, "gesture": f.gesture, "rep": f.rep, "path": _rel(f.path, self.root)}
                for f in self.files
            ],
        }


def _rel(path: Path, root: Path) -> str:
    try:
        return str(Path(path).relative_to(root))
    except ValueError:
        return str(path)


# --------------------------------------------------------------------------
# repetition files


def write_repetition(path, signal: np.ndarray, sample_rate_hz: float) -> None:
    signal = np.asarray(signal)
    if signal.ndim != 2:
        raise ShapeError(f"signal must be T x C, got {signal.shape}")
    if not np.all(np.isfinite(signal)):
        raise ContractError("signal contains non-finite values")
    samples, channels = signal.shape
    payload = np.ascontiguousarray(signal, dtype="<f4")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, channels, samples, float(sample_rate_hz)))
        fh.write(payload.tobytes())


def read_repetition_file(path) -> tuple[np.ndarray, float]:
    """Read a canonical file; returns (T x C float64 signal, sample rate)."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise LoadError(f"{path}: {exc.strerror or exc}") from exc
    if len(raw) < _HEADER.size:
        raise LoadError(f"{path}: truncated header")
    magic, version, channels, samples, fs = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise LoadError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise LoadError(f"{path}: unsupported version {version}")
    need = samples * channels * 4
    body = raw[_HEADER.size :]
    if len(body) != need:
        raise LoadError(f"{path}: payload has {len(body)} bytes, expected {need}")
    signal = np.frombuffer(body, dtype="<f4").reshape(samples, channels).astype(np.float64)
    if not np.all(np.isfinite(signal)):
        raise LoadError(f"{path}: payload contains NaN or Inf")
    if not fs > 0:
        raise LoadError(f"{path}: non-positive sample rate {fs}")
    return signal, fs


def load_repetition(ref: FileRef) -> Repetition:
    signal, fs = read_repetition_file(ref.path)
    return Repetition(ref.subject, ref.gesture, ref.rep, signal, fs)


# --------------------------------------------------------------------------
# manifest


def load_manifest(path, check_files: bool = True) -> DatasetManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise ManifestError(f"manifest not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: invalid JSON ({exc})") from exc
    return parse_manifest(doc, root=path.parent, check_files=check_files)


def parse_manifest(doc: dict, root=".", check_files: bool = True) -> DatasetManifest:
    root = Path(root)
    if not isinstance(doc, dict):
        raise ManifestError("manifest must be a JSON object")
    unknown = set(doc) - {"subjects", "gestures", "sample_rate_hz", "files"}
    if unknown:
        raise ManifestError(f"unknown manifest keys: {sorted(unknown)}")
    subjects = doc.get("subjects")
    if not isinstance(subjects, list) or not subjects:
        raise ManifestError("manifest needs a non-empty 'subjects' list")
    subjects = [str(s) for s in subjects]
    if len(set(subjects)) != len(subjects):
        raise ManifestError("duplicate subject ids")
    gestures = doc.get("gestures")
    if not isinstance(gestures, int) or gestures < 1:
        raise ManifestError("'gestures' must be a positive integer")
    fs = doc.get("sample_rate_hz", 2048.0)
    if not isinstance(fs, (int, float)) or fs <= 0:
        raise ManifestError("'sample_rate_hz' must be positive")
    entries = doc.get("files")
    if not isinstance(entries, list):
        raise ManifestError("'files' must be a list")
    known = set(subjects)
    seen: set[tuple] = set()
    files = []
    for i, e in enumerate(entries):
        try:
            subject, gesture, rep, p = str(e["subject"]), e["gesture"], e["rep"], e["path"]
        except (KeyError, TypeError):
            raise ManifestError(f"files[{i}]: needs subject, gesture, rep, path") from None
        if subject not in known:
            raise ManifestError(f"files[{i}]: unknown subject {subject!r}")
        if not isinstance(gesture, int) or not 0 <= gesture < gestures:
            raise ManifestError(f"files[{i}]: gesture {gesture!r} outside [0, {gestures})")
        if rep not in ALL_REPS:
            raise ManifestError(f"files[{i}]: repetition {rep!r} outside 1..5")
        key = (subject, gesture, rep)
        if key in seen:
            raise ManifestError(f"files[{i}]: duplicate repetition {key}")
        seen.add(key)
        full = Path(p) if os.path.isabs(p) else root / p
        if check_files and not full.is_file():
            raise ManifestError(f"files[{i}]: missing file {full}")
        files.append(FileRef(subject, gesture, rep, full))
    return DatasetManifest(sorted(subjects), gestures, float(fs), files, root)


def save_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    manifest = replace(manifest, root=path.parent)
    path.write_text(json.dumps(manifest.to_dict(), indent=1))


# --------------------------------------------------------------------------


def flatten_grids(volar: np.ndarray, dorsal: np.ndarray) -> np.ndarray:
    """Two T x 8 x 8 electrode grids -> T x 128; volar is channels 0-63."""
    volar, dorsal = np.asarray(volar), np.asarray(dorsal)
    if volar.ndim != 3 or dorsal.ndim != 3:
        raise ShapeError("grids must be T x rows x cols")
    if volar.shape[0] != dorsal.shape[0]:
        raise ShapeError(f"grid lengths differ: {volar.shape[0]} vs {dorsal.shape[0]}")
    T = volar.shape[0]
    return np.concatenate([volar.reshape(T, -1), dorsal.reshape(T, -1)], axis=1).astype(np.float64)


@dataclass(frozen=True)
class SplitPlan:
    """Repetition assignment. ``train_reps=None`` means draw them from the seed."""

    retrain_fraction: int = 100
    train_reps: tuple[int, ...] | None = None
    test_reps: tuple[int, ...] = TEST_REPS

    def __post_init__(self):
        if self.retrain_fraction not in FRACTION_TO_NREPS:
            raise ContractError(f"retrain_fraction must be one of {sorted(FRACTION_TO_NREPS)}")
        if self.train_reps is not None:
            reps = tuple(sorted(self.train_reps))
            if not set(reps) <= set(TRAIN_REPS):
                raise ContractError(f"train reps {reps} not a subset of {TRAIN_REPS}")
            if len(reps) != FRACTION_TO_NREPS[self.retrain_fraction]:
                raise ContractError(f"{len(reps)} train reps inconsistent with {self.retrain_fraction}%")
            object.__setattr__(self, "train_reps", reps)
        if set(self.test_reps) & set(self.train_reps or ()):
            raise ContractError("train and test repetitions overlap")

    def resolve(self, seed: int) -> "SplitPlan":
        if self.train_reps is not None:
            return self
        k = FRACTION_TO_NREPS[self.retrain_fraction]
        rng = np.random.default_rng(seed)
        chosen = rng.choice(np.array(TRAIN_REPS), size=k, replace=False)
        return replace(self, train_reps=tuple(sorted(int(r) for r in chosen)))


def make_split(
    manifest: DatasetManifest,
    plan: SplitPlan,
    seed: int = 0,
    subjects=None,
    gestures=None,
) -> tuple[list[Repetition], list[Repetition]]:
    """Load train and test repetitions for ``subjects`` x ``gestures``.

    Every returned repetition carries its split tag.
    """
    plan = plan.resolve(seed)
    subjects = manifest.subjects if subjects is None else list(subjects)
    gestures = range(manifest.gestures) if gestures is None else list(gestures)
    train, test = [], []
    for s in subjects:
        for g in gestures:
            for r in plan.train_reps:
                rep = load_repetition(manifest.lookup(s, g, r))
                rep.split = "train"
                train.append(rep)
            for r in plan.test_reps:
                rep = load_repetition(manifest.lookup(s, g, r))
                rep.split = "test"
                test.append(rep)
    return train, test
