"""Seeded multi-subject surrogate HD-sEMG data.

Each gesture owns a latent template: for every latent source, a sum of three
slow sinusoidal envelopes that modulates an independent white-noise carrier.
Subject ``u`` observes the sources through a mixing matrix
``A_u = base + subject_mixing_scale * perturbation_u`` (channels x latent),
plus additive Gaussian noise. Repetitions differ by fresh carriers and a
+/-10 % amplitude jitter.

``subject_mixing_scale`` and ``noise_sigma`` move the data between
transfer-friendly (shared base dominates) and transfer-hostile regimes.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .dataset import ALL_REPS, DatasetManifest, FileRef, save_manifest, write_repetition
from .errors import ContractError


@dataclass
class SyntheticSpec:
    n_subjects: int = 4
    n_gestures: int = 8
    reps_per_gesture: int = 5
    fs: float = 2048.0
    rep_seconds: float = 1.0
    subject_mixing_scale: float = 0.5
    noise_sigma: float = 0.5
    seed: int = 0
    channels: int = 128
    n_latent: int = 8
    envelope_hz: tuple[float, float] = (0.5, 4.0)

    def __post_init__(self):
        if self.n_subjects < 1 or self.n_gestures < 1 or self.n_latent < 1 or self.channels < 1:
            raise ContractError("subject, gesture, latent and channel counts must be positive")
        if not 1 <= self.reps_per_gesture <= len(ALL_REPS):
            raise ContractError("reps_per_gesture must lie in 1..5")
        if self.fs <= 0 or self.rep_seconds <= 0:
            raise ContractError("fs and rep_seconds must be positive")
        if self.noise_sigma < 0 or self.subject_mixing_scale < 0:
            raise ContractError("noise_sigma and subject_mixing_scale must be >= 0")
        self.envelope_hz = tuple(self.envelope_hz)

    @property
    def n_samples(self) -> int:
        return int(round(self.rep_seconds * self.fs))

    def subject_ids(self) -> list[str]:
        width = max(2, len(str(self.n_subjects)))
        return [f"s{u + 1:0{width}d}" for u in range(self.n_subjects)]

    @classmethod
    def from_json(cls, path) -> "SyntheticSpec":
        doc = json.loads(Path(path).read_text())
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ContractError(f"unknown synthetic spec keys {sorted(unknown)}")
        return cls(**doc)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["envelope_hz"] = list(self.envelope_hz)
        return d


class SyntheticGenerator:
    def __init__(self, spec: SyntheticSpec):
        self.spec = spec
        rng = np.random.default_rng([spec.seed, 0])
        C, K = spec.channels, spec.n_latent
        self.base = rng.normal(size=(C, K)) / np.sqrt(K)
        self.mixing = [
            self.base + spec.subject_mixing_scale * rng.normal(size=(C, K)) / np.sqrt(K)
            for _ in range(spec.n_subjects)
        ]
        lo, hi = spec.envelope_hz
        shape = (spec.n_gestures, K, 3)
        self.env_amp = rng.uniform(0.0, 1.0, size=shape)
        self.env_freq = rng.uniform(lo, hi, size=shape)
        self.env_phase = rng.uniform(0.0, 2 * np.pi, size=shape)

    def envelope(self, gesture: int) -> np.ndarray:
        """T x latent envelope of ``gesture``."""
        t = np.arange(self.spec.n_samples) / self.spec.fs
        a, f, ph = self.env_amp[gesture], self.env_freq[gesture], self.env_phase[gesture]
        waves = 0.5 * (1.0 + np.sin(2 * np.pi * f[None] * t[:, None, None] + ph[None]))
        return (a[None] * waves).sum(axis=2)

    def repetition(self, subject: int, gesture: int, rep: int) -> np.ndarray:
        spec = self.spec
        rng = np.random.default_rng([spec.seed, 1, subject, gesture, rep])
        jitter = rng.uniform(0.9, 1.1)
        carriers = rng.normal(size=(spec.n_samples, spec.n_latent))
        sources = jitter * self.envelope(gesture) * carriers
        signal = sources @ self.mixing[subject].T
        if spec.noise_sigma > 0:
            signal = signal + spec.noise_sigma * rng.normal(size=signal.shape)
        return signal

    def __iter__(self) -> Iterator[tuple[str, int, int, np.ndarray]]:
        ids = self.spec.subject_ids()
        for u, sid in enumerate(ids):
            for g in range(self.spec.n_gestures):
                for r in ALL_REPS[: self.spec.reps_per_gesture]:
                    yield sid, g, r, self.repetition(u, g, r)


def generate(spec: SyntheticSpec, out_dir) -> DatasetManifest:
    """Write every repetition in the canonical format plus ``manifest.json``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = []
    for sid, g, r, signal in SyntheticGenerator(spec):
        path = out_dir / sid / f"g{g:03d}_r{r}.emgr"
        write_repetition(path, signal, spec.fs)
        files.append(FileRef(sid, g, r, path))
    manifest = DatasetManifest(spec.subject_ids(), spec.n_gestures, spec.fs, files, out_dir)
    save_manifest(manifest, out_dir / "manifest.json")
    (out_dir / "synthetic_spec.json").write_text(json.dumps(spec.to_dict(), indent=1))
    return manifest
