"""Weights files (float32, for inference) and training checkpoints (float64, for resume).

Weights file, little-endian::

    b"DBLW" | u32 version | u32 n | n bytes JSON architecture config
    | u32 n_subjects | (u32 len, utf-8 subject id, i32 row) * n_subjects
    | u32 n_tensors | (u32 len, name, u32 rank, u32 extents * rank, f32 payload) * n_tensors

Normalization statistics travel as tensors named ``norm.mu`` / ``norm.sigma``.

Checkpoints (``b"DBCK"``) hold a JSON header (epoch, optimizer step, PRNG
states, config hash, report so far) followed by typed tensor records
(parameters, best-epoch parameters, Adam moments, split indices).
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .core_math import Tensor
from .errors import ContractError, LoadError
from .model import ArchitectureConfig, Model, ModelParameters
from .training import AdamConfig, AdamState, TrainPlan, TrainReport, TrainState

WEIGHTS_MAGIC = b"DBLW"
CHECKPOINT_MAGIC = b"DBCK"
VERSION = 1
_DTYPES = {0: "<f4", 1: "<f8", 2: "<i8"}
_CODES = {v: k for k, v in _DTYPES.items()}


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise LoadError(f"{self.path}: truncated file")
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def i32(self) -> int:
        return struct.unpack("<i", self.take(4))[0]

    def text(self) -> str:
        try:
            return self.take(self.u32()).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise LoadError(f"{self.path}: corrupt string") from exc

    def array(self, dtype: str, shape) -> np.ndarray:
        n = int(np.prod(shape)) if shape else 1
        itemsize = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(n * itemsize), dtype=dtype).reshape(shape)

    def done(self) -> None:
        if self.pos != len(self.raw):
            raise LoadError(f"{self.path}: {len(self.raw) - self.pos} trailing bytes")


def _text(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def _open(path, magic: bytes) -> _Reader:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise LoadError(f"{path}: {exc.strerror or exc}") from exc
    r = _Reader(raw, path)
    got = r.take(4)
    if got != magic:
        raise LoadError(f"{path}: bad magic {got!r}, expected {magic!r}")
    version = r.u32()
    if version != VERSION:
        raise LoadError(f"{path}: unsupported version {version}")
    return r


# --------------------------------------------------------------------------
# weights


def save_weights(model: Model, path) -> None:
    tensors = dict(model.params.arrays())
    if model.norm_mu is not None:
        tensors["norm.mu"] = model.norm_mu
        tensors["norm.sigma"] = model.norm_sigma
    out = [WEIGHTS_MAGIC, struct.pack("<I", VERSION), _text(json.dumps(model.cfg.to_dict()))]
    out.append(struct.pack("<I", len(model.subject_rows)))
    for sid, row in model.subject_rows.items():
        out.append(_text(sid) + struct.pack("<i", row))
    out.append(struct.pack("<I", len(tensors)))
    for name, a in tensors.items():
        a = np.asarray(a)
        out.append(_text(name) + struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape))
        out.append(np.ascontiguousarray(a, dtype="<f4").tobytes())
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(b"".join(out))


def load_weights(path) -> Model:
    r = _open(path, WEIGHTS_MAGIC)
    try:
        cfg = ArchitectureConfig.from_dict(json.loads(r.text()))
    except (json.JSONDecodeError, TypeError, ContractError) as exc:
        raise LoadError(f"{path}: corrupt architecture header ({exc})") from exc
    subject_rows = {}
    for _ in range(r.u32()):
        sid = r.text()
        subject_rows[sid] = r.i32()
    arrays = {}
    for _ in range(r.u32()):
        name = r.text()
        rank = r.u32()
        shape = tuple(struct.unpack(f"<{rank}I", r.take(4 * rank)))
        arrays[name] = r.array("<f4", shape).astype(np.float64)
    r.done()
    norm_mu, norm_sigma = arrays.pop("norm.mu", None), arrays.pop("norm.sigma", None)
    from .model import param_shapes

    expected = param_shapes(cfg)
    if set(arrays) != set(expected):
        raise LoadError(f"{path}: tensor names do not match the architecture")
    for n, shape in expected.items():
        if arrays[n].shape != shape:
            raise LoadError(f"{path}: {n} has shape {arrays[n].shape}, expected {shape}")
    params = ModelParameters(
        {n: Tensor(a, requires_grad=True, name=n) for n, a in arrays.items()},
        {n: True for n in arrays},
    )
    return Model(cfg, params, subject_rows, norm_mu, norm_sigma)


# --------------------------------------------------------------------------
# checkpoints


def config_hash(cfg: ArchitectureConfig, plan: TrainPlan) -> str:
    doc = {"arch": cfg.to_dict(), "plan": plan.to_dict()}
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


def _records(named: dict[str, np.ndarray]) -> bytes:
    out = [struct.pack("<I", len(named))]
    for name, a in named.items():
        a = np.asarray(a)
        dtype = "<i8" if np.issubdtype(a.dtype, np.integer) else "<f8"
        out.append(_text(name) + struct.pack("<II", _CODES[dtype], a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape))
        out.append(np.ascontiguousarray(a, dtype=dtype).tobytes())
    return b"".join(out)


def _read_records(r: _Reader) -> dict[str, np.ndarray]:
    out = {}
    for _ in range(r.u32()):
        name = r.text()
        code, rank = r.u32(), r.u32()
        if code not in _DTYPES:
            raise LoadError(f"{r.path}: unknown dtype code {code}")
        shape = tuple(struct.unpack(f"<{rank}I", r.take(4 * rank)))
        out[name] = r.array(_DTYPES[code], shape).copy()
    return out


def save_checkpoint(path, model: Model, state: TrainState, plan: TrainPlan) -> None:
    p = model.params
    header = {
        "config_hash": config_hash(model.cfg, plan),
        "arch": model.cfg.to_dict(),
        "subject_rows": model.subject_rows,
        "trainable": p.trainable,
        "epoch": state.epoch,
        "wait": state.wait,
        "adam": {"cfg": asdict(state.adam.cfg), "step": state.adam.step},
        "shuffle_rng": state.shuffle_rng.bit_generator.state,
        "dropout_rng": state.dropout_rng.bit_generator.state,
        "report": asdict(state.report),
    }
    named: dict[str, np.ndarray] = {}
    for n, a in p.arrays().items():
        named[f"param/{n}"] = a
    for n, a in state.best_params.items():
        named[f"best/{n}"] = a
    for n, a in state.adam.m.items():
        named[f"adam_m/{n}"] = a
        named[f"adam_v/{n}"] = state.adam.v[n]
    for n, a in p.trainable_rows.items():
        named[f"rows/{n}"] = a.astype(np.int64)
    if model.norm_mu is not None:
        named["norm/mu"], named["norm/sigma"] = model.norm_mu, model.norm_sigma
    named["split/train_idx"], named["split/val_idx"] = state.train_idx, state.val_idx
    blob = json.dumps(header).encode()
    data = CHECKPOINT_MAGIC + struct.pack("<II", VERSION, len(blob)) + blob + _records(named)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(data)


def load_checkpoint(path, plan: TrainPlan | None = None) -> tuple[Model, TrainState]:
    """Rebuild (model, state). With ``plan`` given, refuse a config-hash mismatch."""
    r = _open(path, CHECKPOINT_MAGIC)
    try:
        header = json.loads(r.take(r.u32()).decode())
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise LoadError(f"{path}: corrupt checkpoint header") from exc
    named = _read_records(r)
    r.done()
    cfg = ArchitectureConfig.from_dict(header["arch"])
    if plan is not None and config_hash(cfg, plan) != header["config_hash"]:
        raise ContractError("checkpoint was written for a different configuration (config hash mismatch)")

    def group(prefix):
        return {k[len(prefix) :]: v for k, v in named.items() if k.startswith(prefix)}

    params_arrays = group("param/")
    params = ModelParameters(
        {n: Tensor(a, requires_grad=header["trainable"][n], name=n) for n, a in params_arrays.items()},
        dict(header["trainable"]),
        {n: a.astype(bool) for n, a in group("rows/").items()},
    )
    model = Model(cfg, params, dict(header["subject_rows"]), named.get("norm/mu"), named.get("norm/sigma"))
    adam = AdamState(AdamConfig(**header["adam"]["cfg"]), group("adam_m/"), group("adam_v/"), header["adam"]["step"])
    shuffle, dropout = np.random.default_rng(), np.random.default_rng()
    shuffle.bit_generator.state = header["shuffle_rng"]
    dropout.bit_generator.state = header["dropout_rng"]
    state = TrainState(
        epoch=header["epoch"],
        adam=adam,
        shuffle_rng=shuffle,
        dropout_rng=dropout,
        train_idx=named["split/train_idx"],
        val_idx=named["split/val_idx"],
        best_params=group("best/"),
        wait=header["wait"],
        report=TrainReport(**header["report"]),
    )
    return model, state


def checkpoint_callback(path, plan: TrainPlan, every: int = 1):
    """``on_epoch`` hook for :func:`dbilstm.training.train` that checkpoints every ``every`` epochs."""

    def hook(model: Model, state: TrainState) -> None:
        if state.epoch % every == 0:
            save_checkpoint(path, model, state, plan)

    return hook
