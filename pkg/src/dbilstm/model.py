"""Dilated bidirectional LSTM encoder, tanh/dropout classifier, subject embedding.

Gate blocks inside every ``4H`` LSTM tensor are ordered
(input, forget, cell candidate, output).

Dilation ``d`` is a skip recurrence: the state at ``t`` is computed from the
state at ``t - d``, so a layer is ``d`` interleaved chains sharing weights.
The implementation pads time to a multiple of ``d``, views the sequence as
``(n_blocks, d)`` and advances all chains of one block in a single step.
Padding sits after the last real timestep, so it never feeds a real state.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import core_math as cm
from .core_math import Tensor
from .errors import ContractError, ShapeError

DIRECTIONS = ("fwd", "bwd")


@dataclass
class ArchitectureConfig:
    channels: int = 128
    hidden: int = 32
    layers: int = 3
    bidirectional: bool = True
    dilation_schedule: list[int] = field(default_factory=lambda: [1, 8, 64])
    gestures: int = 65
    dropout_rate: float = 0.2
    fc_width: int = 32
    embedding_width: int = 32
    use_embedding: bool = False
    n_embedding_rows: int = 0

    def __post_init__(self):
        self.dilation_schedule = [int(d) for d in self.dilation_schedule]
        if len(self.dilation_schedule) != self.layers:
            raise ContractError(
                f"dilation schedule {self.dilation_schedule} has {len(self.dilation_schedule)} "
                f"entries for {self.layers} layers"
            )
        if any(d < 1 for d in self.dilation_schedule):
            raise ContractError("dilations must be >= 1")
        for name in ("channels", "hidden", "layers", "gestures", "fc_width"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ContractError("dropout_rate must lie in [0, 1)")
        if self.use_embedding:
            if self.embedding_width != self.fc_width:
                raise ContractError("embedding width must equal the first FC output width")
            if self.n_embedding_rows < 1:
                raise ContractError("embedding enabled with no rows")

    @property
    def encoder_width(self) -> int:
        return 2 * self.hidden if self.bidirectional else self.hidden

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureConfig":
        return cls(**d)


def variant_config(name: str, gestures: int = 65, **overrides) -> ArchitectureConfig:
    """Architecture presets for the compared recurrent models.

    ``d-bilstm`` is the default model; the unidirectional variants use 64
    hidden units.
    """
    presets = {
        "d-bilstm": dict(bidirectional=True, dilation_schedule=[1, 8, 64], hidden=32),
        "bilstm": dict(bidirectional=True, dilation_schedule=[1, 1, 1], hidden=32),
        "d-lstm": dict(bidirectional=False, dilation_schedule=[1, 8, 64], hidden=64),
        "lstm": dict(bidirectional=False, dilation_schedule=[1, 1, 1], hidden=64),
    }
    if name not in presets:
        raise ContractError(f"unknown variant {name!r}; expected one of {sorted(presets)}")
    kw = dict(presets[name], gestures=gestures)
    kw.update(overrides)
    return ArchitectureConfig(**kw)


@dataclass
class ModelParameters:
    """Named trainable tensors with per-tensor trainability.

    ``trainable_rows`` optionally restricts updates (and parameter counting)
    of a matrix to a subset of its rows; used for the embedding during
    retraining, where only the new subject's row is in play.
    """

    tensors: dict[str, Tensor]
    trainable: dict[str, bool]
    trainable_rows: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors)

    def trainable_names(self) -> list[str]:
        return [n for n in self.tensors if self.trainable[n]]

    def freeze(self, names) -> None:
        for n in names:
            self.trainable[n] = False
            self.tensors[n].requires_grad = False

    def set_trainable(self, name: str, flag: bool) -> None:
        self.trainable[name] = flag
        self.tensors[name].requires_grad = flag

    def copy(self) -> "ModelParameters":
        return ModelParameters(
            tensors={
                n: Tensor(t.data.copy(), requires_grad=t.requires_grad, name=n)
                for n, t in self.tensors.items()
            },
            trainable=dict(self.trainable),
            trainable_rows={n: m.copy() for n, m in self.trainable_rows.items()},
        )

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self.tensors.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for n, a in arrays.items():
            if self.tensors[n].shape != a.shape:
                raise ShapeError(f"{n}: expected {self.tensors[n].shape}, got {a.shape}")
            self.tensors[n].data = np.array(a, dtype=np.float64, copy=True)


def lstm_name(layer: int, direction: str, kind: str) -> str:
    return f"lstm.{layer}.{direction}.{kind}"


def lstm_names(cfg: ArchitectureConfig) -> list[str]:
    dirs = DIRECTIONS if cfg.bidirectional else DIRECTIONS[:1]
    return [lstm_name(l, d, k) for l in range(cfg.layers) for d in dirs for k in ("W", "U", "b")]


def param_shapes(cfg: ArchitectureConfig) -> dict[str, tuple[int, ...]]:
    H = cfg.hidden
    shapes: dict[str, tuple[int, ...]] = {}
    dirs = DIRECTIONS if cfg.bidirectional else DIRECTIONS[:1]
    for l in range(cfg.layers):
        n_in = cfg.channels if l == 0 else H
        for d in dirs:
            shapes[lstm_name(l, d, "W")] = (4 * H, n_in)
            shapes[lstm_name(l, d, "U")] = (4 * H, H)
            shapes[lstm_name(l, d, "b")] = (4 * H,)
    shapes["fc1.W"] = (cfg.fc_width, cfg.encoder_width)
    shapes["fc1.b"] = (cfg.fc_width,)
    shapes["fc2.W"] = (cfg.gestures, cfg.fc_width)
    shapes["fc2.b"] = (cfg.gestures,)
    if cfg.use_embedding:
        shapes["embedding"] = (cfg.n_embedding_rows, cfg.embedding_width)
    return shapes


def init_model(cfg: ArchitectureConfig, seed: int) -> ModelParameters:
    """Uniform(-1/sqrt(H), 1/sqrt(H)) weights; zero biases except forget gates at 1."""
    rng = np.random.default_rng(seed)
    k = 1.0 / math.sqrt(cfg.hidden)
    tensors: dict[str, Tensor] = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".b"):
            data = np.zeros(shape)
            if name.startswith("lstm."):
                data[cfg.hidden : 2 * cfg.hidden] = 1.0
        else:
            data = rng.uniform(-k, k, size=shape)
        tensors[name] = Tensor(data, requires_grad=True, name=name)
    return ModelParameters(tensors=tensors, trainable={n: True for n in tensors})


def count_params(params: ModelParameters, trainable_only: bool = True) -> int:
    total = 0
    for name, t in params.tensors.items():
        if trainable_only and not params.trainable[name]:
            continue
        rows = params.trainable_rows.get(name)
        if trainable_only and rows is not None:
            total += int(rows.sum()) * int(np.prod(t.shape[1:]))
        else:
            total += int(t.data.size)
    return total


def closed_form_param_count(cfg: ArchitectureConfig) -> int:
    """Parameter count from layer arithmetic, independent of any tensors."""
    H, n_dirs = cfg.hidden, 2 if cfg.bidirectional else 1
    total = 0
    for l in range(cfg.layers):
        n_in = cfg.channels if l == 0 else H
        total += n_dirs * 4 * (H * n_in + H * H + H)
    total += cfg.encoder_width * cfg.fc_width + cfg.fc_width
    total += cfg.fc_width * cfg.gestures + cfg.gestures
    if cfg.use_embedding:
        total += cfg.n_embedding_rows * cfg.embedding_width
    return total


# --------------------------------------------------------------------------
# forward pass


@dataclass
class ForwardMode:
    training: bool = False
    subject_rows: np.ndarray | int | None = None
    rng: np.random.Generator | None = None


def lstm_direction(x: Tensor, W: Tensor, U: Tensor, b: Tensor, dilation: int) -> Tensor:
    """One direction of a dilated LSTM over ``x`` (B x T x in) -> (B x T x H)."""
    B, T, _ = x.shape
    H = U.shape[1]
    n_blocks = -(-T // dilation)
    pad = n_blocks * dilation - T
    proj = cm.add(cm.matmul(x, cm.transpose(W)), b)
    if pad:
        proj = cm.concat([proj, Tensor(np.zeros((B, pad, 4 * H)))], axis=1)
    proj = cm.reshape(proj, (B, n_blocks, dilation, 4 * H))
    out = cm.reshape(cm.lstm_scan(proj, U), (B, n_blocks * dilation, H))
    if pad:
        out = cm.slice_(out, (slice(None), slice(0, T)))
    return out


def _reverse_time(x: Tensor) -> Tensor:
    return cm.slice_(x, (slice(None), slice(None, None, -1)))


def dilated_bilstm_layer(
    x: Tensor, params: ModelParameters, layer: int, dilation: int, bidirectional: bool = True
) -> tuple[Tensor, Tensor, Tensor | None]:
    """Returns (layer output, forward sequence, backward sequence or None).

    Layer output is forward + backward (or forward alone if unidirectional).
    The backward sequence is re-aligned to original time order.
    """
    if dilation < 1:
        raise ContractError("dilation must be >= 1")
    if dilation >= x.shape[1]:
        raise ContractError(f"dilation {dilation} >= sequence length {x.shape[1]}")
    p = lambda d, k: params[lstm_name(layer, d, k)]  # noqa: E731
    fwd = lstm_direction(x, p("fwd", "W"), p("fwd", "U"), p("fwd", "b"), dilation)
    if not bidirectional:
        return fwd, fwd, None
    bwd = _reverse_time(lstm_direction(_reverse_time(x), p("bwd", "W"), p("bwd", "U"), p("bwd", "b"), dilation))
    return cm.add(fwd, bwd), fwd, bwd


def encoder_forward(x, params: ModelParameters, cfg: ArchitectureConfig, mode: ForwardMode | None = None) -> Tensor:
    """Stacked dilated layers -> (B x 2H), or (B x H) when unidirectional.

    The summary vector concatenates the forward state at the last timestep
    with the backward state at the first timestep, i.e. the backward chain
    that contains t = 0 after it has consumed the whole sequence.
    """
    x = cm.as_tensor(x)
    if x.ndim != 3 or x.shape[2] != cfg.channels:
        raise ShapeError(f"encoder expects (B, T, {cfg.channels}) input, got {x.shape}")
    h = x
    fwd = bwd = None
    for layer, d in enumerate(cfg.dilation_schedule):
        h, fwd, bwd = dilated_bilstm_layer(h, params, layer, d, cfg.bidirectional)
    last_fwd = cm.slice_(fwd, (slice(None), -1))
    if not cfg.bidirectional:
        return last_fwd
    return cm.concat([last_fwd, cm.slice_(bwd, (slice(None), 0))], axis=1)


def classifier_hidden(h: Tensor, params: ModelParameters, cfg: ArchitectureConfig, mode: ForwardMode) -> Tensor:
    """Input to the output layer: dropout(tanh(FC1 h)), times the subject row if embedded."""
    z = cm.tanh(cm.add(cm.matmul(h, cm.transpose(params["fc1.W"])), params["fc1.b"]))
    z = cm.dropout(z, cfg.dropout_rate, mode.rng, training=mode.training)
    if cfg.use_embedding:
        if mode.subject_rows is None:
            raise ContractError("embedding model needs subject rows")
        rows = np.broadcast_to(np.asarray(mode.subject_rows, dtype=np.int64), (h.shape[0],))
        z = cm.mul(z, cm.gather_rows(params["embedding"], rows))
    return z


def classify(h, params: ModelParameters, cfg: ArchitectureConfig, mode: ForwardMode | None = None) -> Tensor:
    mode = mode or ForwardMode()
    z = classifier_hidden(cm.as_tensor(h), params, cfg, mode)
    return cm.add(cm.matmul(z, cm.transpose(params["fc2.W"])), params["fc2.b"])


def forward(x, params: ModelParameters, cfg: ArchitectureConfig, mode: ForwardMode | None = None) -> Tensor:
    mode = mode or ForwardMode()
    return classify(encoder_forward(x, params, cfg, mode), params, cfg, mode)


# --------------------------------------------------------------------------


@dataclass
class Model:
    """Architecture, weights, subject-row table and the input normalization used in training."""

    cfg: ArchitectureConfig
    params: ModelParameters
    subject_rows: dict[str, int] = field(default_factory=dict)
    norm_mu: np.ndarray | None = None
    norm_sigma: np.ndarray | None = None

    @classmethod
    def create(cls, cfg: ArchitectureConfig, seed: int, subjects=()) -> "Model":
        subjects = list(subjects)
        if cfg.use_embedding and len(subjects) != cfg.n_embedding_rows:
            raise ContractError(f"{len(subjects)} subjects for {cfg.n_embedding_rows} embedding rows")
        return cls(cfg, init_model(cfg, seed), {s: i for i, s in enumerate(subjects)})

    def copy(self) -> "Model":
        return Model(
            copy.deepcopy(self.cfg),
            self.params.copy(),
            dict(self.subject_rows),
            None if self.norm_mu is None else self.norm_mu.copy(),
            None if self.norm_sigma is None else self.norm_sigma.copy(),
        )

    def logits(self, x, subject_rows=None, batch_size: int = 256) -> np.ndarray:
        """Inference logits, dropout disabled, evaluated in chunks."""
        x = np.asarray(x, dtype=np.float64)
        rows = None
        if self.cfg.use_embedding:
            if subject_rows is None:
                raise ContractError("embedding model needs subject rows")
            rows = np.broadcast_to(np.asarray(subject_rows, dtype=np.int64), (len(x),))
            if rows.size and rows.max() >= self.cfg.n_embedding_rows:
                raise IndexError(f"subject row {rows.max()} >= {self.cfg.n_embedding_rows}")
        out = []
        for lo in range(0, len(x), batch_size):
            mode = ForwardMode(training=False, subject_rows=None if rows is None else rows[lo : lo + batch_size])
            out.append(forward(x[lo : lo + batch_size], self.params, self.cfg, mode).data)
        if not out:
            return np.zeros((0, self.cfg.gestures))
        return np.concatenate(out, axis=0)

    def predict(self, x, subject_rows=None, batch_size: int = 256) -> np.ndarray:
        return self.logits(x, subject_rows, batch_size).argmax(axis=1)


def model_grad_check(
    params: ModelParameters,
    cfg: ArchitectureConfig,
    x: np.ndarray,
    labels: np.ndarray,
    subject_rows=None,
    h: float = 1e-5,
) -> dict[str, float]:
    """Finite-difference check of the full cross-entropy loss, per tensor.

    Dropout is disabled so the loss is deterministic. Returns the max
    relative error for every tensor.
    """
    mode = ForwardMode(training=False, subject_rows=subject_rows)
    errors = {}
    for name in params.names():
        def loss_of(t: Tensor, name=name) -> Tensor:
            trial = ModelParameters(dict(params.tensors), dict(params.trainable))
            trial.tensors[name] = t
            return cm.softmax_cross_entropy(forward(x, trial, cfg, mode), labels)[0]

        errors[name] = cm.grad_check(loss_of, params[name].data, h)
    return errors
