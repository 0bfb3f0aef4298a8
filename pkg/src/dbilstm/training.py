"""Adam, the mini-batch training loop, and the three training regimes.

Regimes:

* subject-specific: fresh model, no embedding, trained on one subject.
* subject-embedded TL: pre-train with one embedding row per known subject,
  then retrain everything on a new subject whose row starts at the mean of
  the known rows.
* traditional TL: pre-train without embedding, freeze the recurrent
  layers, retrain the two FC layers on the new subject.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import core_math as cm
from .dataset import Repetition
from .errors import ContractError, DataError, DivergenceError, ShapeError
from .model import ArchitectureConfig, ForwardMode, Model, ModelParameters, forward, lstm_names
from .preprocess import WindowConfig, WindowedDataset, build_windows, phase_stats

log = logging.getLogger(__name__)

PRETRAIN_REGIMES = ("subject_specific", "pretrain_generalized", "traditional_tl_pretrain")
RETRAIN_REGIMES = ("retrain_generalized", "traditional_tl_retrain")


# --------------------------------------------------------------------------
# optimizer


@dataclass
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


@dataclass
class AdamState:
    cfg: AdamConfig
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: ModelParameters, grads: dict[str, np.ndarray], state: AdamState) -> None:
    """One bias-corrected Adam update, in place, on trainable tensors only.

    Frozen tensors are skipped even when a gradient is supplied. For tensors
    with a ``trainable_rows`` mask only the masked rows move.
    """
    c = state.cfg
    state.step += 1
    t = state.step
    bc1 = 1.0 - c.beta1**t
    bc2 = 1.0 - c.beta2**t
    for name, g in grads.items():
        if not params.trainable.get(name, False):
            continue
        p = params.tensors[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, tensor {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= c.beta1
        m += (1.0 - c.beta1) * g
        v *= c.beta2
        v += (1.0 - c.beta2) * (g * g)
        update = c.lr * (m / bc1) / (np.sqrt(v / bc2) + c.epsilon)
        rows = params.trainable_rows.get(name)
        if rows is not None:
            update[~rows] = 0.0
        p.data -= update


# --------------------------------------------------------------------------
# plans and reports


@dataclass
class TrainPlan:
    regime: str = "subject_specific"
    max_epochs: int = 200
    patience: int | None = 40
    batch_size: int = 64
    validation_fraction: float = 0.1
    seed: int = 0
    adam: AdamConfig = field(default_factory=AdamConfig)
    # score the starting weights as epoch 0 so a retrain can never end worse (on validation) than its base
    keep_initial: bool = False

    def __post_init__(self):
        if isinstance(self.adam, dict):
            self.adam = AdamConfig(**self.adam)
        if self.regime not in PRETRAIN_REGIMES + RETRAIN_REGIMES:
            raise ContractError(f"unknown regime {self.regime!r}")
        if self.batch_size < 1 or self.max_epochs < 0:
            raise ContractError("batch_size must be >= 1 and max_epochs >= 0")
        if self.patience is not None and self.patience < 1:
            raise ContractError("patience must be >= 1 or None")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ContractError("validation_fraction must lie in (0, 1)")

    @classmethod
    def for_regime(cls, regime: str, **overrides) -> "TrainPlan":
        """Defaults: 200 epochs / patience 40 from scratch; 100 epochs, no early stop, epoch-0 candidate when retraining."""
        if regime in PRETRAIN_REGIMES:
            base = dict(max_epochs=200, patience=40)
        else:
            base = dict(max_epochs=100, patience=None, keep_initial=True)
        base.update(overrides)
        return cls(regime=regime, **base)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)
    val_acc: list[float] = field(default_factory=list)
    best_epoch: int = 0
    best_val_acc: float = -math.inf
    stop_reason: str = ""
    wall_time_s: float = 0.0

    @property
    def epochs_run(self) -> int:
        return len(self.train_loss)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_acc"])
        for i, (loss, acc) in enumerate(zip(self.train_loss, self.val_acc), start=1):
            w.writerow([i, repr(loss), repr(acc)])
        return buf.getvalue()

    def deterministic_view(self) -> tuple:
        """Everything except wall time."""
        return (tuple(self.train_loss), tuple(self.val_acc), self.best_epoch, self.best_val_acc, self.stop_reason)


def stratified_split(labels: np.ndarray, fraction: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """(train idx, validation idx); each class with >= 2 windows gives at least one to validation."""
    val = []
    for g in np.unique(labels):
        idx = np.flatnonzero(labels == g)
        idx = idx[rng.permutation(len(idx))]
        n_val = int(round(fraction * len(idx)))
        if len(idx) >= 2:
            n_val = min(max(n_val, 1), len(idx) - 1)
        else:
            n_val = 0
        val.append(idx[:n_val])
    val_idx = np.sort(np.concatenate(val)) if val else np.array([], dtype=np.int64)
    mask = np.ones(len(labels), dtype=bool)
    mask[val_idx] = False
    return np.flatnonzero(mask), val_idx


# --------------------------------------------------------------------------
# training loop


@dataclass
class TrainState:
    """Everything needed to continue a run bit-exactly after an interruption."""

    epoch: int
    adam: AdamState
    shuffle_rng: np.random.Generator
    dropout_rng: np.random.Generator
    train_idx: np.ndarray
    val_idx: np.ndarray
    best_params: dict[str, np.ndarray]
    wait: int
    report: TrainReport


def _rows(model: Model, data: WindowedDataset, idx) -> np.ndarray | None:
    return data.subject_rows[idx] if model.cfg.use_embedding else None


def accuracy(model: Model, data: WindowedDataset, idx=None, batch_size: int = 256) -> float:
    idx = np.arange(len(data)) if idx is None else idx
    if len(idx) == 0:
        raise ContractError("accuracy of an empty set")
    pred = model.predict(data.windows[idx], _rows(model, data, idx), batch_size)
    return float(np.mean(pred == data.labels[idx]))


def init_state(model: Model, data: WindowedDataset, plan: TrainPlan) -> TrainState:
    if len(data) == 0:
        raise ContractError("training data is empty")
    if data.labels.min() < 0 or data.labels.max() >= model.cfg.gestures:
        raise ContractError(f"labels outside [0, {model.cfg.gestures})")
    if model.cfg.use_embedding and (data.subject_rows.min() < 0 or data.subject_rows.max() >= model.cfg.n_embedding_rows):
        raise ContractError("windows carry subject rows outside the embedding matrix")
    split_rng = np.random.default_rng([plan.seed, 0])
    train_idx, val_idx = stratified_split(data.labels, plan.validation_fraction, split_rng)
    if len(val_idx) == 0:
        raise ContractError("validation split is empty")
    return TrainState(
        epoch=0,
        adam=AdamState(plan.adam),
        shuffle_rng=np.random.default_rng([plan.seed, 1]),
        dropout_rng=np.random.default_rng([plan.seed, 2]),
        train_idx=train_idx,
        val_idx=val_idx,
        best_params={n: a.copy() for n, a in model.params.arrays().items()},
        wait=0,
        report=TrainReport(),
    )


def run_epoch(model: Model, data: WindowedDataset, plan: TrainPlan, state: TrainState) -> float:
    """One pass over the shuffled training windows; returns the mean loss."""
    params, cfg = model.params, model.cfg
    trainable = [params[n] for n in params.trainable_names()]
    names = params.trainable_names()
    order = state.train_idx[state.shuffle_rng.permutation(len(state.train_idx))]
    total, count = 0.0, 0
    for lo in range(0, len(order), plan.batch_size):
        batch = order[lo : lo + plan.batch_size]
        mode = ForwardMode(training=True, subject_rows=_rows(model, data, batch), rng=state.dropout_rng)
        with cm.Graph() as graph:
            logits = forward(data.windows[batch], params, cfg, mode)
            loss, _ = cm.softmax_cross_entropy(logits, data.labels[batch])
        value = float(loss.data)
        if not math.isfinite(value):
            raise DivergenceError(f"non-finite loss at epoch {state.epoch + 1}")
        if trainable:
            grads = cm.backward(graph, loss, trainable)
            adam_step(params, dict(zip(names, grads)), state.adam)
        total += value * len(batch)
        count += len(batch)
    return total / count


def train(
    model: Model,
    data: WindowedDataset,
    plan: TrainPlan,
    state: TrainState | None = None,
    stop_after: int | None = None,
    on_epoch: Callable[[Model, TrainState], None] | None = None,
) -> tuple[Model, TrainReport]:
    """Train in place and return (model, report).

    The model ends with the weights of the best validation epoch. ``state``
    resumes an interrupted run; ``stop_after`` interrupts after that many
    completed epochs (best weights are then *not* restored, so the run can
    continue from the returned state via ``on_epoch`` checkpoints).
    """
    if plan.max_epochs == 0:
        return model, TrainReport(stop_reason="no epochs requested")
    if state is None:
        state = init_state(model, data, plan)
        if plan.keep_initial:
            state.report.best_val_acc = accuracy(model, data, state.val_idx)
            state.report.best_epoch = 0
    report = state.report
    started = time.perf_counter()
    params = model.params
    while state.epoch < plan.max_epochs:
        if plan.patience is not None and state.wait >= plan.patience:
            report.stop_reason = f"early stop: no improvement for {plan.patience} epochs"
            break
        if stop_after is not None and state.epoch >= stop_after:
            report.stop_reason = "interrupted"
            report.wall_time_s += time.perf_counter() - started
            return model, report
        loss = run_epoch(model, data, plan, state)
        acc = accuracy(model, data, state.val_idx)
        state.epoch += 1
        report.train_loss.append(loss)
        report.val_acc.append(acc)
        if acc > report.best_val_acc:
            report.best_val_acc = acc
            report.best_epoch = state.epoch
            state.best_params = {n: a.copy() for n, a in params.arrays().items()}
            state.wait = 0
        else:
            state.wait += 1
        log.debug("epoch %d loss %.5f val_acc %.4f", state.epoch, loss, acc)
        if on_epoch is not None:
            on_epoch(model, state)
    else:
        report.stop_reason = "max epochs reached"
    params.load_arrays(state.best_params)
    report.wall_time_s += time.perf_counter() - started
    return model, report


# --------------------------------------------------------------------------
# regimes


def _check_reps(reps: Sequence[Repetition], what: str) -> None:
    if not reps:
        raise ContractError(f"no {what} repetitions")


def prepare_training_data(
    model: Model, reps: Sequence[Repetition], window_cfg: WindowConfig, stats_on_phase: bool = True
) -> WindowedDataset:
    """Fit the model's normalization on ``reps`` and window them."""
    stats = phase_stats(reps, window_cfg, trimmed=stats_on_phase)
    model.norm_mu, model.norm_sigma = stats.mu, stats.sigma
    return windows_for(model, reps, window_cfg)


def windows_for(model: Model, reps: Sequence[Repetition], window_cfg: WindowConfig) -> WindowedDataset:
    """Window ``reps`` with the model's stored normalization and subject table."""
    from .preprocess import ChannelStats

    if model.norm_mu is None:
        raise ContractError("model has no normalization statistics")
    stats = ChannelStats(model.norm_mu, model.norm_sigma, 0)
    return build_windows(reps, stats, window_cfg, model.subject_rows if model.cfg.use_embedding else None)


def pretrain(
    reps: Sequence[Repetition],
    cfg: ArchitectureConfig,
    plan: TrainPlan,
    window_cfg: WindowConfig,
    embedded: bool,
    stats_on_phase: bool = True,
) -> tuple[Model, TrainReport]:
    """Train a base model on pooled subjects, with or without subject embedding."""
    _check_reps(reps, "pre-training")
    subjects = sorted({r.subject_id for r in reps})
    if embedded:
        cfg = replace(cfg, use_embedding=True, n_embedding_rows=len(subjects))
        counts = {s: {r.rep_index for r in reps if r.subject_id == s} for s in subjects}
        short = [s for s, reps_ in counts.items() if len(reps_) < 3]
        if short:
            raise DataError(f"subjects missing training repetitions: {short}")
    else:
        cfg = replace(cfg, use_embedding=False, n_embedding_rows=0)
    model = Model.create(cfg, plan.seed, subjects if embedded else ())
    if not embedded:
        model.subject_rows = {s: -1 for s in subjects}
    data = prepare_training_data(model, reps, window_cfg, stats_on_phase)
    return train(model, data, plan)


def pretrain_generalized(manifest, pretrain_subjects, cfg, plan, window_cfg, gestures=None, stats_on_phase=True):
    """Pre-train the subject-embedded model on all training repetitions of ``pretrain_subjects``."""
    from .dataset import SplitPlan, make_split

    train_reps, _ = make_split(manifest, SplitPlan(100), plan.seed, pretrain_subjects, gestures)
    return pretrain(train_reps, cfg, plan, window_cfg, embedded=True, stats_on_phase=stats_on_phase)


def extend_embedding(base: Model, subject_id: str) -> Model:
    """Copy of ``base`` with one extra embedding row: the columnwise mean of the existing rows.

    Only the new row is marked trainable within the embedding matrix; all
    other tensors keep their trainability.
    """
    if not base.cfg.use_embedding:
        raise ContractError("base model has no subject embedding")
    model = base.copy()
    old = model.params["embedding"].data
    if old.shape != (base.cfg.n_embedding_rows, base.cfg.embedding_width):
        raise ShapeError(f"embedding matrix {old.shape} does not match the architecture")
    new_row = old.mean(axis=0)
    model.params.tensors["embedding"] = cm.Tensor(np.vstack([old, new_row]), requires_grad=True, name="embedding")
    model.params.set_trainable("embedding", True)
    rows = np.zeros(old.shape[0] + 1, dtype=bool)
    rows[-1] = True
    model.params.trainable_rows["embedding"] = rows
    model.cfg = replace(model.cfg, n_embedding_rows=old.shape[0] + 1)
    model.subject_rows = dict(model.subject_rows)
    model.subject_rows[subject_id] = old.shape[0]
    return model


def retrain_on_new_subject(
    base: Model,
    new_reps: Sequence[Repetition],
    plan: TrainPlan,
    window_cfg: WindowConfig,
    subject_id: str | None = None,
    stats_on_phase: bool = True,
) -> tuple[Model, TrainReport]:
    """Subject-embedded TL: start from the base weights and the mean embedding row."""
    _check_reps(new_reps, "retraining")
    subjects = {r.subject_id for r in new_reps}
    if len(subjects) != 1:
        raise ContractError(f"retraining data must come from one subject, got {sorted(subjects)}")
    subject_id = subject_id or subjects.pop()
    _check_channels(base, new_reps)
    model = extend_embedding(base, subject_id)
    data = prepare_training_data(model, new_reps, window_cfg, stats_on_phase)
    return train(model, data, plan)


def traditional_tl(
    base: Model,
    new_reps: Sequence[Repetition],
    plan: TrainPlan,
    window_cfg: WindowConfig,
    stats_on_phase: bool = True,
) -> tuple[Model, TrainReport]:
    """Freeze every LSTM tensor of a no-embedding base model; retrain FC1 and FC2."""
    _check_reps(new_reps, "retraining")
    if base.cfg.use_embedding:
        raise ContractError("traditional TL expects a base model without embedding")
    _check_channels(base, new_reps)
    model = base.copy()
    model.params.freeze(lstm_names(model.cfg))
    model.subject_rows = {r.subject_id: -1 for r in new_reps}
    data = prepare_training_data(model, new_reps, window_cfg, stats_on_phase)
    return train(model, data, plan)


def train_subject_specific(
    reps: Sequence[Repetition],
    cfg: ArchitectureConfig,
    plan: TrainPlan,
    window_cfg: WindowConfig,
    stats_on_phase: bool = True,
) -> tuple[Model, TrainReport]:
    """Fresh model without embedding, trained on one subject's repetitions."""
    _check_reps(reps, "training")
    cfg = replace(cfg, use_embedding=False, n_embedding_rows=0)
    model = Model.create(cfg, plan.seed)
    model.subject_rows = {r.subject_id: -1 for r in reps}
    data = prepare_training_data(model, reps, window_cfg, stats_on_phase)
    return train(model, data, plan)


def _check_channels(base: Model, reps: Sequence[Repetition]) -> None:
    bad = {r.n_channels for r in reps} - {base.cfg.channels}
    if bad:
        raise ShapeError(f"model expects {base.cfg.channels} channels, data has {sorted(bad)}")
