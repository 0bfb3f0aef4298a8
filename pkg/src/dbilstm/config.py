"""Experiment configuration: JSON file -> schema check -> typed dataclasses.

Every key is validated against :data:`SCHEMA` (unknown keys are errors).
Environment variables prefixed ``DBILSTM_`` override file values before
validation; ``__`` separates nesting levels and values are parsed as JSON
when possible, e.g.::

    DBILSTM_SEED=3
    DBILSTM_RETRAIN__MAX_EPOCHS=20
    DBILSTM_ARCH__DILATION_SCHEDULE='[1, 4, 16]'
"""

from __future__ import annotations

import copy
import json
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import jsonschema

from .errors import ConfigError, ContractError
from .evaluation import REGIMES, Protocol, ProtocolSettings
from .model import ArchitectureConfig, variant_config
from .preprocess import WindowConfig
from .training import AdamConfig, TrainPlan

ENV_PREFIX = "DBILSTM_"

_INT = {"type": "integer"}
_POS_INT = {"type": "integer", "minimum": 1}
_NUM = {"type": "number"}
_POS_NUM = {"type": "number", "exclusiveMinimum": 0}
_STR = {"type": "string"}
_BOOL = {"type": "boolean"}
_FRACTION = {"enum": [33, 67, 100]}


def _opt(schema: dict) -> dict:
    return {"anyOf": [schema, {"type": "null"}]}


def _obj(props: dict, required=()) -> dict:
    return {"type": "object", "properties": props, "additionalProperties": False, "required": list(required)}


_PLAN = _obj(
    {
        "max_epochs": {"type": "integer", "minimum": 0},
        "patience": _opt(_POS_INT),
        "batch_size": _POS_INT,
        "validation_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "keep_initial": _BOOL,
        "adam": _obj({"lr": _POS_NUM, "beta1": _NUM, "beta2": _NUM, "epsilon": _POS_NUM}),
    }
)

SCHEMA = _obj(
    {
        "dataset": _STR,
        "seed": _INT,
        "variant": _opt({"enum": ["d-bilstm", "bilstm", "d-lstm", "lstm"]}),
        "arch": _obj(
            {
                "channels": _POS_INT,
                "hidden": _POS_INT,
                "layers": _POS_INT,
                "bidirectional": _BOOL,
                "dilation_schedule": {"type": "array", "items": _POS_INT, "minItems": 1},
                "dropout_rate": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "fc_width": _POS_INT,
                "embedding_width": _POS_INT,
            }
        ),
        "window": _obj(
            {
                "window_ms": _POS_NUM,
                "stride_ms": _POS_NUM,
                "phase": {"enum": ["transient", "plateau"]},
                "transient_s": _POS_NUM,
                "plateau_offset_s": {"type": "number", "minimum": 0},
                "plateau_len_s": _POS_NUM,
            }
        ),
        "stats_on_phase": _BOOL,
        "regime": {"enum": list(REGIMES)},
        "pretrain_subjects": {"type": "array", "items": _STR},
        "subject": _opt(_STR),
        "fraction": _FRACTION,
        "gestures": _opt(_POS_INT),
        "protocol": _obj(
            {
                "eval_subjects": _opt({"type": "array", "items": _STR}),
                "gesture_counts": _opt({"type": "array", "items": _POS_INT, "minItems": 1}),
                "fractions": {"type": "array", "items": _FRACTION, "minItems": 1},
                "regimes": {"type": "array", "items": {"enum": list(REGIMES)}, "minItems": 1},
                "seeds": _opt({"type": "array", "items": _INT, "minItems": 1}),
                "pretrain_subject_counts": _opt({"type": "array", "items": _POS_INT}),
            }
        ),
        "pretrain": _PLAN,
        "retrain": _PLAN,
        "specific": _PLAN,
    }
)


@dataclass
class PlanSettings:
    max_epochs: int
    patience: int | None
    batch_size: int = 64
    validation_fraction: float = 0.1
    keep_initial: bool = False
    adam: dict = field(default_factory=lambda: asdict(AdamConfig()))

    def plan(self, regime: str, seed: int) -> TrainPlan:
        kw = asdict(self)
        kw["adam"] = AdamConfig(**kw["adam"])
        return TrainPlan(regime=regime, seed=seed, **kw)


@dataclass
class ProtocolConfig:
    eval_subjects: list[str] | None = None
    gesture_counts: list[int] | None = None  # default: the manifest's full gesture count
    fractions: list[int] = field(default_factory=lambda: [33, 67, 100])
    regimes: list[str] = field(default_factory=lambda: list(REGIMES))
    seeds: list[int] | None = None  # default: [seed]
    pretrain_subject_counts: list[int] | None = None


@dataclass
class ExperimentConfig:
    """Everything one CLI command needs; serializes back to the file format."""

    dataset: str = ""
    seed: int = 0
    variant: str | None = None
    arch: dict = field(default_factory=dict)  # overrides on top of the variant preset
    window: WindowConfig = field(default_factory=WindowConfig)
    stats_on_phase: bool = True
    regime: str = "generalized"
    pretrain_subjects: list[str] = field(default_factory=list)
    subject: str | None = None
    fraction: int = 100
    gestures: int | None = None  # first N gestures; default all
    protocol: ProtocolConfig = field(default_factory=ProtocolConfig)
    pretrain: PlanSettings = field(default_factory=lambda: PlanSettings(200, 40))
    retrain: PlanSettings = field(default_factory=lambda: PlanSettings(100, None, keep_initial=True))
    specific: PlanSettings = field(default_factory=lambda: PlanSettings(200, 40))

    def architecture(self, gestures: int) -> ArchitectureConfig:
        overrides = dict(self.arch, gestures=gestures)
        try:
            if self.variant:
                return variant_config(self.variant, **overrides)
            return ArchitectureConfig(**overrides)
        except ContractError as exc:
            raise ConfigError(f"arch: {exc}") from exc

    def settings(self, gestures: int) -> ProtocolSettings:
        return ProtocolSettings(
            arch=self.architecture(gestures),
            window=self.window,
            pretrain_plan=self.pretrain.plan("pretrain_generalized", self.seed),
            retrain_plan=self.retrain.plan("retrain_generalized", self.seed),
            specific_plan=self.specific.plan("subject_specific", self.seed),
            stats_on_phase=self.stats_on_phase,
        )

    def protocol_spec(self, manifest_gestures: int) -> Protocol:
        p = self.protocol
        try:
            return Protocol(
                pretrain_subjects=list(self.pretrain_subjects),
                eval_subjects=p.eval_subjects,
                gesture_counts=p.gesture_counts or [self.gestures or manifest_gestures],
                fractions=list(p.fractions),
                regimes=list(p.regimes),
                seeds=p.seeds or [self.seed],
                pretrain_subject_counts=p.pretrain_subject_counts,
            )
        except ContractError as exc:
            raise ConfigError(f"protocol: {exc}") from exc

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Uniform seed override: the run seed and the protocol seed list."""
        return replace(self, seed=seed, protocol=replace(self.protocol, seeds=[seed]))

    def to_dict(self) -> dict:
        return asdict(self)


def _nest(doc: dict, path: list[str], value) -> None:
    for key in path[:-1]:
        child = doc.get(key)
        if not isinstance(child, dict):
            child = doc[key] = {}
        doc = child
    doc[path[-1]] = value


def apply_env(doc: dict, environ=None) -> dict:
    """Copy of ``doc`` with ``DBILSTM_*`` overrides applied."""
    environ = os.environ if environ is None else environ
    doc = copy.deepcopy(doc)
    for name in sorted(environ):
        if not name.startswith(ENV_PREFIX) or name == ENV_PREFIX:
            continue
        raw = environ[name]
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        _nest(doc, name[len(ENV_PREFIX) :].lower().split("__"), value)
    return doc


def _plan_settings(doc: dict | None, default: PlanSettings) -> PlanSettings:
    out = replace(default, **{k: v for k, v in (doc or {}).items() if k != "adam"})
    if doc and "adam" in doc:
        out.adam = {**asdict(AdamConfig()), **doc["adam"]}
    return out


def from_dict(doc: dict) -> ExperimentConfig:
    try:
        jsonschema.validate(doc, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{where}: {exc.message}") from None
    base = ExperimentConfig()
    kw = {k: v for k, v in doc.items() if k not in ("window", "protocol", "pretrain", "retrain", "specific")}
    try:
        window = WindowConfig(**doc.get("window", {}))
    except ContractError as exc:
        raise ConfigError(f"window: {exc}") from exc
    return replace(
        base,
        **kw,
        window=window,
        protocol=ProtocolConfig(**doc.get("protocol", {})),
        pretrain=_plan_settings(doc.get("pretrain"), base.pretrain),
        retrain=_plan_settings(doc.get("retrain"), base.retrain),
        specific=_plan_settings(doc.get("specific"), base.specific),
    )


def load_config(path, environ=None) -> ExperimentConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror or exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be an object")
    cfg = from_dict(apply_env(doc, environ))
    if cfg.dataset and not Path(cfg.dataset).is_absolute():
        cfg.dataset = str((Path(path).parent / cfg.dataset).resolve())
    return cfg


def save_config(cfg: ExperimentConfig, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
