"""``dbilstm`` command line.

Exit codes: 0 ok, 2 configuration error, 3 data / dimension error,
4 training divergence, 1 anything else. Failures print one line to stderr::

    error: <category>: <message>
"""

from __future__ import annotations

import argparse
import json
import logging
import re
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import persistence
from .config import ExperimentConfig, load_config, save_config
from .dataset import DatasetManifest, FileRef, SplitPlan, flatten_grids, load_manifest, make_split, save_manifest, write_repetition
from .errors import ConfigError, ContractError, DataError, DivergenceError, LoadError, ManifestError, ShapeError
from .evaluation import CellRunner, evaluate, run_protocol
from .synthetic import SyntheticSpec, generate
from .training import pretrain, retrain_on_new_subject, train_subject_specific, traditional_tl, windows_for

log = logging.getLogger("dbilstm")

EXIT_CODES = {"config": 2, "data": 3, "dimension": 3, "divergence": 4}
_NPZ_NAME = re.compile(r"(?P<subject>[^_/]+)_g(?P<gesture>\d+)_r(?P<rep>\d+)\.npz$")


def _category(exc: BaseException) -> str | None:
    if isinstance(exc, ConfigError):
        return "config"
    if isinstance(exc, ShapeError):
        return "dimension"
    if isinstance(exc, (DataError, ManifestError, LoadError, ContractError)):
        return "data"
    if isinstance(exc, DivergenceError):
        return "divergence"
    return None


# --------------------------------------------------------------------------
# helpers


def _config(args) -> ExperimentConfig:
    if not args.config:
        raise ConfigError("--config is required")
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _manifest(cfg: ExperimentConfig) -> DatasetManifest:
    if not cfg.dataset:
        raise ConfigError("dataset: manifest path is required")
    return load_manifest(cfg.dataset)


def _gestures(cfg: ExperimentConfig, manifest: DatasetManifest) -> list[int]:
    n = cfg.gestures or manifest.gestures
    if n > manifest.gestures:
        raise DataError(f"{n} gestures requested, manifest has {manifest.gestures}")
    return list(range(n))


def _subject(cfg: ExperimentConfig, manifest: DatasetManifest) -> str:
    if not cfg.subject:
        raise ConfigError("subject: required for this command")
    if cfg.subject not in manifest.subjects:
        raise DataError(f"subject {cfg.subject!r} not in manifest")
    return cfg.subject


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, default=float) + "\n")


def _finish_training(out: Path, cfg: ExperimentConfig, model, report, name: str) -> None:
    persistence.save_weights(model, out / name)
    (out / "train_log.csv").write_text(report.to_csv())
    summary = {k: v for k, v in asdict(report).items() if k not in ("train_loss", "val_acc")}
    _write_json(out / "train_report.json", summary)
    save_config(cfg, out / "resolved_config.json")
    log.info("wrote %s (best epoch %d, val acc %.4f)", out / name, report.best_epoch, report.best_val_acc)


# --------------------------------------------------------------------------
# commands


def cmd_convert(args) -> None:
    """``.npz`` files named ``<subject>_g<gesture>_r<rep>.npz`` -> canonical files + manifest.

    Each archive holds ``signal`` (T x 128) or ``volar`` and ``dorsal``
    (T x 8 x 8 each). Optional scalar arrays ``subject``, ``gesture``, ``rep``
    and ``fs`` take precedence over the file name and ``--fs``.
    """
    src, dst = Path(args.src), Path(args.dst)
    sources = sorted(src.rglob("*.npz"))
    if not sources:
        raise DataError(f"no .npz files under {src}")
    files, subjects, fs_seen = [], set(), set()
    for path in sources:
        with np.load(path, allow_pickle=False) as z:
            m = _NPZ_NAME.search(path.name)
            meta = m.groupdict() if m else {}
            for key in ("subject", "gesture", "rep"):
                if key in z.files:
                    meta[key] = z[key].item()
            if set(meta) < {"subject", "gesture", "rep"}:
                raise DataError(f"{path}: cannot determine subject/gesture/rep")
            fs = float(z["fs"]) if "fs" in z.files else args.fs
            if "signal" in z.files:
                signal = z["signal"]
            elif {"volar", "dorsal"} <= set(z.files):
                signal = flatten_grids(z["volar"], z["dorsal"])
            else:
                raise DataError(f"{path}: expected 'signal' or 'volar'+'dorsal' arrays")
        if signal.ndim != 2:
            raise ShapeError(f"{path}: signal must be 2-D, got shape {signal.shape}")
        sid, g, r = str(meta["subject"]), int(meta["gesture"]), int(meta["rep"])
        out = dst / sid / f"g{g:03d}_r{r}.emgr"
        write_repetition(out, signal, fs)
        files.append(FileRef(sid, g, r, out))
        subjects.add(sid)
        fs_seen.add(fs)
    if len(fs_seen) != 1:
        raise DataError(f"mixed sample rates {sorted(fs_seen)}")
    gestures = max(f.gesture for f in files) + 1
    manifest = DatasetManifest(sorted(subjects), gestures, fs_seen.pop(), files, dst)
    save_manifest(manifest, dst / "manifest.json")
    load_manifest(dst / "manifest.json")  # validate what we wrote
    print(f"converted {len(files)} repetitions of {len(subjects)} subjects into {dst}")


def cmd_synth(args) -> None:
    if not args.spec:
        raise ConfigError("--spec is required")
    try:
        spec = SyntheticSpec.from_json(args.spec)
    except (OSError, json.JSONDecodeError, TypeError, ContractError) as exc:
        raise ConfigError(f"{args.spec}: {exc}") from exc
    if args.seed is not None:
        spec.seed = args.seed
    manifest = generate(spec, _out(args))
    print(f"wrote {len(manifest.files)} repetitions to {args.out}")


def cmd_pretrain(args) -> None:
    cfg = _config(args)
    if cfg.regime == "subject_specific":
        raise ConfigError("regime: pretrain needs 'generalized' or 'traditional_tl'")
    if not cfg.pretrain_subjects:
        raise ConfigError("pretrain_subjects: empty")
    manifest = _manifest(cfg)
    gestures = _gestures(cfg, manifest)
    out = _out(args)
    reps, _ = make_split(manifest, SplitPlan(100), cfg.seed, cfg.pretrain_subjects, gestures)
    embedded = cfg.regime == "generalized"
    regime = "pretrain_generalized" if embedded else "traditional_tl_pretrain"
    model, report = pretrain(
        reps, cfg.architecture(len(gestures)), cfg.pretrain.plan(regime, cfg.seed), cfg.window, embedded, cfg.stats_on_phase
    )
    _finish_training(out, cfg, model, report, "base.dblw")


def cmd_retrain(args) -> None:
    cfg = _config(args)
    if not args.weights:
        raise ConfigError("--weights is required")
    base = persistence.load_weights(args.weights)
    manifest = _manifest(cfg)
    subject = _subject(cfg, manifest)
    gestures = _gestures(cfg, manifest)
    if len(gestures) != base.cfg.gestures:
        raise ShapeError(f"base model classifies {base.cfg.gestures} gestures, config selects {len(gestures)}")
    out = _out(args)
    train_reps, _ = make_split(manifest, SplitPlan(cfg.fraction), cfg.seed, [subject], gestures)
    if cfg.regime == "generalized":
        plan = cfg.retrain.plan("retrain_generalized", cfg.seed)
        model, report = retrain_on_new_subject(base, train_reps, plan, cfg.window, subject, cfg.stats_on_phase)
    elif cfg.regime == "traditional_tl":
        plan = cfg.retrain.plan("traditional_tl_retrain", cfg.seed)
        model, report = traditional_tl(base, train_reps, plan, cfg.window, cfg.stats_on_phase)
    else:
        raise ConfigError("regime: retrain needs 'generalized' or 'traditional_tl'")
    _finish_training(out, cfg, model, report, "model.dblw")


def cmd_train(args) -> None:
    cfg = _config(args)
    manifest = _manifest(cfg)
    subject = _subject(cfg, manifest)
    gestures = _gestures(cfg, manifest)
    out = _out(args)
    train_reps, _ = make_split(manifest, SplitPlan(cfg.fraction), cfg.seed, [subject], gestures)
    plan = cfg.specific.plan("subject_specific", cfg.seed)
    model, report = train_subject_specific(train_reps, cfg.architecture(len(gestures)), plan, cfg.window, cfg.stats_on_phase)
    _finish_training(out, cfg, model, report, "model.dblw")


def cmd_eval(args) -> None:
    cfg = _config(args)
    if not args.weights:
        raise ConfigError("--weights is required")
    model = persistence.load_weights(args.weights)
    manifest = _manifest(cfg)
    subject = _subject(cfg, manifest)
    gestures = _gestures(cfg, manifest)
    if len(gestures) != model.cfg.gestures:
        raise ShapeError(f"model classifies {model.cfg.gestures} gestures, config selects {len(gestures)}")
    if model.cfg.use_embedding and subject not in model.subject_rows:
        raise DataError(f"model has no embedding row for subject {subject!r}")
    out = _out(args)
    _, test_reps = make_split(manifest, SplitPlan(cfg.fraction), cfg.seed, [subject], gestures)
    result = evaluate(model, windows_for(model, test_reps, cfg.window), subject_id=subject, regime=cfg.regime, data_fraction=cfg.fraction)
    result.gestures, result.seed = len(gestures), cfg.seed
    if cfg.regime != "subject_specific":
        result.n_pretrain = len(cfg.pretrain_subjects)
    _write_json(out / "accuracy.json", asdict(result))
    save_config(cfg, out / "resolved_config.json")
    print(f"accuracy {result.accuracy:.6f} ({result.n_correct}/{result.n_windows})")


def cmd_protocol(args) -> None:
    cfg = _config(args)
    manifest = _manifest(cfg)
    protocol = cfg.protocol_spec(manifest.gestures)
    settings = cfg.settings(max(protocol.gesture_counts))
    out = _out(args)
    save_config(cfg, out / "resolved_config.json")
    table = run_protocol(manifest, settings, protocol, CellRunner(manifest, settings), threads=args.threads)
    (out / "table.csv").write_text(table.to_csv())
    (out / "results.csv").write_text(table.results_csv())
    for name, text in table.plot_series().items():
        (out / f"{name}.csv").write_text(text)
    reports = {}
    regimes = table.regimes()
    for other in regimes:
        if other != "generalized" and "generalized" in regimes:
            reports[f"generalized_vs_{other}"] = table.wilcoxon_report("generalized", other)
    _write_json(out / "wilcoxon.json", reports)
    sys.stdout.write(table.to_csv())


# --------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dbilstm", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, weights=False):
        p.add_argument("--config", help="experiment config (JSON)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, help="override every seed in the config")
        p.add_argument("--threads", type=int, default=1, help="worker threads for protocol cells")
        if weights:
            p.add_argument("--weights", help="weights file (.dblw)")
        return p

    p = sub.add_parser("convert", help="convert .npz recordings to the canonical format")
    p.add_argument("src")
    p.add_argument("dst")
    p.add_argument("--fs", type=float, default=2048.0, help="sample rate when the archive has none")
    p.set_defaults(func=cmd_convert)

    p = common(sub.add_parser("synth", help="generate a synthetic dataset"))
    p.add_argument("--spec", help="synthetic spec (JSON)")
    p.set_defaults(func=cmd_synth)

    common(sub.add_parser("pretrain", help="pre-train a generalized or traditional-TL base")).set_defaults(func=cmd_pretrain)
    common(sub.add_parser("retrain", help="adapt a base model to a new subject"), weights=True).set_defaults(func=cmd_retrain)
    common(sub.add_parser("train", help="subject-specific training from scratch")).set_defaults(func=cmd_train)
    common(sub.add_parser("eval", help="evaluate weights on a subject's test repetitions"), weights=True).set_defaults(func=cmd_eval)
    common(sub.add_parser("protocol", help="run a comparison sweep")).set_defaults(func=cmd_protocol)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2), format="%(asctime)s %(name)s %(levelname)s %(message)s"
    )
    if getattr(args, "threads", 1) < 1:
        print("error: config: --threads must be >= 1", file=sys.stderr)
        return EXIT_CODES["config"]
    try:
        args.func(args)
    except Exception as exc:  # noqa: BLE001 - mapped to an exit code below
        category = _category(exc)
        message = " ".join(str(exc).split()) or type(exc).__name__
        print(f"error: {category or 'internal'}: {message}", file=sys.stderr)
        if category is None:
            log.debug("unhandled", exc_info=True)
            return 1
        return EXIT_CODES[category]
    return 0


if __name__ == "__main__":
    sys.exit(main())
