"""Window-level accuracy, the Wilcoxon signed-rank test and comparison sweeps."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .dataset import DatasetManifest, Repetition, SplitPlan, make_split
from .errors import ContractError, DataError
from .model import ArchitectureConfig, Model
from .preprocess import WindowConfig, WindowedDataset
from .training import (
    TrainPlan,
    pretrain,
    retrain_on_new_subject,
    train_subject_specific,
    traditional_tl,
    windows_for,
)

log = logging.getLogger(__name__)

REGIMES = ("subject_specific", "generalized", "traditional_tl")
# mean generalized accuracy, 65 gestures, 100 % retraining data, 5 pre-training subjects
REFERENCE_GENERALIZED_65_100 = 73.22


@dataclass
class EvalResult:
    subject_id: str
    regime: str
    data_fraction: int
    n_windows: int
    n_correct: int
    accuracy: float
    gestures: int = 0
    seed: int = 0
    n_pretrain: int = 0
    per_gesture: dict[int, float] = field(default_factory=dict)


def evaluate(
    model,
    test: WindowedDataset,
    subject_row: int | None = None,
    subject_id: str = "",
    regime: str = "",
    data_fraction: int = 0,
    batch_size: int = 256,
) -> EvalResult:
    """Argmax accuracy over test windows, dropout off.

    ``model`` only needs ``predict(windows, subject_rows)``. Embedding models
    use ``subject_row`` when given, otherwise the rows stored in ``test``.
    """
    if len(test) == 0:
        raise ContractError("empty test set")
    rows = test.subject_rows if subject_row is None else np.full(len(test), subject_row)
    uses_rows = getattr(getattr(model, "cfg", None), "use_embedding", True)
    pred = np.asarray(model.predict(test.windows, rows if uses_rows else None, batch_size))
    hits = pred == test.labels
    per_gesture = {int(g): float(hits[test.labels == g].mean()) for g in np.unique(test.labels)}
    n_correct = int(hits.sum())
    return EvalResult(subject_id, regime, data_fraction, len(test), n_correct, n_correct / len(test), per_gesture=per_gesture)


# --------------------------------------------------------------------------
# Wilcoxon signed-rank


@dataclass
class WilcoxonResult:
    statistic: float  # min(W+, W-)
    p_value: float
    reject: bool
    n: int  # nonzero differences
    w_plus: float
    w_minus: float
    method: str


def average_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks; tied values share the mean of their positions."""
    order = np.argsort(x, kind="mergesort")
    sorted_x = x[order]
    ranks = np.empty(len(x))
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and sorted_x[j + 1] == sorted_x[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def signed_rank_counts(doubled_ranks: Sequence[int]) -> np.ndarray:
    """counts[k] = number of sign assignments whose positive doubled-rank sum is k."""
    total = int(sum(doubled_ranks))
    counts = np.zeros(total + 1, dtype=np.int64)
    counts[0] = 1
    for r in doubled_ranks:
        r = int(r)
        if r:
            counts[r:] = counts[r:] + counts[: len(counts) - r].copy()
        else:
            counts *= 2
    return counts


def wilcoxon_signed_rank(a, b, alpha: float = 0.05, exact_max_n: int = 25) -> WilcoxonResult:
    """Two-sided paired test of ``a`` against ``b``.

    Zero differences are dropped and tied magnitudes get average ranks. The
    p-value is exact (enumerated by dynamic programming over rank sums) for
    up to ``exact_max_n`` nonzero differences, otherwise the tie-corrected
    normal approximation without continuity correction.
    """
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ContractError("paired samples must be 1-D and equally long")
    if len(a) < 5:
        raise ContractError(f"need at least 5 pairs, got {len(a)}")
    d = a - b
    d = d[d != 0]
    if len(d) == 0:
        raise ContractError("all paired differences are zero")
    ranks = average_ranks(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    n = len(d)
    if n <= exact_max_n:
        doubled = np.rint(2 * ranks).astype(np.int64)
        counts = signed_rank_counts(doubled)
        k = int(round(2 * w_plus))
        total = float(counts.sum())
        lower = counts[: k + 1].sum() / total
        upper = counts[k:].sum() / total
        p = min(1.0, 2.0 * min(lower, upper))
        method = "exact"
    else:
        mean = n * (n + 1) / 4.0
        _, tie_sizes = np.unique(np.abs(d), return_counts=True)
        var = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(tie_sizes**3 - tie_sizes)) / 48.0
        z = (w_plus - mean) / math.sqrt(var)
        p = min(1.0, math.erfc(abs(z) / math.sqrt(2.0)))
        method = "normal"
    return WilcoxonResult(min(w_plus, w_minus), p, p < alpha, n, w_plus, w_minus, method)


# --------------------------------------------------------------------------
# comparison tables


@dataclass
class ComparisonTable:
    """Mean accuracy per (gestures, fraction, n_pretrain) cell and regime."""

    results: list[EvalResult]

    def cells(self) -> list[tuple[int, int, int]]:
        return sorted({(r.gestures, r.data_fraction, r.n_pretrain) for r in self.results})

    def regimes(self) -> list[str]:
        present = {r.regime for r in self.results}
        return [g for g in REGIMES if g in present] + sorted(present - set(REGIMES))

    def mean(self, gestures: int, fraction: int, regime: str, n_pretrain: int | None = None) -> float:
        accs = [
            r.accuracy
            for r in self.results
            if r.gestures == gestures and r.data_fraction == fraction and r.regime == regime
            and (n_pretrain is None or r.n_pretrain == n_pretrain)
        ]
        return float(np.mean(accs)) if accs else float("nan")

    def rows(self) -> list[dict]:
        out = []
        for g, f, k in self.cells():
            row = {"gestures": g, "fraction": f, "n_pretrain": k}
            for regime in self.regimes():
                row[regime] = self.mean(g, f, regime, k)
            out.append(row)
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        regimes = self.regimes()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["gestures", "fraction", "n_pretrain", *regimes])
        for row in self.rows():
            w.writerow([row["gestures"], row["fraction"], row["n_pretrain"], *(f"{row[r]:.6f}" for r in regimes)])
        return buf.getvalue()

    def results_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["subject", "regime", "gestures", "fraction", "n_pretrain", "seed", "n_windows", "n_correct", "accuracy"])
        for r in self.results:
            w.writerow([r.subject_id, r.regime, r.gestures, r.data_fraction, r.n_pretrain, r.seed, r.n_windows, r.n_correct, repr(r.accuracy)])
        return buf.getvalue()

    def paired(self, gestures: int, fraction: int, regime_a: str, regime_b: str, n_pretrain: int | None = None):
        """Accuracies of two regimes matched on (subject, seed)."""
        def keyed(regime):
            return {
                (r.subject_id, r.seed): r.accuracy
                for r in self.results
                if r.gestures == gestures and r.data_fraction == fraction and r.regime == regime
                and (n_pretrain is None or r.n_pretrain == n_pretrain)
            }
        ka, kb = keyed(regime_a), keyed(regime_b)
        keys = sorted(set(ka) & set(kb))
        return np.array([ka[k] for k in keys]), np.array([kb[k] for k in keys])

    def wilcoxon_report(self, regime_a: str = "generalized", regime_b: str = "subject_specific", alpha: float = 0.05) -> list[dict]:
        report = []
        for g, f, k in self.cells():
            a, b = self.paired(g, f, regime_a, regime_b, k)
            entry = {"gestures": g, "fraction": f, "n_pretrain": k, "pairs": len(a), "compare": f"{regime_a} vs {regime_b}"}
            try:
                res = wilcoxon_signed_rank(a, b, alpha)
            except ContractError as exc:
                entry["note"] = str(exc)
            else:
                entry.update(statistic=res.statistic, p_value=res.p_value, reject=res.reject, method=res.method)
            report.append(entry)
        return report

    def plot_series(self) -> dict[str, str]:
        """CSV plot data: accuracy vs fraction and accuracy vs pre-training subjects.

        The ``trend`` column is a centered 3-point moving average along x.
        """
        out = {}
        for name, x_key, group_keys in (
            ("accuracy_vs_fraction", "fraction", ("gestures", "n_pretrain")),
            ("accuracy_vs_gestures", "gestures", ("fraction", "n_pretrain")),
            ("accuracy_vs_pretrain_subjects", "n_pretrain", ("gestures", "fraction")),
        ):
            buf = io.StringIO()
            w = csv.writer(buf, lineterminator="\n")
            w.writerow(["regime", *group_keys, "x", "y", "trend"])
            rows = self.rows()
            for regime in self.regimes():
                groups = sorted({tuple(r[k] for k in group_keys) for r in rows})
                for grp in groups:
                    series = sorted(
                        (r[x_key], r[regime]) for r in rows if tuple(r[k] for k in group_keys) == grp
                    )
                    ys = np.array([y for _, y in series])
                    trend = moving_average(ys, 3)
                    for (x, y), t in zip(series, trend):
                        w.writerow([regime, *grp, x, f"{y:.6f}", f"{t:.6f}"])
            out[name] = buf.getvalue()
        return out


def moving_average(y: np.ndarray, width: int = 3) -> np.ndarray:
    """Centered moving average; the window shrinks at the edges."""
    half = width // 2
    return np.array([np.nanmean(y[max(0, i - half) : i + half + 1]) for i in range(len(y))]) if len(y) else y


# --------------------------------------------------------------------------
# protocol sweeps


@dataclass
class Protocol:
    pretrain_subjects: list[str]
    eval_subjects: list[str] | None = None  # default: every other manifest subject
    gesture_counts: list[int] = field(default_factory=lambda: [65])
    fractions: list[int] = field(default_factory=lambda: [33, 67, 100])
    regimes: list[str] = field(default_factory=lambda: list(REGIMES))
    seeds: list[int] = field(default_factory=lambda: [0])
    pretrain_subject_counts: list[int] | None = None  # prefixes of pretrain_subjects

    def __post_init__(self):
        bad = set(self.regimes) - set(REGIMES)
        if bad:
            raise ContractError(f"unknown regimes {sorted(bad)}")
        if not self.pretrain_subjects and set(self.regimes) - {"subject_specific"}:
            raise ContractError("transfer regimes need pre-training subjects")


@dataclass
class ProtocolSettings:
    arch: ArchitectureConfig
    window: WindowConfig
    pretrain_plan: TrainPlan
    retrain_plan: TrainPlan
    specific_plan: TrainPlan
    stats_on_phase: bool = True


def cell_seed(base_seed: int, *key) -> int:
    """Deterministic per-cell seed: hash of the base seed and the cell key."""
    digest = hashlib.sha256(json.dumps([base_seed, *key]).encode()).digest()
    return int.from_bytes(digest[:4], "little")


class CellRunner:
    """Trains and evaluates the models of one protocol; override for custom models."""

    def __init__(self, manifest: DatasetManifest, settings: ProtocolSettings):
        self.manifest = manifest
        self.settings = settings

    def pretrain_bases(self, subjects, gestures, seed, regimes) -> dict[str, Model]:
        s = self.settings
        arch = replace(s.arch, gestures=len(gestures))
        reps, _ = make_split(self.manifest, SplitPlan(100), seed, subjects, gestures)
        bases = {}
        if "generalized" in regimes:
            plan = replace(s.pretrain_plan, regime="pretrain_generalized", seed=cell_seed(seed, "gen", len(subjects), len(gestures)))
            bases["generalized"], _ = pretrain(reps, arch, plan, s.window, embedded=True, stats_on_phase=s.stats_on_phase)
        if "traditional_tl" in regimes:
            plan = replace(s.pretrain_plan, regime="traditional_tl_pretrain", seed=cell_seed(seed, "tl", len(subjects), len(gestures)))
            bases["traditional_tl"], _ = pretrain(reps, arch, plan, s.window, embedded=False, stats_on_phase=s.stats_on_phase)
        return bases

    def run(self, regime, bases, train_reps, test_reps, gestures, seed) -> Model:
        s = self.settings
        if regime == "subject_specific":
            plan = replace(s.specific_plan, regime="subject_specific", seed=seed)
            arch = replace(s.arch, gestures=len(gestures))
            model, _ = train_subject_specific(train_reps, arch, plan, s.window, s.stats_on_phase)
        elif regime == "generalized":
            plan = replace(s.retrain_plan, regime="retrain_generalized", seed=seed)
            model, _ = retrain_on_new_subject(bases["generalized"], train_reps, plan, s.window, stats_on_phase=s.stats_on_phase)
        else:
            plan = replace(s.retrain_plan, regime="traditional_tl_retrain", seed=seed)
            model, _ = traditional_tl(bases["traditional_tl"], train_reps, plan, s.window, s.stats_on_phase)
        return model

    def evaluate(self, model, test_reps) -> EvalResult:
        return evaluate(model, windows_for(model, test_reps, self.settings.window))


def run_protocol(
    manifest: DatasetManifest,
    settings: ProtocolSettings,
    protocol: Protocol,
    runner: CellRunner | None = None,
    threads: int = 1,
) -> ComparisonTable:
    """Pre-train bases, then train/evaluate each (subject, fraction, regime) cell.

    Every result carries its cell coordinates so the table means can be
    recomputed and paired for the signed-rank test.
    """
    runner = runner or CellRunner(manifest, settings)
    eval_subjects = protocol.eval_subjects
    if eval_subjects is None:
        eval_subjects = [s for s in manifest.subjects if s not in set(protocol.pretrain_subjects)]
    if not eval_subjects:
        raise DataError("no subjects to evaluate")
    counts = protocol.pretrain_subject_counts or [len(protocol.pretrain_subjects)]
    results: list[EvalResult] = []
    for seed in protocol.seeds:
        for n_gest in protocol.gesture_counts:
            if n_gest > manifest.gestures:
                raise DataError(f"{n_gest} gestures requested, manifest has {manifest.gestures}")
            gestures = list(range(n_gest))
            for k in counts:
                transfer = [r for r in protocol.regimes if r != "subject_specific"]
                bases = runner.pretrain_bases(protocol.pretrain_subjects[:k], gestures, seed, transfer) if transfer else {}
                jobs = [(subj, frac) for subj in eval_subjects for frac in protocol.fractions]

                def cell(job, seed=seed, n_gest=n_gest, k=k, gestures=gestures, bases=bases):
                    subj, frac = job
                    split_seed = cell_seed(seed, "split", subj, frac)
                    train_reps, test_reps = make_split(manifest, SplitPlan(frac), split_seed, [subj], gestures)
                    out = []
                    for regime in protocol.regimes:
                        if regime == "subject_specific" and k != counts[0]:
                            continue  # independent of the pre-training set
                        model = runner.run(regime, bases, train_reps, test_reps, gestures, cell_seed(seed, regime, subj, frac, n_gest))
                        res = runner.evaluate(model, test_reps)
                        out.append(replace(res, subject_id=subj, regime=regime, data_fraction=frac, gestures=n_gest, seed=seed, n_pretrain=k))
                        log.info("seed %s G=%d k=%d %s %s%%: %s acc %.4f", seed, n_gest, k, subj, frac, regime, res.accuracy)
                    return out

                if threads > 1:
                    with ThreadPoolExecutor(threads) as pool:
                        for part in pool.map(cell, jobs):
                            results.extend(part)
                else:
                    for job in jobs:
                        results.extend(cell(job))
    return ComparisonTable(results)
