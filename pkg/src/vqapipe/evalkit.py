"""Correlation statistics, logistic mapping and residual significance tests."""

from __future__ import annotations

import csv
import json
import logging
import math
import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import optimize, stats

from .errors import DataError, UndefinedStatisticError

log = logging.getLogger(__name__)

MIN_FIT_POINTS = 5
MIN_FTEST_POINTS = 8
OR_ATOL = 1e-9


@dataclass(frozen=True)
class PredictionEntry:
    sequence_id: str
    prediction: float
    subjective: float
    source_id: str = ""
    database_id: str = ""
    rating_std: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.subjective <= 100.0:
            raise DataError(f"{self.sequence_id}: subjective score {self.subjective} outside [0, 100]")


PredictionSet = list[PredictionEntry]


# -- correlation ------------------------------------------------------------

def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    x, y = np.asarray(a, dtype=np.float64).ravel(), np.asarray(b, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise UndefinedStatisticError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 2:
        raise UndefinedStatisticError("need at least two points")
    return x, y


def pearson(a, b) -> float:
    x, y = _pair(a, b)
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0 or syy == 0:
        raise UndefinedStatisticError("correlation of a constant vector is undefined")
    return float(np.clip((dx @ dy) / math.sqrt(sxx * syy), -1.0, 1.0))


def srocc(pred, subj) -> float:
    """Rank correlation with mid-ranks for ties."""
    x, y = _pair(pred, subj)
    return pearson(stats.rankdata(x), stats.rankdata(y))


# -- logistic mapping -------------------------------------------------------

def logistic4(x, t1, t2, t3, t4):
    return (t1 - t2) / (1.0 + np.exp(-(np.asarray(x, dtype=np.float64) - t3) / abs(t4))) + t2


def logistic5(x, t1, t2, t3, t4, t5):
    x = np.asarray(x, dtype=np.float64)
    return t1 * (0.5 - 1.0 / (1.0 + np.exp(t2 * (x - t3)))) + t4 * x + t5


@dataclass
class LogisticFit:
    params: tuple[float, ...]
    converged: bool
    kind: str = "logistic4"
    message: str = ""

    def __call__(self, x) -> np.ndarray:
        fn = logistic4 if self.kind == "logistic4" else logistic5
        return fn(x, *self.params)


def logistic_fit(pred, subj, five_parameter: bool = False, max_evals: int = 5000) -> LogisticFit:
    """Least-squares logistic map from predictions to subjective scores.

    Starts from the data extremes, so the result is deterministic.
    """
    x, y = _pair(pred, subj)
    if x.size < MIN_FIT_POINTS:
        raise UndefinedStatisticError(f"logistic fit needs at least {MIN_FIT_POINTS} points, got {x.size}")
    spread = float(np.std(x))
    kind = "logistic5" if five_parameter else "logistic4"
    if not spread > 0 or not np.all(np.isfinite(x)):
        return LogisticFit((float(y.max()), float(y.min()), float(np.median(x)), 1.0), False, "logistic4",
                           "degenerate prediction range")
    if five_parameter:
        p0 = [float(y.max() - y.min()), 1.0 / spread, float(np.median(x)), 0.0, float(y.mean())]
        fn = logistic5
    else:
        p0 = [float(y.max()), float(y.min()), float(np.median(x)), spread]
        fn = logistic4
    with np.errstate(over="ignore"):
        res = optimize.least_squares(lambda p: fn(x, *p) - y, p0, method="lm", max_nfev=max_evals,
                                     xtol=1e-12, ftol=1e-12, gtol=1e-12)
    params = tuple(float(v) for v in res.x)
    ok = bool(res.success) and all(np.isfinite(params))
    if not five_parameter:
        ok = ok and abs(params[3]) > 0
    return LogisticFit(params, ok, kind, res.message)


# -- accuracy ---------------------------------------------------------------

@dataclass
class AccuracyStats:
    plcc: float
    rmse: float
    outlier_ratio: float
    mapping: str
    or_basis: str
    residuals: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0))


def outlier_ratio(residuals, rating_std=None) -> tuple[float, str]:
    """Fraction of residuals beyond twice the rating spread.

    Without per-sequence rating spreads the population spread of the
    residuals themselves stands in. Residuals within ``OR_ATOL`` of the
    bound are not outliers, so an exact mapping has no outliers despite
    rounding noise.
    """
    res = np.asarray(residuals, dtype=np.float64)
    if rating_std is not None and all(s is not None for s in rating_std):
        sigma, basis = np.asarray(rating_std, dtype=np.float64), "rating_std"
    else:
        sigma, basis = float(np.std(res)), "residual_std"
    return float(np.mean(np.abs(res) > 2.0 * sigma + OR_ATOL)), basis


def plcc_rmse_or(pred, subj, fit: LogisticFit | None, rating_std=None) -> AccuracyStats:
    x, y = _pair(pred, subj)
    if fit is not None and fit.converged:
        mapped, mapping = fit(x), fit.kind
    elif np.std(x) > 0:
        slope, icpt = np.polyfit(x, y, 1)
        mapped, mapping = slope * x + icpt, "linear"
    else:
        mapped, mapping = np.full_like(y, y.mean()), "constant"
    residuals = y - mapped
    try:
        plcc = pearson(mapped, y)
    except UndefinedStatisticError:
        plcc = float("nan")
    rmse = float(np.sqrt(np.mean(residuals ** 2)))
    ratio, basis = outlier_ratio(residuals, rating_std)
    return AccuracyStats(plcc, rmse, ratio, mapping, basis, residuals)


# -- significance -----------------------------------------------------------

def f_test(residuals_a, residuals_b, alpha: float = 0.05) -> int:
    """Two-sided variance-ratio test on residuals.

    Returns 1 when A's residual variance is significantly smaller, -1 when
    significantly larger, 0 otherwise.
    """
    a = np.asarray(residuals_a, dtype=np.float64).ravel()
    b = np.asarray(residuals_b, dtype=np.float64).ravel()
    if min(a.size, b.size) < MIN_FTEST_POINTS:
        raise UndefinedStatisticError(f"F-test needs at least {MIN_FTEST_POINTS} residuals per side")
    va, vb = float(np.var(a, ddof=1)), float(np.var(b, ddof=1))
    if va > vb:
        return -f_test(b, a, alpha)
    if vb == 0:
        return 0
    if va == 0:
        return 1
    critical = stats.f.ppf(1.0 - alpha / 2.0, b.size - 1, a.size - 1)
    return 1 if vb / va > critical else 0


# -- single-source aggregation ----------------------------------------------

def _by(entries: Iterable[PredictionEntry], key) -> dict:
    out: dict = {}
    for e in entries:
        out.setdefault(key(e), []).append(e)
    return out


def single_source_by_database(entries: Sequence[PredictionEntry]) -> dict[str, float]:
    """Mean within-source rank correlation per database."""
    result = {}
    for db, rows in sorted(_by(entries, lambda e: e.database_id).items()):
        values = []
        for src, group in sorted(_by(rows, lambda e: e.source_id).items()):
            subj = [e.subjective for e in group]
            pred = [e.prediction for e in group]
            if len(group) < 2 or len(set(subj)) < 2 or len(set(pred)) < 2:
                warnings.warn(f"skipping source {src!r} in {db!r}: too few or constant scores", stacklevel=2)
                continue
            values.append(srocc(pred, subj))
        if values:
            result[db] = float(np.mean(values))
    return result


def single_source_srocc(entries: Sequence[PredictionEntry]) -> float:
    per_db = single_source_by_database(entries)
    if not per_db:
        raise UndefinedStatisticError("no source has two distorted sequences with distinct scores")
    return float(np.mean(list(per_db.values())))


# -- report -----------------------------------------------------------------

_CELL = re.compile(r"^\s*(-?\d+\.\d{4}) \((-1|0|1)\)\s*$")


def format_cell(value: float, significance: int) -> str:
    return f"{value:.4f} ({int(significance)})"


def parse_cell(text: str) -> tuple[float, int]:
    m = _CELL.match(text)
    if not m:
        raise DataError(f"not a report cell: {text!r}")
    return float(m.group(1)), int(m.group(2))


@dataclass
class DatabaseStats:
    n: int
    srocc: float
    plcc: float
    rmse: float
    outlier_ratio: float
    mapping: str
    or_basis: str
    fit_params: tuple[float, ...] = ()

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}


@dataclass
class EvalReport:
    metrics: list[str]
    databases: list[str]
    per_database: dict[str, dict[str, DatabaseStats]]
    mean_srocc: dict[str, float]
    single_source: dict[str, float | None]
    f_tests: dict[str, list[list[int]]]
    notes: list[str] = field(default_factory=list)

    def significance(self, metric: str, database: str, against: str | None = None) -> int:
        against = against or self.metrics[0]
        m = self.f_tests[database]
        return m[self.metrics.index(metric)][self.metrics.index(against)]

    def to_dict(self) -> dict:
        return {
            "metrics": self.metrics,
            "databases": self.databases,
            "per_database": {m: {d: s.to_dict() for d, s in v.items()} for m, v in self.per_database.items()},
            "mean_srocc": self.mean_srocc,
            "single_source_srocc": self.single_source,
            "f_tests": self.f_tests,
            "notes": self.notes,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True, default=float)

    def table(self, against: str | None = None) -> str:
        """Text table of ``srocc (significance)`` cells, significance taken against ``against``."""
        against = against or self.metrics[0]
        head = ["metric", *self.databases, "mean", "single-source"]
        rows = [head]
        for m in self.metrics:
            cells = [m]
            for d in self.databases:
                s = self.per_database[m].get(d)
                cells.append(format_cell(s.srocc, self.significance(m, d, against)) if s else "-")
            cells.append(f"{self.mean_srocc[m]:.4f}")
            ss = self.single_source.get(m)
            cells.append("-" if ss is None else f"{ss:.4f}")
            rows.append(cells)
        widths = [max(len(r[i]) for r in rows) for i in range(len(head))]
        return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows) + "\n"


def evaluate(predictions: Mapping[str, Sequence[PredictionEntry]], five_parameter: bool = False) -> EvalReport:
    """Full report for one or more metrics over the same sequences.

    Logistic fits are done per metric and per database.
    """
    metrics = list(predictions)
    if not metrics:
        raise DataError("no predictions to evaluate")
    notes: list[str] = []
    databases = sorted({e.database_id for rows in predictions.values() for e in rows})
    per_db: dict[str, dict[str, DatabaseStats]] = {m: {} for m in metrics}
    residuals: dict[str, dict[str, np.ndarray]] = {m: {} for m in metrics}
    for m in metrics:
        for db, rows in _by(predictions[m], lambda e: e.database_id).items():
            pred = [e.prediction for e in rows]
            subj = [e.subjective for e in rows]
            fit = logistic_fit(pred, subj, five_parameter) if len(rows) >= MIN_FIT_POINTS else None
            if fit is None:
                notes.append(f"{m}/{db}: {len(rows)} points, logistic fit skipped")
            elif not fit.converged:
                notes.append(f"{m}/{db}: logistic fit did not converge ({fit.message}); linear statistics")
            spreads = [e.rating_std for e in rows]
            acc = plcc_rmse_or(pred, subj, fit, spreads if all(s is not None for s in spreads) else None)
            per_db[m][db] = DatabaseStats(len(rows), srocc(pred, subj), acc.plcc, acc.rmse, acc.outlier_ratio,
                                          acc.mapping, acc.or_basis, fit.params if fit else ())
            residuals[m][db] = acc.residuals
    mean = {m: float(np.mean([s.srocc for s in per_db[m].values()])) for m in metrics}
    single: dict[str, float | None] = {}
    for m in metrics:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            try:
                single[m] = single_source_srocc(predictions[m])
            except UndefinedStatisticError as exc:
                single[m] = None
                notes.append(f"{m}: single-source SROCC undefined ({exc})")
        notes.extend(f"{m}: {w.message}" for w in caught)
    tests: dict[str, list[list[int]]] = {}
    for db in databases:
        mat = [[0] * len(metrics) for _ in metrics]
        for i, a in enumerate(metrics):
            for j, b in enumerate(metrics):
                if i < j and db in residuals[a] and db in residuals[b]:
                    try:
                        mat[i][j] = f_test(residuals[a][db], residuals[b][db])
                    except UndefinedStatisticError as exc:
                        notes.append(f"{db}: F-test {a} vs {b} skipped ({exc})")
                    mat[j][i] = -mat[i][j]
        tests[db] = mat
    return EvalReport(metrics, databases, per_db, mean, single, tests, notes)


# -- CSV input --------------------------------------------------------------

ID_COLUMNS = ("sequence_id", "source_id", "database_id", "subjective_score", "rating_std")


def _float_or_none(v):
    return None if v in (None, "") else float(v)


def read_subjective(path: str | Path) -> dict[str, dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or "sequence_id" not in rows[0] or "subjective_score" not in rows[0]:
        raise DataError(f"{path}: needs sequence_id and subjective_score columns")
    return {r["sequence_id"]: r for r in rows}


def read_prediction_columns(path: str | Path) -> dict[str, dict[str, float]]:
    """Metric columns of a prediction CSV: every column other than the id and score fields."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
        cols = [c for c in (reader.fieldnames or []) if c not in ID_COLUMNS]
    if not cols or "sequence_id" not in (reader.fieldnames or []):
        raise DataError(f"{path}: needs sequence_id and at least one prediction column")
    out = {}
    for c in cols:
        name = path.stem if c in ("score", "prediction") else c
        try:
            out[name] = {r["sequence_id"]: float(r[c]) for r in rows if r[c] != ""}
        except ValueError as exc:
            raise DataError(f"{path}: column {c!r}: {exc}") from None
    return out


def join_predictions(predictions: Mapping[str, Mapping[str, float]],
                     subjective: Mapping[str, dict]) -> tuple[dict[str, list[PredictionEntry]], list[str]]:
    """Join metric predictions to subjective rows on sequence id; returns entries and unmatched ids."""
    joined, missing = {}, set()
    for metric, preds in predictions.items():
        rows = []
        for sid, value in preds.items():
            s = subjective.get(sid)
            if s is None:
                missing.add(sid)
                continue
            try:
                score, spread = float(s["subjective_score"]), _float_or_none(s.get("rating_std"))
            except ValueError as exc:
                raise DataError(f"subjective row {sid}: {exc}") from None
            rows.append(PredictionEntry(sid, value, score, s.get("source_id", "") or "",
                                        s.get("database_id", "") or "", spread))
        missing |= set(subjective) - set(preds)
        joined[metric] = sorted(rows, key=lambda e: e.sequence_id)
    if missing:
        log.warning("excluding %d unjoinable sequence ids: %s", len(missing), sorted(missing)[:10])
    return joined, sorted(missing)
