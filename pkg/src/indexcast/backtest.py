"""Chronological split plan, classification metrics, and backtest reporting.

The protocol is strictly walk-forward: the VAE trains on the earliest range,
the pooled classifier on the next, early stopping uses the validation range,
and metrics are reported on the test range plus named sub-periods sliced from
the same test-range predictions (no retraining per sub-period). The industry
benchmark predicts "up" every month.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import ProtocolError, ValidationError

BENCHMARK_NAME = "benchmark"
MODEL_NAME = "model"


@dataclass(frozen=True)
class MetricsRow:
    """Accuracy, macro-averaged F1, and Matthews correlation with raw counts."""

    acc: float
    f1_macro: float
    mcc: float
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def _f1(precision_num, precision_den, recall_num, recall_den) -> float:
    precision = precision_num / precision_den if precision_den else 0.0
    recall = recall_num / recall_den if recall_den else 0.0
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def compute_metrics(y_true, y_pred) -> MetricsRow:
    """Confusion-matrix metrics for 0/1 labels.

    F1 is the macro average over both classes; a class absent from truth and
    prediction alike contributes F1 = 0. MCC is defined as 0 whenever its
    denominator vanishes, so any constant predictor scores exactly 0.
    """
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if y_true.shape != y_pred.shape or y_true.ndim != 1 or len(y_true) == 0:
        raise ValidationError("y_true and y_pred must be equal-length, non-empty")
    for name, arr in (("y_true", y_true), ("y_pred", y_pred)):
        if not np.all(np.isin(arr, (0, 1))):
            raise ValidationError(f"{name} must contain only 0/1 labels")
    tp = int(np.sum((y_true == 1) & (y_pred == 1)))
    fp = int(np.sum((y_true == 0) & (y_pred == 1)))
    tn = int(np.sum((y_true == 0) & (y_pred == 0)))
    fn = int(np.sum((y_true == 1) & (y_pred == 0)))
    total = tp + fp + tn + fn
    acc = (tp + tn) / total
    f1_up = _f1(tp, tp + fp, tp, tp + fn)
    f1_down = _f1(tn, tn + fn, tn, tn + fp)
    den = (
        float(tp + fp) * float(tp + fn) * float(tn + fp) * float(tn + fn)
    )
    mcc = 0.0 if den == 0.0 else (tp * tn - fp * fn) / math.sqrt(den)
    return MetricsRow(
        acc=acc, f1_macro=(f1_up + f1_down) / 2.0, mcc=mcc,
        tp=tp, fp=fp, tn=tn, fn=fn,
    )


MonthRange = tuple[int, int]  # inclusive yyyymm bounds


def _check_range(name: str, rng: MonthRange) -> None:
    lo, hi = rng
    for v in (lo, hi):
        if not (190001 <= v <= 999912 and 1 <= v % 100 <= 12):
            raise ValidationError(f"{name}: '{v}' is not a yyyymm month key")
    if lo > hi:
        raise ValidationError(f"{name}: range {rng} is reversed")


@dataclass(frozen=True)
class SplitPlan:
    """Non-overlapping chronological ranges for every pipeline stage."""

    vae_train: MonthRange
    classifier_train: MonthRange
    validation: MonthRange
    test: MonthRange
    sub_periods: dict[str, MonthRange]

    def __post_init__(self):
        named = [
            ("vae_train", self.vae_train),
            ("classifier_train", self.classifier_train),
            ("validation", self.validation),
            ("test", self.test),
        ]
        for name, rng in named:
            _check_range(name, rng)
        for (a_name, a), (b_name, b) in zip(named, named[1:]):
            if a[1] >= b[0]:
                raise ValidationError(
                    f"{a_name} {a} must end before {b_name} {b} begins"
                )
        for name, rng in self.sub_periods.items():
            _check_range(f"sub-period '{name}'", rng)
            if rng[0] < self.test[0] or rng[1] > self.test[1]:
                raise ValidationError(
                    f"sub-period '{name}' {rng} must lie inside the test "
                    f"range {self.test}"
                )


def paper_split_plan() -> SplitPlan:
    """The documented full-history defaults."""
    return SplitPlan(
        vae_train=(197201, 199212),
        classifier_train=(199301, 200412),
        validation=(200501, 200612),
        test=(200701, 201812),
        sub_periods={
            "2007-08": (200701, 200812),
            "2011-12": (201101, 201212),
            "2015-16": (201501, 201612),
        },
    )


def fractional_split_plan(
    months,
    vae_frac: float = 0.40,
    train_frac: float = 0.35,
    val_frac: float = 0.08,
) -> SplitPlan:
    """Split an observed month-key sequence by fractions (synthetic runs).

    The remainder after vae/train/validation becomes the test range, with
    early / mid / late thirds as sub-periods.
    """
    months = np.unique(np.asarray(months, dtype=np.int64))
    n = len(months)
    if vae_frac + train_frac + val_frac >= 1.0:
        raise ValidationError("fractions must leave room for a test range")
    i1 = int(n * vae_frac)
    i2 = int(n * (vae_frac + train_frac))
    i3 = int(n * (vae_frac + train_frac + val_frac))
    if min(i1, i2 - i1, i3 - i2, n - i3) < 2:
        raise ValidationError(f"{n} months is too short for this split")
    test = months[i3:]
    thirds = np.array_split(test, 3)
    subs = {}
    for name, chunk in zip(("test-early", "test-mid", "test-late"), thirds):
        if len(chunk):
            subs[name] = (int(chunk[0]), int(chunk[-1]))
    return SplitPlan(
        vae_train=(int(months[0]), int(months[i1 - 1])),
        classifier_train=(int(months[i1]), int(months[i2 - 1])),
        validation=(int(months[i2]), int(months[i3 - 1])),
        test=(int(test[0]), int(test[-1])),
        sub_periods=subs,
    )


@dataclass
class BacktestReport:
    """Per-period metrics for one target, model vs always-up benchmark."""

    target: str
    periods: dict[str, dict[str, MetricsRow]]
    months: np.ndarray  # test-range months, ascending
    prob_up: np.ndarray
    pred: np.ndarray
    y_true: np.ndarray

    def to_dict(self) -> dict:
        def row(m: MetricsRow) -> dict:
            return {
                "acc": m.acc, "f1_macro": m.f1_macro, "mcc": m.mcc,
                "tp": m.tp, "fp": m.fp, "tn": m.tn, "fn": m.fn,
            }

        return {
            "target": self.target,
            "periods": {
                period: {name: row(m) for name, m in rows.items()}
                for period, rows in self.periods.items()
            },
            "months": [int(m) for m in self.months],
            "prob_up": [float(p) for p in self.prob_up],
            "pred": [int(p) for p in self.pred],
            "y_true": [int(y) for y in self.y_true],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def to_text(self) -> str:
        lines = [f"Target index: {self.target}"]
        header = f"{'period':<14}{'predictor':<12}{'ACC':>8}{'F1':>8}{'MCC':>8}{'n':>6}"
        for period, rows in self.periods.items():
            lines.append("")
            lines.append(f"-- {period} --")
            lines.append(header)
            for name in (BENCHMARK_NAME, MODEL_NAME):
                m = rows[name]
                lines.append(
                    f"{period:<14}{name:<12}{m.acc:>8.3f}{m.f1_macro:>8.3f}"
                    f"{m.mcc:>8.3f}{m.total:>6d}"
                )
        return "\n".join(lines) + "\n"


def _require_subset(name: str, months: MonthRange | None, rng: MonthRange):
    if months is None:
        return
    if months[0] < rng[0] or months[1] > rng[1]:
        raise ProtocolError(
            f"{name} was trained on months {months}, outside its designated "
            f"range {rng}"
        )


def audit_artifacts(artifacts, plan: SplitPlan) -> None:
    """Timestamp audit: every stage trained strictly inside its range."""
    _require_subset("VAE", artifacts.vae_report.train_months, plan.vae_train)
    gm = artifacts.global_model
    _require_subset("global classifier", gm.train_months, plan.classifier_train)
    _require_subset("global classifier validation", gm.valid_months,
                    plan.validation)
    for target, model in artifacts.target_models.items():
        _require_subset(f"fine-tuned model '{target}'", model.train_months,
                        plan.classifier_train)
        _require_subset(f"fine-tuned model '{target}' validation",
                        model.valid_months, plan.validation)
    if len(artifacts.examples) and \
            int(artifacts.examples.month.min()) <= plan.vae_train[1]:
        raise ProtocolError(
            "classifier examples overlap the VAE training range"
        )


def run_backtest(artifacts, plan: SplitPlan, target: str) -> BacktestReport:
    """Score the fine-tuned target model and the always-up benchmark.

    Sub-period rows slice the single set of test-range predictions; nothing
    is retrained per period.
    """
    audit_artifacts(artifacts, plan)
    if target not in artifacts.target_models:
        raise ValidationError(f"no fine-tuned model for target '{target}'")
    model = artifacts.target_models[target]
    test = artifacts.examples.select_months(*plan.test)
    mask = test.index_id == target
    if not mask.any():
        raise ValidationError(
            f"no test-range examples for target '{target}'"
        )
    X, y, months = test.X[mask], test.y[mask], test.month[mask]
    order = np.argsort(months, kind="stable")
    X, y, months = X[order], y[order], months[order]
    prob, pred = model.predict(X)

    periods: dict[str, dict[str, MetricsRow]] = {}
    ranges = {"test": plan.test, **plan.sub_periods}
    for name, rng in ranges.items():
        sel = (months >= rng[0]) & (months <= rng[1])
        if not sel.any():
            continue
        periods[name] = {
            MODEL_NAME: compute_metrics(y[sel], pred[sel]),
            BENCHMARK_NAME: compute_metrics(y[sel], np.ones(int(sel.sum()),
                                                            dtype=np.int64)),
        }
    return BacktestReport(
        target=target, periods=periods, months=months,
        prob_up=prob, pred=pred, y_true=y,
    )


def predictions_to_csv(report: BacktestReport, path) -> None:
    """Write the documented `month,index_id,prob_up,label` prediction file."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("month,index_id,prob_up,label\n")
        for month, prob, pred in zip(report.months, report.prob_up, report.pred):
            fh.write(f"{int(month)},{report.target},{float(prob)!r},{int(pred)}\n")
