"""Confusion tallies, the four classification metrics, and a
catastrophic-forgetting measure.

Zero-denominator metrics are defined as 0.0 and flagged as degenerate rather
than raising, so reports never silently divide by zero.
"""

from __future__ import annotations

from dataclasses import dataclass

from .exceptions import ParameterError, ShapeError

METRIC_CSV_HEADER = "increment,domain,class,accuracy,tpr,ppv,f1,forgetting"


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    def __post_init__(self):
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise ParameterError("confusion counts must be nonnegative")

    @property
    def total(self):
        return self.tp + self.tn + self.fp + self.fn

    def __add__(self, other):
        return ConfusionCounts(
            self.tp + other.tp, self.tn + other.tn, self.fp + other.fp, self.fn + other.fn
        )


def tally(predictions, truths, class_set):
    """One-vs-rest ConfusionCounts per class, plus a micro aggregate under
    key 'micro'."""
    if len(predictions) != len(truths):
        raise ShapeError(
            f"{len(predictions)} predictions vs {len(truths)} truths"
        )
    classes = sorted(class_set)
    allowed = set(classes)
    for v in list(predictions) + list(truths):
        if v not in allowed:
            raise ParameterError(f"label {v} outside the declared class set")
    out = {}
    micro = ConfusionCounts()
    for c in classes:
        tp = sum(1 for p, t in zip(predictions, truths) if p == c and t == c)
        fp = sum(1 for p, t in zip(predictions, truths) if p == c and t != c)
        fn = sum(1 for p, t in zip(predictions, truths) if p != c and t == c)
        tn = len(truths) - tp - fp - fn
        out[c] = ConfusionCounts(tp=tp, tn=tn, fp=fp, fn=fn)
        micro = micro + out[c]
    out["micro"] = micro
    return out


def _ratio(num, den):
    return (num / den, False) if den > 0 else (0.0, True)


def accuracy(c: ConfusionCounts):
    return _ratio(c.tp + c.tn, c.total)[0]


def tpr(c: ConfusionCounts):
    return _ratio(c.tp, c.tp + c.fn)[0]


def ppv(c: ConfusionCounts):
    return _ratio(c.tp, c.tp + c.fp)[0]


def f1(c: ConfusionCounts):
    return f1_from_rates(tpr(c), ppv(c))


def f1_from_rates(tpr_value, ppv_value):
    """Harmonic mean of TPR and PPV."""
    if tpr_value + ppv_value == 0:
        return 0.0
    return 2.0 * tpr_value * ppv_value / (tpr_value + ppv_value)


def is_degenerate(c: ConfusionCounts, metric):
    """True when the named metric's denominator is zero for these counts."""
    dens = {
        "accuracy": c.total,
        "tpr": c.tp + c.fn,
        "ppv": c.tp + c.fp,
        "f1": tpr(c) + ppv(c),
    }
    if metric not in dens:
        raise ParameterError(f"unknown metric {metric!r}")
    return dens[metric] == 0


def per_class_accuracy(predictions, truths, class_set):
    """Fraction of each class's own samples that were predicted correctly
    (one number per class; the forgetting measure consumes these)."""
    counts = tally(predictions, truths, class_set)
    return {c: tpr(counts[c]) for c in sorted(class_set)}


def overall_accuracy(predictions, truths):
    """Plain multiclass accuracy: fraction of samples predicted correctly."""
    if len(predictions) != len(truths):
        raise ShapeError(f"{len(predictions)} predictions vs {len(truths)} truths")
    if len(truths) == 0:
        return 0.0
    return sum(1 for p, t in zip(predictions, truths) if p == t) / len(truths)


def forgetting(before, after):
    """Mean over old classes of max(0, accuracy before - accuracy after)."""
    if not before:
        raise ParameterError("forgetting needs at least one old class")
    if set(before) != set(after):
        raise ParameterError("before/after class sets differ")
    drops = [max(0.0, before[c] - after[c]) for c in before]
    return sum(drops) / len(drops)


def metric_row(increment, domain, class_id, counts, forgetting_value=""):
    """One CSV row matching METRIC_CSV_HEADER."""
    return (
        f"{increment},{domain},{class_id},"
        f"{accuracy(counts):.6f},{tpr(counts):.6f},{ppv(counts):.6f},{f1(counts):.6f},"
        f"{forgetting_value}"
    )
