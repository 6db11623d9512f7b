"""Session-level scores from window predictions.

Window probabilities are hard-thresholded into competence indicators, then
accumulated per session (count or fraction). A fitted aggregator maps the
accumulated value to the session label, either by thresholding at the
training mean or with a one-dimensional logistic model.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import classify
from .errors import DegenerateTrainingError, EmptySessionError, ValidationError

ACC_SUM = "sum"
ACC_AVG = "avg"
ACCUMULATORS = (ACC_SUM, ACC_AVG)

AGG_TRAINING_MEAN = "TM"
AGG_LOGISTIC = "LR"
AGGREGATORS = (AGG_TRAINING_MEAN, AGG_LOGISTIC)


@dataclass(frozen=True)
class SessionScore:
    session_id: str
    accumulator: str
    value: float
    n_windows: int


@dataclass(frozen=True)
class Aggregator:
    """Maps an accumulated session value to a binary label."""

    kind: str
    accumulator: str
    mean: float | None = None
    weight: float | None = None
    bias: float | None = None


def accumulate(
    window_preds,
    accumulator: str,
    threshold: float = 0.5,
    session_id: str = "",
    soft: bool = False,
) -> SessionScore:
    """Accumulate window probabilities into one session value.

    "sum" counts windows at or above the threshold, "avg" divides that count
    by the window count. With soft=True raw probabilities are summed instead
    of thresholded indicators.
    """
    probs = np.asarray(window_preds, dtype=float)
    if probs.size == 0:
        raise EmptySessionError("no window predictions to accumulate")
    if accumulator not in ACCUMULATORS:
        raise ValidationError(f"accumulator must be one of {ACCUMULATORS}, got {accumulator!r}")
    mass = probs.sum() if soft else float((probs >= threshold).sum())
    value = mass / probs.size if accumulator == ACC_AVG else float(mass)
    return SessionScore(session_id, accumulator, float(value), int(probs.size))


def fit_aggregator(kind: str, train_scores, train_labels) -> Aggregator:
    """Fit a session-level decision rule on training accumulated values."""
    if kind not in AGGREGATORS:
        raise ValidationError(f"aggregator must be one of {AGGREGATORS}, got {kind!r}")
    scores = list(train_scores)
    if not scores:
        raise ValidationError("need at least one training session score")
    accs = {s.accumulator for s in scores}
    if len(accs) != 1:
        raise ValidationError(f"mixed accumulators in training scores: {sorted(accs)}")
    accumulator = scores[0].accumulator
    values = np.array([s.value for s in scores])
    if kind == AGG_TRAINING_MEAN:
        return Aggregator(kind, accumulator, mean=float(values.mean()))
    labels = np.asarray(train_labels, dtype=int)
    if not (np.any(labels == 0) and np.any(labels == 1)):
        raise DegenerateTrainingError("logistic aggregator needs both labels in training")
    model = classify.train(
        classify.ModelSpec(kind=classify.LR), values[:, None], labels
    )
    return Aggregator(
        kind,
        accumulator,
        weight=float(model.params["weights"][0]),
        bias=float(model.params["bias"][0]),
    )


def predict_session(agg: Aggregator, score: SessionScore) -> int:
    """Session label from an accumulated value; mean threshold is inclusive."""
    if score.accumulator != agg.accumulator:
        raise ValidationError(
            f"score accumulated with {score.accumulator!r} but aggregator "
            f"was fit on {agg.accumulator!r}"
        )
    if agg.kind == AGG_TRAINING_MEAN:
        return int(score.value >= agg.mean)
    z = agg.weight * score.value + agg.bias
    return int(z >= 0.0)


def trajectory(window_preds, threshold: float = 0.5) -> list[tuple[int, int]]:
    """Running count of competent windows, one point per window in order."""
    probs = np.asarray(window_preds, dtype=float)
    if probs.size == 0:
        raise EmptySessionError("no window predictions for trajectory")
    running = np.cumsum(probs >= threshold)
    return list(enumerate(int(v) for v in running))
