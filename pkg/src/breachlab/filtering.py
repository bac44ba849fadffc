"""The loss-gap filter deployed next to a recovered model version.

For a query x, the filter takes the deployed version's predicted label,
computes the loss gap against every breached version (deployed loss minus
breached loss at that label), and flags the query when the maximum gap
reaches a threshold calibrated to a target false-positive rate on benign
validation data. Inputs crafted on breached versions overfit to them,
leaving a positive gap; benign inputs score near zero on well-trained
versions of the same architecture.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nnet
from .nnet import LossKind, MlpModel

MIN_CALIBRATION_SIZE = 100


@dataclass(frozen=True)
class FilterState:
    """Calibrated filter: the deployed model, the breached set, and T."""

    deployed: MlpModel
    breached: tuple[MlpModel, ...]
    threshold: float
    target_fpr: float
    calibration_size: int

    def validate(self) -> None:
        if not self.breached:
            raise ValueError("filter needs at least one breached version")
        if not math.isfinite(self.threshold):
            raise ValueError("filter threshold is not finite (uncalibrated state?)")


@dataclass(frozen=True)
class FilterVerdict:
    label: int
    delta_max: float
    flagged: bool
    label_mismatch: bool


def delta_max_batch(
    x: np.ndarray, deployed: MlpModel, breached: list[MlpModel] | tuple[MlpModel, ...]
) -> np.ndarray:
    """Max loss gap per row: deployed NLL minus the smallest breached NLL,
    both evaluated at the deployed model's predicted label."""
    if not breached:
        raise ValueError("breached list is empty")
    x = np.atleast_2d(np.asarray(x, dtype=float))
    labels = nnet.predict_batch(deployed, x)
    own = nnet.loss_batch(deployed, x, labels, LossKind.NEG_LOG_LIKELIHOOD)
    others = np.stack(
        [nnet.loss_batch(m, x, labels, LossKind.NEG_LOG_LIKELIHOOD) for m in breached]
    )
    return own - others.min(axis=0)


def delta_max(x: np.ndarray, deployed: MlpModel, breached) -> float:
    return float(delta_max_batch(x, deployed, breached)[0])


def quantile_ceil(values: np.ndarray, q: float) -> float:
    """Order statistic at 1-based index ceil(q * n) of the ascending sort.

    q = 1 returns the maximum; indices below 1 clamp to the minimum.
    """
    values = np.sort(np.asarray(values, dtype=float))
    n = len(values)
    if n == 0:
        raise ValueError("empty sample")
    idx = min(max(int(math.ceil(q * n)), 1), n)
    return float(values[idx - 1])


def calibrate(
    deployed: MlpModel,
    breached,
    benign_x: np.ndarray,
    target_fpr: float,
) -> FilterState:
    """Threshold at the (1 - target_fpr) quantile of benign loss gaps.

    target_fpr = 0 is allowed and uses the benign maximum as threshold.
    """
    if not 0.0 <= target_fpr < 0.5:
        raise ValueError(f"target_fpr must be in [0, 0.5), got {target_fpr}")
    benign_x = np.atleast_2d(np.asarray(benign_x, dtype=float))
    if len(benign_x) < MIN_CALIBRATION_SIZE:
        raise ValueError(
            f"calibration needs >= {MIN_CALIBRATION_SIZE} benign inputs, got {len(benign_x)}"
        )
    deltas = delta_max_batch(benign_x, deployed, breached)
    state = FilterState(
        deployed=deployed,
        breached=tuple(breached),
        threshold=quantile_ceil(deltas, 1.0 - target_fpr),
        target_fpr=target_fpr,
        calibration_size=len(benign_x),
    )
    state.validate()
    return state


def judge(x: np.ndarray, state: FilterState) -> FilterVerdict:
    """Pure verdict for one query under a calibrated filter state."""
    state.validate()
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[0] != 1:
        raise ValueError("judge takes a single input; use judge_batch for batches")
    label = int(nnet.predict_batch(state.deployed, x)[0])
    delta = float(delta_max_batch(x, state.deployed, state.breached)[0])
    mismatch = any(int(nnet.predict_batch(m, x)[0]) != label for m in state.breached)
    return FilterVerdict(
        label=label,
        delta_max=delta,
        flagged=delta >= state.threshold,
        label_mismatch=mismatch,
    )


def judge_batch(x: np.ndarray, state: FilterState):
    """Vectorised flags: returns (labels, deltas, flagged) arrays."""
    state.validate()
    x = np.atleast_2d(np.asarray(x, dtype=float))
    labels = nnet.predict_batch(state.deployed, x)
    deltas = delta_max_batch(x, state.deployed, state.breached)
    return labels, deltas, deltas >= state.threshold


def calibration_report(state: FilterState, benign_deltas: np.ndarray) -> dict:
    """JSON-ready calibration summary with a fixed-bin gap histogram.

    Bins are fixed at 0.25-wide steps over [-4, 4]; mass outside the range
    lands in the two unbounded edge bins.
    """
    edges = np.linspace(-4.0, 4.0, 33)
    deltas = np.asarray(benign_deltas, dtype=float)
    counts, _ = np.histogram(np.clip(deltas, -4.0, 4.0), bins=edges)
    return {
        "fpr_target": state.target_fpr,
        "threshold": state.threshold,
        "n_validation": int(state.calibration_size),
        "histogram": {
            "bin_edges": edges.tolist(),
            "counts": counts.tolist(),
        },
    }
