"""Accuracy indicators for predicted vs conventionally optimized geometries,
plus the computing-time / break-even analysis.

Within one geometry pair the element count is the averaging denominator of
mse/mae/kappa_0.01; the outer mean over the validation set is taken by
:func:`kappa` and the report aggregation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .domain import DensityField


def _pair(xp, xv):
    xp = xp.x if isinstance(xp, DensityField) else np.asarray(xp, dtype=float)
    xv = xv.x if isinstance(xv, DensityField) else np.asarray(xv, dtype=float)
    if xp.shape != xv.shape:
        raise ValueError(f"geometry shapes differ: {xp.shape} vs {xv.shape}")
    return xp, xv


def mse(xp, xv) -> float:
    xp, xv = _pair(xp, xv)
    return float(np.mean((xp - xv) ** 2))


def mae(xp, xv) -> float:
    xp, xv = _pair(xp, xv)
    return float(np.mean(np.abs(xp - xv)))


def kappa001(xp, xv, tol: float = 0.01) -> float:
    """Fraction of elements with |density difference| <= tol.

    The boundary |delta| = tol counts as inside (Heaviside(0) = 1).
    """
    xp, xv = _pair(xp, xv)
    return float(np.mean(np.abs(xp - xv) <= tol + 1e-15))


def kappa_pair(xp, xv) -> float:
    return ((1.0 - mse(xp, xv)) + (1.0 - mae(xp, xv)) + kappa001(xp, xv)) / 3.0


def kappa(pairs) -> float:
    """Mean over pairs of (1/3)[(1-mse) + (1-mae) + kappa_0.01]."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("empty pair list")
    return float(np.mean([kappa_pair(xp, xv) for xp, xv in pairs]))


def break_even(training_seconds: float, predict_seconds: float,
               conventional_seconds: float) -> float:
    """Number of predictions at which total times of both methods coincide."""
    if conventional_seconds <= predict_seconds:
        raise ValueError(
            "break-even never reached: conventional optimization "
            f"({conventional_seconds} s) is not slower than a prediction "
            f"({predict_seconds} s)"
        )
    return training_seconds / (conventional_seconds - predict_seconds)


def amortized_prediction_time(training_seconds: float, predict_seconds: float,
                              n_predictions: float) -> float:
    """Per-geometry time including the training share over n predictions."""
    if n_predictions <= 0:
        raise ValueError("n_predictions must be positive")
    return training_seconds / n_predictions + predict_seconds


@dataclass
class ComparisonReport:
    """Per-sample indicators and their aggregates over a validation set."""

    mse_values: list = field(default_factory=list)
    mae_values: list = field(default_factory=list)
    kappa001_values: list = field(default_factory=list)
    compliance_ratios: list = field(default_factory=list)
    predict_seconds: list = field(default_factory=list)

    def add(self, xp, xv, c_pred: float | None = None, c_ref: float | None = None,
            seconds: float | None = None):
        self.mse_values.append(mse(xp, xv))
        self.mae_values.append(mae(xp, xv))
        self.kappa001_values.append(kappa001(xp, xv))
        if c_pred is not None and c_ref is not None and c_ref > 0:
            self.compliance_ratios.append(c_pred / c_ref)
        if seconds is not None:
            self.predict_seconds.append(seconds)

    @property
    def n(self) -> int:
        return len(self.mse_values)

    @property
    def kappa(self) -> float:
        per_pair = (
            (1.0 - np.asarray(self.mse_values))
            + (1.0 - np.asarray(self.mae_values))
            + np.asarray(self.kappa001_values)
        ) / 3.0
        return float(per_pair.mean())

    def summary(self) -> dict:
        def agg(values):
            arr = np.asarray(values, dtype=float)
            return {"mean": float(arr.mean()), "sd": float(arr.std(ddof=0))}

        if self.n == 0:
            raise ValueError("empty report")
        out = {
            "n": self.n,
            "mse": agg(self.mse_values),
            "mae": agg(self.mae_values),
            "kappa001": agg(self.kappa001_values),
            "kappa": self.kappa,
        }
        if self.compliance_ratios:
            out["compliance_ratio"] = agg(self.compliance_ratios)
        if self.predict_seconds:
            out["predict_seconds"] = agg(self.predict_seconds)
        return out

    def to_json(self) -> str:
        return json.dumps(self.summary(), indent=2)

    def to_table(self) -> str:
        s = self.summary()
        lines = [
            f"{'':8s} {'mse':>10s} {'mae':>10s} {'kappa001':>10s} {'kappa':>10s}",
            (f"{'mean':8s} {s['mse']['mean']:10.4f} {s['mae']['mean']:10.4f} "
             f"{s['kappa001']['mean']:10.4f} {s['kappa']:10.4f}"),
            (f"{'sd':8s} {s['mse']['sd']:10.4f} {s['mae']['sd']:10.4f} "
             f"{s['kappa001']['sd']:10.4f} {'':>10s}"),
        ]
        if "compliance_ratio" in s:
            cr = s["compliance_ratio"]
            lines.append(
                f"compliance ratio c_pred/c_ref: mean {cr['mean']:.4f} "
                f"sd {cr['sd']:.4f}"
            )
        return "\n".join(lines)
