"""Scikit-learn style front end.

`PenTopologyOptimizer` is a fit/predict estimator: `fit` runs the
self-supervised training (no target data is needed or accepted), `predict`
maps input samples to density fields. `SimpReferenceOptimizer` wraps the
conventional optimizer behind the same predict-shaped surface so the two
can be swapped inside pipelines and comparisons.
"""

from __future__ import annotations

import dataclasses

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .domain import InputSample, Level
from .predictor import Predictor, load_model
from .simp_ref import SimpConfig, optimize
from .trainer import TrainingConfig, train


def _check_samples(X) -> list[InputSample]:
    if isinstance(X, InputSample):
        return [X]
    samples = list(X)
    if not samples:
        raise ValueError("no input samples given")
    for i, s in enumerate(samples):
        if not isinstance(s, InputSample):
            raise TypeError(f"item {i} is {type(s).__name__}, expected InputSample")
    return samples


class PenTopologyOptimizer(BaseEstimator):
    """Self-supervised neural topology optimizer with a fit/predict API.

    Parameters mirror :class:`pentopt.trainer.TrainingConfig`; `get_params`
    and `set_params` work as usual for scikit-learn estimators.
    """

    def __init__(self, **config):
        known = {f.name for f in dataclasses.fields(TrainingConfig)}
        unknown = set(config) - known
        if unknown:
            raise ValueError(f"unknown config key: {sorted(unknown)[0]}")
        self.config = config
        self.predictor_: Predictor | None = None
        self.history_ = None

    def get_params(self, deep=True):
        return dict(self.config)

    def set_params(self, **params):
        self.config.update(params)
        return self

    def fit(self, X=None, y=None, out_dir=None):
        """Train from random inputs. X and y are ignored (self-supervised)."""
        cfg = TrainingConfig(**self.config)
        result = train(cfg, out_dir=out_dir)
        self.predictor_ = result.predictor
        self.history_ = result.history
        return self

    @classmethod
    def from_model_file(cls, path: str) -> "PenTopologyOptimizer":
        est = cls()
        est.predictor_ = load_model(path)
        return est

    def _require_fitted(self) -> Predictor:
        if self.predictor_ is None:
            raise NotFittedError(
                "PenTopologyOptimizer is not fitted; call fit() or load a model"
            )
        return self.predictor_

    def predict(self, X, level: int | None = None):
        """Density vectors, shape (n_samples, d^2), for the given level."""
        predictor = self._require_fitted()
        samples = _check_samples(X)
        level = level if level is not None else predictor.arch.levels
        return np.stack(
            [predictor.predict(s, level).x for s in samples]
        )

    def predict_fields(self, X, level: int | None = None):
        predictor = self._require_fitted()
        samples = _check_samples(X)
        level = level if level is not None else predictor.arch.levels
        return [predictor.predict(s, level) for s in samples]


class SimpReferenceOptimizer(BaseEstimator):
    """Conventional SIMP optimizer behind the same predict-shaped surface."""

    def __init__(self, level: int = 1, d_inp: int = 8, **config):
        known = {f.name for f in dataclasses.fields(SimpConfig)}
        unknown = set(config) - known
        if unknown:
            raise ValueError(f"unknown config key: {sorted(unknown)[0]}")
        self.level = level
        self.d_inp = d_inp
        self.config = config

    def fit(self, X=None, y=None):
        # nothing to learn; present for pipeline compatibility
        return self

    def predict(self, X):
        samples = _check_samples(X)
        cfg = SimpConfig(**self.config)
        lvl = Level(self.level, self.d_inp)
        return np.stack(
            [optimize(s.bc, s.m_tar, lvl, cfg).field.x for s in samples]
        )
