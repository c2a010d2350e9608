"""Differentiable scoring of predicted geometries.

Four losses per geometry: FEM compliance c, fill-degree deviation M,
checkerboard filter F and uncertainty P, combined multiplicatively by the
quality function and averaged over a batch into the training objective J.

Every function accepts either plain numpy arrays (returning numpy values)
or autodiff tensors (extending the computation graph), so the training
path and the reporting path share one implementation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import fem
from .domain import DensityField

F_K_DEFAULT = 3.0
SIGMA2_DEFAULT = 0.05

# checkerboard detection kernel: responds to alternating-parity density
CHECKERBOARD_KERNEL = 0.25 * np.array(
    [[1.0, -1.0, 1.0], [-1.0, 0.0, -1.0], [1.0, -1.0, 1.0]]
)


@dataclass
class QualityCoefficients:
    alpha: float = 2.0
    beta: float = 5.0
    gamma: float = 1.0
    delta: float = 1.0
    f_k: float = F_K_DEFAULT
    sigma2: float = SIGMA2_DEFAULT


@dataclass
class EvaluatorLosses:
    c: float
    m: float
    f: float
    p_unc: float


def _as_batch(x):
    """Normalize input to a (batch, d^2) tensor/array; report if it was single."""
    if isinstance(x, DensityField):
        return x.x[None, :], True
    if isinstance(x, ad.Tensor):
        if x.data.ndim == 1:
            return x.reshape(1, x.data.size), True
        return x, False
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return x[None, :], True
    return x, False


def _maybe_scalar(v, single: bool):
    if not single:
        return v
    if isinstance(v, ad.Tensor):
        return v.reshape(())
    return float(v[0])


def fill_deviation(x, m_tar):
    """|Mtar - mean(x)| per geometry."""
    xb, single = _as_batch(x)
    m_tar = np.asarray(m_tar, dtype=float)
    if np.any(m_tar < 0) or np.any(m_tar > 1):
        raise ValueError("target fill degree outside [0, 1]")
    dev = ad.absolute(ad.mean(xb, axis=1) - m_tar)
    return _maybe_scalar(dev, single)


def _to_maps(xb):
    """(b, d^2) column-major vectors -> (b, d, d, 1) row/col maps."""
    b, n = (xb.shape if isinstance(xb, ad.Tensor) else xb.shape)
    d = int(round(np.sqrt(n)))
    if d * d != n:
        raise ValueError(f"geometry length {n} is not a perfect square")
    if isinstance(xb, ad.Tensor):
        return xb.reshape(b, d, d).transpose((0, 2, 1)).reshape(b, d, d, 1), d
    return xb.reshape(b, d, d).transpose((0, 2, 1)).reshape(b, d, d, 1), d


def checkerboard_loss(x, f_k: float = F_K_DEFAULT, per_term_abs: bool = False):
    """Checkerboard penalty in [0, 1].

    Default: V = |X_M * H| per valid window (signed convolution, zero for
    uniform fields). With ``per_term_abs`` the absolute value is applied to
    each kernel tap instead, which for non-negative densities equals
    convolution with |H| and is nonzero even for uniform fields.
    """
    xb, single = _as_batch(x)
    maps, d = _to_maps(xb)
    if d < 3:
        raise ValueError(f"checkerboard filter needs d >= 3, got d = {d}")
    kernel = np.abs(CHECKERBOARD_KERNEL) if per_term_abs else CHECKERBOARD_KERNEL
    kt = ad.Tensor(kernel.reshape(3, 3, 1, 1))
    if isinstance(maps, ad.Tensor):
        v = ad.conv2d(maps, kt, padding="valid")
        if not per_term_abs:
            v = v.abs()
        vbar = v.mean(axis=(1, 2, 3))
        loss = (ad.exp(vbar * f_k) - 1.0) * (1.0 / (np.exp(f_k) - 1.0))
    else:
        v = ad.conv2d(ad.Tensor(maps), kt, padding="valid").data[..., 0]
        if not per_term_abs:
            v = np.abs(v)
        vbar = v.mean(axis=(1, 2))
        loss = np.expm1(vbar * f_k) / np.expm1(f_k)
    return _maybe_scalar(loss, single)


def uncertainty_loss(x, sigma2: float = SIGMA2_DEFAULT):
    """Mean of exp(-(x - 1/2)^2 / (2 sigma^2)); 1 for the all-0.5 field."""
    if sigma2 <= 0:
        raise ValueError(f"sigma2 must be positive, got {sigma2}")
    xb, single = _as_batch(x)
    scale = -1.0 / (2.0 * sigma2)
    p = ad.mean(ad.exp((xb - 0.5) ** 2 * scale), axis=1)
    return _maybe_scalar(p, single)


def quality(c, m=None, f=None, p_unc=None, coeff: QualityCoefficients | None = None):
    """f_Q = (alpha c + 1)(beta M + 1)(gamma F + 1)(delta P + 1).

    Accepts either an :class:`EvaluatorLosses` as the first argument or the
    four losses separately (scalars, arrays or tensors).
    """
    if isinstance(c, EvaluatorLosses):
        losses = c
        c, m, f, p_unc = losses.c, losses.m, losses.f, losses.p_unc
    coeff = coeff or QualityCoefficients()
    return (
        (c * coeff.alpha + 1.0)
        * (m * coeff.beta + 1.0)
        * (f * coeff.gamma + 1.0)
        * (p_unc * coeff.delta + 1.0)
    )


def batch_objective(qualities):
    """Arithmetic mean of per-geometry quality values."""
    if isinstance(qualities, ad.Tensor):
        if qualities.data.size == 0:
            raise ValueError("empty batch")
        return qualities.mean()
    q = np.asarray([float(v) for v in qualities]) if isinstance(
        qualities, (list, tuple)
    ) else np.asarray(qualities, dtype=float)
    if q.size == 0:
        raise ValueError("empty batch")
    return float(q.mean())


def compliance(x, problems: Sequence[fem.FemProblem]):
    """Batched FEM compliance, differentiable via the analytic sensitivity.

    ``x`` is a (b, d^2) tensor/array of densities already inside [x_min, 1];
    ``problems`` holds one prepared :class:`fem.FemProblem` per batch item.
    """
    xb, single = _as_batch(x)
    data = xb.data if isinstance(xb, ad.Tensor) else xb
    b = data.shape[0]
    if len(problems) != b:
        raise ValueError(f"{len(problems)} problems for batch of {b}")
    cs = np.empty(b)
    dcs = np.empty_like(data, dtype=float)
    for i in range(b):
        res = fem.solve_compliance(np.asarray(data[i], dtype=float), prob=problems[i])
        cs[i] = res.c
        dcs[i] = res.dc_dx

    if isinstance(xb, ad.Tensor):
        out = ad.custom_node([xb], cs, lambda g: [g[:, None] * dcs])
        return _maybe_scalar(out, single)
    return _maybe_scalar(cs, single)
