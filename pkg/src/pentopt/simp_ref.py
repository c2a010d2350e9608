"""Conventional SIMP topology optimizer (88-line style).

Optimality-criteria update with bisection on the Lagrange multiplier and a
density filter. Shares the element stiffness and assembly code of
:mod:`pentopt.fem`, so compliance values are directly comparable with the
neural predictor's evaluations. Used as validation oracle and dataset
generator; it is deterministic for fixed inputs.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np
import scipy.sparse

from . import fem
from .domain import BoundaryConditionSet, DensityField, InputSample, Level
from .trainer import random_sample


@dataclass
class SimpConfig:
    p: float = 3.0
    r_min: float = 3.0
    E: float = 195000.0
    nu: float = 0.3
    x_min: float = 0.001
    move: float = 0.2
    max_iterations: int = 200
    change_tol: float = 0.01


@dataclass
class SimpResult:
    field: DensityField
    compliance: float
    iterations: int
    converged: bool


def density_filter_matrix(d: int, r_min: float) -> scipy.sparse.csr_array:
    """Row-normalized linear 'hat' filter within radius r_min.

    Each filtered density is a convex combination of the neighbors within
    the radius (weights max(0, r_min - dist), rows summing to one). Element
    order is column-major to match the density vector layout.
    """
    e = np.arange(d * d)
    rows_i = e % d
    cols_j = e // d
    r_ceil = int(np.ceil(r_min)) - 1
    data, rows, cols = [], [], []
    offsets = [
        (di, dj)
        for di in range(-r_ceil, r_ceil + 1)
        for dj in range(-r_ceil, r_ceil + 1)
        if np.sqrt(di * di + dj * dj) < r_min
    ]
    for di, dj in offsets:
        ni = rows_i + di
        nj = cols_j + dj
        ok = (ni >= 0) & (ni < d) & (nj >= 0) & (nj < d)
        w = r_min - np.sqrt(di * di + dj * dj)
        rows.append(e[ok])
        cols.append((ni + d * nj)[ok])
        data.append(np.full(ok.sum(), w))
    h = scipy.sparse.csr_array(
        (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
        shape=(d * d, d * d),
    )
    row_sums = np.asarray(h.sum(axis=1)).ravel()
    inv = scipy.sparse.diags_array(1.0 / row_sums)
    return (inv @ h).tocsr()


def _oc_update(x, dc, dv, volfrac, move, x_min, h):
    """Optimality-criteria step with bisection on the volume multiplier."""
    n = x.size
    l1, l2 = 0.0, 1e9
    x_new = x
    while (l2 - l1) / max(l1 + l2, 1e-30) > 1e-6:
        lmid = 0.5 * (l1 + l2)
        cand = x * np.sqrt(np.maximum(-dc, 0.0) / dv / lmid)
        cand = np.clip(cand, x - move, x + move)
        x_new = np.clip(cand, x_min, 1.0)
        x_phys = h @ x_new
        if x_phys.sum() > volfrac * n:
            l1 = lmid
        else:
            l2 = lmid
    return x_new, h @ x_new


def optimize(bc: BoundaryConditionSet, volfrac: float, level: Level,
             cfg: SimpConfig | None = None) -> SimpResult:
    """Minimize compliance at the given volume fraction on a d x d mesh."""
    cfg = cfg or SimpConfig()
    if not 0.0 < volfrac <= 1.0:
        raise ValueError(f"volume fraction {volfrac} outside (0, 1]")
    d = level.d
    prob = fem.FemProblem(level, bc, penal=cfg.p, E=cfg.E, nu=cfg.nu,
                          x_min=cfg.x_min)
    h = density_filter_matrix(d, cfg.r_min)
    ht = h.T.tocsr()
    x = np.full(d * d, volfrac)
    x_phys = h @ x
    compliance = np.inf
    it = 0
    converged = False
    for it in range(1, cfg.max_iterations + 1):
        x_phys = np.clip(x_phys, cfg.x_min, 1.0)
        res = fem.solve_compliance(x_phys, prob=prob)
        compliance = res.c
        # chain rule through the density filter
        dc = ht @ res.dc_dx
        dv = ht @ np.ones(d * d)
        if volfrac >= 1.0:
            x_new = np.ones(d * d)
            x_phys = np.ones(d * d)
        else:
            x_new, x_phys = _oc_update(x, dc, dv, volfrac, cfg.move, cfg.x_min, h)
        change = np.max(np.abs(x_new - x))
        x = x_new
        if change < cfg.change_tol:
            converged = True
            break
    x_phys = np.clip(x_phys, cfg.x_min, 1.0)
    final = fem.solve_compliance(x_phys, prob=prob)
    return SimpResult(
        field=DensityField(level, x_phys),
        compliance=final.c,
        iterations=it,
        converged=converged,
    )


# -- validation dataset -------------------------------------------------------


def generate_validation_set(n: int, seed: int, level: Level,
                            cfg: SimpConfig | None = None,
                            force_mag: float = 100.0):
    """Generate n (input, optimized geometry, compliance) records.

    Failed optimizations are replaced by fresh samples so the count is
    preserved; replacements are reported in the returned metadata.
    """
    if n < 1:
        raise ValueError(f"need at least one sample, got n = {n}")
    cfg = cfg or SimpConfig()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    records = []
    replacements = 0
    while len(records) < n:
        sample = random_sample(rng, level.d_inp, force_mag)
        try:
            result = optimize(sample.bc, sample.m_tar, level, cfg)
        except fem.SolverError:
            replacements += 1
            continue
        records.append((sample, result.field, result.compliance, result.iterations))
    return records, {"seed": seed, "replacements": replacements}


def save_validation_set(records, meta: dict, path: str):
    """JSON-lines interchange format: one record per line."""
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        for sample, fld, c, iters in records:
            fh.write(json.dumps({
                "rk": sample.bc.rk_vector().tolist(),
                "rs": sample.bc.rs_vector().tolist(),
                "m_tar": sample.m_tar,
                "level": fld.level.lam,
                "d_inp": fld.level.d_inp,
                "x": fld.x.tolist(),
                "c": c,
                "iterations": iters,
                "seed": meta["seed"],
            }) + "\n")
    os.replace(tmp, path)


def load_validation_set(path: str):
    """Inverse of :func:`save_validation_set`."""
    from .domain import reshape_to_matrix

    records = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            d_inp = int(rec["d_inp"])
            m = d_inp + 1
            rk = np.asarray(rec["rk"])
            rs = np.asarray(rec["rs"])
            half = m * m
            bc = BoundaryConditionSet(
                rkx=reshape_to_matrix(rk[:half]).astype(bool),
                rky=reshape_to_matrix(rk[half:]).astype(bool),
                rsx=reshape_to_matrix(rs[:half]),
                rsy=reshape_to_matrix(rs[half:]),
            )
            level = Level(int(rec["level"]), d_inp)
            fld = DensityField(level, np.asarray(rec["x"], dtype=float))
            records.append(
                (InputSample(bc=bc, m_tar=float(rec["m_tar"])), fld,
                 float(rec["c"]), int(rec["iterations"]))
            )
    return records
