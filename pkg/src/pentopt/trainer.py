"""Self-supervised training loop: random inputs, batch objective, Adam,
patience-based convergence and the multi-resolution level curriculum.

No pre-optimized geometries are used anywhere: every batch draws fresh
random boundary conditions and target fill degrees, the predictor proposes
geometries, and the differentiable evaluators score them.
"""

from __future__ import annotations

import csv
import json
import math
import os
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from . import evaluators, fem
from .autodiff import TrainingError
from .domain import BoundaryConditionSet, InputSample, Level
from .evaluators import QualityCoefficients
from .predictor import ArchitectureConfig, Predictor, load_model, save_model


@dataclass
class TrainingConfig:
    # quality function coefficients
    alpha: float = 2.0
    beta: float = 5.0
    gamma: float = 1.0
    delta: float = 1.0
    f_k: float = 3.0
    sigma2: float = 0.05
    # curriculum / optimization
    zeta_max: int = 1000
    eta0: float = 0.01
    # linear learning-rate ramp over the first N batches of each level; 0
    # disables it. With the strain-energy skip the network starts close to a
    # usable structure, and full-rate updates in the first batches mostly
    # inject conv noise into that prior before settling
    warmup_batches: int = 0
    batch_sizes: tuple = (128, 64, 32, 16)
    max_level: int = 4
    seed: int = 0
    # architecture
    d_inp: int = 8
    levels: int = 4
    channels: int = 64
    kernel_size: int = 3
    l1_depth: int = 2
    strain_input: bool = False
    trunk_widths: tuple | None = None
    dtype: str = "float32"
    # physics
    E: float = 195000.0
    nu: float = 0.3
    p: float = 3.0
    x_min: float = 0.001
    force_mag: float = 100.0
    r_min: float = 3.0  # used by the conventional reference optimizer
    # random input grid for the target fill degree
    m_tar_min: float = 0.2
    m_tar_max: float = 0.8
    m_tar_step: float = 0.01
    # plumbing
    per_term_abs_filter: bool = False
    max_batches_per_level: int | None = None
    checkpoint_every: int | None = None

    def __post_init__(self):
        self.batch_sizes = tuple(int(b) for b in self.batch_sizes)
        if self.trunk_widths is not None:
            self.trunk_widths = tuple(int(w) for w in self.trunk_widths)
        if self.max_level > self.levels:
            raise ValueError(
                f"max_level {self.max_level} exceeds architecture levels {self.levels}"
            )
        if len(self.batch_sizes) < self.max_level:
            raise ValueError(
                f"{len(self.batch_sizes)} batch sizes for max_level {self.max_level}"
            )

    @property
    def coefficients(self) -> QualityCoefficients:
        return QualityCoefficients(
            alpha=self.alpha, beta=self.beta, gamma=self.gamma, delta=self.delta,
            f_k=self.f_k, sigma2=self.sigma2,
        )

    def learning_rate(self, lam: int) -> float:
        """eta(lambda) = (1/4)^(lambda-1) * eta0; strictly decreasing in lambda."""
        return 0.25 ** (lam - 1) * self.eta0

    def m_tar_grid(self) -> np.ndarray:
        n = int(round((self.m_tar_max - self.m_tar_min) / self.m_tar_step)) + 1
        return np.round(self.m_tar_min + self.m_tar_step * np.arange(n), 10)

    def architecture(self) -> ArchitectureConfig:
        widths = self.trunk_widths
        if widths is None:
            target = self.d_inp ** 2 * self.channels
            widths = (target // 8, target // 4, target // 2, target)
        return ArchitectureConfig(
            d_inp=self.d_inp, levels=self.levels, trunk_widths=tuple(widths),
            channels=self.channels, kernel_size=self.kernel_size,
            l1_depth=self.l1_depth, strain_input=self.strain_input,
            dtype=self.dtype,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["batch_sizes"] = list(self.batch_sizes)
        if d["trunk_widths"] is not None:
            d["trunk_widths"] = list(d["trunk_widths"])
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "TrainingConfig":
        import dataclasses

        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config key: {sorted(unknown)[0]}")
        return cls(**data)

    @classmethod
    def from_file(cls, path: str) -> "TrainingConfig":
        if path.endswith(".toml"):
            try:
                import tomllib
            except ModuleNotFoundError:
                import tomli as tomllib
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
        else:
            with open(path) as fh:
                data = json.load(fh)
        return cls.from_dict(data)


def random_sample(rng: np.random.Generator, d_inp: int = 8,
                  force_mag: float = 100.0,
                  m_tar_grid: np.ndarray | None = None) -> InputSample:
    """Draw one random training input.

    Left edge clamped in x and y; a single force of fixed magnitude at a
    uniformly chosen non-fixed node with uniform direction in [0, 360) deg;
    target fill degree uniform on the configured grid.

    Draw order (node, angle, fill) is part of the determinism contract.
    """
    bc = BoundaryConditionSet.left_edge_clamped(d_inp)
    n = d_inp + 1
    # candidate nodes: everything except the clamped left column, column-major
    n_candidates = n * d_inp
    pick = int(rng.integers(n_candidates))
    row = pick % n
    col = 1 + pick // n
    theta = rng.uniform(0.0, 2.0 * math.pi)
    bc.rsx[row, col] = force_mag * math.cos(theta)
    bc.rsy[row, col] = force_mag * math.sin(theta)
    if m_tar_grid is None:
        m_tar_grid = TrainingConfig(d_inp=d_inp).m_tar_grid()
    m_tar = float(m_tar_grid[int(rng.integers(m_tar_grid.size))])
    return InputSample(bc=bc, m_tar=m_tar)


def patience_update(j: float, j_best: float | None, zeta: int,
                    first_batch: bool) -> tuple[float, int]:
    """One step of the convergence bookkeeping.

    On a level's first batch the best objective resets to the current value
    (so the counter always ticks to 1 there); afterwards the counter resets
    to zero only on strict improvement, which also updates the best value.
    """
    if first_batch:
        j_best = j
    if j_best is None:
        raise ValueError("j_best unset outside the first batch")
    if first_batch or j >= j_best:
        return j_best, zeta + 1
    return j, 0


def exponential_moving_average(values, smoothing: float = 0.05) -> np.ndarray:
    """Display filter for noisy per-batch objective curves."""
    values = np.asarray(values, dtype=float)
    out = np.empty_like(values)
    acc = values[0]
    for i, v in enumerate(values):
        acc = (1.0 - smoothing) * acc + smoothing * v
        out[i] = acc
    return out


@dataclass
class BatchRecord:
    b: int
    level: int
    J: float
    c_mean: float
    m_mean: float
    f_mean: float
    p_mean: float
    lr: float
    seconds: float


@dataclass
class TrainingHistory:
    records: list = field(default_factory=list)
    level_transitions: list = field(default_factory=list)  # batch index of change

    def append(self, rec: BatchRecord):
        self.records.append(rec)

    def objectives(self, level: int | None = None) -> np.ndarray:
        recs = self.records if level is None else [
            r for r in self.records if r.level == level
        ]
        return np.array([r.J for r in recs])

    def to_csv(self, path: str):
        tmp = path + ".tmp"
        with open(tmp, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["b", "lambda", "J", "c_mean", "M_mean", "F_mean", "P_mean",
                 "lr", "seconds"]
            )
            for r in self.records:
                writer.writerow(
                    [r.b, r.level, repr(r.J), repr(r.c_mean), repr(r.m_mean),
                     repr(r.f_mean), repr(r.p_mean), repr(r.lr), repr(r.seconds)]
                )
        os.replace(tmp, path)

    @classmethod
    def from_csv(cls, path: str) -> "TrainingHistory":
        hist = cls()
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            for row in reader:
                hist.append(BatchRecord(
                    b=int(row["b"]), level=int(row["lambda"]), J=float(row["J"]),
                    c_mean=float(row["c_mean"]), m_mean=float(row["M_mean"]),
                    f_mean=float(row["F_mean"]), p_mean=float(row["P_mean"]),
                    lr=float(row["lr"]), seconds=float(row["seconds"]),
                ))
        prev = None
        for i, r in enumerate(hist.records):
            if prev is not None and r.level != prev:
                hist.level_transitions.append(r.b)
            prev = r.level
        return hist


@dataclass
class TrainingResult:
    predictor: Predictor
    history: TrainingHistory
    converged: bool


def _evaluate_batch(predictor, samples, lam, config, problems):
    """Forward pass + all evaluator losses for one batch; returns (J, stats)."""
    inputs = np.stack([s.input_vector() for s in samples])
    m_tars = np.array([s.m_tar for s in samples])
    x = predictor.forward(inputs, lam)
    # losses run in float64 regardless of the network dtype
    xe = x.astype(np.float64).clamp(config.x_min, 1.0)
    c = evaluators.compliance(xe, problems)
    m = evaluators.fill_deviation(xe, m_tars)
    f = evaluators.checkerboard_loss(xe, config.f_k,
                                     per_term_abs=config.per_term_abs_filter)
    p = evaluators.uncertainty_loss(xe, config.sigma2)
    fq = evaluators.quality(c, m, f, p, config.coefficients)
    j = evaluators.batch_objective(fq)
    stats = {
        "c_mean": float(np.mean(c.data)),
        "m_mean": float(np.mean(m.data)),
        "f_mean": float(np.mean(f.data)),
        "p_mean": float(np.mean(p.data)),
    }
    return j, stats


def train(config: TrainingConfig, out_dir: str | None = None,
          resume_from: str | None = None, on_batch=None) -> TrainingResult:
    """Run the level curriculum until every level's patience is exhausted.

    Deterministic for a fixed (config, platform): the RNG stream position is
    part of the checkpoint state, and resumed runs reproduce the batch
    sequence of an uninterrupted run exactly.
    """
    if resume_from is not None:
        return _train_loop(*_load_checkpoint(resume_from, config),
                           config=config, out_dir=out_dir, on_batch=on_batch)
    predictor = Predictor(config.architecture(), seed=config.seed)
    adam = ad.Adam(predictor.parameters(), lr=config.learning_rate(1))
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    state = {"level": 1, "b": 0, "b_level": 0, "zeta": 0, "j_best": None}
    history = TrainingHistory()
    return _train_loop(predictor, adam, rng, state, history,
                       config=config, out_dir=out_dir, on_batch=on_batch)


def _train_loop(predictor, adam, rng, state, history, *, config, out_dir, on_batch):
    m_grid = config.m_tar_grid()
    lam = state["level"]
    b = state["b"]
    converged = False

    while lam <= config.max_level:
        b_level = state["b_level"] if state["level"] == lam else 0
        zeta = state["zeta"] if state["level"] == lam else 0
        j_best = state["j_best"] if state["level"] == lam else None
        b_n = config.batch_sizes[lam - 1]
        adam.lr = config.learning_rate(lam)
        level = Level(lam, config.d_inp)

        while zeta <= config.zeta_max:
            if (config.max_batches_per_level is not None
                    and b_level >= config.max_batches_per_level):
                break
            t0 = time.perf_counter()
            b += 1
            b_level += 1
            if config.warmup_batches:
                adam.lr = config.learning_rate(lam) * min(
                    1.0, b_level / config.warmup_batches)
            for attempt in range(2):
                samples = [
                    random_sample(rng, config.d_inp, config.force_mag, m_grid)
                    for _ in range(b_n)
                ]
                problems = [
                    fem.FemProblem(level, s.bc, penal=config.p, E=config.E,
                                   nu=config.nu, x_min=config.x_min)
                    for s in samples
                ]
                try:
                    j, stats = _evaluate_batch(predictor, samples, lam, config,
                                               problems)
                    break
                except fem.SolverError:
                    if attempt == 1:
                        _abort_checkpoint(out_dir, predictor, adam, rng, lam, b,
                                          b_level, zeta, j_best, history)
                        raise TrainingError(
                            f"FEM solve failed twice in batch {b}; aborting"
                        )
            j_value = float(j.data)
            if not np.isfinite(j_value):
                _abort_checkpoint(out_dir, predictor, adam, rng, lam, b, b_level,
                                  zeta, j_best, history)
                raise TrainingError(f"non-finite objective at batch {b}")

            adam.zero_grad()
            j.backward()
            adam.step()

            j_best, zeta = patience_update(j_value, j_best, zeta, b_level == 1)
            history.append(BatchRecord(
                b=b, level=lam, J=j_value, lr=adam.lr,
                seconds=time.perf_counter() - t0, **stats,
            ))
            if on_batch is not None:
                on_batch(history.records[-1], zeta)
            if (out_dir and config.checkpoint_every
                    and b % config.checkpoint_every == 0):
                save_checkpoint(os.path.join(out_dir, "checkpoint"), predictor,
                                adam, rng, lam, b, b_level, zeta, j_best, history)

        state = {"level": lam, "b": b, "b_level": b_level, "zeta": zeta,
                 "j_best": j_best}
        if out_dir:
            save_checkpoint(os.path.join(out_dir, "checkpoint"), predictor, adam,
                            rng, lam, b, b_level, zeta, j_best, history)
        lam += 1
        if lam <= config.max_level:
            history.level_transitions.append(b + 1)
            state = {"level": lam, "b": b, "b_level": 0, "zeta": 0, "j_best": None}
    converged = True

    if out_dir:
        save_model(predictor, os.path.join(out_dir, "model"),
                   extra_manifest={"training_config": config.to_dict()})
        history.to_csv(os.path.join(out_dir, "history.csv"))
    return TrainingResult(predictor=predictor, history=history, converged=converged)


# -- checkpointing ------------------------------------------------------------


def save_checkpoint(path, predictor, adam, rng, lam, b, b_level, zeta, j_best,
                    history):
    os.makedirs(path, exist_ok=True)
    save_model(predictor, os.path.join(path, "model"))
    named = predictor.named_parameters()
    arrays = {}
    for i, p in enumerate(adam.params):
        arrays[f"m_{i}"] = adam.m[i]
        arrays[f"v_{i}"] = adam.v[i]
    np.savez(os.path.join(path, "adam.npz"), t=adam.t, n=len(adam.params), **arrays)
    state = {
        "level": lam, "b": b, "b_level": b_level, "zeta": zeta, "j_best": j_best,
        "rng_state": _jsonify(rng.bit_generator.state),
        "param_names": list(named.keys()),
    }
    tmp = os.path.join(path, "state.json.tmp")
    with open(tmp, "w") as fh:
        json.dump(state, fh)
    os.replace(tmp, os.path.join(path, "state.json"))
    history.to_csv(os.path.join(path, "history.csv"))


def _jsonify(obj):
    if isinstance(obj, dict):
        return {k: _jsonify(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return {"__ndarray__": obj.tolist(), "dtype": str(obj.dtype)}
    if isinstance(obj, (np.integer,)):
        return int(obj)
    return obj


def _dejsonify(obj):
    if isinstance(obj, dict):
        if "__ndarray__" in obj:
            return np.array(obj["__ndarray__"], dtype=obj["dtype"])
        return {k: _dejsonify(v) for k, v in obj.items()}
    return obj


def _load_checkpoint(path, config):
    try:
        with open(os.path.join(path, "state.json")) as fh:
            state = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise TrainingError(f"corrupt or missing checkpoint state: {exc}") from exc
    predictor = load_model(os.path.join(path, "model"),
                           expected_arch=config.architecture())
    adam = ad.Adam(predictor.parameters(),
                   lr=config.learning_rate(state["level"]))
    adam_path = os.path.join(path, "adam.npz")
    if not os.path.exists(adam_path):
        raise TrainingError("checkpoint is missing the optimizer state")
    with np.load(adam_path) as data:
        n = int(data["n"])
        if n != len(adam.params):
            raise TrainingError(
                f"optimizer state has {n} slots, model has {len(adam.params)}"
            )
        adam.load_state_dict({
            "t": int(data["t"]),
            "m": [data[f"m_{i}"] for i in range(n)],
            "v": [data[f"v_{i}"] for i in range(n)],
        })
    rng = np.random.default_rng()
    rng.bit_generator.state = _dejsonify(state["rng_state"])
    loop_state = {k: state[k] for k in ("level", "b", "b_level", "zeta", "j_best")}
    hist_path = os.path.join(path, "history.csv")
    history = TrainingHistory.from_csv(hist_path) if os.path.exists(hist_path) \
        else TrainingHistory()
    return predictor, adam, rng, loop_state, history


def _abort_checkpoint(out_dir, predictor, adam, rng, lam, b, b_level, zeta,
                      j_best, history):
    if out_dir:
        save_checkpoint(os.path.join(out_dir, "checkpoint"), predictor, adam,
                        rng, lam, b, b_level, zeta, j_best, history)
