"""Coefficient fitting for skeleton equations.

Three strategies minimise the summed squared residual between a skeleton and
the finite-difference derivative targets of one state dimension:

* ``bfgs``   quasi-Newton from a random start, central-difference gradients
* ``de``     differential evolution, best1bin
* ``hybrid`` differential evolution whose winner seeds a BFGS polish

:func:`optimize_best_of_three` runs them all and keeps the lowest objective.
Deadlines are cooperative: every objective evaluation checks the clock and,
once it has passed, the best point seen so far is returned flagged.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
from scipy.optimize import minimize

from .benchmarks import TrajectoryDataset
from .errors import AllStrategiesFailed, DimensionOutOfRange, ParamLengthMismatch
from .expression import ParamedEquation

STRATEGIES = ("bfgs", "de", "hybrid")


@dataclass(frozen=True)
class OptimizerConfig:
    de_strategy: str = "best1bin"
    de_popsize: int = 20
    de_tol: float = 1e-5
    de_maxiter: int = 1000
    de_mutation: float = 0.8
    de_recombination: float = 0.7
    bounds: tuple[float, float] = (-20.0, 20.0)
    bfgs_gtol: float = 1e-9
    bfgs_maxiter: int = 1000
    fd_step: float = 1e-6
    timeout: float = 240.0
    max_parameters: int = 8

    def __post_init__(self):
        if self.de_strategy != "best1bin":
            raise ValueError("only the best1bin strategy is implemented")
        if self.de_popsize < 4:
            raise ValueError("best1bin needs a population of at least 4")
        lo, hi = self.bounds
        if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
            raise ValueError(f"invalid bounds {self.bounds}")

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["bounds"] = list(self.bounds)
        return d


@dataclass
class OptResult:
    theta: np.ndarray
    mse: float
    strategy: str
    converged: bool
    wall_time: float = 0.0
    timed_out: bool = False
    n_evals: int = 0
    # best-of-three keeps the arms it compared
    candidates: dict = field(default_factory=dict, repr=False)

    @property
    def failed(self) -> bool:
        return not np.isfinite(self.mse)


class Deadline:
    """Wall-clock limit shared by all arms of one fit."""

    def __init__(self, seconds: float | None, clock: Callable[[], float] = time.monotonic):
        self.clock = clock
        self.expires = None if seconds is None else clock() + seconds

    def expired(self) -> bool:
        return self.expires is not None and self.clock() >= self.expires


class _DeadlineReached(Exception):
    pass


class ResidualObjective:
    """Summed squared residual of a linear-in-parameters skeleton.

    The term matrix is computed once; every evaluation is a matrix-vector
    product.  Tracks the best point seen so optimisers can bail out early.
    """

    def __init__(self, phi: np.ndarray, target: np.ndarray, deadline: Deadline | None = None):
        self.phi = np.asarray(phi, dtype=float)
        self.target = np.asarray(target, dtype=float)
        self.deadline = deadline
        self.n_params = self.phi.shape[1] + 1
        self.n_evals = 0
        self.best_theta: np.ndarray | None = None
        self.best_value = np.inf
        # one non-finite column poisons every parameter vector (0*inf is nan)
        self.poisoned = not np.all(np.isfinite(self.phi))

    @classmethod
    def for_dimension(cls, eq: ParamedEquation, data: TrajectoryDataset, j: int,
                      deadline: Deadline | None = None) -> "ResidualObjective":
        _check_dimension(data, j)
        return cls(eq.term_matrix(data.states), data.xdot[:, j], deadline)

    def batch(self, thetas: np.ndarray) -> np.ndarray:
        """Objective for each row of ``thetas``."""
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        if self.deadline is not None and self.deadline.expired():
            raise _DeadlineReached
        self.n_evals += thetas.shape[0]
        if self.poisoned:
            return np.full(thetas.shape[0], np.inf)
        with np.errstate(all="ignore"):
            pred = self.phi @ thetas[:, :-1].T + thetas[:, -1]
            values = np.sum((self.target[:, None] - pred) ** 2, axis=0)
        values = np.where(np.isfinite(values), values, np.inf)
        k = int(np.argmin(values))
        if values[k] < self.best_value:
            self.best_value = float(values[k])
            self.best_theta = thetas[k].copy()
        return values

    def __call__(self, theta: np.ndarray) -> float:
        return float(self.batch(theta)[0])

    def gradient(self, theta: np.ndarray, step: float = 1e-6) -> np.ndarray:
        """Central differences with step ``step * max(1, |theta_i|)``."""
        theta = np.asarray(theta, dtype=float)
        h = step * np.maximum(1.0, np.abs(theta))
        shifts = np.diag(h)
        values = self.batch(np.vstack([theta + shifts, theta - shifts]))
        n = theta.size
        with np.errstate(all="ignore"):
            return (values[:n] - values[n:]) / (2.0 * h)


def _check_dimension(data: TrajectoryDataset, j: int) -> None:
    if not 0 <= j < data.dimension:
        raise DimensionOutOfRange(f"dimension {j} outside [0, {data.dimension})")


def residual_mse(eq: ParamedEquation, theta, data: TrajectoryDataset, j: int) -> float:
    """Summed squared error against the finite-difference targets of dimension ``j``."""
    _check_dimension(data, j)
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (eq.n_params,):
        raise ParamLengthMismatch(f"expected {eq.n_params} parameters, got {theta.shape}")
    return ResidualObjective.for_dimension(eq, data, j)(theta)


# ---------------------------------------------------------------------------
# strategies on a prepared objective
# ---------------------------------------------------------------------------

def _bfgs(obj: ResidualObjective, theta0: np.ndarray, cfg: OptimizerConfig,
          trace: list | None = None) -> tuple[np.ndarray, float, bool, bool]:
    theta0 = np.asarray(theta0, dtype=float)
    try:
        f0 = obj(theta0)
        if not np.isfinite(f0):
            return theta0, np.inf, False, False
        res = minimize(
            obj, theta0, jac=lambda th: obj.gradient(th, cfg.fd_step), method="BFGS",
            options={"gtol": cfg.bfgs_gtol, "maxiter": cfg.bfgs_maxiter},
        )
        theta, value, converged, timed_out = np.asarray(res.x), float(res.fun), bool(res.success), False
    except _DeadlineReached:
        theta, value, converged, timed_out = theta0, np.inf, False, True
    # the line search can wander; never report worse than the best point visited
    if obj.best_theta is not None and obj.best_value < value:
        theta, value = obj.best_theta.copy(), obj.best_value
    if trace is not None:
        trace.append({"strategy": "bfgs", "iteration": None, "mse": value, "theta": theta.tolist()})
    return theta, value, converged, timed_out


def _de(obj: ResidualObjective, cfg: OptimizerConfig, rng: np.random.Generator,
        trace: list | None = None) -> tuple[np.ndarray, float, bool, bool]:
    """best1bin differential evolution with generation-synchronous replacement."""
    lo, hi = cfg.bounds
    n, npop = obj.n_params, cfg.de_popsize
    pop = rng.uniform(lo, hi, size=(npop, n))
    try:
        energy = obj.batch(pop)
    except _DeadlineReached:
        return pop[0], np.inf, False, True

    def converged() -> bool:
        if not np.all(np.isfinite(energy)):
            return False
        return bool(np.std(energy) <= cfg.de_tol * abs(np.mean(energy)))

    done, timed_out = converged(), False
    idx = np.arange(npop)
    for gen in range(cfg.de_maxiter):
        if done:
            break
        best = pop[np.argmin(energy)]
        # two distinct partners per member, neither equal to the member
        r = np.empty((npop, 2), dtype=int)
        for i in range(npop):
            r[i] = rng.choice(np.delete(idx, i), size=2, replace=False)
        mutant = best + cfg.de_mutation * (pop[r[:, 0]] - pop[r[:, 1]])
        cross = rng.random((npop, n)) < cfg.de_recombination
        cross[idx, rng.integers(0, n, size=npop)] = True
        trial = np.where(cross, mutant, pop)
        outside = (trial < lo) | (trial > hi)
        if outside.any():
            trial[outside] = rng.uniform(lo, hi, size=int(outside.sum()))
        try:
            trial_energy = obj.batch(trial)
        except _DeadlineReached:
            timed_out = True
            break
        better = trial_energy <= energy
        pop[better] = trial[better]
        energy[better] = trial_energy[better]
        if trace is not None:
            k = int(np.argmin(energy))
            trace.append({"strategy": "de", "iteration": gen, "mse": float(energy[k]),
                          "theta": pop[k].tolist()})
        done = converged()
    k = int(np.argmin(energy))
    return pop[k].copy(), float(energy[k]), done, timed_out


def _result(theta, value, strategy, converged, timed_out, obj, t0) -> OptResult:
    return OptResult(np.asarray(theta, dtype=float), float(value), strategy, bool(converged),
                     time.monotonic() - t0, bool(timed_out), obj.n_evals)


def _default_rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


# ---------------------------------------------------------------------------
# public entry points
# ---------------------------------------------------------------------------

def optimize_bfgs(eq: ParamedEquation, data: TrajectoryDataset, j: int, theta_init=None,
                  config: OptimizerConfig | None = None, seed=0, trace: list | None = None) -> OptResult:
    """BFGS from ``theta_init`` (uniform in the bounds when omitted)."""
    cfg = config or OptimizerConfig()
    t0 = time.monotonic()
    obj = ResidualObjective.for_dimension(eq, data, j, Deadline(cfg.timeout))
    if theta_init is None:
        theta_init = _default_rng(seed).uniform(*cfg.bounds, size=obj.n_params)
    theta_init = np.asarray(theta_init, dtype=float)
    if theta_init.shape != (obj.n_params,):
        raise ParamLengthMismatch(f"expected {obj.n_params} parameters, got {theta_init.shape}")
    out = _bfgs(obj, theta_init, cfg, trace)
    return _result(*out[:2], "bfgs", *out[2:], obj, t0)


def optimize_de(eq: ParamedEquation, data: TrajectoryDataset, j: int,
                config: OptimizerConfig | None = None, seed=0, trace: list | None = None) -> OptResult:
    cfg = config or OptimizerConfig()
    t0 = time.monotonic()
    obj = ResidualObjective.for_dimension(eq, data, j, Deadline(cfg.timeout))
    out = _de(obj, cfg, _default_rng(seed), trace)
    return _result(*out[:2], "de", *out[2:], obj, t0)


def optimize_hybrid(eq: ParamedEquation, data: TrajectoryDataset, j: int,
                    config: OptimizerConfig | None = None, seed=0, trace: list | None = None) -> OptResult:
    """Differential evolution followed by a BFGS polish of its winner."""
    cfg = config or OptimizerConfig()
    t0 = time.monotonic()
    obj = ResidualObjective.for_dimension(eq, data, j, Deadline(cfg.timeout))
    theta, value, _, timed_out = _de(obj, cfg, _default_rng(seed), trace)
    if timed_out or not np.isfinite(value):
        return _result(theta, value, "hybrid", False, timed_out, obj, t0)
    out = _polish(obj, theta, value, cfg, trace)
    return _result(*out[:2], "hybrid", *out[2:], obj, t0)


def _polish(obj, theta, value, cfg, trace):
    p_theta, p_value, conv, timed_out = _bfgs(obj, theta, cfg, trace)
    if p_value <= value:
        return p_theta, p_value, conv, timed_out
    return theta, value, conv, timed_out


def optimize_best_of_three(eq: ParamedEquation, data: TrajectoryDataset, j: int,
                           config: OptimizerConfig | None = None, seed=0,
                           trace: list | None = None) -> OptResult:
    """Run bfgs, de and hybrid under one deadline; keep the lowest objective.

    The hybrid arm polishes the same DE run that the ``de`` arm reports, so
    DE is executed once.  Ties resolve in the order bfgs, de, hybrid.
    """
    cfg = config or OptimizerConfig()
    t0 = time.monotonic()
    deadline = Deadline(cfg.timeout)
    obj = ResidualObjective.for_dimension(eq, data, j, deadline)
    init_rng, de_rng = [np.random.default_rng(s) for s in np.random.SeedSequence(
        seed if not isinstance(seed, np.random.Generator) else int(seed.integers(2**32))).spawn(2)]

    results: dict[str, OptResult] = {}
    theta0 = init_rng.uniform(*cfg.bounds, size=obj.n_params)
    out = _bfgs(obj, theta0, cfg, trace)
    results["bfgs"] = _result(*out[:2], "bfgs", *out[2:], obj, t0)

    # each arm keeps its own best-seen record
    obj.best_theta, obj.best_value = None, np.inf
    de_theta, de_value, de_conv, de_to = _de(obj, cfg, de_rng, trace)
    results["de"] = _result(de_theta, de_value, "de", de_conv, de_to, obj, t0)

    if de_to or not np.isfinite(de_value):
        results["hybrid"] = _result(de_theta, de_value, "hybrid", False, de_to, obj, t0)
    else:
        obj.best_theta, obj.best_value = None, np.inf
        out = _polish(obj, de_theta, de_value, cfg, trace)
        results["hybrid"] = _result(*out[:2], "hybrid", *out[2:], obj, t0)

    winner = min(STRATEGIES, key=lambda s: (results[s].mse, STRATEGIES.index(s)))
    best = results[winner]
    if not np.isfinite(best.mse):
        raise AllStrategiesFailed("every strategy produced a non-finite objective")
    assert best.mse <= min(r.mse for r in results.values())
    return OptResult(best.theta, best.mse, winner, best.converged, time.monotonic() - t0,
                     any(r.timed_out for r in results.values()), obj.n_evals, results)


def write_trace(path: str | Path, records: Iterable[dict]) -> None:
    """Append optimizer trace records as JSON lines."""
    with open(path, "a", encoding="utf-8") as fh:
        for rec in records:
            rec = dict(rec)
            if not np.isfinite(rec.get("mse", 0.0)):
                rec["mse"] = None
            fh.write(json.dumps(rec, allow_nan=False, default=_json_default) + "\n")


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(type(obj))
