"""Scale-normalised error metrics and the two success tests."""

from __future__ import annotations

import csv
import io
import json
from collections import Counter
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .benchmarks import SystemSpec, TrajectoryDataset, integrate_rk4
from .errors import NonFiniteState
from .expression import evaluate_term_matrix, is_constant, parse_key, parse_term, skeleton_key
from .fitted import FittedSystem, dim_name, system_from_terms
from .scientist import AblationConfig, ablation_deltas

EPS = 1e-12
SUCCESS_THRESHOLD = 1e-3


def _nmse(truth: np.ndarray, pred: np.ndarray, eps: float = EPS) -> float:
    with np.errstate(all="ignore"):
        value = float(np.sum((truth - pred) ** 2) / (np.sum(truth**2) + eps))
    return value if np.isfinite(value) else float("nan")


def residual_nmse(system: FittedSystem, data: TrajectoryDataset, j: int, eps: float = EPS) -> float:
    """Derivative error of dimension ``j`` against the analytic derivatives."""
    eq, theta = system.equations[j], system.thetas[j]
    pred = evaluate_term_matrix(eq.term_matrix(data.states), np.asarray(theta, dtype=float))
    return _nmse(data.xdot_gt[:, j], pred, eps)


def simulate(system: FittedSystem, data: TrajectoryDataset) -> np.ndarray | None:
    """Integrate ``system`` from the clean initial condition on the data grid; None on blow-up."""
    try:
        return integrate_rk4(system.rhs, data.x0, data.t, substeps=data.substeps)
    except NonFiniteState:
        return None


def integral_nmse(system: FittedSystem, data: TrajectoryDataset, j: int | None = None,
                  eps: float = EPS, trajectory: np.ndarray | None = None):
    """Trajectory error per dimension (or for dimension ``j``); NaN when integration fails."""
    traj = simulate(system, data) if trajectory is None else trajectory
    if traj is None:
        values = np.full(data.dimension, np.nan)
    else:
        values = np.array([_nmse(data.states[:, k], traj[:, k], eps) for k in range(data.dimension)])
    return float(values[j]) if j is not None else values


@dataclass
class NmseReport:
    # regime -> per-dimension values
    residual: dict = field(default_factory=dict)
    integral: dict = field(default_factory=dict)

    def mean(self, metric: str, regime: str) -> float:
        # NaN propagates: a blow-up in any dimension poisons the average
        return float(np.mean(getattr(self, metric)[regime]))

    def to_dict(self) -> dict:
        out = {}
        for regime in self.residual:
            out[regime] = {
                "residual": [_clean(v) for v in self.residual[regime]],
                "integral": [_clean(v) for v in self.integral[regime]],
                "residual_mean": _clean(self.mean("residual", regime)),
                "integral_mean": _clean(self.mean("integral", regime)),
            }
        return out

    @classmethod
    def from_dict(cls, data: Mapping) -> "NmseReport":
        rep = cls()
        for regime, block in data.items():
            rep.residual[regime] = [np.nan if v is None else float(v) for v in block["residual"]]
            rep.integral[regime] = [np.nan if v is None else float(v) for v in block["integral"]]
        return rep

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["regime", "dimension", "residual_nmse", "integral_nmse"])
        for regime in self.residual:
            for j, (r, i) in enumerate(zip(self.residual[regime], self.integral[regime])):
                w.writerow([regime, dim_name(j), _fmt(r), _fmt(i)])
            w.writerow([regime, "mean", _fmt(self.mean("residual", regime)),
                        _fmt(self.mean("integral", regime))])
        return buf.getvalue()


def _clean(v: float):
    return float(v) if np.isfinite(v) else None


def _fmt(v: float) -> str:
    return "nan" if not np.isfinite(v) else repr(float(v))


def evaluate_system(system: FittedSystem, datasets: Mapping[str, TrajectoryDataset]) -> NmseReport:
    rep = NmseReport()
    for regime, data in datasets.items():
        rep.residual[regime] = [residual_nmse(system, data, j) for j in range(data.dimension)]
        rep.integral[regime] = [float(v) for v in integral_nmse(system, data)]
    return rep


def nmse_success_test(report: NmseReport, regime: str = "ID",
                      threshold: float = SUCCESS_THRESHOLD) -> bool:
    values = report.integral.get(regime)
    if not values:
        return False
    # NaN < threshold is False, so blow-ups never pass
    return all(v < threshold for v in values)


# ---------------------------------------------------------------------------
# term test
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TermTestConfig:
    delta: float = 0.05
    coef_ratio: float = 1e-3
    # "or": negligible if either the ablation change or the relative coefficient is small
    # "and": negligible only if both are small
    mode: str = "or"

    def __post_init__(self):
        if self.mode not in ("or", "and"):
            raise ValueError(f"unknown negligible-term mode {self.mode!r}")


def truth_keys(spec: SystemSpec) -> list[Counter]:
    return [Counter(skeleton_key(parse_term(t, spec.dimension)) for t in terms)
            for terms in spec.truth_terms]


def significant_keys(system: FittedSystem, data: TrajectoryDataset,
                     cfg: TermTestConfig | None = None) -> list[Counter]:
    """Skeleton keys per dimension that survive the negligible-impact filter.

    Pure constants are skipped because the bias already covers them.
    """
    cfg = cfg or TermTestConfig()
    out = []
    for j, (eq, theta) in enumerate(zip(system.equations, system.thetas)):
        theta = np.asarray(theta, dtype=float)
        deltas = ablation_deltas(eq, theta, data, j, AblationConfig(delta=cfg.delta))
        coefs = np.abs(theta[:-1])
        scale = coefs.max() if coefs.size else 0.0
        keep = Counter()
        for term, dlt, c in zip(eq.terms, deltas, coefs):
            if is_constant(term):
                continue
            small_delta = bool(np.isfinite(dlt) and abs(dlt) < cfg.delta)
            small_coef = bool(c < cfg.coef_ratio * scale)
            negligible = (small_delta or small_coef) if cfg.mode == "or" else (small_delta and small_coef)
            if not negligible:
                keep[skeleton_key(term)] += 1
        out.append(keep)
    return out


def term_match_test(system: FittedSystem, truth: SystemSpec, data: TrajectoryDataset,
                    cfg: TermTestConfig | None = None) -> bool:
    if system.dimension != truth.dimension:
        return False
    truth_sets = [Counter({k: n for k, n in c.items() if not is_constant(parse_key(k, truth.dimension))})
                  for c in truth_keys(truth)]
    return significant_keys(system, data, cfg) == truth_sets


def truth_system(spec: SystemSpec) -> FittedSystem:
    return system_from_terms(spec.truth_terms, spec.truth_params)


def report_json(report: NmseReport) -> str:
    return json.dumps(report.to_dict(), indent=2, sort_keys=True)
