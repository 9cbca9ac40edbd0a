"""Benchmark ODE systems and trajectory generation.

Eight systems with known right-hand sides are shipped.  Trajectories come
from classic fixed-step RK4; derivative targets come from second-order
finite differences (``numpy.gradient`` with ``edge_order=2``).  Each system
has an in-domain regime (ID) and an extended regime (ID-Ext) that continues
the same trajectory to a later end time.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import NonFiniteState, TooFewPoints, UnknownSystem

N_POINTS = 1000
REGIMES = ("ID", "ID-Ext")

Rhs = Callable[[float, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class SystemSpec:
    system_id: int
    name: str
    dimension: int
    rhs: Rhs = field(repr=False, compare=False)
    t_start: float
    t_end: float
    t_ood_end: float
    initial_conditions: tuple[tuple[float, ...], ...]
    description: str
    # per-dimension ground-truth term strings and their coefficients
    # (last coefficient is the bias)
    truth_terms: tuple[tuple[str, ...], ...]
    truth_params: tuple[tuple[float, ...], ...]

    def initial_condition(self, selector: int = 0) -> np.ndarray:
        try:
            return np.array(self.initial_conditions[selector], dtype=float)
        except IndexError:
            raise ValueError(
                f"system {self.system_id} has {len(self.initial_conditions)} initial conditions"
            ) from None


def _stack(*cols: np.ndarray) -> np.ndarray:
    return np.stack(np.broadcast_arrays(*cols), axis=-1)


def _sir(t, x):
    s, i = x[..., 0], x[..., 1]
    return _stack(-0.4 * s * i, 0.4 * s * i - 0.314 * i)


def _glider2d(t, x):
    v, g = x[..., 0], x[..., 1]
    return _stack(-(v**2) / 5.0 - np.sin(g), v - np.cos(g) / v)


def _cdima(t, x):
    a, b = x[..., 0], x[..., 1]
    return _stack(8.9 - 4.0 * a * b / (a**2 + 1.0) - a, 1.4 * a * (1.0 - b / (a**2 + 1.0)))


def _gray_scott(t, x):
    u, v = x[..., 0], x[..., 1]
    return _stack(0.5 * (1.0 - u) - u * v**2, -0.02 * v + u * v**2)


def _magnets(t, x):
    a, b = x[..., 0], x[..., 1]
    return _stack(0.33 * np.sin(a - b) - np.sin(a), -0.33 * np.sin(a - b) - np.sin(b))


def _binocular(t, x):
    a, b = x[..., 0], x[..., 1]
    return _stack(
        -a + 1.0 / (np.exp(4.89 * b - 1.4) + 1.0),
        -b + 1.0 / (np.exp(4.89 * a - 1.4) + 1.0),
    )


def _oscillator_death(t, x):
    a, b = x[..., 0], x[..., 1]
    coupling = np.sin(b) * np.cos(a)
    return _stack(1.432 + coupling, 0.972 + coupling)


def _glider4d(t, x):
    v, g = x[..., 0], x[..., 1]
    return _stack(
        -9.81 * np.sin(g) - 0.030625 * v**2,
        -9.81 * np.cos(g) / v + 0.6125 * v,
        v * np.cos(g),
        v * np.sin(g),
    )


SYSTEMS: dict[int, SystemSpec] = {
    1: SystemSpec(
        1, "SIR(2D)", 2, _sir, 0.0, 2.0, 4.0,
        ((2.1, 0.3), (1.8, 0.6)),
        "An outbreak in a closed population tracked through two groups: people who can "
        "still catch the disease (x0) and people currently carrying it (x1). Infection "
        "spreads when members of the two groups meet, and carriers get better at a "
        "steady pace. Whether the outbreak grows or fades depends on how fast it spreads "
        "compared with how fast carriers get better.",
        (("x0*x1",), ("x0*x1", "x1")),
        ((-0.4, 0.0), (0.4, -0.314, 0.0)),
    ),
    2: SystemSpec(
        2, "Glider(2D)", 2, _glider2d, 0.0, 5.0, 10.0,
        ((2.0, 0.5), (1.5, -0.4)),
        "An idealised unpowered glider written in dimensionless units. The state is the "
        "flight speed (x0) and the angle of the flight path above the horizon (x1). "
        "Speed and heading change under gravity and the aerodynamic forces acting on "
        "the wing, starting from a given launch state.",
        (("x0**2", "sin(x1)"), ("x0", "cos(x1)/x0")),
        ((-0.2, -1.0, 0.0), (1.0, -1.0, 0.0)),
    ),
    3: SystemSpec(
        3, "CDIMA(2D)", 2, _cdima, 0.0, 5.0, 10.0,
        ((1.0, 1.5), (2.0, 3.0)),
        "A dimensionless reaction model with two chemical species. x0 is an activator "
        "that speeds up its own production; it moves slowly because it binds to an "
        "indicator polymer. x1 is an inhibitor that holds activator production back. "
        "Activator production levels off once the substrate runs short, the "
        "consumption step only becomes important above a certain activator level, and "
        "a steady supply of an external reagent removes inhibitor.",
        (("x0*x1/(x0**2 + 1)", "x0"), ("x0", "x0*x1/(x0**2 + 1)")),
        ((-4.0, -1.0, 8.9), (1.4, -1.4, 0.0)),
    ),
    4: SystemSpec(
        4, "GrayScott(2D)", 2, _gray_scott, 0.0, 2.0, 4.0,
        ((0.6, 0.4), (0.4, 0.6)),
        "A dimensionless open reactor under constant isothermal conditions. Fresh feed "
        "species (x0) flows in continuously, and an autocatalytic species (x1) makes "
        "more of itself from the feed while also decaying. Local self-amplification "
        "competing with depletion of the feed can break up a uniform state.",
        (("x0", "x0*x1**2"), ("x1", "x0*x1**2")),
        ((-0.5, -1.0, 0.5), (-0.02, 1.0, 0.0)),
    ),
    5: SystemSpec(
        5, "BarMagnets(2D)", 2, _magnets, 0.0, 2.0, 4.0,
        ((1.2, -0.8), (2.0, 0.5)),
        "Two bar magnets on pivots close to each other; x0 and x1 are their angles. Each "
        "magnet tends to return to its own preferred direction, and the two also turn "
        "each other through a coupling that depends on how far apart their angles are. "
        "Depending on the start, they may lock into an alignment, swing, or spin.",
        (("sin(x0 - x1)", "sin(x0)"), ("sin(x0 - x1)", "sin(x1)")),
        ((0.33, -1.0, 0.0), (-0.33, -1.0, 0.0)),
    ),
    6: SystemSpec(
        6, "BinocularRivalry(2D)", 2, _binocular, 0.0, 2.0, 4.0,
        ((0.9, 0.1), (0.2, 0.7)),
        "Activity levels of two neural populations (x0, x1), each driven by the image in "
        "one eye. Each population fades without input and is held down by the other "
        "one, and its response to that suppression saturates. Typically one population "
        "ends up winning and only its image is perceived.",
        (("x0", "1/(exp(4.89*x1 - 1.4) + 1)"), ("x1", "1/(exp(4.89*x0 - 1.4) + 1)")),
        ((-1.0, 1.0, 0.0), (-1.0, 1.0, 0.0)),
    ),
    7: SystemSpec(
        7, "OscillatorDeath(2D)", 2, _oscillator_death, 0.0, 4.0, 8.0,
        ((0.3, 0.8), (-0.5, 1.2)),
        "Two phase oscillators (phases x0 and x1) that each advance at their own natural "
        "rate and are coupled through a shared periodic interaction of their phases. "
        "If the coupling is strong enough, both can freeze in a common steady state and "
        "stop oscillating.",
        (("sin(x1)*cos(x0)",), ("sin(x1)*cos(x0)",)),
        ((1.0, 1.432), (1.0, 0.972)),
    ),
    8: SystemSpec(
        8, "Glider(4D)", 4, _glider4d, 0.0, 5.0, 10.0,
        ((6.0, 0.3, 0.0, 50.0), (5.0, -0.2, 0.0, 40.0)),
        "A glider tracked in flight, in physical units. The state is forward speed (x0, "
        "m/s), flight-path angle above the horizon (x1, rad), horizontal distance (x2, "
        "m) and altitude (x3, m). The aircraft has a fixed mass and flies through air "
        "of known density under standard gravity of 9.81 m/s^2. Lift and drag come "
        "from the wing geometry and the air density, and the flight starts from a "
        "chosen launch speed, angle and altitude.",
        (
            ("sin(x1)", "x0**2"),
            ("cos(x1)/x0", "x0"),
            ("x0*cos(x1)",),
            ("x0*sin(x1)",),
        ),
        ((-9.81, -0.030625, 0.0), (-9.81, 0.6125, 0.0), (1.0, 0.0), (1.0, 0.0)),
    ),
}


def get_system(system_id: int) -> SystemSpec:
    try:
        return SYSTEMS[int(system_id)]
    except (KeyError, ValueError):
        raise UnknownSystem(f"unknown benchmark system {system_id!r}") from None


def ground_truth_rhs(system_id: int, t: float, x: Sequence[float] | np.ndarray) -> np.ndarray:
    spec = get_system(system_id)
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != spec.dimension:
        raise ValueError(f"system {system_id} expects {spec.dimension} states, got {x.shape[-1]}")
    with np.errstate(all="ignore"):
        return spec.rhs(t, x)


# ---------------------------------------------------------------------------
# numerics
# ---------------------------------------------------------------------------

def integrate_rk4(rhs: Rhs, x0: Sequence[float], grid: np.ndarray, substeps: int = 1) -> np.ndarray:
    """Classic fixed-step RK4 reporting the state at every grid point.

    Each grid interval is split into ``substeps`` equal RK4 steps.  Raises
    :class:`NonFiniteState` as soon as the state stops being finite.
    """
    grid = np.asarray(grid, dtype=float)
    state = np.array(x0, dtype=float)
    out = np.empty((len(grid), state.size))
    out[0] = state
    t = grid[0]
    with np.errstate(all="ignore"):
        for i in range(1, len(grid)):
            h = (grid[i] - grid[i - 1]) / substeps
            for s in range(substeps):
                t = grid[i - 1] + s * h
                k1 = rhs(t, state)
                k2 = rhs(t + h / 2, state + (h / 2) * k1)
                k3 = rhs(t + h / 2, state + (h / 2) * k2)
                k4 = rhs(t + h, state + h * k3)
                state = state + (h / 6) * (k1 + 2 * k2 + 2 * k3 + k4)
            if not np.all(np.isfinite(state)):
                raise NonFiniteState(f"state became non-finite at t={grid[i]:.6g}", step=i)
            out[i] = state
    return out


def finite_difference(states: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Central differences inside, second-order one-sided stencils at the ends."""
    states = np.asarray(states, dtype=float)
    if states.shape[0] < 3:
        raise TooFewPoints("finite differences need at least 3 points")
    return np.gradient(states, np.asarray(grid, dtype=float), axis=0, edge_order=2)


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrajectoryDataset:
    system_id: int
    regime: str
    t: np.ndarray
    states: np.ndarray
    xdot: np.ndarray  # finite-difference targets
    xdot_gt: np.ndarray  # analytic derivatives at the noise-free states
    x0: np.ndarray  # noise-free initial condition
    sigma: float = 0.0
    seed: int | None = None
    ic_index: int = 0
    substeps: int = 1  # RK4 steps per grid interval used during generation

    @property
    def n_points(self) -> int:
        return self.t.shape[0]

    @property
    def dimension(self) -> int:
        return self.states.shape[1]

    def take(self, rows: np.ndarray) -> "TrajectoryDataset":
        """Row subset (the time grid loses uniformity; only for residual metrics)."""
        return TrajectoryDataset(
            self.system_id, self.regime, self.t[rows], self.states[rows], self.xdot[rows],
            self.xdot_gt[rows], self.x0, self.sigma, self.seed, self.ic_index, self.substeps,
        )

    def metadata(self) -> dict:
        return {
            "system_id": self.system_id,
            "regime": self.regime,
            "sigma": self.sigma,
            "seed": self.seed,
            "ic_index": self.ic_index,
            "initial_condition": [float(v) for v in self.x0],
            "substeps": self.substeps,
            "n_points": self.n_points,
        }


@lru_cache(maxsize=64)
def _fine_cached(system_id: int, x0: tuple, n_points: int) -> tuple[np.ndarray, np.ndarray, int]:
    fine_t, fine_x, stride = _fine_trajectory(get_system(system_id), np.array(x0), n_points)
    fine_t.flags.writeable = False
    fine_x.flags.writeable = False
    return fine_t, fine_x, stride


def _fine_trajectory(spec: SystemSpec, x0: np.ndarray, n_points: int) -> tuple[np.ndarray, np.ndarray, int]:
    """Integrate once with the ID step size all the way to ``t_ood_end``.

    ID-Ext spans twice the ID window for every shipped system, so the ID-Ext
    grid is every second point of this fine grid and the ID grid is its first
    ``n_points`` entries; both regimes are literally the same trajectory.
    """
    ratio = (spec.t_ood_end - spec.t_start) / (spec.t_end - spec.t_start)
    stride = int(round(ratio))
    if abs(ratio - stride) > 1e-12:
        raise ValueError("ID-Ext span must be an integer multiple of the ID span")
    h = (spec.t_end - spec.t_start) / (n_points - 1)
    n_fine = (n_points - 1) * stride + 1
    fine_t = spec.t_start + h * np.arange(n_fine)
    fine_t[-1] = spec.t_ood_end
    return fine_t, integrate_rk4(spec.rhs, x0, fine_t), stride


def generate_dataset(
    system_id: int,
    regime: str = "ID",
    sigma: float = 0.0,
    ic_index: int = 0,
    seed: int | None = 0,
    n_points: int = N_POINTS,
) -> TrajectoryDataset:
    """Build one regime of one benchmark, optionally with additive Gaussian state noise."""
    spec = get_system(system_id)
    if regime not in REGIMES:
        raise ValueError(f"regime must be one of {REGIMES}, got {regime!r}")
    x0 = spec.initial_condition(ic_index)
    fine_t, fine_x, stride = _fine_cached(spec.system_id, tuple(x0), n_points)

    if sigma > 0:
        rng = np.random.default_rng(seed)
        # one draw on the fine grid keeps the two regimes' noise consistent
        fine_noisy = fine_x + rng.normal(0.0, sigma, size=fine_x.shape)
    else:
        fine_noisy = fine_x

    if regime == "ID":
        rows = slice(0, n_points)
        substeps = 1
    else:
        rows = slice(0, None, stride)
        substeps = stride
    t = fine_t[rows].copy()
    clean = fine_x[rows]
    states = fine_noisy[rows].copy()
    return TrajectoryDataset(
        system_id=spec.system_id,
        regime=regime,
        t=t,
        states=states,
        xdot=finite_difference(states, t),
        xdot_gt=ground_truth_rhs(system_id, 0.0, clean),
        x0=x0,
        sigma=float(sigma),
        seed=seed if sigma > 0 else None,
        ic_index=ic_index,
        substeps=substeps,
    )


# ---------------------------------------------------------------------------
# CSV + JSON sidecar
# ---------------------------------------------------------------------------

def _sidecar_path(path: Path) -> Path:
    return path.with_suffix(".json")


def write_dataset(path: str | Path, data: TrajectoryDataset) -> None:
    """CSV with t, x*, xdot* (finite differences) and xdot_gt*; metadata in a JSON sidecar."""
    path = Path(path)
    d = data.dimension
    header = ["t"] + [f"x{j}" for j in range(d)] + [f"xdot{j}" for j in range(d)] \
        + [f"xdot_gt{j}" for j in range(d)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(data.n_points):
            row = [data.t[i], *data.states[i], *data.xdot[i], *data.xdot_gt[i]]
            w.writerow([repr(float(v)) for v in row])
    _sidecar_path(path).write_text(json.dumps(data.metadata(), indent=2) + "\n", encoding="utf-8")


def read_dataset(path: str | Path) -> TrajectoryDataset:
    path = Path(path)
    meta = json.loads(_sidecar_path(path).read_text(encoding="utf-8"))
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], np.array(rows[1:], dtype=float)
    col = {name: i for i, name in enumerate(header)}
    d = sum(1 for name in header if name.startswith("x") and name[1:].isdigit())
    states = body[:, [col[f"x{j}"] for j in range(d)]]
    xdot = body[:, [col[f"xdot{j}"] for j in range(d)]]
    if all(f"xdot_gt{j}" in col for j in range(d)):
        xdot_gt = body[:, [col[f"xdot_gt{j}"] for j in range(d)]]
    else:
        xdot_gt = ground_truth_rhs(meta["system_id"], 0.0, states)
    return TrajectoryDataset(
        system_id=int(meta["system_id"]),
        regime=meta["regime"],
        t=body[:, col["t"]],
        states=states,
        xdot=xdot,
        xdot_gt=xdot_gt,
        x0=np.asarray(meta["initial_condition"], dtype=float),
        sigma=float(meta.get("sigma", 0.0)),
        seed=meta.get("seed"),
        ic_index=int(meta.get("ic_index", 0)),
        substeps=int(meta.get("substeps", 1)),
    )
