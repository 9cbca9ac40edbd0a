"""A complete candidate system: one fitted skeleton per state dimension."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ParamLengthMismatch
from .expression import ParamedEquation, build_skeleton, compile_expr, evaluate_term_matrix

_DIM_NAME = re.compile(r"^(?:x)?(\d+)(?:_t)?$")


def dim_name(j: int) -> str:
    return f"x{j}_t"


def parse_dim_name(name: str) -> int:
    m = _DIM_NAME.match(str(name).strip())
    if not m:
        raise ValueError(f"not a dimension name: {name!r}")
    return int(m.group(1))


@dataclass(frozen=True)
class FittedSystem:
    equations: tuple[ParamedEquation, ...]
    thetas: tuple[np.ndarray, ...]
    mses: tuple[float, ...] = ()
    # sampler justifications per dimension, term string -> text
    notes: tuple[dict, ...] = field(default=(), compare=False)

    def __post_init__(self):
        if len(self.equations) != len(self.thetas):
            raise ValueError("one parameter vector per equation is required")
        for eq, th in zip(self.equations, self.thetas):
            if np.shape(th) != (eq.n_params,):
                raise ParamLengthMismatch(
                    f"dimension {eq.dim}: expected {eq.n_params} parameters, got {np.shape(th)}"
                )

    @property
    def dimension(self) -> int:
        return len(self.equations)

    @property
    def n_terms(self) -> int:
        return sum(eq.n_terms for eq in self.equations)

    @property
    def total_mse(self) -> float:
        return float(sum(self.mses)) if self.mses else float("nan")

    def replace_dimension(self, j: int, eq: ParamedEquation, theta, mse: float,
                          note: dict | None = None) -> "FittedSystem":
        eqs, ths, ms = list(self.equations), list(self.thetas), list(self.mses)
        notes = list(self.notes) if self.notes else [{} for _ in eqs]
        eqs[j], ths[j], ms[j] = eq, np.asarray(theta, dtype=float), float(mse)
        notes[j] = dict(note or {})
        return FittedSystem(tuple(eqs), tuple(ths), tuple(ms), tuple(notes))

    def _compiled(self) -> list:
        cached = self.__dict__.get("_kernels")
        if cached is None:
            cached = [([compile_expr(t) for t in eq.terms], [float(v) for v in th])
                      for eq, th in zip(self.equations, self.thetas)]
            object.__setattr__(self, "_kernels", cached)
        return cached

    def rhs(self, t, x: np.ndarray) -> np.ndarray:
        """Right-hand side usable by the RK4 integrator.

        A single state takes a fast path through precompiled term kernels;
        a state matrix goes through the term matrix.
        """
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            cols = [x[i:i + 1] for i in range(x.size)]
            out = np.empty(self.dimension)
            for j, (kernels, th) in enumerate(self._compiled()):
                acc = th[-1]
                for k, c in zip(kernels, th):
                    acc = acc + c * k(cols, 1)[0]
                out[j] = acc
            return out
        out = np.empty((x.shape[0], self.dimension))
        with np.errstate(all="ignore"):
            for j, (eq, th) in enumerate(zip(self.equations, self.thetas)):
                out[:, j] = evaluate_term_matrix(eq.term_matrix(x), th)
        return out

    def format(self, digits: int = 4) -> list[str]:
        return [f"{dim_name(j)} = {eq.format(th, digits)}"
                for j, (eq, th) in enumerate(zip(self.equations, self.thetas))]

    # ------------------------------------------------------------------
    # equation files: {"x0_t": {"terms": [...], "params": [...]}, ...}
    # ------------------------------------------------------------------

    def to_json_dict(self) -> dict:
        return {
            dim_name(j): {"terms": eq.term_strings(), "params": [float(v) for v in th]}
            for j, (eq, th) in enumerate(zip(self.equations, self.thetas))
        }

    @classmethod
    def from_json_dict(cls, data: dict, dimension: int | None = None) -> "FittedSystem":
        entries = sorted(((parse_dim_name(k), v) for k, v in data.items()), key=lambda kv: kv[0])
        d = dimension if dimension is not None else len(entries)
        if [j for j, _ in entries] != list(range(d)):
            raise ValueError(f"equation file must define dimensions 0..{d - 1}")
        eqs, ths = [], []
        for j, entry in entries:
            eq = build_skeleton(entry.get("terms", []), j, dimension=d)
            eqs.append(eq)
            ths.append(np.asarray(entry["params"], dtype=float))
        return cls(tuple(eqs), tuple(ths))


def write_equation_file(path: str | Path, system: FittedSystem) -> None:
    # repr-exact floats survive the round trip bit for bit
    Path(path).write_text(json.dumps(system.to_json_dict(), indent=2) + "\n", encoding="utf-8")


def read_equation_file(path: str | Path, dimension: int | None = None) -> FittedSystem:
    return FittedSystem.from_json_dict(json.loads(Path(path).read_text(encoding="utf-8")), dimension)


def system_from_terms(terms: Sequence[Sequence[str]], params: Sequence[Sequence[float]]) -> FittedSystem:
    d = len(terms)
    eqs = tuple(build_skeleton(list(t), j, dimension=d) for j, t in enumerate(terms))
    return FittedSystem(eqs, tuple(np.asarray(p, dtype=float) for p in params))
