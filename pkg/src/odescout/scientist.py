"""Term bookkeeping for the scientist stage.

Each term of the current attempt gets a quantitative grade from an ablation
test (zero one coefficient, keep the rest fixed, measure the relative change
of the objective) and a semantic grade from the language model.  The two are
fused into keep / hold / remove with a strike counter, removed skeletons go
on a per-dimension ban list, and the ban list is occasionally forgotten.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .benchmarks import TrajectoryDataset
from .expression import Expression, ParamedEquation, skeleton_key
from .optimizer import ResidualObjective

GRADES = ("good", "neutral", "bad")
ACTIONS = ("keep", "hold", "remove")
MAX_STRIKES = 2
MAX_GOOD_PER_DIMENSION = 3


@dataclass(frozen=True)
class AblationConfig:
    delta: float = 0.05
    epsilon: float = 1e-12
    forget_probability: float = 0.01
    forget_mode: str = "all"  # or "entry": each key forgotten independently

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError("delta must be positive")
        if not 0.0 <= self.forget_probability <= 1.0:
            raise ValueError("forget probability must lie in [0, 1]")
        if self.forget_mode not in ("all", "entry"):
            raise ValueError(f"unknown forget mode {self.forget_mode!r}")


@dataclass(frozen=True)
class TermVerdict:
    key: str
    term: str
    semantic: str
    quantitative: str
    strikes: int
    action: str
    delta: float = 0.0
    reasoning: str = ""

    def to_dict(self) -> dict:
        return {
            "term": self.term,
            "key": self.key,
            "semantic": self.semantic,
            "quantitative": self.quantitative,
            "action": self.action,
            "strikes": self.strikes,
            "delta": _finite_or_none(self.delta),
        }


def _finite_or_none(x: float):
    return float(x) if np.isfinite(x) else None


# ---------------------------------------------------------------------------
# ablation
# ---------------------------------------------------------------------------

def ablation_deltas(eq: ParamedEquation, theta, data: TrajectoryDataset, j: int,
                    cfg: AblationConfig | None = None) -> np.ndarray:
    """Relative objective change when each term's coefficient is zeroed.

    The bias slot is never ablated and nothing is re-optimised.
    """
    cfg = cfg or AblationConfig()
    obj = ResidualObjective.for_dimension(eq, data, j)
    theta = np.asarray(theta, dtype=float)
    if eq.n_terms == 0:
        return np.zeros(0)
    # base and ablated rows share one batch so an already-zero coefficient gives exactly 0
    rows = np.tile(theta, (eq.n_terms + 1, 1))
    rows[np.arange(1, eq.n_terms + 1), np.arange(eq.n_terms)] = 0.0
    values = obj.batch(rows)
    base, values = values[0], values[1:]
    with np.errstate(all="ignore"):
        return (values - base) / (base + cfg.epsilon)


def classify_delta(delta: float, cfg: AblationConfig | None = None) -> str:
    cfg = cfg or AblationConfig()
    if delta > cfg.delta:
        return "good"
    if delta < -cfg.delta:
        return "bad"
    return "neutral"


def ablation_classify(eq: ParamedEquation, theta, data: TrajectoryDataset, j: int,
                      cfg: AblationConfig | None = None) -> list[str]:
    return [classify_delta(d, cfg) for d in ablation_deltas(eq, theta, data, j, cfg)]


# ---------------------------------------------------------------------------
# decision matrix
# ---------------------------------------------------------------------------

def decide_action(semantic: str, quantitative: str, strikes: int = 0) -> tuple[str, int]:
    """Fuse the two grades with the prior strike count.

    Returns ``(action, strikes_after)``.  ``strikes`` is 0 for a fresh or
    previously kept term and 1 or 2 after that many consecutive holds.
    """
    if semantic not in GRADES or quantitative not in GRADES:
        raise ValueError(f"invalid grades ({semantic!r}, {quantitative!r})")
    if strikes not in range(MAX_STRIKES + 1):
        raise ValueError(f"strike count must be in 0..{MAX_STRIKES}, got {strikes}")
    if semantic == "bad":
        return "remove", 0
    if semantic == "good" and quantitative == "good":
        return "keep", 0
    if strikes >= MAX_STRIKES:
        return "remove", 0
    return "hold", strikes + 1


def cap_good_grades(grades: Sequence[str], limit: int = MAX_GOOD_PER_DIMENSION) -> list[str]:
    """Downgrade semantic 'good' beyond the first ``limit`` to 'neutral'."""
    out, seen = [], 0
    for g in grades:
        if g == "good":
            seen += 1
            if seen > limit:
                g = "neutral"
        out.append(g)
    return out


# ---------------------------------------------------------------------------
# ban list
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BanList:
    entries: Mapping[int, frozenset] = field(default_factory=dict)

    def __contains__(self, item: tuple[int, str]) -> bool:
        j, key = item
        return key in self.entries.get(j, frozenset())

    def keys(self, j: int) -> list[str]:
        return sorted(self.entries.get(j, frozenset()))

    def is_empty(self) -> bool:
        return not any(self.entries.values())

    def __len__(self) -> int:
        return sum(len(v) for v in self.entries.values())

    def with_keys(self, j: int, keys: Iterable[str]) -> "BanList":
        keys = frozenset(keys)
        if not keys:
            return self
        merged = dict(self.entries)
        merged[j] = merged.get(j, frozenset()) | keys
        return BanList(merged)

    def to_dict(self) -> dict:
        return {str(j): sorted(v) for j, v in sorted(self.entries.items()) if v}

    @classmethod
    def from_dict(cls, data: Mapping) -> "BanList":
        return cls({int(j): frozenset(v) for j, v in data.items()})


def apply_removals(ban: BanList, removed: Iterable[str | Expression], j: int) -> BanList:
    keys = [r if isinstance(r, str) else skeleton_key(r) for r in removed]
    return ban.with_keys(j, keys)


def maybe_forget(ban: BanList, rng: np.random.Generator | int | None,
                 cfg: AblationConfig | None = None) -> tuple[BanList, bool]:
    """One forgetting draw; returns the new list and whether anything was forgotten."""
    cfg = cfg or AblationConfig()
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    if cfg.forget_mode == "all":
        if rng.random() < cfg.forget_probability:
            return BanList(), True
        return ban, False
    kept, dropped = {}, False
    for j in sorted(ban.entries):
        survivors = set()
        for key in sorted(ban.entries[j]):
            if rng.random() < cfg.forget_probability:
                dropped = True
            else:
                survivors.add(key)
        kept[j] = frozenset(survivors)
    return BanList(kept), dropped


def filter_banned(terms: Sequence[Expression], ban: BanList, j: int) -> list[Expression]:
    return [t for t in terms if (j, skeleton_key(t)) not in ban]
