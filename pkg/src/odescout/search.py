"""The discovery loop: sample, fit, grade, decide, repeat.

One iteration:

1. render the sampler prompt from the current state and ask for hypotheses
2. drop banned terms and fit every dimension of every hypothesis
3. keep the hypothesis with the lowest summed residual as the current attempt
4. ablate its terms, ask the scientist for semantic grades, fuse both into
   keep / hold / remove, ban removed skeletons, maybe forget the ban list
5. update the global best dimension by dimension

Everything that happens is written to an optional run directory.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .agents import (
    HttpChatBackend,
    RetryPolicy,
    TokenTally,
    build_sampler_prompt,
    build_scientist_prompt,
    complete,
    default_scientist_response,
    parse_sampler_response,
    parse_scientist_response,
)
from .agents.parsing import Hypothesis
from .benchmarks import REGIMES, SystemSpec, TrajectoryDataset, generate_dataset, get_system
from .errors import (
    AllStrategiesFailed,
    BudgetExceeded,
    ConfigError,
    MalformedResponse,
    NoValidHypothesis,
    ScriptExhausted,
    TermCapExceeded,
    TransportError,
)
from .evaluation import (
    NmseReport,
    TermTestConfig,
    evaluate_system,
    nmse_success_test,
    simulate,
    term_match_test,
)
from .expression import build_skeleton, render
from .fitted import FittedSystem, dim_name, write_equation_file
from .optimizer import OptimizerConfig, optimize_best_of_three
from .scientist import (
    AblationConfig,
    BanList,
    TermVerdict,
    ablation_deltas,
    apply_removals,
    classify_delta,
    decide_action,
    filter_banned,
    maybe_forget,
)

log = logging.getLogger(__name__)


@dataclass
class SearchConfig:
    system_id: int = 2
    iterations: int = 100
    n_hypotheses: int = 3
    term_cap: int = 10
    seed: int = 0
    sigma: float = 0.0
    ic_index: int = 0
    regime: str = "ID"
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    term_test: TermTestConfig = field(default_factory=TermTestConfig)
    backend: str = "scripted"  # or "live"
    endpoint: str = ""
    model: str = ""
    api_key_env: str = "ODESCOUT_API_KEY"
    sampler_temperature: float = 0.9
    scientist_temperature: float = 0.6
    max_tokens: int = 3000
    retries: int = 3
    token_budget: int | None = None
    description: str | None = None
    workers: int = 1
    run_dir: str | None = None

    def __post_init__(self):
        if self.iterations < 0 or self.n_hypotheses < 1 or self.term_cap < 1 or self.workers < 1:
            raise ConfigError("iterations >= 0, hypotheses >= 1, term cap >= 1 and workers >= 1 required")
        if self.regime not in REGIMES:
            raise ConfigError(f"regime must be one of {REGIMES}")
        if self.backend not in ("scripted", "live"):
            raise ConfigError(f"unknown backend {self.backend!r}")
        if self.sigma < 0:
            raise ConfigError("sigma must be non-negative")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["optimizer"]["bounds"] = list(self.optimizer.bounds)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "SearchConfig":
        data = dict(data)
        if "optimizer" in data:
            opt = dict(data["optimizer"])
            if "bounds" in opt:
                opt["bounds"] = tuple(opt["bounds"])
            data["optimizer"] = OptimizerConfig(**opt)
        if "ablation" in data:
            data["ablation"] = AblationConfig(**data["ablation"])
        if "term_test" in data:
            data["term_test"] = TermTestConfig(**data["term_test"])
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class IterationRecord:
    iteration: int
    status: str
    chosen: int | None = None
    current_mse: list = field(default_factory=list)
    verdicts: dict = field(default_factory=dict)  # dimension -> [TermVerdict]
    banned: dict = field(default_factory=dict)  # dimension -> keys added this iteration
    forgot: bool = False
    replaced: list = field(default_factory=list)  # dimensions whose global best changed


@dataclass
class SearchState:
    iteration: int = 0
    best: FittedSystem | None = None
    previous: FittedSystem | None = None
    insight: str = ""
    ban: BanList = field(default_factory=BanList)
    strikes: dict = field(default_factory=dict)  # (dimension, key) -> strikes
    last_verdicts: dict = field(default_factory=dict)
    history: list = field(default_factory=list)
    tally: TokenTally = field(default_factory=TokenTally)
    best_trace: list = field(default_factory=list)  # per-iteration global-best MSEs


@dataclass
class HypothesisResult:
    index: int
    system: FittedSystem | None  # None when any dimension failed
    strategies: list = field(default_factory=list)

    @property
    def total_mse(self) -> float:
        return self.system.total_mse if self.system is not None else float("inf")


# ---------------------------------------------------------------------------
# small pure steps
# ---------------------------------------------------------------------------

def select_current_attempt(results: Sequence[HypothesisResult]) -> HypothesisResult:
    """Lowest summed residual, then fewer terms, then proposal order."""
    valid = [r for r in results if r.system is not None and np.isfinite(r.total_mse)]
    if not valid:
        raise NoValidHypothesis("no hypothesis produced a finite objective")
    return min(valid, key=lambda r: (r.total_mse, r.system.n_terms, r.index))


def update_global_best(state: SearchState, current: FittedSystem) -> list[int]:
    """Replace dimension j of the global best iff the current residual is strictly lower."""
    if state.best is None:
        state.best = current
        return list(range(current.dimension))
    replaced = []
    best = state.best
    for j in range(current.dimension):
        if current.mses[j] < best.mses[j]:
            note = current.notes[j] if current.notes else {}
            best = best.replace_dimension(j, current.equations[j], current.thetas[j], current.mses[j], note)
            replaced.append(j)
    state.best = best
    for j in replaced:
        log.info("global best for %s replaced (mse %.3e)", dim_name(j), best.mses[j])
    return replaced


def action_frequency_report(state: SearchState) -> list[dict]:
    counts: dict[tuple[int, str], Counter] = {}
    for rec in state.history:
        for j, verdicts in rec.verdicts.items():
            for v in verdicts:
                counts.setdefault((j, v.key), Counter())[v.action] += 1
    rows = [{"dimension": dim_name(j), "key": key, "keep": c["keep"], "hold": c["hold"],
             "remove": c["remove"]} for (j, key), c in counts.items()]
    rows.sort(key=lambda r: (r["dimension"], -r["keep"], -r["hold"], r["key"]))
    return rows


def action_frequency_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=["dimension", "key", "keep", "hold", "remove"], lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

@dataclass
class DiscoveryReport:
    config: dict
    iterations_run: int
    best: FittedSystem | None
    nmse: NmseReport | None
    nmse_success: bool
    term_success: bool
    tokens: dict
    actions: list
    history: list

    def to_dict(self) -> dict:
        best = None
        if self.best is not None:
            best = {
                "equations": self.best.to_json_dict(),
                "formatted": self.best.format(6),
                "residual_mse": [_num(m) for m in self.best.mses],
            }
        return {
            "config": self.config,
            "iterations_run": self.iterations_run,
            "best": best,
            "nmse": self.nmse.to_dict() if self.nmse is not None else None,
            "nmse_success": self.nmse_success,
            "term_success": self.term_success,
            "tokens": self.tokens,
            "actions": self.actions,
            "history": [_record_dict(r) for r in self.history],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=False) + "\n"


def _num(x):
    return float(x) if np.isfinite(x) else None


def _record_dict(rec: IterationRecord) -> dict:
    return {
        "iteration": rec.iteration,
        "status": rec.status,
        "chosen": rec.chosen,
        "current_mse": [_num(m) for m in rec.current_mse],
        "verdicts": {dim_name(j): [v.to_dict() for v in vs] for j, vs in sorted(rec.verdicts.items())},
        "banned": {dim_name(j): ks for j, ks in sorted(rec.banned.items())},
        "forgot": rec.forgot,
        "replaced": rec.replaced,
    }


# ---------------------------------------------------------------------------
# run directory
# ---------------------------------------------------------------------------

class RunWriter:
    def __init__(self, root: str | Path | None):
        self.root = Path(root) if root else None
        if self.root is not None:
            self.root.mkdir(parents=True, exist_ok=True)

    def write(self, rel: str, content) -> None:
        if self.root is None:
            return
        path = self.root / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        if not isinstance(content, str):
            content = json.dumps(content, indent=2, sort_keys=True, allow_nan=False, default=_jsonable) + "\n"
        path.write_text(content, encoding="utf-8")


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(type(obj))


# ---------------------------------------------------------------------------
# the loop
# ---------------------------------------------------------------------------

def make_backends(config: SearchConfig):
    if config.backend != "live":
        raise ConfigError("scripted runs need sampler and scientist backends passed in")
    if not config.endpoint or not config.model:
        raise ConfigError("live backend needs an endpoint and a model id")
    b = HttpChatBackend(config.endpoint, config.model, config.api_key_env)
    return b, b


def _fit_seed(seed: int, iteration: int, h: int, j: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, iteration, h, j])


class _Search:
    def __init__(self, config: SearchConfig, sampler, scientist, data: TrajectoryDataset, spec: SystemSpec):
        self.cfg = config
        self.sampler = sampler
        self.scientist = scientist
        self.data = data
        self.spec = spec
        self.state = SearchState(tally=TokenTally(budget=config.token_budget))
        self.forget_rng = np.random.default_rng([config.seed, 1])
        self.retry = RetryPolicy(retries=config.retries)
        self.out = RunWriter(config.run_dir)

    # -- fitting ---------------------------------------------------------
    def _fit_one(self, job):
        h, j, eq = job
        seed = int(_fit_seed(self.cfg.seed, self.state.iteration + 1, h, j).generate_state(1)[0])
        try:
            res = optimize_best_of_three(eq, self.data, j, self.cfg.optimizer, seed=seed)
        except AllStrategiesFailed:
            return h, j, eq, None
        return h, j, eq, res

    def _fit_hypotheses(self, hypotheses: Sequence[Hypothesis]) -> list[HypothesisResult]:
        d = self.spec.dimension
        jobs, skipped = [], set()
        for h, hyp in enumerate(hypotheses):
            eqs = []
            for j in range(d):
                terms = filter_banned(list(hyp.terms.get(j, ())), self.state.ban, j)
                try:
                    eqs.append(build_skeleton(terms, j, term_cap=self.cfg.term_cap))
                except TermCapExceeded:
                    skipped.add(h)
                    break
            if h not in skipped:
                jobs.extend((h, j, eq) for j, eq in enumerate(eqs))
        if self.cfg.workers > 1:
            with ThreadPoolExecutor(max_workers=self.cfg.workers) as pool:
                fits = list(pool.map(self._fit_one, jobs))
        else:
            fits = [self._fit_one(job) for job in jobs]

        by_h: dict[int, dict[int, tuple]] = {}
        for h, j, eq, res in fits:
            by_h.setdefault(h, {})[j] = (eq, res)
        results = []
        for h, hyp in enumerate(hypotheses):
            fitted = by_h.get(h)
            if fitted is None or any(fitted[j][1] is None for j in range(d)):
                results.append(HypothesisResult(h, None))
                continue
            eqs = tuple(fitted[j][0] for j in range(d))
            notes = tuple(
                {render(t): hyp.reasons.get(j, {}).get(render(t)) for t in eqs[j].terms
                 if hyp.reasons.get(j, {}).get(render(t))}
                for j in range(d)
            )
            system = FittedSystem(eqs, tuple(fitted[j][1].theta for j in range(d)),
                                  tuple(fitted[j][1].mse for j in range(d)), notes)
            results.append(HypothesisResult(h, system, [fitted[j][1].strategy for j in range(d)]))
        return results

    # -- one iteration ---------------------------------------------------
    def step(self) -> IterationRecord:
        st, cfg = self.state, self.cfg
        it = st.iteration + 1
        tag = f"iterations/{it:04d}"
        rec = IterationRecord(it, "ok")

        bundle = build_sampler_prompt(st, self.spec, cfg.n_hypotheses, cfg.term_cap,
                                      cfg.sampler_temperature, cfg.max_tokens)
        self.out.write(f"{tag}/sampler_prompt.json", {"messages": bundle.messages(),
                                                      "temperature": bundle.temperature,
                                                      "max_tokens": bundle.max_tokens})
        try:
            reply = complete(self.sampler, bundle, st.tally, self.retry)
        except (TransportError, ScriptExhausted, MalformedResponse) as exc:
            return self._skip(rec, f"sampler call failed: {exc}")
        self.out.write(f"{tag}/sampler_response.json", {"text": reply.text,
                                                        "input_tokens": reply.input_tokens,
                                                        "output_tokens": reply.output_tokens})
        try:
            parsed = parse_sampler_response(reply.text, self.spec.dimension, cfg.term_cap, cfg.n_hypotheses)
        except MalformedResponse as exc:
            return self._skip(rec, f"sampler reply unusable: {exc}")

        results = self._fit_hypotheses(parsed.hypotheses)
        self.out.write(f"{tag}/optimization.json", [
            {"hypothesis": r.index,
             "terms": {dim_name(j): eq.term_strings() for j, eq in enumerate(r.system.equations)}
             if r.system else None,
             "mse": [_num(m) for m in r.system.mses] if r.system else None,
             "theta": [th.tolist() for th in r.system.thetas] if r.system else None,
             "strategy": r.strategies}
            for r in results
        ])
        try:
            chosen = select_current_attempt(results)
        except NoValidHypothesis as exc:
            return self._skip(rec, str(exc))
        current = chosen.system
        rec.chosen, rec.current_mse = chosen.index, list(current.mses)

        # quantitative grades
        deltas = {j: ablation_deltas(eq, current.thetas[j], self.data, j, cfg.ablation)
                  for j, eq in enumerate(current.equations)}
        keys = {j: eq.keys() for j, eq in enumerate(current.equations)}

        sbundle = build_scientist_prompt(st, self.spec, current, st.previous, st.best, cfg.iterations,
                                         cfg.scientist_temperature, cfg.max_tokens)
        self.out.write(f"{tag}/scientist_prompt.json", {"messages": sbundle.messages(),
                                                        "temperature": sbundle.temperature,
                                                        "max_tokens": sbundle.max_tokens})
        try:
            sreply = complete(self.scientist, sbundle, st.tally, self.retry)
            self.out.write(f"{tag}/scientist_response.json", {"text": sreply.text,
                                                              "input_tokens": sreply.input_tokens,
                                                              "output_tokens": sreply.output_tokens})
            assessment = parse_scientist_response(sreply.text, keys, self.spec.dimension)
        except (TransportError, ScriptExhausted, MalformedResponse) as exc:
            log.warning("scientist unavailable (%s); semantic grades default to neutral", exc)
            assessment = default_scientist_response(keys)

        # fuse into actions
        new_strikes = {}
        ban = st.ban
        for j, eq in enumerate(current.equations):
            verdicts, removed = [], []
            for i, term in enumerate(eq.terms):
                key = keys[j][i]
                quant = classify_delta(deltas[j][i], cfg.ablation)
                a = assessment.assessments[j][i]
                action, strikes = decide_action(a.semantic, quant, st.strikes.get((j, key), 0))
                if action == "hold":
                    new_strikes[(j, key)] = strikes
                if action == "remove":
                    removed.append(key)
                verdicts.append(TermVerdict(key, render(term), a.semantic, quant, strikes, action,
                                            float(deltas[j][i]), a.reasoning))
            rec.verdicts[j] = verdicts
            if removed:
                rec.banned[j] = sorted(set(removed))
                ban = apply_removals(ban, removed, j)
        st.strikes = new_strikes
        ban, rec.forgot = maybe_forget(ban, self.forget_rng, cfg.ablation)
        if rec.forgot:
            log.info("ban list forgotten at iteration %d", it)
        st.ban = ban
        st.last_verdicts = rec.verdicts
        if assessment.insight:
            st.insight = assessment.insight
        self.out.write(f"{tag}/verdicts.json", {dim_name(j): [v.to_dict() for v in vs]
                                                for j, vs in sorted(rec.verdicts.items())})

        rec.replaced = update_global_best(st, current)
        st.previous = current
        return self._finish(rec)

    def _skip(self, rec: IterationRecord, reason: str) -> IterationRecord:
        log.warning("iteration %d skipped: %s", rec.iteration, reason)
        rec.status = f"skipped: {reason}"
        return self._finish(rec)

    def _finish(self, rec: IterationRecord) -> IterationRecord:
        st = self.state
        st.history.append(rec)
        st.iteration += 1
        if st.best is not None:
            trace = list(st.best.mses)
            if st.best_trace:
                assert all(a <= b for a, b in zip(trace, st.best_trace[-1])), "global best got worse"
            st.best_trace.append(trace)
        assert len(st.history) == st.iteration
        return rec

    # -- whole run -------------------------------------------------------
    def run(self) -> DiscoveryReport:
        cfg = self.cfg
        self.out.write("config.json", cfg.to_dict())
        for _ in range(cfg.iterations):
            try:
                self.step()
            except BudgetExceeded as exc:
                log.warning("stopping early: %s", exc)
                break
        return self.report()

    def report(self) -> DiscoveryReport:
        st, cfg = self.state, self.cfg
        nmse, nmse_ok, term_ok = None, False, False
        if st.best is not None:
            datasets = {regime: generate_dataset(cfg.system_id, regime, cfg.sigma, cfg.ic_index, cfg.seed)
                        for regime in REGIMES}
            nmse = evaluate_system(st.best, datasets)
            nmse_ok = nmse_success_test(nmse)
            term_ok = term_match_test(st.best, self.spec, self.data, cfg.term_test)
            if self.out.root is not None:
                write_equation_file(self.out.root / "best_equation.json", st.best)
                self.out.write("trajectories.csv", trajectory_csv(st.best, datasets["ID-Ext"]))
        actions = action_frequency_report(st)
        report = DiscoveryReport(cfg.to_dict(), st.iteration, st.best, nmse, nmse_ok, term_ok,
                                 st.tally.to_dict(), actions, st.history)
        self.out.write("actions.csv", action_frequency_csv(actions))
        self.out.write("report.json", report.to_json())
        return report


def trajectory_csv(system: FittedSystem, data: TrajectoryDataset) -> str:
    traj = simulate(system, data)
    d = data.dimension
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t"] + [f"x{j}" for j in range(d)] + [f"x{j}_model" for j in range(d)])
    for i in range(data.n_points):
        model = traj[i] if traj is not None else [float("nan")] * d
        w.writerow([repr(float(v)) for v in (data.t[i], *data.states[i], *model)])
    return buf.getvalue()


def run_search(config: SearchConfig, sampler=None, scientist=None,
               data: TrajectoryDataset | None = None) -> DiscoveryReport:
    """Run the full loop and return the final report."""
    spec = get_system(config.system_id)
    if config.description:
        spec = dataclasses.replace(spec, description=config.description)
    if sampler is None or scientist is None:
        if config.iterations == 0:
            sampler = scientist = None
        else:
            live_sampler, live_scientist = make_backends(config)
            sampler = sampler or live_sampler
            scientist = scientist or live_scientist
    if data is None:
        data = generate_dataset(config.system_id, config.regime, config.sigma, config.ic_index, config.seed)
    return _Search(config, sampler, scientist, data, spec).run()


def run_repeats(config: SearchConfig, repeats: int,
                backends: Callable[[int], tuple] | None = None) -> tuple[DiscoveryReport, list[DiscoveryReport]]:
    """Rerun with seeds ``seed, seed+1, ...``; best = lowest mean ID integral NMSE."""
    reports = []
    for r in range(repeats):
        run_dir = config.run_dir
        if run_dir and repeats > 1:
            run_dir = str(Path(run_dir) / f"repeat_{r}")
        cfg = dataclasses.replace(config, seed=config.seed + r, run_dir=run_dir)
        sampler, scientist = backends(r) if backends else (None, None)
        reports.append(run_search(cfg, sampler, scientist))

    def score(rep: DiscoveryReport) -> float:
        if rep.nmse is None:
            return float("inf")
        v = rep.nmse.mean("integral", "ID")
        return v if np.isfinite(v) else float("inf")

    best = min(range(len(reports)), key=lambda i: (score(reports[i]), i))
    return reports[best], reports
