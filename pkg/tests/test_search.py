import dataclasses
import json

import numpy as np
import pytest

from odescout.agents import ScriptedBackend, ScriptedSampler, ScriptedScientist
from odescout.cli import main
from odescout.errors import ConfigError, NoValidHypothesis
from odescout.fitted import system_from_terms
from odescout.search import (
    HypothesisResult,
    SearchConfig,
    SearchState,
    action_frequency_csv,
    action_frequency_report,
    run_repeats,
    run_search,
    select_current_attempt,
    update_global_best,
)

SIR_GT = {0: ["x0*x1"], 1: ["x0*x1", "x1"]}
GLIDER_SPURIOUS = {0: ["x0**2", "np.sin(x1)", "x1**4"], 1: ["x0", "np.cos(x1)/x0"]}
GLIDER_GRADES = {0: {"C*(x0**2)": "good", "C*(sin(x1))": "good", "C*(x1**4)": "neutral"},
                 1: {"C*(x0)": "good", "C*(cos(x1)/x0)": "good"}}


def _with_mses(terms, mses):
    base = system_from_terms(terms, [[0.0] * (len(t) + 1) for t in terms])
    return dataclasses.replace(base, mses=tuple(mses))


def _result(i, mses, terms=None):
    terms = terms or [["x0"]] * len(mses)
    return HypothesisResult(i, _with_mses(terms, mses))


# ---------------------------------------------------------------------------
# pure steps
# ---------------------------------------------------------------------------

def test_select_current_attempt_argmin():
    results = [_result(0, [0.5]), _result(1, [0.3]), _result(2, [0.9])]
    assert select_current_attempt(results).index == 1


def test_select_current_attempt_tie_breaks():
    many = _result(0, [0.1, 0.2], [["x0", "x1", "x0*x1", "x0**2"], ["x0", "x1", "x1**2"]])
    few = _result(1, [0.2, 0.1], [["x0", "x1"], ["x0", "x1", "x1**2"]])
    assert select_current_attempt([many, few]).index == 1
    same_a, same_b = _result(0, [0.3]), _result(1, [0.3])
    assert select_current_attempt([same_b, same_a]).index == 0


def test_select_current_attempt_all_invalid():
    with pytest.raises(NoValidHypothesis):
        select_current_attempt([HypothesisResult(0, None), _result(1, [float("inf")])])
    with pytest.raises(NoValidHypothesis):
        select_current_attempt([])


def test_update_global_best_examples():
    state = SearchState()
    first = _with_mses([["x0"], ["x1"]], [1.0, 1.0])
    assert update_global_best(state, first) == [0, 1]
    assert state.best is first

    better0 = _with_mses([["x0*x1"], ["x0"]], [0.5, 2.0])
    assert update_global_best(state, better0) == [0]
    assert state.best.mses == (0.5, 1.0)
    assert state.best.equations[0].term_strings() == ["x0*x1"]
    assert state.best.equations[1].term_strings() == ["x1"]

    worse = _with_mses([["x0"], ["x0"]], [0.5, 3.0])  # equal is not strictly lower
    before = state.best
    assert update_global_best(state, worse) == []
    assert state.best is before


def test_action_frequency_report_edges():
    assert action_frequency_report(SearchState()) == []
    assert action_frequency_csv([]) == "dimension,key,keep,hold,remove\n"


# ---------------------------------------------------------------------------
# whole loop
# ---------------------------------------------------------------------------

def test_zero_iterations_needs_no_backend():
    rep = run_search(SearchConfig(system_id=1, iterations=0, backend="live"))
    assert rep.iterations_run == 0 and rep.best is None and rep.history == []
    assert rep.tokens["total_tokens"] == 0 and rep.tokens["calls"] == 0
    assert not rep.nmse_success and not rep.term_success
    json.loads(rep.to_json())


def test_truth_at_first_iteration_passes(tmp_path):
    cfg = SearchConfig(system_id=1, iterations=2, n_hypotheses=1, run_dir=str(tmp_path))
    grades = {0: {"C*(x0*x1)": "good"}, 1: {"C*(x0*x1)": "good", "C*(x1)": "good"}}
    rep = run_search(cfg, ScriptedSampler([[SIR_GT]], cycle=True), ScriptedScientist(grades))
    assert rep.nmse_success and rep.term_success
    assert max(rep.nmse.integral["ID"]) < 1e-3
    assert all(r.status == "ok" for r in rep.history)
    # run directory layout
    for name in ("config.json", "report.json", "best_equation.json", "trajectories.csv", "actions.csv"):
        assert (tmp_path / name).exists()
    it1 = tmp_path / "iterations" / "0001"
    for name in ("sampler_prompt.json", "sampler_response.json", "optimization.json",
                 "scientist_prompt.json", "scientist_response.json", "verdicts.json"):
        assert (it1 / name).exists()
    assert json.loads((tmp_path / "report.json").read_text()) == json.loads(rep.to_json())
    # ground-truth keys are kept every time
    rows = {(r["dimension"], r["key"]): r for r in rep.actions}
    assert rows[("x1_t", "C*(x1)")]["keep"] == 2


def test_spurious_term_is_held_then_banned(tmp_path):
    cfg = SearchConfig(system_id=2, iterations=4, n_hypotheses=1, run_dir=str(tmp_path))
    rep = run_search(cfg, ScriptedSampler([[GLIDER_SPURIOUS]], cycle=True), ScriptedScientist(GLIDER_GRADES))
    trace = [[v.action for v in r.verdicts[0] if v.key == "C*(x1**4)"] for r in rep.history]
    assert trace[:3] == [["hold"], ["hold"], ["remove"]]
    assert rep.history[2].banned == {0: ["C*(x1**4)"]}
    # once banned the term never reaches the optimizer and the sampler is told about it
    opt4 = json.loads((tmp_path / "iterations" / "0004" / "optimization.json").read_text())
    assert opt4[0]["terms"]["x0_t"] == ["x0**2", "sin(x1)"]
    prompt4 = json.loads((tmp_path / "iterations" / "0004" / "sampler_prompt.json").read_text())
    user = prompt4["messages"][-1]["content"]
    assert "x0_t: C*(x1**4)" in user.split("Removed Terms List")[1]
    # ground-truth terms were kept throughout
    assert all(v.action == "keep" for r in rep.history for v in r.verdicts[0] if v.key != "C*(x1**4)")
    assert rep.term_success and rep.nmse_success


def test_semantic_bad_removes_immediately(tmp_path):
    grades = {0: {"C*(x0*x1)": "good", "C*(x0)": "bad"}}
    hyp = {0: ["x0*x1", "x0"], 1: ["x0*x1", "x1"]}
    cfg = SearchConfig(system_id=1, iterations=2, n_hypotheses=1, run_dir=str(tmp_path))
    rep = run_search(cfg, ScriptedSampler([[hyp]], cycle=True), ScriptedScientist(grades))
    assert rep.history[0].banned == {0: ["C*(x0)"]}
    opt2 = json.loads((tmp_path / "iterations" / "0002" / "optimization.json").read_text())
    assert opt2[0]["terms"]["x0_t"] == ["x0*x1"]


def test_all_terms_banned_gives_bias_only(tmp_path):
    grades = {0: {"C*(x0)": "bad"}, 1: {"C*(x0*x1)": "good", "C*(x1)": "good"}}
    hyp = {0: ["x0"], 1: ["x0*x1", "x1"]}
    cfg = SearchConfig(system_id=1, iterations=2, n_hypotheses=1, run_dir=str(tmp_path))
    rep = run_search(cfg, ScriptedSampler([[hyp]], cycle=True), ScriptedScientist(grades))
    opt2 = json.loads((tmp_path / "iterations" / "0002" / "optimization.json").read_text())
    assert opt2[0]["terms"]["x0_t"] == []
    assert len(opt2[0]["theta"][0]) == 1
    assert rep.history[1].status == "ok"


def test_unusable_sampler_reply_skips_iteration():
    cfg = SearchConfig(system_id=1, iterations=3, n_hypotheses=1)
    sampler = ScriptedBackend(["no json at all", json.dumps({"ode_pairs": [{"x0_t": ["x0*x1"]}]}), "{}"])
    rep = run_search(cfg, sampler, ScriptedScientist({}))
    statuses = [r.status for r in rep.history]
    assert statuses[0].startswith("skipped") and statuses[1] == "ok" and statuses[2].startswith("skipped")
    assert rep.iterations_run == 3 and rep.best is not None


def test_exhausted_script_skips_remaining_iterations():
    rep = run_search(SearchConfig(system_id=1, iterations=3, n_hypotheses=1),
                     ScriptedSampler([[SIR_GT]]), ScriptedScientist({}))
    assert [r.status == "ok" for r in rep.history] == [True, False, False]


def test_scientist_failure_defaults_to_neutral():
    rep = run_search(SearchConfig(system_id=1, iterations=1, n_hypotheses=1),
                     ScriptedSampler([[SIR_GT]]), ScriptedBackend([]))
    verdicts = rep.history[0].verdicts
    assert all(v.semantic == "neutral" and v.action == "hold" for vs in verdicts.values() for v in vs)


def test_token_totals_match_per_call_usage(tmp_path):
    cfg = SearchConfig(system_id=1, iterations=3, n_hypotheses=1, run_dir=str(tmp_path))
    rep = run_search(cfg, ScriptedSampler([[SIR_GT]], cycle=True), ScriptedScientist({}))
    used = 0
    for path in sorted(tmp_path.glob("iterations/*/*_response.json")):
        body = json.loads(path.read_text())
        used += body["input_tokens"] + body["output_tokens"]
    assert rep.tokens["total_tokens"] == used > 0
    assert rep.tokens["calls"] == 6


def test_token_budget_stops_run():
    cfg = SearchConfig(system_id=1, iterations=10, n_hypotheses=1, token_budget=1)
    rep = run_search(cfg, ScriptedSampler([[SIR_GT]], cycle=True), ScriptedScientist({}))
    assert rep.iterations_run < 10


def test_global_best_is_monotone():
    sched = [[{0: ["x0"], 1: ["x1"]}], [{0: ["x0*x1", "x0"], 1: ["x1**2"]}], [SIR_GT], [{0: ["x1"], 1: ["x0"]}]]
    rep = run_search(SearchConfig(system_id=1, iterations=4, n_hypotheses=1),
                     ScriptedSampler(sched), ScriptedScientist({}))
    mses = np.array([r.current_mse for r in rep.history])
    best = np.minimum.accumulate(mses, axis=0)
    np.testing.assert_array_equal(best[-1], rep.best.mses)


def test_workers_do_not_change_results():
    hyps = [SIR_GT, {0: ["x0", "x1"], 1: ["x1"]}, {0: ["x0*x1", "x1**2"], 1: ["x0*x1"]}]
    runs = [run_search(SearchConfig(system_id=1, iterations=2, workers=w),
                       ScriptedSampler([hyps], cycle=True), ScriptedScientist({})).to_json()
            for w in (1, 3)]
    a, b = (json.loads(r) for r in runs)
    a["config"].pop("workers"), b["config"].pop("workers")
    assert a == b


def test_repeats_pick_lowest_integral_error():
    def backends(r):
        hyp = SIR_GT if r == 1 else {0: ["x0"], 1: ["x1"]}
        return ScriptedSampler([[hyp]]), ScriptedScientist({})

    best, reps = run_repeats(SearchConfig(system_id=1, iterations=1, n_hypotheses=1), 3, backends)
    assert best is reps[1]
    assert [r.config["seed"] for r in reps] == [0, 1, 2]


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------

def test_config_defaults_and_round_trip():
    cfg = SearchConfig()
    assert (cfg.iterations, cfg.n_hypotheses, cfg.term_cap) == (100, 3, 10)
    assert cfg.optimizer.timeout == 240.0 and cfg.ablation.delta == 0.05
    assert cfg.ablation.forget_probability == 0.01
    back = SearchConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert back == cfg


@pytest.mark.parametrize("bad", [
    {"iterations": -1}, {"n_hypotheses": 0}, {"regime": "OOD"}, {"backend": "magic"},
    {"sigma": -0.1}, {"no_such_field": 1},
])
def test_config_errors(bad):
    with pytest.raises(ConfigError):
        SearchConfig.from_dict(bad)


def test_live_backend_needs_endpoint():
    with pytest.raises(ConfigError):
        run_search(SearchConfig(system_id=1, iterations=1, backend="live"))
    with pytest.raises(ConfigError):
        run_search(SearchConfig(system_id=1, iterations=1, backend="scripted"))


# ---------------------------------------------------------------------------
# command line
# ---------------------------------------------------------------------------

def test_cli_round_trip(tmp_path, capsys):
    csv_path = tmp_path / "sir.csv"
    assert main(["generate", "--system", "1", "--out", str(csv_path)]) == 0
    assert csv_path.exists()

    eq_path = tmp_path / "eq.json"
    trace = tmp_path / "trace.jsonl"
    assert main(["fit", "--data", str(csv_path), "--terms", "x0_t=x0*x1", "--terms", "x1_t=x0*x1;x1",
                 "--out", str(eq_path), "--trace", str(trace)]) == 0
    params = json.loads(eq_path.read_text())["x1_t"]["params"]
    assert abs(params[0] - 0.4) < 1e-2 and abs(params[1] + 0.314) < 1e-2
    assert trace.read_text().strip()

    capsys.readouterr()
    assert main(["evaluate", "--system", "1", str(eq_path), "--csv", str(tmp_path / "nmse.csv")]) == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["nmse_success"] and payload["term_success"]
    assert (tmp_path / "nmse.csv").exists()

    script = tmp_path / "script.json"
    script.write_text(json.dumps({
        "sampler": [[{"x0_t": ["x0*x1"], "x1_t": ["x0*x1", "x1"]}]],
        "cycle": True,
        "scientist": {"grades": {"x0_t": {"C*(x0*x1)": "good"}}},
    }))
    run_dir = tmp_path / "run"
    assert main(["discover", "--system", "1", "--iterations", "2", "--hypotheses", "1",
                 "--script", str(script), "--run-dir", str(run_dir)]) == 0
    out = capsys.readouterr().out
    assert "NMSE test: pass" in out and "term test: pass" in out
    assert main(["report", str(run_dir)]) == 0
    table = capsys.readouterr().out.splitlines()
    assert table[0].startswith("system") and "SIR(2D)" in table[1]


def test_cli_config_file_is_respected(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"system_id": 1, "iterations": 1, "n_hypotheses": 1}))
    script = tmp_path / "script.json"
    script.write_text(json.dumps({"sampler": [[{"x0_t": ["x0*x1"], "x1_t": ["x0*x1", "x1"]}]]}))
    run_dir = tmp_path / "run"
    assert main(["discover", "--config", str(cfg), "--script", str(script), "--run-dir", str(run_dir)]) == 0
    saved = json.loads((run_dir / "config.json").read_text())
    assert saved["system_id"] == 1 and saved["iterations"] == 1


def test_cli_discover_rejects_bad_usage(tmp_path):
    assert main(["discover", "--system", "1", "--run-dir", str(tmp_path / "r")]) == 2
    assert main(["discover", "--data", "x.csv", "--run-dir", str(tmp_path / "r")]) == 2


def test_cli_report_expands_repeats(tmp_path, capsys):
    script = tmp_path / "script.json"
    script.write_text(json.dumps({"sampler": [[{"x0_t": ["x0*x1"], "x1_t": ["x0*x1", "x1"]}]]}))
    run_dir = tmp_path / "run"
    assert main(["discover", "--system", "1", "--iterations", "1", "--hypotheses", "1", "--repeats", "2",
                 "--script", str(script), "--run-dir", str(run_dir)]) == 0
    assert "best of 2 runs" in capsys.readouterr().out
    assert main(["report", str(run_dir)]) == 0
    assert len(capsys.readouterr().out.splitlines()) == 3
