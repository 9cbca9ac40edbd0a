import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from odescout.benchmarks import TrajectoryDataset, generate_dataset
from odescout.expression import build_skeleton, parse_term
from odescout.optimizer import optimize_hybrid
from odescout.scientist import (
    AblationConfig,
    BanList,
    ablation_classify,
    ablation_deltas,
    apply_removals,
    cap_good_grades,
    classify_delta,
    decide_action,
    filter_banned,
    maybe_forget,
)

# Retention table written out row by row.  Previous state -> strike count:
# none/keep = 0, hold (1st strike) = 1, hold (2nd strike) = 2.
PREVIOUS = {"none": 0, "hold1": 1, "hold2": 2}
TABLE = []
for prev in PREVIOUS:
    for quant in ("good", "neutral", "bad"):
        TABLE.append(("bad", quant, prev, "remove"))
    TABLE.append(("good", "good", prev, "keep"))
for sem, quants in (("good", ("neutral", "bad")), ("neutral", ("good", "neutral", "bad"))):
    for quant in quants:
        TABLE.append((sem, quant, "none", "hold1"))
        TABLE.append((sem, quant, "hold1", "hold2"))
        TABLE.append((sem, quant, "hold2", "remove"))


def _expected(row_action):
    # (action, strikes after)
    return {"remove": ("remove", 0), "keep": ("keep", 0),
            "hold1": ("hold", 1), "hold2": ("hold", 2)}[row_action]


def test_decision_table_is_exhaustive():
    combos = {(s, q, p) for s, q, p, _ in TABLE}
    assert len(TABLE) == len(combos) == 27


@pytest.mark.parametrize("semantic,quantitative,previous,action", TABLE)
def test_decision_matrix_golden(semantic, quantitative, previous, action):
    assert decide_action(semantic, quantitative, PREVIOUS[previous]) == _expected(action)


def test_decision_examples():
    assert decide_action("bad", "good", 0)[0] == "remove"
    assert decide_action("good", "good", 2) == ("keep", 0)
    assert decide_action("neutral", "neutral", 2)[0] == "remove"


def test_decision_rejects_invalid():
    with pytest.raises(ValueError):
        decide_action("great", "good", 0)
    with pytest.raises(ValueError):
        decide_action("good", "good", 3)


def test_two_strike_sequence():
    # a term that keeps getting held is removed once it already carries two strikes
    strikes, actions = 0, []
    for _ in range(3):
        action, strikes = decide_action("neutral", "neutral", strikes)
        actions.append(action)
    assert actions == ["hold", "hold", "remove"]


def test_keep_resets_strikes():
    _, s = decide_action("good", "neutral", 0)
    _, s = decide_action("good", "neutral", s)
    assert s == 2
    assert decide_action("good", "good", s) == ("keep", 0)


# ---------------------------------------------------------------------------
# ablation
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def glider():
    return generate_dataset(2, "ID")


def test_classify_delta_boundaries():
    assert classify_delta(0.0501) == "good"
    assert classify_delta(0.05) == "neutral"
    assert classify_delta(-0.05) == "neutral"
    assert classify_delta(-0.0501) == "bad"


def test_zero_coefficient_is_neutral(glider):
    eq = build_skeleton(["x0**2", "sin(x1)", "x0*x1"], 0, dimension=2)
    theta = np.array([-0.2, -1.0, 0.0, 0.0])
    deltas = ablation_deltas(eq, theta, glider, 0)
    assert deltas[2] == 0.0
    assert ablation_classify(eq, theta, glider, 0) == ["good", "good", "neutral"]


def test_identically_zero_term_is_neutral(glider):
    eq = build_skeleton(["x0**2", "sin(x1) - sin(x1)"], 0, dimension=2)
    grades = ablation_classify(eq, np.array([-0.2, 5.0, 0.0]), glider, 0)
    assert grades[1] == "neutral"


def test_harmful_term_is_bad(glider):
    eq = build_skeleton(["x0**2", "sin(x1)", "x1**4"], 0, dimension=2)
    # a deliberately wrong coefficient on x1**4: dropping it lowers the error
    grades = ablation_classify(eq, np.array([-0.2, -1.0, 1e-3, 0.0]), glider, 0)
    assert grades == ["good", "good", "bad"]


def test_perfect_fit_never_bad():
    x = np.linspace(0.1, 2, 50)[:, None]
    y = (3 * x[:, 0])[:, None]
    data = TrajectoryDataset(1, "ID", np.linspace(0, 1, 50), x, y, y, x[0])
    eq = build_skeleton(["x0", "x0**2"], 0, dimension=1)
    grades = ablation_classify(eq, np.array([3.0, 0.0, 0.0]), data, 0)
    assert grades == ["good", "neutral"]


@settings(max_examples=40, deadline=None)
@given(st.floats(0.01, 100) | st.floats(-100, -0.01))
def test_ablation_scale_invariance(c):
    data = generate_dataset(1, "ID")
    eq = build_skeleton(["x0*x1", "x1", "x0**2"], 1, dimension=2)
    theta = np.array([0.39, -0.31, 0.002, 0.001])
    base = ablation_classify(eq, theta, data, 1)
    scaled = TrajectoryDataset(1, "ID", data.t, data.states, c * data.xdot, c * data.xdot_gt, data.x0)
    assert ablation_classify(eq, c * theta, scaled, 1) == base
    # with a negligible stabiliser the deltas themselves agree to rounding
    tiny = AblationConfig(epsilon=1e-300)
    np.testing.assert_allclose(ablation_deltas(eq, c * theta, scaled, 1, tiny),
                               ablation_deltas(eq, theta, data, 1, tiny), rtol=1e-9)


def test_ablation_of_optimized_candidate(glider):
    eq = build_skeleton(["x0", "cos(x1)/x0"], 1, dimension=2)
    res = optimize_hybrid(eq, glider, 1, seed=0)
    assert ablation_classify(eq, res.theta, glider, 1) == ["good", "good"]


def test_ablation_config_validation():
    with pytest.raises(ValueError):
        AblationConfig(delta=0.0)
    with pytest.raises(ValueError):
        AblationConfig(forget_probability=1.5)


# ---------------------------------------------------------------------------
# Max 3 good
# ---------------------------------------------------------------------------

def test_cap_good_grades():
    assert cap_good_grades(["good"] * 5) == ["good"] * 3 + ["neutral"] * 2
    assert cap_good_grades(["bad", "good", "neutral", "good"]) == ["bad", "good", "neutral", "good"]
    assert cap_good_grades(["good", "bad", "good", "good", "good"]) == ["good", "bad", "good", "good", "neutral"]


# ---------------------------------------------------------------------------
# ban list
# ---------------------------------------------------------------------------

def test_ban_list_examples():
    ban = apply_removals(BanList(), ["C*(9.81)"], 0)
    assert (0, "C*(9.81)") in ban
    assert (1, "C*(9.81)") not in ban
    again = apply_removals(ban, ["C*(9.81)"], 0)
    assert again == ban and len(again) == 1
    assert apply_removals(ban, [], 0) is ban


def test_ban_from_expression_uses_key():
    ban = apply_removals(BanList(), [parse_term("2*x1*x0", 2)], 1)
    assert ban.keys(1) == ["C*(x0*x1)"]


def test_ban_list_is_immutable_value():
    ban = BanList()
    apply_removals(ban, ["C*(x0)"], 0)
    assert ban.is_empty()


def test_ban_list_dict_round_trip():
    ban = apply_removals(apply_removals(BanList(), ["C*(x0)", "C*(9.81)"], 0), ["C*(sin(x1))"], 1)
    assert BanList.from_dict(ban.to_dict()) == ban
    assert ban.to_dict() == {"0": ["C*(9.81)", "C*(x0)"], "1": ["C*(sin(x1))"]}


def test_filter_banned_examples():
    ban = apply_removals(BanList(), ["C*(9.81)"], 0)
    terms = [parse_term("x0", 1), parse_term("9.81", 1)]
    assert filter_banned(terms, ban, 0) == [parse_term("x0", 1)]
    assert filter_banned(terms, BanList(), 0) == terms
    assert filter_banned([parse_term("9.81", 1)], ban, 0) == []
    # the ban is per dimension
    assert filter_banned(terms, ban, 1) == terms


def test_forget_degenerate_probabilities():
    ban = apply_removals(BanList(), ["C*(x0)"], 0)
    never = AblationConfig(forget_probability=0.0)
    always = AblationConfig(forget_probability=1.0)
    rng = np.random.default_rng(0)
    cur = ban
    for _ in range(500):
        cur, forgot = maybe_forget(cur, rng, never)
        assert not forgot
    assert cur == ban
    for _ in range(10):
        cleared, forgot = maybe_forget(ban, rng, always)
        assert forgot and cleared.is_empty()


def test_forget_rate_concentration():
    ban = apply_removals(BanList(), ["C*(x0)"], 0)
    rng = np.random.default_rng(2024)
    hits = sum(maybe_forget(ban, rng)[1] for _ in range(10_000))
    assert 0.007 <= hits / 10_000 <= 0.013


def test_forget_deterministic_under_seed():
    ban = apply_removals(BanList(), ["C*(x0)"], 0)
    cfg = AblationConfig(forget_probability=0.3)
    a = [maybe_forget(ban, np.random.default_rng(5), cfg)[1] for _ in range(3)]
    b = [maybe_forget(ban, np.random.default_rng(5), cfg)[1] for _ in range(3)]
    assert a == b


def test_forget_entry_mode():
    ban = apply_removals(BanList(), [f"C*(x0**{k})" for k in range(2, 40)], 0)
    cfg = AblationConfig(forget_probability=0.5, forget_mode="entry")
    after, forgot = maybe_forget(ban, np.random.default_rng(1), cfg)
    assert forgot and 0 < len(after) < len(ban)
    assert set(after.keys(0)) <= set(ban.keys(0))


def test_all_combinations_total():
    # every input triple yields a valid action and strike count
    for s, q in itertools.product(("good", "neutral", "bad"), repeat=2):
        for k in range(3):
            action, after = decide_action(s, q, k)
            assert action in ("keep", "hold", "remove")
            assert after in (0, 1, 2)
            assert (after == 0) == (action != "hold")
