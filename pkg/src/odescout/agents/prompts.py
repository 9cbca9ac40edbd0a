"""Prompt assembly for the sampler and scientist agents.

Rendering is a pure function of its inputs so identical search states give
byte-identical prompts.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from ..fitted import FittedSystem, dim_name

SAMPLER_TEMPERATURE = 0.9
SCIENTIST_TEMPERATURE = 0.6
MAX_TOKENS = 3000

SAMPLER_ROLE = (
    "You propose candidate terms for the right-hand side of an ordinary differential "
    "equation system. For every state derivative, write a term_list whose entries make "
    "physical sense for the system described below."
)

SCIENTIST_ROLE = (
    "You review candidate ODE terms as an experienced modeller. Judge each term of the "
    "current attempt and write guidance that helps the next proposal improve the term_list."
)

FIRST_INSIGHT = "None. This is the first iteration and no insight has been accumulated yet."
FIRST_EVALUATION = "None. No previous attempt has been evaluated yet."
FIRST_BAN = "None. No term skeleton has been removed so far."


@dataclass(frozen=True)
class PromptBundle:
    kind: str  # "sampler" | "scientist"
    role: str
    description: str
    guidance: str
    constraints: str
    temperature: float
    max_tokens: int = MAX_TOKENS
    # machine-readable view of what was rendered; consumed by scripted backends
    context: Mapping = field(default_factory=dict, compare=False, repr=False)

    @property
    def user_text(self) -> str:
        header = "# System description" if self.kind == "sampler" else "System description:"
        return "\n\n".join([f"{header}\n{self.description}", self.guidance, self.constraints]) + "\n"

    @property
    def text(self) -> str:
        return f"{self.role}\n\n{self.user_text}"

    def messages(self) -> list[dict]:
        return [{"role": "system", "content": self.role}, {"role": "user", "content": self.user_text}]


def _variable_list(d: int) -> str:
    return ", ".join(f"x{i}" for i in range(d))


def _example_block(d: int) -> str:
    rows = [f'{dim_name(0)}: ["x0", "x{min(1, d - 1)}"]']
    if d > 1:
        rows.append(f'{dim_name(1)}: ["x0", "np.sin(x1)"]')
    for j in range(2, d):
        rows.append(f'{dim_name(j)}: ["x0*np.cos(x{j - 1})"]')
    return f"[Example for a {d}D system]\n" + "\n".join(rows)


def _evaluation_block(verdicts: Mapping[int, Sequence]) -> str:
    lines = []
    for j in sorted(verdicts):
        if not verdicts[j]:
            continue
        lines.append(f"{dim_name(j)}:")
        for v in verdicts[j]:
            lines.append(f"- {v.key} : {v.action.upper()}")
    return "\n".join(lines) if lines else FIRST_EVALUATION


def _ban_block(ban, d: int) -> str:
    lines = []
    for j in range(d):
        keys = ban.keys(j)
        if keys:
            lines.append(f"{dim_name(j)}: " + ", ".join(keys))
    return "\n".join(lines) if lines else FIRST_BAN


def build_sampler_prompt(state, system, n_hypotheses: int = 3, term_cap: int = 10,
                         temperature: float = SAMPLER_TEMPERATURE,
                         max_tokens: int = MAX_TOKENS) -> PromptBundle:
    """Sampler prompt from the search state.

    ``state`` needs ``iteration``, ``insight``, ``last_verdicts`` (dimension ->
    verdict list) and ``ban``; ``system`` needs ``description`` and ``dimension``.
    """
    d = system.dimension
    iteration = state.iteration + 1
    insight = state.insight.strip() or FIRST_INSIGHT
    guidance = "\n".join([
        "### GUIDANCE FROM THE SCIENTIST",
        "Notes distilled from earlier experiments:",
        "",
        "#### Accumulated Knowledge",
        insight,
        "",
        "#### Term-by-Term Evaluation of the Previous Attempt",
        "Actions: keep = retain the term, hold = retain for now or modify, remove = drop it.",
        _evaluation_block(state.last_verdicts),
        "",
        "#### Removed Terms List",
        "These term skeletons hurt the fit. Do NOT propose them again:",
        _ban_block(state.ban, d),
    ])
    last = d - 1
    constraints = "\n".join([
        "Goal: build the guidance above into the structure of each equation.",
        "",
        "[Rules (responses that break them are rejected)]",
        "1. Functions come from numpy: write np.sin, np.cos, np.exp, np.log and so on.",
        f"2. Variables: the inputs are {_variable_list(d)}.",
        f"   - The system is {d}-dimensional.",
        f"   - x{d} and above do not exist.",
        "3. Terms carry NO coefficients; a trainable coefficient is attached to each term automatically.",
        '   - Valid: "x0", "np.sin(x0)", "x0*x1"',
        '   - Invalid: "params[0]*x0", "C*x0", "0.5*x0"',
        "4. Constants inside a term are fine when they mean something physically, for example a frequency.",
        '   - "np.sin(2*x0)" is accepted; the outer coefficient is still added on top.',
        "5. Never use named constants such as g, k or m. Write the number instead.",
        '   - Valid: "9.81*x0", "np.pi*x0"',
        '   - Invalid: "g*x0"',
        "6. Do not repeat an earlier attempt unchanged; alter the structure.",
        "7. Give a short physical or mathematical reason for every term.",
        f"8. Use at most {term_cap} terms per equation.",
        "",
        _example_block(d),
        "",
        f"Reply with a single JSON object containing {n_hypotheses} candidate systems:",
        '{"ode_pairs": [{' + ", ".join(f'"{dim_name(j)}": ["..."]' for j in range(d)) + "}, ...],",
        ' "reasons": [{"' + dim_name(0) + '": {"<term>": "<reason>"}}, ...]}',
        f"Each candidate must define every derivative from {dim_name(0)} to {dim_name(last)}.",
    ])
    return PromptBundle(
        kind="sampler", role=SAMPLER_ROLE, description=system.description.strip(),
        guidance=guidance, constraints=constraints, temperature=temperature,
        max_tokens=max_tokens,
        context={"iteration": iteration, "dimension": d},
    )


def _mse_tuple(system: FittedSystem) -> str:
    return "(" + ", ".join(f"{dim_name(j)}: {m:.3e}" for j, m in enumerate(system.mses)) + ")"


def _result_block(title: str, system: FittedSystem | None) -> list[str]:
    if system is None:
        return [f"{title}: none (no attempt available)"]
    lines = [f"{title}: {_mse_tuple(system)}"]
    lines.extend(system.format(4))
    notes = system.notes or ()
    for j, note in enumerate(notes):
        for term, reason in sorted((note or {}).items()):
            lines.append(f"  reason for {term} in {dim_name(j)}: {reason}")
    return lines


def _has_near_zero(system: FittedSystem, rel: float = 1e-3) -> bool:
    for th in system.thetas:
        coefs = np.abs(np.asarray(th[:-1]))
        # relative to the largest coefficient, with an absolute floor of 1e-3
        if coefs.size and coefs.min() < rel * max(coefs.max(), 1.0):
            return True
    return False


def build_scientist_prompt(state, system, current: FittedSystem,
                           previous: FittedSystem | None, best: FittedSystem | None,
                           n_iterations: int, temperature: float = SCIENTIST_TEMPERATURE,
                           max_tokens: int = MAX_TOKENS) -> PromptBundle:
    iteration = state.iteration + 1
    insight = state.insight.strip() or FIRST_INSIGHT
    results = ["Experiment results:"]
    results += _result_block("[Global Best]", best)
    results.append("")
    results += _result_block("[Previous Attempt]", previous)
    results.append("")
    results += _result_block("[Current Attempt]", current)
    guidance = "\n".join([
        f"Progress: iteration {iteration} of {n_iterations} total",
        "",
        "Accumulated insights:",
        insight,
        "",
        *results,
    ])
    d = current.dimension
    notes = ["Notes:", "- Check the fitted coefficients: coefficients near 0 are removal candidates."]
    if _has_near_zero(current):
        notes.append("- The current attempt contains at least one such near-zero coefficient.")
    to_grade = [f"{dim_name(j)}: " + (", ".join(eq.keys()) or "(bias only)")
                for j, eq in enumerate(current.equations)]
    constraints = "\n".join([
        "Task: evaluate the current attempt term by term.",
        "Terms to grade:",
        *to_grade,
        "",
        "Grade the semantic quality of every term:",
        "- good: clearly fits the physics or mathematics of the system (Max 3 per function)",
        "- neutral: plausible but not essential",
        "- bad: unrelated to the system or in conflict with it",
        "Then justify each grade in one or two sentences about its physical meaning.",
        "",
        *notes,
        "",
        "Answer with one JSON object keyed by derivative, using the term keys shown:",
        '{"' + dim_name(0) + '": [{"term": "C*(...)", "semantic_quality": "good|neutral|bad", '
        '"reasoning": "...", "action": "keep|hold|remove"}], ..., "insight": "<updated notes>"}',
    ])
    return PromptBundle(
        kind="scientist", role=SCIENTIST_ROLE, description=system.description.strip(),
        guidance=guidance, constraints=constraints, temperature=temperature,
        max_tokens=max_tokens,
        context={
            "iteration": iteration,
            "dimension": d,
            "keys": {dim_name(j): list(eq.keys()) for j, eq in enumerate(current.equations)},
        },
    )
