"""Tolerant extraction and strict validation of agent replies."""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from ..errors import MalformedResponse, ParseError
from ..expression import Expression, parse_key, parse_term, render, skeleton_key
from ..fitted import dim_name, parse_dim_name
from ..scientist import GRADES, MAX_GOOD_PER_DIMENSION

log = logging.getLogger(__name__)

_FENCE = re.compile(r"```[a-zA-Z0-9_-]*\s*\n?(.*?)```", re.DOTALL)
_INSIGHT_KEYS = ("insight", "updated_insight", "insights")


def _balanced_objects(text: str):
    """Yield every top-level ``{...}`` substring, skipping braces inside strings."""
    start, level, in_str, escape = None, 0, False, False
    for i, ch in enumerate(text):
        if in_str:
            if escape:
                escape = False
            elif ch == "\\":
                escape = True
            elif ch == '"':
                in_str = False
            continue
        if ch == '"' and level > 0:
            in_str = True
        elif ch == "{":
            if level == 0:
                start = i
            level += 1
        elif ch == "}" and level > 0:
            level -= 1
            if level == 0:
                yield text[start:i + 1]


def extract_json(text: str) -> dict:
    """First JSON object found in ``text``, looking inside code fences first."""
    if not isinstance(text, str) or not text.strip():
        raise MalformedResponse("empty response")
    candidates = [m.group(1) for m in _FENCE.finditer(text)] + [text]
    for chunk in candidates:
        for obj in _balanced_objects(chunk):
            try:
                value = json.loads(obj)
            except json.JSONDecodeError:
                continue
            if isinstance(value, dict):
                return value
    raise MalformedResponse("no JSON object found in response")


# ---------------------------------------------------------------------------
# sampler
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Hypothesis:
    terms: Mapping[int, tuple[Expression, ...]]
    reasons: Mapping[int, Mapping[str, str]] = field(default_factory=dict)

    def term_strings(self, j: int) -> list[str]:
        return [render(t) for t in self.terms.get(j, ())]


@dataclass(frozen=True)
class SamplerResponse:
    hypotheses: tuple[Hypothesis, ...]
    warnings: tuple[str, ...] = ()


def _split_entry(entry) -> tuple[str | None, str]:
    if isinstance(entry, str):
        return entry, ""
    if isinstance(entry, Mapping):
        term = entry.get("term")
        reason = entry.get("reason") or entry.get("reasoning") or entry.get("justification") or ""
        return (term if isinstance(term, str) else None), str(reason)
    return None, ""


def parse_sampler_response(text: str, dimension: int, term_cap: int = 10,
                           max_hypotheses: int = 3) -> SamplerResponse:
    payload = extract_json(text)
    pairs = payload.get("ode_pairs")
    if pairs is None:
        # a bare single system is accepted too
        pairs = [payload]
    if not isinstance(pairs, list):
        raise MalformedResponse("'ode_pairs' must be a list")
    reasons_list = payload.get("reasons") if isinstance(payload.get("reasons"), list) else []

    warnings: list[str] = []
    hypotheses: list[Hypothesis] = []
    for h, pair in enumerate(pairs[:max_hypotheses]):
        if not isinstance(pair, Mapping):
            warnings.append(f"hypothesis {h}: not an object")
            continue
        extra = reasons_list[h] if h < len(reasons_list) and isinstance(reasons_list[h], Mapping) else {}
        terms: dict[int, tuple[Expression, ...]] = {}
        reasons: dict[int, dict[str, str]] = {}
        over_cap = False
        for name, entries in pair.items():
            try:
                j = parse_dim_name(name)
            except ValueError:
                warnings.append(f"hypothesis {h}: unknown key {name!r}")
                continue
            if j >= dimension:
                warnings.append(f"hypothesis {h}: dimension {name!r} does not exist")
                continue
            if isinstance(entries, str):
                entries = [entries]
            if not isinstance(entries, list):
                warnings.append(f"hypothesis {h}: {name!r} is not a list")
                continue
            if len(entries) > term_cap:
                warnings.append(f"hypothesis {h}: {name!r} exceeds the cap of {term_cap} terms")
                over_cap = True
                break
            dim_reasons = extra.get(name, {}) if isinstance(extra.get(name, {}), Mapping) else {}
            parsed, seen, notes = [], set(), {}
            for entry in entries:
                raw, reason = _split_entry(entry)
                if raw is None:
                    warnings.append(f"hypothesis {h}: malformed entry in {name!r}")
                    continue
                try:
                    expr = parse_term(raw, dimension)
                except ParseError as exc:
                    warnings.append(f"hypothesis {h}: rejected {raw!r} ({type(exc).__name__}: {exc})")
                    continue
                key = skeleton_key(expr)
                if key in seen:
                    continue
                seen.add(key)
                parsed.append(expr)
                reason = reason or str(dim_reasons.get(raw, ""))
                if reason:
                    notes[render(expr)] = reason
            terms[j] = tuple(parsed)
            if notes:
                reasons[j] = notes
        if over_cap:
            continue
        if not any(terms.values()):
            warnings.append(f"hypothesis {h}: no valid terms")
            continue
        hypotheses.append(Hypothesis(terms, reasons))
    for w in warnings:
        log.warning(w)
    return SamplerResponse(tuple(hypotheses), tuple(warnings))


def render_sampler_response(hypotheses: Sequence[Mapping[int, Sequence[str]]]) -> str:
    pairs = [{dim_name(j): list(terms) for j, terms in sorted(h.items())} for h in hypotheses]
    return json.dumps({"ode_pairs": pairs}, indent=2)


# ---------------------------------------------------------------------------
# scientist
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TermAssessment:
    key: str
    semantic: str
    reasoning: str = ""
    action_hint: str = ""  # logged only; the decision matrix is authoritative


@dataclass(frozen=True)
class ScientistResponse:
    assessments: Mapping[int, tuple[TermAssessment, ...]]
    insight: str = ""
    warnings: tuple[str, ...] = ()

    def grades(self, j: int) -> list[str]:
        return [a.semantic for a in self.assessments.get(j, ())]


def _entry_key(term: str, dimension: int) -> str | None:
    try:
        return skeleton_key(parse_key(term, dimension))
    except ParseError:
        return None


def default_scientist_response(keys: Mapping[int, Sequence[str]]) -> ScientistResponse:
    """Everything neutral, used when the reply cannot be parsed."""
    return ScientistResponse({j: tuple(TermAssessment(k, "neutral") for k in ks)
                              for j, ks in keys.items()})


def parse_scientist_response(text: str, keys: Mapping[int, Sequence[str]], dimension: int,
                             max_good: int = MAX_GOOD_PER_DIMENSION) -> ScientistResponse:
    """Grades aligned with ``keys`` (dimension -> skeleton keys of the current attempt).

    Unknown grades fall back to neutral, unmatched terms are ignored, terms the
    reply omits default to neutral, and semantic 'good' beyond ``max_good`` per
    dimension (in reply order) is downgraded to neutral.
    """
    payload = extract_json(text)
    if isinstance(payload.get("evaluations"), Mapping):
        body = dict(payload["evaluations"])
        body.update({k: payload[k] for k in _INSIGHT_KEYS if k in payload})
    else:
        body = payload
    insight = ""
    for k in _INSIGHT_KEYS:
        if isinstance(body.get(k), str):
            insight = body[k].strip()
            break

    warnings: list[str] = []
    found: dict[int, dict[str, TermAssessment]] = {j: {} for j in keys}
    for name, entries in body.items():
        if name in _INSIGHT_KEYS:
            continue
        try:
            j = parse_dim_name(name)
        except ValueError:
            warnings.append(f"ignored key {name!r}")
            continue
        if j not in keys or not isinstance(entries, list):
            warnings.append(f"ignored dimension {name!r}")
            continue
        goods = 0
        for entry in entries:
            if not isinstance(entry, Mapping) or not isinstance(entry.get("term"), str):
                warnings.append(f"{name}: malformed entry")
                continue
            key = _entry_key(entry["term"], dimension)
            if key is None or key not in keys[j]:
                warnings.append(f"{name}: {entry['term']!r} is not part of the current attempt")
                continue
            if key in found[j]:
                continue
            grade = str(entry.get("semantic_quality", "")).strip().lower()
            if grade not in GRADES:
                warnings.append(f"{name}: invalid grade {entry.get('semantic_quality')!r} for {key}")
                grade = "neutral"
            if grade == "good":
                goods += 1
                if goods > max_good:
                    warnings.append(f"{name}: more than {max_good} good grades, {key} downgraded")
                    grade = "neutral"
            found[j][key] = TermAssessment(key, grade, str(entry.get("reasoning", "")),
                                           str(entry.get("action", "")))
    assessments = {
        j: tuple(found[j].get(k, TermAssessment(k, "neutral")) for k in keys[j]) for j in keys
    }
    for w in warnings:
        log.warning(w)
    return ScientistResponse(assessments, insight, tuple(warnings))


def render_scientist_response(resp: ScientistResponse) -> str:
    body: dict = {}
    for j, items in sorted(resp.assessments.items()):
        body[dim_name(j)] = [
            {"term": a.key, "semantic_quality": a.semantic, "reasoning": a.reasoning,
             "action": a.action_hint}
            for a in items
        ]
    body["insight"] = resp.insight
    return json.dumps(body, indent=2)
