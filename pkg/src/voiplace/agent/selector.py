"""Final-VOI selection: deterministic rule ranking and LLM selection with retry/fallback."""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from importlib import resources
from string import Template
from typing import Dict, List, Optional, Tuple

from voiplace.agent.llm import LLMEndpointError
from voiplace.agent.preference import PRIMARY_METRIC, PreferenceKind, UserPreference
from voiplace.geometry import OrientedBox
from voiplace.metrics import MetricRow, MetricsReport, to_csv

PROMPT_VERSION = "v1"
DEFAULT_RETRIES = 3

RULE = "rule"
RULE_FALLBACK = "rule (llm fallback)"
RULE_UNREACHABLE = "rule (llm endpoint unreachable)"


def load_prompt(name: str, **values) -> str:
    root = resources.files("voiplace").joinpath("data")
    text = root.joinpath(f"{name}_{PROMPT_VERSION}.txt").read_text("utf-8")
    if "candidate_semantics" not in values:
        values["candidate_semantics"] = root.joinpath(f"candidate_semantics_{PROMPT_VERSION}.txt").read_text("utf-8").rstrip()
    return Template(text).substitute(values)


@dataclass(frozen=True)
class SelectionResult:
    id: str
    theta: OrientedBox
    row: MetricRow
    selector: str
    justification: str
    endpoint: Optional[str] = None
    attempts: int = 0

    def to_json(self) -> dict:
        return {"id": self.id, "theta": self.theta.to_json(), "metrics": self.row.to_json(),
                "selector": self.selector, "endpoint": self.endpoint,
                "justification": self.justification, "attempts": self.attempts}


_FENCE = re.compile(r"```[^\n`]*\n(.*?)```", re.DOTALL)
_LINE = re.compile(r"^\s*([A-Za-z_]+)\s*:\s*(.*?)\s*$")


class ReplyError(ValueError):
    """A reply does not follow the fenced ``key: value`` contract."""


def parse_block(text: str, required: Tuple[str, ...], allowed: Tuple[str, ...]) -> Dict[str, str]:
    """Parse the first fenced block of ``key: value`` lines.

    Blank lines are skipped; any other line must be ``key: value`` with a key
    from ``allowed``; every ``required`` key must be present with a value.
    """
    if not isinstance(text, str):
        raise ReplyError("reply is not text")
    m = _FENCE.search(text)
    if m is None:
        raise ReplyError("reply has no fenced ``` block")
    fields: Dict[str, str] = {}
    for line in m.group(1).splitlines():
        if not line.strip():
            continue
        lm = _LINE.match(line)
        if lm is None:
            raise ReplyError(f"line {line.strip()!r} is not 'key: value'")
        key = lm.group(1).lower()
        if key not in allowed:
            raise ReplyError(f"unexpected key {key!r}; allowed keys: {', '.join(allowed)}")
        if key in fields:
            raise ReplyError(f"key {key!r} given twice")
        fields[key] = lm.group(2)
    missing = [k for k in required if not fields.get(k)]
    if missing:
        raise ReplyError(f"missing {', '.join(missing)}")
    return fields


def parse_selection(text: str, valid_ids) -> Tuple[str, str]:
    fields = parse_block(text, ("candidate", "reason"), ("candidate", "reason"))
    cid = fields["candidate"].strip().strip("`'\"")
    if cid not in valid_ids:
        raise ReplyError(f"candidate {cid!r} does not exist; valid ids: {', '.join(valid_ids)}")
    return cid, fields["reason"]


def _rank_key(row: MetricRow, metric: str, direction: int):
    return (-direction * row.metric(metric), -row.objectives["balanced"], row.theta.vector)


def rule_based_select(report: MetricsReport, pref: UserPreference, selector: str = RULE) -> SelectionResult:
    """Best row on the preference's primary metric.

    Ties go to the higher balanced objective, then to the lexicographically
    smaller box.
    """
    if len(report) == 0:
        raise ValueError("cannot select from an empty metrics report")
    metric, direction = PRIMARY_METRIC[pref.kind]
    best = min(report.rows, key=lambda r: _rank_key(r, metric, direction))
    label = metric.replace("objective:", "objective ")
    word = "largest" if direction > 0 else "smallest"
    reason = (f"{pref.kind.value}: {label} = {best.metric(metric):.4f} is the {word} "
              f"among {len(report)} candidates")
    return SelectionResult(best.id, best.theta, best, selector, reason)


def selection_messages(report: MetricsReport, pref: UserPreference) -> List[Dict[str, str]]:
    user = (f"Instruction: {pref.raw_text}\n"
            f"Reference placement: {report.reference_id}\n\n"
            f"Candidate metrics (csv):\n{to_csv(report)}")
    return [{"role": "system", "content": load_prompt("prompt_select")},
            {"role": "user", "content": user}]


def llm_select(report: MetricsReport, pref: UserPreference, client, retries: int = DEFAULT_RETRIES,
               fallback_on_unreachable: bool = False,
               log: Optional[List[Dict[str, str]]] = None) -> SelectionResult:
    """Ask the endpoint for a candidate id; retry invalid replies, then fall back to the rule.

    ``retries`` is the total number of replies accepted before falling back.
    Every message sent and received is appended to ``log`` when given.
    """
    if len(report) == 0:
        raise ValueError("cannot select from an empty metrics report")
    messages = selection_messages(report, pref)
    if log is not None:
        log.extend(messages)
    ids = report.ids()
    for attempt in range(1, retries + 1):
        try:
            reply = client.chat(messages)
        except LLMEndpointError:
            if not fallback_on_unreachable:
                raise
            sel = rule_based_select(report, pref, RULE_UNREACHABLE)
            return _with(sel, attempts=attempt)
        messages.append({"role": "assistant", "content": reply})
        if log is not None:
            log.append(messages[-1])
        try:
            cid, reason = parse_selection(reply, ids)
        except ReplyError as exc:
            follow = {"role": "user", "content": (
                f"Your reply could not be used: {exc}. Reply with one fenced block containing "
                f"'candidate: <id>' and 'reason: <one sentence>'.")}
            messages.append(follow)
            if log is not None:
                log.append(follow)
            continue
        row = report.row(cid)
        return SelectionResult(cid, row.theta, row, "llm", reason, endpoint=client.provenance, attempts=attempt)
    return _with(rule_based_select(report, pref, RULE_FALLBACK), attempts=retries, endpoint=client.provenance)


def _with(sel: SelectionResult, **kw) -> SelectionResult:
    return SelectionResult(**{**sel.__dict__, **kw})
