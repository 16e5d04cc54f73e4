"""Tool-orchestrating controller for the four-tool VOI workflow.

The controller owns a small state machine (segment -> place -> evaluate ->
complete; place/evaluate may repeat before complete) and validates every
proposed call against it and against the tool's argument schema.  In rule
mode the controller drives the tools itself; in LLM mode the endpoint
proposes each call and illegal or malformed proposals are rejected with an
explanation.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import jsonschema

from voiplace.agent.llm import ChatClient, EndpointConfig, LLMEndpointError
from voiplace.agent.preference import UserPreference, parse_preference
from voiplace.agent.selector import (DEFAULT_RETRIES, RULE, RULE_FALLBACK, RULE_UNREACHABLE, ReplyError,
                                     SelectionResult, load_prompt, parse_block, rule_based_select)
from voiplace.errors import ToolError, VoiplaceError
from voiplace.metrics import MetricsReport, evaluate_metrics, to_csv
from voiplace.objective import PreferenceProfile, builtin_profiles
from voiplace.search import CandidateSet, SearchConfig, generate_candidates
from voiplace.volume import DistanceMap, Label, LabelVolume, load_label_volume, skull_distance_map, tissue_volume
from voiplace.volume import standardize as standardize_volume

log = logging.getLogger(__name__)

TOOLS = ("segment", "place", "evaluate", "complete")

SCHEMAS = {
    "segment": {
        "type": "object",
        "properties": {
            "label_map": {"type": "string"},
            "brain_mask": {"type": ["string", "null"]},
            "standardize": {"type": "boolean"},
        },
        "additionalProperties": False,
    },
    "place": {
        "type": "object",
        "properties": {
            "profiles": {"type": "array", "items": {"type": "string"}, "minItems": 1},
            "interval_ml": {"type": "number", "exclusiveMinimum": 0},
            "cap": {"type": "integer", "minimum": 1},
        },
        "additionalProperties": False,
    },
    "evaluate": {
        "type": "object",
        "properties": {"profiles": {"type": "array", "items": {"type": "string"}}},
        "additionalProperties": False,
    },
    "complete": {
        "type": "object",
        "properties": {"candidate": {"type": "string", "minLength": 1}, "reason": {"type": "string"}},
        "required": ["candidate"],
        "additionalProperties": False,
    },
}


class IterationCapExceeded(ToolError):
    def __init__(self, message: str, transcript: "AgentTranscript"):
        super().__init__(message)
        self.transcript = transcript


@dataclass
class ToolCall:
    tool: str
    arguments: Dict[str, Any]
    result: Optional[Dict[str, Any]] = None
    error: Optional[str] = None
    accepted: bool = True
    proposer: str = "controller"

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class AgentTranscript:
    instruction: str
    preference: Dict[str, Any]
    selector: str
    calls: List[ToolCall] = field(default_factory=list)
    messages: List[Dict[str, str]] = field(default_factory=list)
    iterations: int = 0
    final: Optional[Dict[str, Any]] = None

    def accepted_tools(self) -> List[str]:
        return [c.tool for c in self.calls if c.accepted]

    def to_json(self) -> dict:
        return {"instruction": self.instruction, "preference": self.preference, "selector": self.selector,
                "iterations": self.iterations, "calls": [c.to_json() for c in self.calls],
                "messages": list(self.messages), "final": self.final}


@dataclass(frozen=True)
class AgentConfig:
    selector: str = "rule"                      # "rule" or "llm"
    max_iters: int = 10
    retries: int = DEFAULT_RETRIES
    fallback_on_unreachable: bool = False
    endpoint: EndpointConfig = field(default_factory=EndpointConfig)
    profiles: Tuple[str, ...] = ("balanced", "large_voi")
    interval_ml: float = 0.5
    cap: int = 50
    search: SearchConfig = field(default_factory=SearchConfig)
    label_map: str = "canonical"
    brain_mask: Optional[str] = None
    standardize: bool = False
    threads: int = 1

    def to_json(self) -> dict:
        out = asdict(self)
        out["endpoint"] = self.endpoint.to_json()
        out["profiles"] = list(self.profiles)
        out.pop("threads")                      # execution detail; results do not depend on it
        return out


class StateMachine:
    """Legal tool order: segment, place, evaluate, complete (place/evaluate repeatable)."""

    def __init__(self):
        self.segmented = False
        self.placed = False
        self.evaluated = False
        self.completed = False

    def check(self, tool: str) -> Optional[str]:
        """Reason the call is illegal now, or None."""
        if tool not in TOOLS:
            return f"unknown tool {tool!r}; available: {', '.join(TOOLS)}"
        if self.completed:
            return "the workflow is already complete"
        if tool == "segment" and self.segmented:
            return "segment has already run; continue with place"
        if tool == "place" and not self.segmented:
            return "place requires segment first"
        if tool == "evaluate" and not self.placed:
            return "evaluate requires place first"
        if tool == "complete" and not self.evaluated:
            return "complete requires evaluate after the latest place"
        return None

    def advance(self, tool: str) -> None:
        if tool == "segment":
            self.segmented = True
        elif tool == "place":
            self.placed, self.evaluated = True, False
        elif tool == "evaluate":
            self.evaluated = True
        elif tool == "complete":
            self.completed = True

    def next_default(self) -> str:
        if not self.segmented:
            return "segment"
        if not self.placed:
            return "place"
        if not self.evaluated:
            return "evaluate"
        return "complete"


class Toolbox:
    """The four tools operating on one volume file.

    ``cache`` (a dict) may be shared across workflows to reuse candidate sets
    generated for identical inputs.
    """

    def __init__(self, volume_path, config: AgentConfig, extra_profiles: Optional[Dict[str, PreferenceProfile]] = None,
                 cache: Optional[dict] = None):
        self.volume_path = str(volume_path)
        self.config = config
        self.profiles = builtin_profiles()
        if extra_profiles:
            self.profiles.update(extra_profiles)
        self.cache = cache
        self.volume: Optional[LabelVolume] = None
        self.distance: Optional[DistanceMap] = None
        self.candidates: Optional[CandidateSet] = None
        self.report: Optional[MetricsReport] = None

    def _profiles(self, names) -> List[PreferenceProfile]:
        unknown = [n for n in names if n not in self.profiles]
        if unknown:
            raise ToolError(f"unknown profile(s) {unknown}; known: {sorted(self.profiles)}")
        return [self.profiles[n] for n in names]

    def segment(self, label_map: Optional[str] = None, brain_mask: Optional[str] = None,
                standardize: Optional[bool] = None) -> dict:
        cfg = self.config
        vol = load_label_volume(self.volume_path, label_map or cfg.label_map,
                                brain_mask if brain_mask is not None else cfg.brain_mask)
        std = cfg.standardize if standardize is None else standardize
        if std:
            vol = standardize_volume(vol)
        self.volume = vol
        self.distance = skull_distance_map(vol)
        return {"dims": list(vol.dims), "spacing_mm": list(vol.spacing), "standardized": bool(std),
                "class_volumes_ml": {lab.name: tissue_volume(vol, lab) for lab in Label},
                "volume_digest": vol.digest}

    def place(self, profiles: Optional[Sequence[str]] = None, interval_ml: Optional[float] = None,
              cap: Optional[int] = None) -> dict:
        cfg = self.config
        names = tuple(profiles or cfg.profiles)
        interval = float(interval_ml if interval_ml is not None else cfg.interval_ml)
        cap = int(cap if cap is not None else cfg.cap)
        key = (self.volume.digest, names, interval, cap, cfg.search)
        cset = self.cache.get(key) if self.cache is not None else None
        if cset is None:
            cset = generate_candidates(self.volume, self.distance, self._profiles(names), cfg.search,
                                       interval, cap, threads=cfg.threads)
            if self.cache is not None:
                self.cache[key] = cset
        self.candidates = cset
        return {"n_candidates": len(cset.candidates), "reference_id": cset.reference_id,
                "n_centers": len(cset.sampling.centers),
                "effective_interval_ml": cset.sampling.effective_interval_ml, "profiles": list(names)}

    def evaluate(self, profiles: Optional[Sequence[str]] = None) -> dict:
        names = list(profiles) if profiles else list(self.candidates.profiles)
        self.report = evaluate_metrics(self.candidates, self.volume, self.distance, self._profiles(names))
        return {"n_rows": len(self.report), "csv": to_csv(self.report)}

    def dispatch(self, tool: str, arguments: Dict[str, Any]) -> dict:
        if tool == "complete":
            raise AssertionError("complete is handled by the controller")
        return getattr(self, tool)(**arguments)


def _record_final(transcript: AgentTranscript, sel: SelectionResult) -> None:
    transcript.final = {"candidate": sel.id, "theta": sel.theta.to_json(), "justification": sel.justification,
                        "selector": sel.selector}


class Workflow:
    def __init__(self, instruction: str, volume_path, config: AgentConfig = AgentConfig(), client=None,
                 extra_profiles=None, cache: Optional[dict] = None):
        self.pref: UserPreference = parse_preference(instruction)
        self.config = config
        self.tools = Toolbox(volume_path, config, extra_profiles, cache)
        self.state = StateMachine()
        if config.selector == "llm" and client is None:
            client = ChatClient(config.endpoint)
        self.client = client
        self.transcript = AgentTranscript(instruction, self.pref.to_json(), config.selector)

    # --- shared plumbing -------------------------------------------------
    def _tick(self) -> None:
        if self.transcript.iterations >= self.config.max_iters:
            raise IterationCapExceeded(f"iteration cap {self.config.max_iters} reached before completion",
                                       self.transcript)
        self.transcript.iterations += 1

    def _execute(self, tool: str, arguments: Dict[str, Any], proposer: str) -> dict:
        call = ToolCall(tool, dict(arguments), proposer=proposer)
        self.transcript.calls.append(call)
        try:
            call.result = self.tools.dispatch(tool, arguments)
        except VoiplaceError as exc:
            call.error = str(exc)
            exc.transcript = self.transcript
            raise
        self.state.advance(tool)
        return call.result

    def _complete(self, sel: SelectionResult, proposer: str, arguments=None) -> SelectionResult:
        args = arguments or {"candidate": sel.id, "reason": sel.justification}
        result = {"candidate": sel.id, "selector": sel.selector, "reason": sel.justification}
        self.transcript.calls.append(ToolCall("complete", dict(args), result, proposer=proposer))
        self.state.advance("complete")
        _record_final(self.transcript, sel)
        return sel

    # --- rule mode -----------------------------------------------------------
    def _run_rule(self, selector_label: str = RULE) -> SelectionResult:
        while True:
            tool = self.state.next_default()
            self._tick()
            if tool == "complete":
                sel = rule_based_select(self.tools.report, self.pref, selector_label)
                return self._complete(sel, "controller")
            self._execute(tool, {}, "controller")

    # --- llm mode --------------------------------------------------------------
    def _say(self, role: str, content: str) -> None:
        self.transcript.messages.append({"role": role, "content": content})

    def _reject(self, tool: str, arguments: Dict[str, Any], reason: str) -> None:
        self.transcript.calls.append(ToolCall(tool, dict(arguments), error=reason, accepted=False, proposer="llm"))
        self._say("user", f"Rejected: {reason}. Reply with one fenced block proposing a legal tool call.")

    def _parse_proposal(self, reply: str) -> Tuple[str, Dict[str, Any]]:
        fields = parse_block(reply, ("tool",), ("tool", "arguments", "candidate", "reason"))
        tool = fields["tool"].strip().lower()
        args: Dict[str, Any] = {}
        if fields.get("arguments"):
            try:
                args = json.loads(fields["arguments"])
            except ValueError as exc:
                raise ReplyError(f"arguments are not valid JSON: {exc}") from exc
            if not isinstance(args, dict):
                raise ReplyError("arguments must be a JSON object")
        for key in ("candidate", "reason"):
            if fields.get(key):
                args[key] = fields[key].strip().strip("`'\"") if key == "candidate" else fields[key]
        return tool, args

    def _fallback(self, label: str) -> SelectionResult:
        self._say("system", f"controller takes over: {label}")
        return self._run_rule(label)

    def _run_llm(self) -> SelectionResult:
        system = load_prompt("prompt_controller")
        self._say("system", system)
        self._say("user", f"Instruction: {self.pref.raw_text}\nThe label volume is loaded by the segment tool.")
        invalid = 0
        while True:
            self._tick()
            try:
                reply = self.client.chat(self.transcript.messages)
            except LLMEndpointError as exc:
                if not self.config.fallback_on_unreachable:
                    exc.transcript = self.transcript
                    raise
                self.transcript.iterations -= 1
                return self._fallback(RULE_UNREACHABLE)
            self._say("assistant", reply)
            try:
                tool, args = self._parse_proposal(reply)
            except ReplyError as exc:
                invalid += 1
                if invalid >= self.config.retries:
                    return self._fallback(RULE_FALLBACK)
                self._say("user", f"Your reply could not be used: {exc}. Reply with one fenced block "
                                  f"'tool: <name>' plus arguments.")
                continue
            illegal = self.state.check(tool)
            if illegal:
                self._reject(tool, args, illegal)
                continue
            try:
                jsonschema.validate(args, SCHEMAS[tool])
            except jsonschema.ValidationError as exc:
                self._reject(tool, args, f"invalid arguments for {tool}: {exc.message}")
                continue
            if tool == "complete":
                cid = args["candidate"]
                if cid not in self.tools.report.ids():
                    invalid += 1
                    self._reject(tool, args, f"candidate {cid!r} does not exist; valid ids: "
                                             f"{', '.join(self.tools.report.ids())}")
                    if invalid >= self.config.retries:
                        return self._fallback(RULE_FALLBACK)
                    continue
                row = self.tools.report.row(cid)
                sel = SelectionResult(cid, row.theta, row, "llm", args.get("reason", ""),
                                      endpoint=getattr(self.client, "provenance", None), attempts=invalid + 1)
                return self._complete(sel, "llm", args)
            result = self._execute(tool, args, "llm")
            self._say("user", f"Result of {tool}:\n" + _format_result(tool, result))

    def run(self) -> Tuple[SelectionResult, AgentTranscript]:
        if self.config.selector == "rule":
            sel = self._run_rule()
        elif self.config.selector == "llm":
            sel = self._run_llm()
        else:
            raise ValueError(f"unknown selector {self.config.selector!r}")
        return sel, self.transcript


def _format_result(tool: str, result: dict) -> str:
    if tool == "evaluate":
        return f"{result['n_rows']} candidates evaluated.\n{result['csv']}"
    return json.dumps(result, sort_keys=True)


def run_workflow(instruction: str, volume_path, config: AgentConfig = AgentConfig(), client=None,
                 extra_profiles=None, cache: Optional[dict] = None) -> Tuple[SelectionResult, AgentTranscript]:
    """Run segment -> place -> evaluate -> complete and return the selection and transcript."""
    return Workflow(instruction, volume_path, config, client, extra_profiles, cache).run()
