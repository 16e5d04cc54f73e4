"""Preference parsing, selectors and the tool-orchestrating controller."""

from voiplace.agent.llm import ChatClient, EndpointConfig, LLMEndpointError, ResponseScript, ScriptedClient
from voiplace.agent.preference import PreferenceKind, UserPreference, parse_preference
from voiplace.agent.selector import SelectionResult, llm_select, rule_based_select
from voiplace.agent.workflow import AgentConfig, AgentTranscript, IterationCapExceeded, ToolCall, run_workflow

__all__ = ["ChatClient", "EndpointConfig", "LLMEndpointError", "ResponseScript", "ScriptedClient",
           "PreferenceKind", "UserPreference", "parse_preference", "SelectionResult", "llm_select",
           "rule_based_select", "AgentConfig", "AgentTranscript", "IterationCapExceeded", "ToolCall",
           "run_workflow"]
