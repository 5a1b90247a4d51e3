"""SALM: deterministic multi-agent social-network simulation with cached
LLM-backed decisions, three-tier memory, and a multi-scale validator stack."""

from .agents import (
    Action,
    ActionKind,
    AgentState,
    EmotionParams,
    EmotionalState,
    InteractionRecord,
    PersonalityVector,
    appraise_interaction,
    apply_personality_update,
    drift_bound,
    personality_distance,
    update_emotion,
)
from .config import ConfigError, RunConfig
from .engine import RunArtifacts, World, run, step
from .graph import (
    MetricsReport,
    NetworkConstraints,
    NetworkPosition,
    SocialGraph,
    Tie,
    compute_metrics,
    detect_communities,
    fit_power_law,
)
from .llm import CacheStats, CompletionResponse, LLMService, MockBackend, PromptRequest
from .memory import MemoryItem, MemoryStore, RetrievalQuery, retrieve
from .prompting import BaseTemplate, CacheKey, ContextBlock, DecisionBlock, Plan, cache_key, canonicalize

__version__ = "0.1.0"

__all__ = [
    "Action",
    "ActionKind",
    "AgentState",
    "BaseTemplate",
    "CacheKey",
    "CacheStats",
    "CompletionResponse",
    "ConfigError",
    "ContextBlock",
    "DecisionBlock",
    "EmotionParams",
    "EmotionalState",
    "InteractionRecord",
    "LLMService",
    "MemoryItem",
    "MemoryStore",
    "MetricsReport",
    "MockBackend",
    "NetworkConstraints",
    "NetworkPosition",
    "PersonalityVector",
    "Plan",
    "PromptRequest",
    "RetrievalQuery",
    "RunArtifacts",
    "RunConfig",
    "SocialGraph",
    "Tie",
    "World",
    "appraise_interaction",
    "apply_personality_update",
    "cache_key",
    "canonicalize",
    "compute_metrics",
    "detect_communities",
    "drift_bound",
    "fit_power_law",
    "personality_distance",
    "retrieve",
    "run",
    "step",
    "update_emotion",
]
