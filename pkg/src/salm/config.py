"""Run configuration: one dataclass covering the engine, memory, network,
and ablation knobs, with a documented default for every field so a
minimal config file is three lines."""

from __future__ import annotations

from dataclasses import dataclass, field

from .agents import EmotionParams
from .graph import NetworkConstraints


class ConfigError(ValueError):
    """Invalid or contradictory run configuration."""


@dataclass
class RunConfig:
    seed: int = 42
    n_agents: int | None = None
    ingest: str | None = None  # SNAP-style edge list seeding the graph
    steps: int = 100
    out: str | None = None
    frame_interval: int = 50
    workers: int = 1
    personality_init: str = "neutral"  # "neutral" | "uniform"

    backend: str = "mock"  # "mock" | "http"
    base_url: str = ""
    model: str = "gpt-4o-mini"
    max_reply_tokens: int = 64
    response_cache_capacity: int = 50_000

    emotion: EmotionParams = field(default_factory=EmotionParams)
    constraints: NetworkConstraints = field(default_factory=NetworkConstraints)

    short_cap: int = 128
    memory_cache_cap: int = 1024
    coherence_weights: tuple[float, float, float] = (0.35, 0.15, 0.5)
    consolidate_every: int = 50
    stale_age: int = 100
    coherence_threshold: float = 0.5
    retrieval_top_k: int = 5

    schedule_alpha: float = 0.02
    lipschitz_l: float = 1.0
    checkpoint_every: int = 100
    community_every: int = 50

    # ablation flags
    hierarchical_prompting: bool = True
    attention_memory: bool = True
    response_cache: bool = True

    def validate(self) -> None:
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if (self.n_agents is None) == (self.ingest is None):
            raise ConfigError("exactly one of n_agents / ingest must be set")
        if self.n_agents is not None and self.n_agents < 0:
            raise ConfigError("n_agents must be >= 0")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.frame_interval < 1:
            raise ConfigError("frame_interval must be >= 1")
        if self.personality_init not in ("neutral", "uniform"):
            raise ConfigError(f"unknown personality_init {self.personality_init!r}")
        if self.backend not in ("mock", "http"):
            raise ConfigError(f"unknown backend {self.backend!r}")
        if self.backend == "http" and not self.base_url:
            raise ConfigError("http backend requires base_url")
        if self.checkpoint_every < 1 or self.community_every < 1 or self.consolidate_every < 1:
            raise ConfigError("cadence fields must be >= 1")
        if self.retrieval_top_k < 1:
            raise ConfigError("retrieval_top_k must be >= 1")
