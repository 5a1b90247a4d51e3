"""Agent domain types and the emotional/personality update rules.

Everything in this module is a value object updated through pure
functions; the engine owns the only mutable aggregate (AgentState) and
guarantees per-agent sequential access within a timestep.
"""

from __future__ import annotations

import enum
import math
from collections import deque
from dataclasses import dataclass, field, replace

BIG_FIVE = ("openness", "conscientiousness", "extraversion", "agreeableness", "neuroticism")

OCC_LABELS = (
    "joy",
    "distress",
    "pride",
    "shame",
    "admiration",
    "reproach",
    "gratitude",
    "anger",
)

# Drift envelope coefficients: ||p_{t+k} - p_t|| <= DRIFT_ALPHA*ln(k) + DRIFT_BETA.
DRIFT_ALPHA = 0.08
DRIFT_BETA = 0.12


class ActionKind(str, enum.Enum):
    GREET = "Greet"
    SHARE_INFO = "ShareInfo"
    FORM_TIE = "FormTie"
    STRENGTHEN_TIE = "StrengthenTie"
    SEVER_TIE = "SeverTie"
    POST = "Post"
    REPLY = "Reply"
    IDLE = "Idle"


# ShareInfo may carry a target but does not require one.
TARGET_REQUIRED = frozenset(
    {
        ActionKind.GREET,
        ActionKind.FORM_TIE,
        ActionKind.STRENGTHEN_TIE,
        ActionKind.SEVER_TIE,
        ActionKind.REPLY,
    }
)
TARGET_FORBIDDEN = frozenset({ActionKind.POST, ActionKind.IDLE})


@dataclass(frozen=True, slots=True)
class PersonalityVector:
    """Trait vector with every component in [0, 1]; dimension is fixed per run."""

    traits: tuple[float, ...] = (0.5, 0.5, 0.5, 0.5, 0.5)

    def __post_init__(self) -> None:
        if not self.traits:
            raise ValueError("personality vector must have at least one trait")
        for v in self.traits:
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"trait {v} outside [0, 1]")

    def __len__(self) -> int:
        return len(self.traits)


@dataclass(frozen=True, slots=True)
class EmotionalState:
    """PAD triple (default) or OCC label intensities, plus the last update step."""

    model: str = "pad"  # "pad" | "occ"
    pad: tuple[float, float, float] = (0.0, 0.0, 0.0)
    occ: dict[str, float] = field(default_factory=dict)
    last_update: int = 0

    def __post_init__(self) -> None:
        if self.model not in ("pad", "occ"):
            raise ValueError(f"unknown emotion model {self.model!r}")
        for v in self.pad:
            if not (-1.0 <= v <= 1.0):
                raise ValueError(f"pad component {v} outside [-1, 1]")
        for label, v in self.occ.items():
            if label not in OCC_LABELS:
                raise ValueError(f"unknown occ label {label!r}")
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"occ intensity {v} outside [0, 1]")


@dataclass(frozen=True, slots=True)
class EmotionParams:
    """Decay/influence coefficients of the linear emotion recurrence."""

    delta: float = 0.1
    alpha: float = 0.3
    beta: float = 0.2

    def __post_init__(self) -> None:
        if not (0.0 <= self.delta < 1.0):
            raise ValueError("delta must be in [0, 1)")
        if not (0.0 <= self.alpha <= 1.0):
            raise ValueError("alpha must be in [0, 1]")
        if not (0.0 <= self.beta <= 1.0):
            raise ValueError("beta must be in [0, 1]")


@dataclass(frozen=True, slots=True)
class InteractionRecord:
    """One realized interaction as seen by one agent."""

    timestep: int
    partner: int
    kind: ActionKind
    valence: float
    tie_strength: float  # snapshot at interaction time

    def __post_init__(self) -> None:
        if not (-1.0 <= self.valence <= 1.0):
            raise ValueError(f"valence {self.valence} outside [-1, 1]")


@dataclass(frozen=True, slots=True)
class Action:
    kind: ActionKind
    target: int | None = None
    payload: str = ""

    def __post_init__(self) -> None:
        if self.kind in TARGET_REQUIRED and self.target is None:
            raise ValueError(f"{self.kind.value} requires a target")
        if self.kind in TARGET_FORBIDDEN and self.target is not None:
            raise ValueError(f"{self.kind.value} forbids a target")


HISTORY_CAP = 50


@dataclass
class AgentState:
    """Mutable per-agent container; only the engine writes it."""

    id: int
    personality: PersonalityVector
    behavior_profile: dict[ActionKind, float]
    emotion: EmotionalState
    seed: int
    history: deque[InteractionRecord] = field(default_factory=lambda: deque(maxlen=HISTORY_CAP))

    def __post_init__(self) -> None:
        total = sum(self.behavior_profile.values())
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"behavior profile sums to {total}, expected 1")
        for w in self.behavior_profile.values():
            if w < 0:
                raise ValueError("behavior profile weights must be >= 0")


def _clamp(v: float, lo: float, hi: float) -> float:
    return max(lo, min(hi, v))


def update_emotion(
    e: EmotionalState,
    impact: tuple[float, float, float] | dict[str, float],
    cognitive: tuple[float, float, float] | dict[str, float],
    params: EmotionParams,
) -> EmotionalState:
    """Apply one step of the linear recurrence (1-delta)*e + alpha*I + beta*C.

    PAD components clamp to [-1, 1]; OCC intensities clamp to [0, 1]. The
    inputs for OCC mode are label->value maps (missing labels read as 0).
    """
    keep = 1.0 - params.delta
    if e.model == "pad":
        if not (isinstance(impact, tuple) and isinstance(cognitive, tuple)):
            raise ValueError("pad mode requires 3-vector impact and cognitive inputs")
        if len(impact) != 3 or len(cognitive) != 3:
            raise ValueError("impact and cognitive vectors must have dimension 3")
        pad = tuple(
            _clamp(keep * ev + params.alpha * iv + params.beta * cv, -1.0, 1.0)
            for ev, iv, cv in zip(e.pad, impact, cognitive)
        )
        return replace(e, pad=pad, last_update=e.last_update + 1)

    if not (isinstance(impact, dict) and isinstance(cognitive, dict)):
        raise ValueError("occ mode requires label->value maps")
    labels = set(e.occ) | set(impact) | set(cognitive)
    occ = {
        label: _clamp(
            keep * e.occ.get(label, 0.0)
            + params.alpha * impact.get(label, 0.0)
            + params.beta * cognitive.get(label, 0.0),
            0.0,
            1.0,
        )
        for label in sorted(labels)
    }
    return replace(e, occ=occ, last_update=e.last_update + 1)


def appraise_interaction(record: InteractionRecord, tie_strength: float) -> tuple[float, float, float]:
    """Map an interaction outcome to a PAD impact vector.

    Pleasure scales with valence and tie strength, arousal with the
    magnitude of the outcome, dominance weakly with both.
    """
    if not (0.0 <= tie_strength <= 1.0):
        raise ValueError(f"tie strength {tie_strength} outside [0, 1]")
    v = record.valence
    return (
        v * (0.5 + 0.5 * tie_strength),
        abs(v) * 0.5,
        v * 0.25 * tie_strength,
    )


def personality_distance(a: PersonalityVector, b: PersonalityVector) -> float:
    """Euclidean distance between two trait vectors of equal dimension."""
    if len(a) != len(b):
        raise ValueError(f"dimension mismatch: {len(a)} vs {len(b)}")
    return math.sqrt(sum((x - y) ** 2 for x, y in zip(a.traits, b.traits)))


def drift_bound(k: int, alpha: float = DRIFT_ALPHA, beta: float = DRIFT_BETA) -> float:
    """Maximum allowed trait drift over k interactions: alpha*ln(k) + beta."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    return alpha * math.log(k) + beta


def apply_personality_update(
    p: PersonalityVector,
    influence: tuple[float, ...],
    t: int,
    schedule_alpha: float,
    lipschitz_l: float = 1.0,
) -> PersonalityVector:
    """Nudge traits by a norm-clipped influence under the 1/sqrt(t) schedule.

    The influence is first clipped to norm <= lipschitz_l, scaled by
    schedule_alpha/sqrt(t), added, and the result is clamped back into
    [0, 1] per component.
    """
    if t < 1:
        raise ValueError(f"timestep must be >= 1, got {t}")
    if len(influence) != len(p):
        raise ValueError(f"dimension mismatch: {len(influence)} vs {len(p)}")
    norm = math.sqrt(sum(v * v for v in influence))
    if not math.isfinite(norm):
        raise ValueError("influence must be finite")
    if norm > lipschitz_l and norm > 0:
        influence = tuple(v * lipschitz_l / norm for v in influence)
    eta = schedule_alpha / math.sqrt(t)
    traits = tuple(_clamp(pv + eta * iv, 0.0, 1.0) for pv, iv in zip(p.traits, influence))
    return PersonalityVector(traits)
