"""Backend-abstracted completion service with a response cache, token
accounting, and a deterministic mock policy backend.

The mock backend is the default: it samples an action from the agent's
behavior profile reweighted by emotional valence and network-position
weights, using a generator seeded by (run seed, agent seed, cache-key
digest, timestep) so the whole decision sequence is reproducible for any
thread interleaving. The HTTP backend speaks the OpenAI-compatible
chat-completions wire format with temperature pinned to 0 and a strict
structured-reply parser.
"""

from __future__ import annotations

import json
import math
import random
import struct
import threading
import time
from collections import OrderedDict
from dataclasses import dataclass, field, replace

import numpy as np
import xxhash

from .agents import TARGET_REQUIRED, ActionKind, EmotionalState
from .prompting import CacheKey, SubGoal

RESPONSE_CACHE_CAP = 50_000
_DECISION_SEED = 0xD5
_RETRY_ATTEMPTS = 3
_RETRY_BASE_DELAY = 0.5

# action kinds whose appeal rises with pleasure; the rest fall with it
_APPROACH_KINDS = frozenset(
    {
        ActionKind.GREET,
        ActionKind.SHARE_INFO,
        ActionKind.FORM_TIE,
        ActionKind.STRENGTHEN_TIE,
        ActionKind.POST,
        ActionKind.REPLY,
    }
)
_MODIFIER_FLOOR = 0.05
_SUBGOAL_BOOST = 1.5

REPLY_INSTRUCTION = (
    "You are a social agent. Reply with a single JSON object: "
    '{"kind": <one of Greet,ShareInfo,FormTie,StrengthenTie,SeverTie,Post,Reply,Idle>, '
    '"target": <agent id or null>, "payload": <short text>, "plan": <"keep"|"advance">}. '
    "No other text."
)


class BackendError(RuntimeError):
    """Completion backend failed after bounded retries."""


def token_count(text: str) -> int:
    """Deterministic approximation: ceil(utf-8 bytes / 4)."""
    return (len(text.encode()) + 3) // 4


@dataclass(frozen=True, slots=True)
class Decision:
    kind: ActionKind
    target: int | None = None
    payload: str = ""
    plan_directive: str = "keep"  # "keep" | "advance"


@dataclass(frozen=True, slots=True)
class MockDecisionContext:
    """Agent state the mock policy needs; never part of the cache key."""

    behavior_profile: dict[ActionKind, float]
    emotion: EmotionalState
    candidates: dict[ActionKind, tuple[tuple[int, float], ...]]  # kind -> ((target, weight), ...)
    run_seed: int
    agent_seed: int
    subgoal: SubGoal | None = None


@dataclass(frozen=True, slots=True)
class PromptRequest:
    key: CacheKey
    text: str
    agent_id: int
    timestep: int
    max_reply_tokens: int = 64
    context: MockDecisionContext | None = None  # mock backend only


@dataclass(frozen=True, slots=True)
class CompletionResponse:
    decision: Decision
    tokens_in: int
    tokens_out: int
    served_from_cache: bool = False


@dataclass
class CacheStats:
    hits: int = 0
    misses: int = 0
    entries: int = 0
    tokens_saved: int = 0
    tokens_billed: int = 0

    @property
    def hit_rate(self) -> float:
        total = self.hits + self.misses
        return self.hits / total if total else 0.0


def decision_seed(run_seed: int, agent_seed: int, key_digest: int, timestep: int) -> int:
    m = (1 << 64) - 1
    packed = struct.pack("<QQQQ", run_seed & m, agent_seed & m, key_digest & m, timestep & m)
    return xxhash.xxh64(packed, seed=_DECISION_SEED).intdigest()


def action_distribution(
    profile: dict[ActionKind, float],
    emotion: EmotionalState,
    available: frozenset[ActionKind] | set[ActionKind],
    subgoal: SubGoal | None = None,
) -> dict[ActionKind, float]:
    """The analytic reweighted categorical the mock policy samples from.

    weight(k) = profile(k) * max(1 + 0.5*pleasure*sign(k), 0.05), with
    sign +1 for approach kinds and -1 for SeverTie/Idle, times a 1.5x
    boost on the active subgoal's kind. Kinds without a feasible target
    are dropped before normalization; an empty result degrades to Idle.
    """
    pleasure = emotion.pad[0]
    weights: dict[ActionKind, float] = {}
    for kind in ActionKind:
        base = profile.get(kind, 0.0)
        if base <= 0.0 or kind not in available:
            continue
        sign = 1.0 if kind in _APPROACH_KINDS else -1.0
        modifier = max(1.0 + 0.5 * pleasure * sign, _MODIFIER_FLOOR)
        if subgoal is not None and kind is subgoal.kind:
            modifier *= _SUBGOAL_BOOST
        weights[kind] = base * modifier
    total = sum(weights.values())
    if total <= 0.0:
        return {ActionKind.IDLE: 1.0}
    return {k: w / total for k, w in weights.items()}


def mock_decide(
    key: CacheKey,
    context: MockDecisionContext,
    timestep: int,
) -> Decision:
    """Deterministic stand-in for the model: sample a kind, then a target."""
    rng = random.Random(decision_seed(context.run_seed, context.agent_seed, key.digest, timestep))
    available = {
        kind
        for kind in ActionKind
        if kind not in TARGET_REQUIRED or context.candidates.get(kind)
    }
    dist = action_distribution(context.behavior_profile, context.emotion, available, context.subgoal)
    kinds = sorted(dist, key=lambda k: k.value)
    kind = rng.choices(kinds, weights=[dist[k] for k in kinds])[0]

    target: int | None = None
    pool = context.candidates.get(kind, ())
    if pool and (kind in TARGET_REQUIRED or kind is ActionKind.SHARE_INFO):
        ids = [t for t, _ in pool]
        ws = [max(w, 1e-9) for _, w in pool]
        target = rng.choices(ids, weights=ws)[0]

    payload = kind.value.lower() if target is None else f"{kind.value.lower()} {target}"
    directive = "keep"
    sg = context.subgoal
    if sg is not None and kind is sg.kind and (sg.target is None or sg.target == target):
        directive = "advance"
    return Decision(kind=kind, target=target, payload=payload, plan_directive=directive)


class MockBackend:
    """Infallible deterministic policy backend."""

    fallible = False

    def complete(self, request: PromptRequest) -> CompletionResponse:
        if request.context is None:
            raise ValueError("mock backend needs a MockDecisionContext on the request")
        decision = mock_decide(request.key, request.context, request.timestep)
        reply = json.dumps(
            {
                "kind": decision.kind.value,
                "target": decision.target,
                "payload": decision.payload,
                "plan": decision.plan_directive,
            }
        )
        return CompletionResponse(
            decision=decision,
            tokens_in=token_count(request.text),
            tokens_out=min(token_count(reply), request.max_reply_tokens),
        )


class HTTPBackend:
    """OpenAI-compatible chat-completions client with bounded retries.

    Auth comes from the SALM_API_KEY environment variable; temperature is
    forced to 0. The reply must be the strict JSON object described in
    REPLY_INSTRUCTION. `post` is injectable for tests.
    """

    fallible = True

    def __init__(
        self,
        base_url: str,
        model: str,
        api_key: str | None = None,
        post=None,
        timeout: float = 30.0,
        sleep=time.sleep,
    ) -> None:
        import os

        self.url = base_url.rstrip("/") + "/v1/chat/completions"
        self.model = model
        self.api_key = api_key if api_key is not None else os.environ.get("SALM_API_KEY", "")
        self.timeout = timeout
        self._post = post if post is not None else self._requests_post
        self._sleep = sleep

    def _requests_post(self, url: str, headers: dict, body: dict, timeout: float):
        import requests

        resp = requests.post(url, headers=headers, json=body, timeout=timeout)
        return resp.status_code, resp.json()

    def complete(self, request: PromptRequest) -> CompletionResponse:
        body = {
            "model": self.model,
            "temperature": 0,
            "max_tokens": request.max_reply_tokens,
            "messages": [
                {"role": "system", "content": REPLY_INSTRUCTION},
                {"role": "user", "content": request.text},
            ],
        }
        headers = {"Authorization": f"Bearer {self.api_key}"}
        last_error: Exception | None = None
        for attempt in range(_RETRY_ATTEMPTS):
            try:
                status, data = self._post(self.url, headers, body, self.timeout)
                if status != 200:
                    raise BackendError(f"HTTP {status}")
                return self._parse(data, request)
            except BackendError as exc:
                last_error = exc
            except Exception as exc:  # network-level failure
                last_error = BackendError(str(exc))
            if attempt < _RETRY_ATTEMPTS - 1:
                self._sleep(_RETRY_BASE_DELAY * (2**attempt))
        raise BackendError(f"backend failed after {_RETRY_ATTEMPTS} attempts: {last_error}")

    def _parse(self, data: dict, request: PromptRequest) -> CompletionResponse:
        try:
            content = data["choices"][0]["message"]["content"]
            reply = json.loads(content)
            kind = ActionKind(reply["kind"])
            target = reply.get("target")
            if target is not None:
                target = int(target)
            decision = Decision(
                kind=kind,
                target=target,
                payload=str(reply.get("payload", "")),
                plan_directive=reply.get("plan", "keep"),
            )
        except (KeyError, IndexError, ValueError, TypeError, json.JSONDecodeError) as exc:
            raise BackendError(f"malformed completion reply: {exc}") from exc
        usage = data.get("usage", {})
        tokens_in = int(usage.get("prompt_tokens", token_count(request.text)))
        tokens_out = int(usage.get("completion_tokens", token_count(content)))
        return CompletionResponse(decision=decision, tokens_in=tokens_in, tokens_out=tokens_out)


class LLMService:
    """Shareable completion service: LRU response cache plus token stats.

    Reads and writes are serialized under one lock; determinism does not
    depend on timing because keys alone determine content.
    """

    def __init__(self, backend, capacity: int = RESPONSE_CACHE_CAP, cache_enabled: bool = True) -> None:
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.backend = backend
        self.capacity = capacity
        self.cache_enabled = cache_enabled
        self._cache: OrderedDict[int, CompletionResponse] = OrderedDict()
        self._lock = threading.Lock()
        self._stats = CacheStats()

    @property
    def fallible(self) -> bool:
        return getattr(self.backend, "fallible", True)

    def stats(self) -> CacheStats:
        with self._lock:
            return replace(self._stats, entries=len(self._cache))

    def complete(self, request: PromptRequest) -> CompletionResponse:
        with self._lock:
            if self.cache_enabled:
                cached = self._cache.get(request.key.digest)
                if cached is not None:
                    self._cache.move_to_end(request.key.digest)
                    self._stats.hits += 1
                    self._stats.tokens_saved += cached.tokens_in
                    return replace(cached, served_from_cache=True)
            response = self.backend.complete(request)
            self._stats.misses += 1
            self._stats.tokens_billed += response.tokens_in + response.tokens_out
            if self.cache_enabled:
                self._cache[request.key.digest] = response
                self._cache.move_to_end(request.key.digest)
                while len(self._cache) > self.capacity:
                    self._cache.popitem(last=False)
            return response


@dataclass
class CacheGrowthFit:
    log_coeffs: tuple[float, float]  # entries ~ A * n * ln(k) + B
    linear_coeffs: tuple[float, float]  # entries ~ A' * k + B'
    log_residual: float
    linear_residual: float
    better: str  # "logarithmic" | "linear" | "degenerate"
    degenerate: bool = False


def cache_growth_fit(series: list[tuple[int, int]], n_agents: int) -> CacheGrowthFit:
    """Least-squares comparison of logarithmic vs linear cache growth."""
    if len(series) < 10:
        raise ValueError("need at least 10 series points")
    ks = np.array([max(k, 1) for k, _ in series], dtype=float)
    ys = np.array([y for _, y in series], dtype=float)
    if np.allclose(ys, ys[0]):
        return CacheGrowthFit((0.0, float(ys[0])), (0.0, float(ys[0])), 0.0, 0.0, "degenerate", True)

    def _fit(design: np.ndarray) -> tuple[tuple[float, float], float]:
        coeffs, _, _, _ = np.linalg.lstsq(design, ys, rcond=None)
        resid = float(np.sum((design @ coeffs - ys) ** 2))
        return (float(coeffs[0]), float(coeffs[1])), resid

    ones = np.ones_like(ks)
    log_c, log_r = _fit(np.column_stack([n_agents * np.log(ks), ones]))
    lin_c, lin_r = _fit(np.column_stack([ks, ones]))
    better = "logarithmic" if log_r < lin_r else "linear"
    return CacheGrowthFit(log_c, lin_c, log_r, lin_r, better)
