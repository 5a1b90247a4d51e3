"""Timestep engine: the four-phase decision pipeline, drift monitoring,
telemetry, and deterministic scheduling.

Agents act simultaneously against the start-of-step world. Phase A
(context collection, emotional integration, template composition) only
touches per-agent state and may run on a worker pool; phases B (cached
completion) and C (validation, graph mutation, memory writes) run
single-threaded in sorted agent order, which is what makes artifacts
byte-identical for any worker count.
"""

from __future__ import annotations

import copy
import csv
import json
import math
import random
import struct
from collections import Counter, deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import xxhash

from . import validation as val
from .agents import (
    Action,
    ActionKind,
    AgentState,
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
from .graph import (
    MetricsReport,
    SocialGraph,
    apply_tie_dynamics,
    compute_metrics,
    detect_communities,
    positions,
    target_weight,
    validate_action,
)
from .llm import (
    BackendError,
    CacheStats,
    HTTPBackend,
    LLMService,
    MockBackend,
    MockDecisionContext,
    PromptRequest,
)
from .memory import (
    MemoryItem,
    MemoryStore,
    RetrievalQuery,
    consolidate,
    embed_text,
    insert,
    retrieve,
    retrieve_recent,
    serialize_store,
    sign_bucket,
)
from .prompting import (
    TOP_NEIGHBORS,
    BaseTemplate,
    ContextBlock,
    DecisionBlock,
    FlatContext,
    Plan,
    PlanContext,
    SubGoal,
    advance_plan,
    cache_key,
    cache_key_raw,
    count_band,
    history_digest,
    make_default_plan,
    plan_update,
    render_flat_prompt,
    render_prompt,
)

OUTCOME_VALENCE = {
    ActionKind.GREET: 0.3,
    ActionKind.SHARE_INFO: 0.4,
    ActionKind.FORM_TIE: 0.5,
    ActionKind.STRENGTHEN_TIE: 0.6,
    ActionKind.SEVER_TIE: -0.7,
    ActionKind.POST: 0.1,
    ActionKind.REPLY: 0.3,
    ActionKind.IDLE: 0.0,
}

DEFAULT_PROFILE = {
    ActionKind.GREET: 0.12,
    ActionKind.SHARE_INFO: 0.18,
    ActionKind.FORM_TIE: 0.06,
    ActionKind.STRENGTHEN_TIE: 0.20,
    ActionKind.SEVER_TIE: 0.03,
    ActionKind.POST: 0.16,
    ActionKind.REPLY: 0.13,
    ActionKind.IDLE: 0.12,
}

# per-unit-weight trait nudge: positive outcomes push extraversion and
# agreeableness up and neuroticism down; negative outcomes do the reverse
TRAIT_NUDGE = (0.10, 0.05, 0.30, 0.30, -0.25)

_FORM_CANDIDATES = 8
_TARGET_POOL = 5
_WINDOW_STEPS = 100  # action-stability proxy window
_METRICS_HISTORY_MAX_NODES = 2000


class StepError(RuntimeError):
    """A step failed; the world was rolled back to its pre-step snapshot."""


@dataclass(frozen=True, slots=True)
class DriftCheckpoint:
    agent_id: int
    timestep: int
    personality: PersonalityVector


@dataclass(frozen=True, slots=True)
class DriftViolation:
    agent_id: int
    from_step: int
    to_step: int
    distance: float
    bound: float
    kind: str  # "envelope" | "cumulative"


@dataclass(frozen=True, slots=True)
class TelemetryFrame:
    step: int
    memory_bytes: int
    cumulative_tokens: int
    prompt_hits: int
    prompt_misses: int
    mem_hits: int
    mem_misses: int
    cache_entries: int = 0
    coherence_proxy: float | None = None


@dataclass
class World:
    agents: dict[int, AgentState]
    graph: SocialGraph
    stores: dict[int, MemoryStore]
    plans: dict[int, Plan]
    clock: int
    run_seed: int
    communities: dict[int, int] = field(default_factory=dict)
    last_interactions: dict[int, list[InteractionRecord]] = field(default_factory=dict)
    last_action: dict[int, ActionKind] = field(default_factory=dict)
    last_alignment: dict[int, float] = field(default_factory=dict)
    checkpoints: list[DriftCheckpoint] = field(default_factory=list)
    recent_events: deque = field(default_factory=deque)  # (step, actor, target, valence)
    window_counts: dict[int, Counter] = field(default_factory=dict)
    prev_window: dict[int, Counter] = field(default_factory=dict)
    window_scores: list[float] = field(default_factory=list)
    next_memory_id: int = 1


def _mix(*values: int) -> int:
    m = (1 << 64) - 1
    return xxhash.xxh64(
        struct.pack(f"<{len(values)}Q", *(v & m for v in values)), seed=0xA5
    ).intdigest()


def agent_seed(run_seed: int, aid: int) -> int:
    return _mix(run_seed, aid)


def _unit(run_seed: int, aid: int, dim: int) -> float:
    return _mix(run_seed, aid, dim) / float(1 << 64)


def build_world(cfg: RunConfig) -> World:
    if cfg.ingest is not None:
        from .snap import parse_edges, to_graph

        text = Path(cfg.ingest).read_text()
        graph = to_graph(parse_edges(text))
        ids = sorted(graph.nodes)
    else:
        graph = SocialGraph()
        ids = list(range(cfg.n_agents or 0))
        for aid in ids:
            graph.add_node(aid)

    agents: dict[int, AgentState] = {}
    stores: dict[int, MemoryStore] = {}
    for aid in ids:
        if cfg.personality_init == "uniform":
            traits = tuple(_unit(cfg.seed, aid, d) for d in range(5))
        else:
            traits = (0.5, 0.5, 0.5, 0.5, 0.5)
        agents[aid] = AgentState(
            id=aid,
            personality=PersonalityVector(traits),
            behavior_profile=dict(DEFAULT_PROFILE),
            emotion=EmotionalState(),
            seed=agent_seed(cfg.seed, aid),
        )
        stores[aid] = MemoryStore(
            owner=aid,
            short_cap=cfg.short_cap,
            cache_cap=cfg.memory_cache_cap,
            coherence_weights=cfg.coherence_weights,
            retention_threshold=cfg.coherence_threshold,
        )

    communities = detect_communities(graph)[0] if graph.ties else {}
    world = World(
        agents=agents,
        graph=graph,
        stores=stores,
        plans={},
        clock=0,
        run_seed=cfg.seed,
        communities=communities,
    )
    pos = positions(graph, communities, with_clustering=len(ids) <= _METRICS_HISTORY_MAX_NODES)
    agent_set = frozenset(ids)
    for aid in ids:
        ctx = _plan_context(world, cfg, aid, pos, agent_set, now=0)
        world.plans[aid] = make_default_plan(ctx, now=0)
        world.window_counts[aid] = Counter()
    for aid in ids:
        world.checkpoints.append(DriftCheckpoint(aid, 0, agents[aid].personality))
    return world


def _form_candidates(world: World, aid: int, pos: dict, agent_set: frozenset[int]) -> list[int]:
    """Best non-neighbors for tie formation, position-weighted with a
    per-agent deterministic shuffle so identical agents spread out."""
    nbrs = world.graph.neighbors(aid)
    kappa = 1.0  # candidate ranking reuses the position bias shape
    scored = []
    for other in agent_set:
        if other == aid or other in nbrs:
            continue
        w = target_weight(pos[other], kappa)
        scored.append((-w, _mix(world.run_seed, aid, other), other))
    scored.sort()
    return [other for _, _, other in scored[:_FORM_CANDIDATES]]


def _plan_context(
    world: World,
    cfg: RunConfig,
    aid: int,
    pos: dict,
    agent_set: frozenset[int],
    now: int,
) -> PlanContext:
    nbrs = {v: world.graph.strength(aid, v) for v in world.graph.neighbors(aid)}
    return PlanContext(
        agent_id=aid,
        now=now,
        agents=agent_set,
        neighbors=nbrs,
        degree=len(nbrs),
        max_degree=cfg.constraints.max_degree,
        tie_candidates=tuple(_form_candidates(world, aid, pos, agent_set)),
    )


def influence_vector(
    agent: AgentState, interactions: list[InteractionRecord], lipschitz_l: float = 1.0
) -> tuple[float, ...]:
    """Sum of per-interaction trait nudges weighted by valence*tie strength,
    clipped to norm <= lipschitz_l."""
    if not interactions:
        return (0.0,) * 5
    acc = [0.0] * 5
    for rec in interactions:
        w = rec.valence * rec.tie_strength
        for i, d in enumerate(TRAIT_NUDGE):
            acc[i] += w * d
    norm = math.sqrt(sum(v * v for v in acc))
    if norm > lipschitz_l and norm > 0:
        acc = [v * lipschitz_l / norm for v in acc]
    return tuple(acc)


@dataclass
class _AgentTurn:
    aid: int
    request: PromptRequest
    plan: Plan
    candidates: dict[ActionKind, tuple[tuple[int, float], ...]]


def _phase_a(
    world: World,
    cfg: RunConfig,
    aid: int,
    pos: dict,
    agent_set: frozenset[int],
) -> _AgentTurn:
    agent = world.agents[aid]
    store = world.stores[aid]
    g = world.graph
    t_next = world.clock + 1

    # (2-input prep) impacts come from last step's interactions
    recs = world.last_interactions.get(aid, [])
    if recs:
        imps = [appraise_interaction(r, r.tie_strength) for r in recs]
        impact = tuple(sum(col) / len(imps) for col in zip(*imps))
    else:
        impact = (0.0, 0.0, 0.0)
    align = world.last_alignment.get(aid, 0.0)
    cognitive = (0.3 * align, 0.15 * align, 0.05 * align)

    # (1) context collection: retrieval uses the pre-update emotion
    my_pos = pos[aid]
    last_kind = world.last_action.get(aid, ActionKind.IDLE).value
    query_text = f"q {last_kind} c{my_pos.community} b{count_band(my_pos.degree)}"
    query = RetrievalQuery(embed_text(query_text), agent.emotion, cfg.retrieval_top_k)
    if cfg.attention_memory:
        retrieved = retrieve(store, query, now=t_next)
    else:
        retrieved = retrieve_recent(store, cfg.retrieval_top_k)

    # (2) emotional integration
    agent.emotion = update_emotion(agent.emotion, impact, cognitive, cfg.emotion)

    # (3) template composition
    nbr_strengths = {v: g.strength(aid, v) for v in g.neighbors(aid)}
    top_ties = dict(
        sorted(nbr_strengths.items(), key=lambda kv: (-kv[1], kv[0]))[:TOP_NEIGHBORS]
    )
    plan_ctx = _plan_context(world, cfg, aid, pos, agent_set, now=t_next)
    plan = plan_update(world.plans[aid], plan_ctx)
    world.plans[aid] = plan

    base = BaseTemplate(
        personality=agent.personality,
        behavior_profile=agent.behavior_profile,
        history_digest=history_digest(list(agent.history)),
    )
    bucket_counts = Counter(sign_bucket(item.embedding) for item, _ in retrieved)
    context = ContextBlock(
        neighbors=tuple(sorted(top_ties.items())),
        degree=my_pos.degree,
        emotion=agent.emotion,
        centrality=my_pos.degree_centrality,
        community=my_pos.community,
        memory_digest=tuple(f"{b}x{c}" for b, c in sorted(bucket_counts.items())),
    )

    neighbor_pool = tuple(
        (v, target_weight(pos[v], cfg.constraints.centrality_exponent))
        for v in sorted(nbr_strengths, key=lambda v: (-nbr_strengths[v], v))[:_TARGET_POOL]
    )
    form_pool = tuple(
        (v, target_weight(pos[v], cfg.constraints.centrality_exponent))
        for v in plan_ctx.tie_candidates
    )
    candidates: dict[ActionKind, tuple[tuple[int, float], ...]] = {
        ActionKind.STRENGTHEN_TIE: neighbor_pool,
        ActionKind.SEVER_TIE: neighbor_pool,
        ActionKind.REPLY: neighbor_pool,
        ActionKind.SHARE_INFO: neighbor_pool,
        ActionKind.GREET: form_pool if form_pool else neighbor_pool,
        ActionKind.FORM_TIE: form_pool if my_pos.degree < cfg.constraints.max_degree else (),
    }

    allowed = [ActionKind.POST, ActionKind.IDLE, ActionKind.SHARE_INFO]
    for kind in (
        ActionKind.GREET,
        ActionKind.FORM_TIE,
        ActionKind.STRENGTHEN_TIE,
        ActionKind.SEVER_TIE,
        ActionKind.REPLY,
    ):
        if candidates.get(kind):
            allowed.append(kind)
    decision = DecisionBlock(
        goals=(plan.active.kind.value, plan.cursor),
        actions=tuple(sorted(allowed, key=lambda k: k.value)),
        relationship_factors=top_ties,
    )

    if cfg.hierarchical_prompting:
        key = cache_key(base, context, decision)
        text = render_prompt(base, context, decision, plan)
    else:
        raw = FlatContext(
            timestep=t_next,
            agent_id=aid,
            history=tuple(agent.history),
            ties=nbr_strengths,
            memory_contents=tuple(item.content for item, _ in retrieved),
        )
        text = render_flat_prompt(base, context, decision, plan, raw)
        key = cache_key_raw(text)

    mock_ctx = MockDecisionContext(
        behavior_profile=agent.behavior_profile,
        emotion=agent.emotion,
        candidates=candidates,
        run_seed=world.run_seed,
        agent_seed=agent.seed,
        subgoal=plan.active,
    )
    request = PromptRequest(
        key=key,
        text=text,
        agent_id=aid,
        timestep=t_next,
        max_reply_tokens=cfg.max_reply_tokens,
        context=mock_ctx,
    )
    return _AgentTurn(aid=aid, request=request, plan=plan, candidates=candidates)


def _resolve_target(
    turn: _AgentTurn,
    kind: ActionKind,
    suggested: int | None,
    from_cache: bool,
    world: World,
    t_next: int,
) -> int | None:
    """Pick the actor's own target for the decided kind.

    Preference order: the plan's focus target when compatible, then the
    backend's fresh suggestion, then a deterministic position-weighted
    sample. Cached replays never reuse another agent's embedded target.
    """
    pool = turn.candidates.get(kind, ())
    if not pool:
        return None
    ids = [t for t, _ in pool]
    active = turn.plan.active
    if active.kind is kind and active.target in ids:
        return active.target
    if not from_cache and suggested in ids:
        return suggested
    seed = _mix(world.run_seed, world.agents[turn.aid].seed, turn.request.key.digest, t_next)
    rng = random.Random(seed)
    return rng.choices(ids, weights=[max(w, 1e-9) for _, w in pool])[0]


def step(world: World, cfg: RunConfig, service: LLMService, sink=None, pool=None) -> World:
    """Advance the world one timestep; transactional on backend failure."""
    snapshot = copy.deepcopy(world) if service.fallible else None
    try:
        _step_inner(world, cfg, service, sink, pool)
    except BackendError as exc:
        if snapshot is not None:
            for name in world.__dataclass_fields__:
                setattr(world, name, getattr(snapshot, name))
        raise StepError(f"step {world.clock + 1} failed: {exc}") from exc
    return world


def _relabel_communities(prev: dict[int, int], fresh: dict[int, int]) -> dict[int, int]:
    """Carry community labels across refreshes by maximum member overlap.

    Keeps an agent's visible community label stable unless it actually
    moves groups, instead of renumbering the whole partition every
    refresh.
    """
    if not prev:
        return fresh
    groups: dict[int, list[int]] = {}
    for node, c in fresh.items():
        groups.setdefault(c, []).append(node)
    used: set[int] = set()
    mapping: dict[int, int] = {}
    next_label = max(prev.values(), default=-1) + 1
    for c in sorted(groups, key=lambda c: min(groups[c])):
        overlap: dict[int, int] = {}
        for node in groups[c]:
            old = prev.get(node)
            if old is not None:
                overlap[old] = overlap.get(old, 0) + 1
        best = None
        for old_label in sorted(overlap):
            if old_label in used:
                continue
            if best is None or overlap[old_label] > overlap[best]:
                best = old_label
        if best is None:
            best = next_label
            next_label += 1
        used.add(best)
        mapping[c] = best
    return {node: mapping[c] for node, c in fresh.items()}


def _step_inner(world: World, cfg: RunConfig, service: LLMService, sink, pool) -> None:
    t_next = world.clock + 1
    ids = sorted(world.agents)
    agent_set = frozenset(ids)

    if world.clock % cfg.community_every == 0 and world.graph.ties:
        fresh = detect_communities(world.graph)[0]
        world.communities = _relabel_communities(world.communities, fresh)
    pos = positions(
        world.graph,
        world.communities,
        with_clustering=len(ids) <= _METRICS_HISTORY_MAX_NODES,
    )

    # phase A: per-agent, order-independent
    if pool is not None and cfg.workers > 1:
        turns = list(pool.map(lambda aid: _phase_a(world, cfg, aid, pos, agent_set), ids))
    else:
        turns = [_phase_a(world, cfg, aid, pos, agent_set) for aid in ids]
    turns.sort(key=lambda t: t.aid)

    # phase B: completions in sorted order through the shared cache
    proposals: list[tuple[_AgentTurn, Action, bool]] = []
    for turn in turns:
        response = service.complete(turn.request)
        kind = response.decision.kind
        target = _resolve_target(
            turn, kind, response.decision.target, response.served_from_cache, world, t_next
        )
        if target is None and kind in (
            ActionKind.GREET,
            ActionKind.FORM_TIE,
            ActionKind.STRENGTHEN_TIE,
            ActionKind.SEVER_TIE,
            ActionKind.REPLY,
        ):
            kind = ActionKind.IDLE  # no feasible partner this step
        payload = kind.value.lower() if target is None else f"{kind.value.lower()} {target}"
        proposals.append((turn, Action(kind=kind, target=target, payload=payload), response.served_from_cache))

    # phase C: validate and apply in sorted (actor, target) order
    approved: list[tuple[int, Action]] = []
    approved_ids: set[int] = set()
    events = []
    for turn, action, cached in proposals:
        try:
            ok, reason = validate_action(action, world.graph, cfg.constraints, turn.aid)
        except ValueError:
            ok, reason = False, "unknown target"
        if ok:
            approved.append((turn.aid, action))
            approved_ids.add(turn.aid)
        events.append((turn.aid, action, ok, reason, cached))

    apply_tie_dynamics(world.graph, approved, cfg.constraints, t_next)

    new_interactions: dict[int, list[InteractionRecord]] = {aid: [] for aid in ids}
    own_action: dict[int, tuple[ActionKind, int | None, bool]] = {}
    for turn, action, cached in proposals:
        own_action[turn.aid] = (action.kind, action.target, turn.aid in approved_ids)
    for aid, action in approved:
        if action.target is None:
            continue
        valence = OUTCOME_VALENCE[action.kind]
        strength = world.graph.strength(aid, action.target)
        rec_out = InteractionRecord(t_next, action.target, action.kind, valence, strength)
        rec_in = InteractionRecord(t_next, aid, action.kind, valence, strength)
        new_interactions[aid].append(rec_out)
        new_interactions[action.target].append(rec_in)
        world.recent_events.append((t_next, aid, action.target, valence))

    while world.recent_events and world.recent_events[0][0] <= t_next - _WINDOW_STEPS:
        world.recent_events.popleft()

    for aid in ids:
        agent = world.agents[aid]
        kind, target, ok = own_action[aid]
        world.last_action[aid] = kind
        recs = new_interactions[aid]
        for rec in recs:
            agent.history.append(rec)
        if kind in (ActionKind.POST, ActionKind.IDLE) and ok:
            own_valence = OUTCOME_VALENCE[kind]
        elif recs:
            own_valence = sum(r.valence for r in recs) / len(recs)
        else:
            own_valence = 0.0

        # plan bookkeeping and goal alignment
        plan = world.plans[aid]
        active = plan.active
        aligned = ok and kind is active.kind and (active.target is None or active.target == target)
        world.last_alignment[aid] = 1.0 if aligned else 0.0
        if aligned:
            world.plans[aid] = advance_plan(plan)

        # personality update from this step's interactions
        inf = influence_vector(agent, recs, cfg.lipschitz_l)
        if any(inf):
            agent.personality = apply_personality_update(
                agent.personality, inf, t_next, cfg.schedule_alpha, cfg.lipschitz_l
            )

        # one memory item per agent per step; the encoding bonus keeps
        # high-valence relationship events above the retention threshold
        sal = min(1.0, abs(own_valence))
        mood = "pos" if own_valence > 0.05 else ("neg" if own_valence < -0.05 else "neu")
        comm = pos[aid].community
        item = MemoryItem(
            id=world.next_memory_id,
            owner=aid,
            content=f"t{t_next} {kind.value}" + (f" p{target}" if target is not None else ""),
            embedding=embed_text(f"{kind.value} c{comm} {mood}"),
            salience=sal,
            importance=min(1.0, 0.2 + sal),
            created_at=t_next,
            last_access=t_next,
            pad_snapshot=agent.emotion.pad,
        )
        world.next_memory_id += 1
        insert(world.stores[aid], item)

        world.window_counts[aid][kind] += 1

    world.last_interactions = new_interactions

    if t_next % cfg.consolidate_every == 0:
        for aid in ids:
            consolidate(world.stores[aid], t_next, cfg.stale_age, cfg.coherence_threshold)

    if t_next % _WINDOW_STEPS == 0:
        sims = []
        for aid in ids:
            prev = world.prev_window.get(aid)
            cur = world.window_counts[aid]
            if prev:
                sims.append(1.0 - _total_variation(prev, cur))
            world.prev_window[aid] = cur
            world.window_counts[aid] = Counter()
        if sims:
            world.window_scores.append(sum(sims) / len(sims))

    if t_next % cfg.checkpoint_every == 0:
        for aid in ids:
            world.checkpoints.append(DriftCheckpoint(aid, t_next, world.agents[aid].personality))

    if sink is not None:
        for aid, action, ok, reason, cached in events:
            valence = OUTCOME_VALENCE[action.kind] if ok else 0.0
            sink(
                {
                    "step": t_next,
                    "agent": aid,
                    "kind": action.kind.value,
                    "target": action.target,
                    "approved": ok,
                    "reason": reason,
                    "valence": valence,
                    "cached": cached,
                }
            )

    world.clock = t_next


def _total_variation(a: Counter, b: Counter) -> float:
    na, nb = sum(a.values()), sum(b.values())
    if na == 0 or nb == 0:
        return 0.0 if na == nb else 1.0
    keys = set(a) | set(b)
    return 0.5 * sum(abs(a[k] / na - b[k] / nb) for k in keys)


def coherence_proxy(world: World) -> float | None:
    """Mean action-distribution stability across consecutive 100-step windows.

    Internal proxy only; not comparable to externally reported coherence
    figures.
    """
    if not world.window_scores:
        return None
    return sum(world.window_scores) / len(world.window_scores)


# -- drift monitoring ----------------------------------------------------------


def check_drift(
    checkpoints: list[DriftCheckpoint],
    world: World,
    schedule_alpha: float,
    lipschitz_l: float = 1.0,
) -> list[DriftViolation]:
    """Compare every checkpoint against the current world.

    Flags distances beyond the logarithmic envelope or the cumulative
    step-size budget 2*alpha*L*(sqrt(now) - sqrt(t)).
    """
    out: list[DriftViolation] = []
    now = world.clock
    for cp in checkpoints:
        k = now - cp.timestep
        if k < 1:
            continue
        dist = personality_distance(world.agents[cp.agent_id].personality, cp.personality)
        env = drift_bound(k)
        if dist > env + 1e-12:
            out.append(DriftViolation(cp.agent_id, cp.timestep, now, dist, env, "envelope"))
        cum = 2.0 * schedule_alpha * lipschitz_l * (math.sqrt(now) - math.sqrt(cp.timestep))
        if dist > cum + 1e-12:
            out.append(DriftViolation(cp.agent_id, cp.timestep, now, dist, cum, "cumulative"))
    return out


def check_drift_pairs(
    checkpoints: list[DriftCheckpoint],
    schedule_alpha: float,
    lipschitz_l: float = 1.0,
) -> list[DriftViolation]:
    """Sweep every ordered checkpoint pair per agent against both bounds."""
    by_agent: dict[int, list[DriftCheckpoint]] = {}
    for cp in checkpoints:
        by_agent.setdefault(cp.agent_id, []).append(cp)
    out: list[DriftViolation] = []
    for aid, cps in sorted(by_agent.items()):
        cps.sort(key=lambda c: c.timestep)
        for i, early in enumerate(cps):
            for late in cps[i + 1 :]:
                k = late.timestep - early.timestep
                dist = personality_distance(late.personality, early.personality)
                env = drift_bound(k)
                if dist > env + 1e-12:
                    out.append(
                        DriftViolation(aid, early.timestep, late.timestep, dist, env, "envelope")
                    )
                cum = 2.0 * schedule_alpha * lipschitz_l * (
                    math.sqrt(late.timestep) - math.sqrt(early.timestep)
                )
                if dist > cum + 1e-12:
                    out.append(
                        DriftViolation(aid, early.timestep, late.timestep, dist, cum, "cumulative")
                    )
    return out


# -- full runs ------------------------------------------------------------------


@dataclass
class RunArtifacts:
    out_dir: Path | None
    config: RunConfig
    metrics: MetricsReport
    telemetry: list[TelemetryFrame]
    prompt_stats: CacheStats
    drift_violations: list[DriftViolation]
    validator_scores: dict[str, float]
    cache_entry_series: list[tuple[int, int]]
    coherence_proxy: float | None
    metrics_history: list[tuple[int, MetricsReport]]
    world: World


def build_service(cfg: RunConfig) -> LLMService:
    if cfg.backend == "mock":
        backend = MockBackend()
    else:
        backend = HTTPBackend(cfg.base_url, cfg.model)
    return LLMService(
        backend, capacity=cfg.response_cache_capacity, cache_enabled=cfg.response_cache
    )


def _memory_bytes(world: World) -> int:
    return sum(len(serialize_store(world.stores[aid])) for aid in sorted(world.stores))


def _frame(world: World, service: LLMService) -> TelemetryFrame:
    stats = service.stats()
    mem_hits = sum(s.hits for s in world.stores.values())
    mem_misses = sum(s.misses for s in world.stores.values())
    return TelemetryFrame(
        step=world.clock,
        memory_bytes=_memory_bytes(world),
        cumulative_tokens=stats.tokens_billed,
        prompt_hits=stats.hits,
        prompt_misses=stats.misses,
        mem_hits=mem_hits,
        mem_misses=mem_misses,
        cache_entries=stats.entries,
        coherence_proxy=coherence_proxy(world),
    )


def run(cfg: RunConfig, service: LLMService | None = None) -> RunArtifacts:
    """Execute a configured run and (optionally) write its artifact directory."""
    cfg.validate()
    if service is None:
        service = build_service(cfg)
    world = build_world(cfg)

    out_dir = Path(cfg.out) if cfg.out else None
    events_file = None
    sink = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        events_file = (out_dir / "events.log").open("w")

        def sink(record: dict) -> None:
            events_file.write(json.dumps(record, sort_keys=True) + "\n")

    telemetry: list[TelemetryFrame] = [_frame(world, service)]
    metrics_history: list[tuple[int, MetricsReport]] = []
    track_metrics = len(world.agents) <= _METRICS_HISTORY_MAX_NODES
    if track_metrics:
        metrics_history.append((0, compute_metrics(world.graph)))

    pool = ThreadPoolExecutor(max_workers=cfg.workers) if cfg.workers > 1 else None
    try:
        for _ in range(cfg.steps):
            step(world, cfg, service, sink=sink, pool=pool)
            if world.clock % cfg.frame_interval == 0 or world.clock == cfg.steps:
                telemetry.append(_frame(world, service))
                if track_metrics:
                    metrics_history.append((world.clock, compute_metrics(world.graph)))
    finally:
        if pool is not None:
            pool.shutdown()
        if events_file is not None:
            events_file.close()

    metrics = metrics_history[-1][1] if track_metrics else compute_metrics(world.graph)
    violations = check_drift(world.checkpoints, world, cfg.schedule_alpha, cfg.lipschitz_l)
    violations += check_drift_pairs(world.checkpoints, cfg.schedule_alpha, cfg.lipschitz_l)
    entry_series = [(f.step, f.cache_entries) for f in telemetry]

    scores = _validator_scores(world, metrics, metrics_history)
    proxy = coherence_proxy(world)
    artifacts = RunArtifacts(
        out_dir=out_dir,
        config=cfg,
        metrics=metrics,
        telemetry=telemetry,
        prompt_stats=service.stats(),
        drift_violations=violations,
        validator_scores=scores,
        cache_entry_series=entry_series,
        coherence_proxy=proxy,
        metrics_history=metrics_history,
        world=world,
    )
    if out_dir is not None:
        _write_artifacts(artifacts)
    return artifacts


def _validator_scores(
    world: World, metrics: MetricsReport, history: list[tuple[int, MetricsReport]]
) -> dict[str, float]:
    neighbors = {aid: set(world.graph.neighbors(aid)) for aid in world.agents}
    interactions = [(a, t, v) for (_, a, t, v) in world.recent_events]
    micro = val.v_micro(interactions, neighbors)
    communities = world.communities or (
        detect_communities(world.graph)[0] if world.graph.ties else {}
    )
    emotions = {aid: agent.emotion.pad for aid, agent in world.agents.items()}
    meso = val.v_meso(neighbors, communities, emotions)
    macro = val.v_macro(
        metrics, None, val.ValidationWeights(), [m for _, m in history]
    )
    return {"v_micro": micro, "v_meso": meso, "v_macro": macro}


def _write_artifacts(art: RunArtifacts) -> None:
    out = art.out_dir
    world = art.world

    with (out / "telemetry.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["step", "memory_bytes", "cum_tokens", "prompt_hits", "prompt_misses", "mem_hits", "mem_misses"]
        )
        for f in art.telemetry:
            writer.writerow(
                [f.step, f.memory_bytes, f.cumulative_tokens, f.prompt_hits, f.prompt_misses, f.mem_hits, f.mem_misses]
            )

    with (out / "graph.edges").open("w") as fh:
        for (u, v), tie in sorted(world.graph.ties.items()):
            fh.write(f"{u} {v} {tie.strength:.6f}\n")

    stats = art.prompt_stats
    lines = [
        f"n_nodes {art.metrics.n_nodes}",
        f"n_edges {art.metrics.n_edges}",
        f"clustering_coefficient {art.metrics.clustering_coefficient:.9f}",
        f"avg_path_length {art.metrics.avg_path_length:.9f}",
        f"density {art.metrics.density:.9f}",
        f"powerlaw_alpha {art.metrics.powerlaw_alpha:.6f}" if art.metrics.powerlaw_alpha else "powerlaw_alpha none",
        f"powerlaw_xmin {art.metrics.powerlaw_xmin}" if art.metrics.powerlaw_xmin else "powerlaw_xmin none",
        f"coherence_proxy {art.coherence_proxy:.6f}" if art.coherence_proxy is not None else "coherence_proxy none",
        f"prompt_hit_rate {stats.hit_rate:.6f}",
        f"prompt_hits {stats.hits}",
        f"prompt_misses {stats.misses}",
        f"tokens_billed {stats.tokens_billed}",
        f"tokens_saved {stats.tokens_saved}",
        f"cache_entries {stats.entries}",
        f"drift_violations {len(art.drift_violations)}",
        f"target_clustering {val.REFERENCE_MACRO_TARGETS['clustering_coefficient']}",
        f"target_path_length {val.REFERENCE_MACRO_TARGETS['avg_path_length']}",
        f"target_powerlaw_alpha {val.REFERENCE_MACRO_TARGETS['powerlaw_alpha']}",
        f"target_hit_rate {val.HIT_RATE_TARGET} band {val.HIT_RATE_BAND}",
        f"target_token_reduction {val.TOKEN_REDUCTION_TARGET}",
    ]
    for (step_no, m), (_, entries) in zip(art.metrics_history, art.cache_entry_series):
        lines.append(
            f"history {step_no} {m.clustering_coefficient:.9f} {m.avg_path_length:.9f} "
            f"{m.density:.9f} {entries}"
        )
    (out / "metrics.report").write_text("\n".join(lines) + "\n")

    report_lines, report_records = val.format_report(
        art.validator_scores, mode="structural-only", correlations=[]
    )
    (out / "validation.report").write_text("\n".join(report_lines) + "\n")
    with (out / "validation.jsonl").open("w") as fh:
        for rec in report_records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")

    state = {
        "clock": world.clock,
        "agents": {
            str(aid): {
                "personality": list(world.agents[aid].personality.traits),
                "pad": list(world.agents[aid].emotion.pad),
                "profile": {k.value: w for k, w in sorted(world.agents[aid].behavior_profile.items(), key=lambda kv: kv[0].value)},
            }
            for aid in sorted(world.agents)
        },
    }
    (out / "state.json").write_text(json.dumps(state, sort_keys=True, indent=1) + "\n")
