"""Hierarchical template composition, canonicalization, cache keys, and
persistent goal plans.

The canonical form is a compact ASCII encoding of the base/context/
decision blocks with a fixed field order, key-sorted maps, reals rounded
to 2 decimals, and ephemeral values (timestamps, raw history, raw tie
strengths) replaced by digests or coarse bands. Two compositions that
differ only in such ephemera therefore hash to the same cache key. The
full field-by-field grammar, including which raw fields are omitted, is
in docs/canonical-form.md.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import xxhash

from .agents import ActionKind, EmotionalState, InteractionRecord, PersonalityVector

KEY_SEED = 0x53414C4D  # fixed hash seed; change invalidates every cached key

# count bands: index i covers [COUNT_BANDS[i], COUNT_BANDS[i+1])
COUNT_BANDS = (0, 1, 3, 6, 11, 21)
STRENGTH_BAND_MIDPOINT = {"w": 0.17, "m": 0.5, "s": 0.84}
_PLEASURE_REP = {"neg": -0.5, "zero": 0.0, "pos": 0.5}
_AROUSAL_REP = {"lo": 0.0, "hi": 0.6}

TOP_NEIGHBORS = 3


def count_band(n: int) -> int:
    """Coarse logarithmic-ish band index for a nonnegative count."""
    band = 0
    for i, lo in enumerate(COUNT_BANDS):
        if n >= lo:
            band = i
    return band


def band_floor(band: int) -> int:
    """Smallest count mapping to the given band (used when re-parsing)."""
    return COUNT_BANDS[min(band, len(COUNT_BANDS) - 1)]


def strength_band(strength: float) -> str:
    if strength < 1 / 3:
        return "w"
    if strength < 2 / 3:
        return "m"
    return "s"


def pleasure_band(p: float) -> str:
    if p <= -0.15:
        return "neg"
    if p >= 0.15:
        return "pos"
    return "zero"


def arousal_band(a: float) -> str:
    return "hi" if a >= 0.3 else "lo"


def history_digest(records: list[InteractionRecord] | tuple[InteractionRecord, ...]) -> str:
    """Count-banded outcome histogram of the history ring.

    Keys stay stable while counts remain inside a band, which is what
    keeps history from dragging a new cache key out of every step.
    """
    neg = sum(1 for r in records if r.valence < -0.05)
    pos = sum(1 for r in records if r.valence > 0.05)
    neu = len(records) - neg - pos
    return f"neg:{count_band(neg)},neu:{count_band(neu)},pos:{count_band(pos)}"


@dataclass(frozen=True, slots=True)
class BaseTemplate:
    personality: PersonalityVector
    behavior_profile: dict[ActionKind, float]
    history_digest: str


@dataclass(frozen=True, slots=True)
class ContextBlock:
    """Visible social context: top-tie summaries, emotion, network position,
    and a digest of the memories retrieved for this decision.

    memory_digest carries "bucket x count" tokens over the retrieved
    items' embedding sign-buckets; raw item ids are per-run ephemera and
    never reach the canonical form.
    """

    neighbors: tuple[tuple[int, float], ...]  # (agent id, tie strength), id-sorted
    degree: int
    emotion: EmotionalState
    centrality: float
    community: int  # -1 when unknown
    memory_digest: tuple[str, ...] = ()


@dataclass(frozen=True, slots=True)
class DecisionBlock:
    goals: tuple[str, int]  # (active subgoal kind, cursor)
    actions: tuple[ActionKind, ...]
    relationship_factors: dict[int, float]  # target id -> tie strength


@dataclass(frozen=True, slots=True)
class CacheKey:
    digest: int
    debug_canonical: bytes | None = None

    def __post_init__(self) -> None:
        if not (0 <= self.digest < 1 << 64):
            raise ValueError("digest must be an unsigned 64-bit value")


def _r2(v: float) -> str:
    # +0.0 collapses IEEE negative zero so -0.001 and 0.001 agree
    return f"{round(v, 2) + 0.0:.2f}"


def band_histogram(strengths: list[float] | tuple[float, ...]) -> str:
    """Strength-band counts like "w1m2"; agent ids are per-run ephemera and
    never enter the canonical form."""
    counts = {"w": 0, "m": 0, "s": 0}
    for s in strengths:
        counts[strength_band(s)] += 1
    out = "".join(f"{band}{counts[band]}" for band in ("w", "m", "s") if counts[band])
    return out or "none"


def _parse_histogram(text: str) -> tuple[float, ...]:
    if text == "none":
        return ()
    strengths: list[float] = []
    i = 0
    while i < len(text):
        band = text[i]
        i += 1
        j = i
        while j < len(text) and text[j].isdigit():
            j += 1
        strengths.extend([STRENGTH_BAND_MIDPOINT[band]] * int(text[i:j]))
        i = j
    return tuple(strengths)


def canonicalize(base: BaseTemplate, context: ContextBlock, decision: DecisionBlock) -> bytes:
    parts = []
    profile = ",".join(
        f"{k.value}:{_r2(w)}" for k, w in sorted(base.behavior_profile.items(), key=lambda kv: kv[0].value)
    )
    parts.append(
        "B|p=" + ",".join(_r2(v) for v in base.personality.traits) + f"|b={profile}|h={base.history_digest}"
    )

    # centrality is a pure function of degree, which the degree band in the
    # social field already carries, so the position reduces to community
    nbrs = band_histogram([s for _, s in context.neighbors])
    mood = f"{pleasure_band(context.emotion.pad[0])}/{arousal_band(context.emotion.pad[1])}"
    mems = ",".join(sorted(context.memory_digest)) if context.memory_digest else "none"
    parts.append(
        f"C|s=d{count_band(context.degree)};{nbrs}|e={mood}"
        f"|n={context.community}|m={mems}"
    )

    acts = ",".join(k.value for k in sorted(decision.actions, key=lambda k: k.value))
    ties = band_histogram(list(decision.relationship_factors.values()))
    parts.append(f"D|g={decision.goals[0]};{decision.goals[1]}|a={acts}|r={ties}")
    return "\n".join(parts).encode()


def parse_canonical(data: bytes) -> tuple[BaseTemplate, ContextBlock, DecisionBlock]:
    """Rebuild representative blocks from a canonical form.

    Banded fields come back as band representatives, so re-canonicalizing
    the result reproduces the input bytes exactly.
    """
    b_line, c_line, d_line = data.decode().split("\n")

    _, p_f, b_f, h_f = b_line.split("|")
    traits = tuple(float(x) for x in p_f[2:].split(","))
    profile = {}
    for entry in b_f[2:].split(","):
        name, w = entry.split(":")
        profile[ActionKind(name)] = float(w)
    base = BaseTemplate(PersonalityVector(traits), profile, h_f[2:])

    _, s_f, e_f, n_f, m_f = c_line.split("|")
    deg_part, nbr_part = s_f[2:].split(";", 1)
    degree = band_floor(int(deg_part[1:]))
    neighbors = tuple(enumerate(_parse_histogram(nbr_part)))
    pb, ab = e_f[2:].split("/")
    emotion = EmotionalState(pad=(_PLEASURE_REP[pb], _AROUSAL_REP[ab], 0.0))
    digest = () if m_f[2:] == "none" else tuple(m_f[2:].split(","))
    context = ContextBlock(
        neighbors=neighbors,
        degree=degree,
        emotion=emotion,
        centrality=0.0,
        community=int(n_f[2:]),
        memory_digest=digest,
    )

    _, g_f, a_f, r_f = d_line.split("|")
    goal_kind, cursor = g_f[2:].rsplit(";", 1)
    actions = tuple(ActionKind(name) for name in a_f[2:].split(",")) if a_f[2:] else ()
    factors = dict(enumerate(_parse_histogram(r_f[2:])))
    decision = DecisionBlock(goals=(goal_kind, int(cursor)), actions=actions, relationship_factors=factors)
    return base, context, decision


def cache_key(
    base: BaseTemplate, context: ContextBlock, decision: DecisionBlock, keep_canonical: bool = False
) -> CacheKey:
    canonical = canonicalize(base, context, decision)
    digest = xxhash.xxh64(canonical, seed=KEY_SEED).intdigest()
    return CacheKey(digest, canonical if keep_canonical else None)


def cache_key_raw(text: str) -> CacheKey:
    """Exact-match key over raw prompt text (non-hierarchical/basic mode)."""
    return CacheKey(xxhash.xxh64(text.encode(), seed=KEY_SEED).intdigest())


# -- plans --------------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class SubGoal:
    kind: ActionKind
    target: int | None = None

    def label(self) -> str:
        return self.kind.value if self.target is None else f"{self.kind.value}->{self.target}"


@dataclass(frozen=True, slots=True)
class Plan:
    subgoals: tuple[SubGoal, ...]
    transitions: tuple[str, ...]
    cursor: int  # 1-based index of the active subgoal
    created_at: int
    completed: bool = False

    def __post_init__(self) -> None:
        if self.subgoals:
            if not (1 <= self.cursor <= len(self.subgoals)):
                raise ValueError("cursor outside [1, n]")
            if len(self.transitions) != len(self.subgoals) - 1:
                raise ValueError("need exactly n-1 transition conditions")

    @property
    def active(self) -> SubGoal:
        return self.subgoals[self.cursor - 1]


@dataclass(frozen=True, slots=True)
class PlanContext:
    """World view needed to validate and repair one agent's plan."""

    agent_id: int
    now: int
    agents: frozenset[int]
    neighbors: dict[int, float]  # neighbor id -> tie strength
    degree: int
    max_degree: int
    tie_candidates: tuple[int, ...] = ()  # best non-neighbors, preference order


def _subgoal_valid(goal: SubGoal, ctx: PlanContext, pending_ties: set[int]) -> bool:
    if goal.kind in (ActionKind.POST, ActionKind.IDLE):
        return True
    t = goal.target
    if t is None or t == ctx.agent_id or t not in ctx.agents:
        return False
    if goal.kind is ActionKind.FORM_TIE:
        return t not in ctx.neighbors and ctx.degree < ctx.max_degree
    # interaction subgoals need the tie to exist now or later in the plan
    return t in ctx.neighbors or t in pending_ties


def plan_valid(plan: Plan, ctx: PlanContext) -> bool:
    """True when every remaining subgoal's precondition still holds."""
    if plan.completed or not plan.subgoals:
        return False
    pending: set[int] = set()
    for goal in plan.subgoals[plan.cursor - 1 :]:
        if not _subgoal_valid(goal, ctx, pending):
            return False
        if goal.kind is ActionKind.FORM_TIE and goal.target is not None:
            pending.add(goal.target)
    return True


def _repair_target(goal: SubGoal, ctx: PlanContext) -> int | None:
    if goal.kind is ActionKind.FORM_TIE:
        return ctx.tie_candidates[0] if ctx.tie_candidates else None
    if not ctx.neighbors:
        return None
    # strongest remaining tie; lowest id on equal strength
    return min(ctx.neighbors, key=lambda n: (-ctx.neighbors[n], n))


def make_default_plan(ctx: PlanContext, now: int) -> Plan:
    """Fresh tie-building plan focused on the most promising partner."""
    if ctx.neighbors:
        focus = min(ctx.neighbors, key=lambda n: (-ctx.neighbors[n], n))
        goals = (
            SubGoal(ActionKind.STRENGTHEN_TIE, focus),
            SubGoal(ActionKind.SHARE_INFO, focus),
        )
        transitions = ("tie-active",)
    elif ctx.tie_candidates and ctx.degree < ctx.max_degree:
        focus = ctx.tie_candidates[0]
        goals = (
            SubGoal(ActionKind.FORM_TIE, focus),
            SubGoal(ActionKind.STRENGTHEN_TIE, focus),
            SubGoal(ActionKind.SHARE_INFO, focus),
        )
        transitions = ("tie-formed", "tie-active")
    else:
        goals = (SubGoal(ActionKind.POST),)
        transitions = ()
    return Plan(subgoals=goals, transitions=transitions, cursor=1, created_at=now)


def plan_update(plan: Plan, ctx: PlanContext) -> Plan:
    """Keep a still-valid plan, repair a fixable one, else replan.

    A valid plan is returned unchanged (same object), which is what makes
    plan persistence observable. The repair rule retargets the active
    subgoal (and any later subgoal aimed at the same stale target) onto
    the strongest remaining tie or the best open tie candidate; the
    cursor never moves during repair.
    """
    if plan.completed or not plan.subgoals:
        return make_default_plan(ctx, ctx.now)
    if plan_valid(plan, ctx):
        return plan
    active = plan.active
    new_target = _repair_target(active, ctx)
    if new_target is not None and new_target != active.target:
        stale = active.target
        subgoals = list(plan.subgoals)
        for i in range(plan.cursor - 1, len(subgoals)):
            if subgoals[i].target == stale:
                subgoals[i] = replace(subgoals[i], target=new_target)
        repaired = replace(plan, subgoals=tuple(subgoals))
        if plan_valid(repaired, ctx):
            return repaired
    return make_default_plan(ctx, ctx.now)


def advance_plan(plan: Plan) -> Plan:
    """Move to the next subgoal; mark the plan completed at the end."""
    if plan.completed or not plan.subgoals:
        return plan
    if plan.cursor >= len(plan.subgoals):
        return replace(plan, completed=True)
    return replace(plan, cursor=plan.cursor + 1)


# -- prompt rendering ----------------------------------------------------------


def render_prompt(
    base: BaseTemplate, context: ContextBlock, decision: DecisionBlock, plan: Plan
) -> str:
    """Deterministic hierarchical prompt over the canonical block contents."""
    lines = ["## agent"]
    lines.append("traits: " + " ".join(_r2(v) for v in base.personality.traits))
    lines.append(
        "propensities: "
        + " ".join(
            f"{k.value}={_r2(w)}"
            for k, w in sorted(base.behavior_profile.items(), key=lambda kv: kv[0].value)
        )
    )
    lines.append(f"history: {base.history_digest}")
    lines.append("## context")
    if context.neighbors:
        lines.append("neighbors: " + band_histogram([s for _, s in context.neighbors]))
    else:
        lines.append("neighbors: none")
    lines.append(f"mood: {pleasure_band(context.emotion.pad[0])}/{arousal_band(context.emotion.pad[1])}")
    lines.append(f"position: degree-band={count_band(context.degree)} community={context.community}")
    if context.memory_digest:
        lines.append("memories: " + " ".join(sorted(context.memory_digest)))
    else:
        lines.append("memories: none")
    lines.append("## decision")
    lines.append(f"goal: {decision.goals[0]} [{decision.goals[1]}/{max(len(plan.subgoals), 1)}]")
    lines.append("actions: " + " ".join(k.value for k in sorted(decision.actions, key=lambda k: k.value)))
    lines.append("ties: " + band_histogram(list(decision.relationship_factors.values())))
    lines.append("## reply")
    lines.append("respond with: kind target payload")
    return "\n".join(lines) + "\n"


@dataclass(frozen=True, slots=True)
class FlatContext:
    """Raw per-step data for baseline (non-hierarchical) prompt rendering."""

    timestep: int
    agent_id: int
    history: tuple[InteractionRecord, ...]
    ties: dict[int, float]
    memory_contents: tuple[str, ...]


def render_flat_prompt(
    base: BaseTemplate,
    context: ContextBlock,
    decision: DecisionBlock,
    plan: Plan,
    raw: FlatContext,
) -> str:
    """Full re-rendered context: verbatim history, raw tie strengths, and
    retrieved memory contents, stamped with the timestep. This is the
    regenerate-everything baseline that hierarchical composition replaces.
    """
    lines = [f"# step {raw.timestep} agent {raw.agent_id}"]
    lines.append("traits: " + " ".join(f"{v:.4f}" for v in base.personality.traits))
    lines.append(
        "propensities: "
        + " ".join(
            f"{k.value}={w:.4f}"
            for k, w in sorted(base.behavior_profile.items(), key=lambda kv: kv[0].value)
        )
    )
    lines.append("## full history")
    if raw.history:
        for rec in raw.history:
            lines.append(
                f"t{rec.timestep} {rec.kind.value} partner={rec.partner} "
                f"valence={rec.valence:+.4f} tie={rec.tie_strength:.4f}"
            )
    else:
        lines.append("none")
    lines.append("## ties")
    if raw.ties:
        for t, s in sorted(raw.ties.items()):
            lines.append(f"{t} strength={s:.6f}")
    else:
        lines.append("none")
    lines.append(
        "## emotion "
        + " ".join(f"{v:+.6f}" for v in context.emotion.pad)
        + f" centrality={context.centrality:.6f} community={context.community}"
    )
    lines.append("## memories")
    if raw.memory_contents:
        lines.extend(raw.memory_contents)
    else:
        lines.append("none")
    lines.append("## plan")
    for i, goal in enumerate(plan.subgoals, start=1):
        marker = "*" if i == plan.cursor else "-"
        lines.append(f"{marker} {goal.label()}")
    lines.append("## decision")
    lines.append("actions: " + " ".join(k.value for k in sorted(decision.actions, key=lambda k: k.value)))
    lines.append("respond with: kind target payload")
    return "\n".join(lines) + "\n"
