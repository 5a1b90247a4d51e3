"""Micro/meso/macro validator stack and correlation statistics.

All three scores are bounded in [0, 1] by construction:

- micro: per-pair interaction quality (reciprocity blended with outcome
  valence), averaged over each agent's neighbors and then over agents;
- meso: per-community internal density times emotional coherence,
  averaged over communities;
- macro: weighted blend of structural agreement with a reference graph,
  degree-exponent agreement, and trajectory stability.

The published large-network comparison targets are exported as dashboard
constants; they are baselines for reports, not test assertions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from scipy import stats as scipy_stats

from .graph import MetricsReport

REFERENCE_MACRO_TARGETS = {
    "clustering_coefficient": 0.31,
    "avg_path_length": 4.7,
    "powerlaw_alpha": 2.1,
}
HIT_RATE_TARGET = 0.80
HIT_RATE_BAND = 0.10
TOKEN_REDUCTION_TARGET = 0.73
MEMORY_GROWTH_WINDOW_LIMIT = 1.15  # bytes(4000) / bytes(1000) ceiling

_PAD_DIAMETER = 2.0 * math.sqrt(3.0)


@dataclass(frozen=True, slots=True)
class ValidationWeights:
    macro: tuple[float, float, float] = (0.4, 0.4, 0.2)

    def __post_init__(self) -> None:
        if any(w < 0 for w in self.macro) or abs(sum(self.macro) - 1.0) > 1e-9:
            raise ValueError("macro weights must be nonnegative and sum to 1")


@dataclass(frozen=True, slots=True)
class CorrelationEntry:
    label: str
    r: float
    ci_low: float
    ci_high: float
    p: float


def _clamp01(v: float) -> float:
    return max(0.0, min(1.0, v))


def v_micro(
    interactions: list[tuple[int, int, float]],
    neighbors: dict[int, set[int]],
) -> float:
    """Mean neighbor interaction quality.

    `interactions` are directed (actor, target, valence) events inside the
    evaluation window. Q(i,j) = 0.5*reciprocity + 0.5*(1 + mean valence)/2,
    zero for pairs without events; isolated agents contribute 0.
    """
    if not neighbors:
        return 0.0
    counts: dict[tuple[int, int], int] = {}
    valences: dict[tuple[int, int], list[float]] = {}
    for actor, target, valence in interactions:
        counts[(actor, target)] = counts.get((actor, target), 0) + 1
        key = (actor, target) if actor < target else (target, actor)
        valences.setdefault(key, []).append(valence)

    def quality(i: int, j: int) -> float:
        c_ij = counts.get((i, j), 0)
        c_ji = counts.get((j, i), 0)
        if c_ij + c_ji == 0:
            return 0.0
        reciprocity = min(c_ij, c_ji) / max(c_ij, c_ji)
        vs = valences[(i, j) if i < j else (j, i)]
        mean_v = sum(vs) / len(vs)
        return 0.5 * reciprocity + 0.5 * (1.0 + mean_v) / 2.0

    total = 0.0
    for agent in neighbors:
        nbrs = neighbors[agent]
        if not nbrs:
            continue
        total += sum(quality(agent, j) for j in nbrs) / len(nbrs)
    return _clamp01(total / len(neighbors))


def v_meso(
    neighbors: dict[int, set[int]],
    communities: dict[int, int],
    emotions: dict[int, tuple[float, float, float]],
) -> float:
    """Mean over communities of internal density times emotional coherence.

    Singleton communities score density 0 and coherence 1 by convention;
    emotional coherence is 1 minus the mean pairwise PAD distance
    normalized by the PAD diameter 2*sqrt(3).
    """
    if not communities:
        return 0.0
    groups: dict[int, list[int]] = {}
    for node, c in communities.items():
        groups.setdefault(c, []).append(node)

    total = 0.0
    for members in groups.values():
        m = len(members)
        if m < 2:
            phi, psi = 0.0, 1.0
        else:
            member_set = set(members)
            internal = (
                sum(len(neighbors.get(u, set()) & member_set) for u in members) // 2
            )
            phi = 2.0 * internal / (m * (m - 1))
            dists = []
            for i in range(m):
                for j in range(i + 1, m):
                    a = emotions.get(members[i], (0.0, 0.0, 0.0))
                    b = emotions.get(members[j], (0.0, 0.0, 0.0))
                    dists.append(math.dist(a, b))
            psi = 1.0 - (sum(dists) / len(dists)) / _PAD_DIAMETER
        total += phi * psi
    return _clamp01(total / len(groups))


def _macro_parts(
    metrics: MetricsReport,
    reference: MetricsReport | None,
    history: list[MetricsReport],
) -> dict[str, float | None]:
    structural: float | None = None
    degree: float | None = None
    if reference is not None:
        errs = []
        for sim, ref in (
            (metrics.clustering_coefficient, reference.clustering_coefficient),
            (metrics.avg_path_length, reference.avg_path_length),
            (metrics.density, reference.density),
        ):
            if ref > 0:
                errs.append(abs(sim - ref) / ref)
            else:
                errs.append(0.0 if sim == ref else 1.0)
        structural = _clamp01(1.0 - sum(errs) / len(errs))
        if reference.powerlaw_alpha and metrics.powerlaw_alpha:
            degree = _clamp01(
                1.0 - abs(metrics.powerlaw_alpha - reference.powerlaw_alpha) / reference.powerlaw_alpha
            )
        else:
            degree = 0.0
    stability = _stability(history)
    return {"S": structural, "D": degree, "E": stability}


def _stability(history: list[MetricsReport]) -> float:
    """1 - normalized variance of the metric trajectories (flat history -> 1)."""
    if len(history) < 2:
        return 1.0
    nvs = []
    for pick in (
        lambda m: m.clustering_coefficient,
        lambda m: m.avg_path_length,
        lambda m: m.density,
    ):
        xs = [pick(m) for m in history]
        mean = sum(xs) / len(xs)
        var = sum((x - mean) ** 2 for x in xs) / len(xs)
        nvs.append(min(1.0, var / (mean * mean + 1e-12)))
    return _clamp01(1.0 - sum(nvs) / len(nvs))


def v_macro(
    metrics: MetricsReport,
    reference: MetricsReport | None,
    weights: ValidationWeights,
    history: list[MetricsReport],
) -> float:
    """alpha*S + beta*D + gamma*E against a reference graph's metrics.

    Without a reference only the stability term is computable, so the
    weights renormalize onto it (structural-only mode).
    """
    parts = _macro_parts(metrics, reference, history)
    a, b, g = weights.macro
    if parts["S"] is None:
        return _clamp01(parts["E"])
    return _clamp01(a * parts["S"] + b * parts["D"] + g * parts["E"])


def macro_components(
    metrics: MetricsReport,
    reference: MetricsReport | None,
    history: list[MetricsReport],
) -> dict[str, float | None]:
    return _macro_parts(metrics, reference, history)


def pearson(xs: list[float], ys: list[float]) -> CorrelationEntry:
    """Sample Pearson r with a Fisher-z 95% CI and a two-sided t-test p."""
    n = len(xs)
    if n != len(ys):
        raise ValueError("series lengths differ")
    if n < 3:
        raise ValueError("need at least 3 points")
    mx = sum(xs) / n
    my = sum(ys) / n
    sxx = sum((x - mx) ** 2 for x in xs)
    syy = sum((y - my) ** 2 for y in ys)
    if sxx == 0.0 or syy == 0.0:
        raise ValueError("undefined correlation: constant series")
    sxy = sum((x - mx) * (y - my) for x, y in zip(xs, ys))
    r = sxy / math.sqrt(sxx * syy)
    r = max(-1.0, min(1.0, r))

    if n > 3 and abs(r) < 1.0:
        z = math.atanh(r)
        se = 1.0 / math.sqrt(n - 3)
        zcrit = float(scipy_stats.norm.ppf(0.975))
        ci_low, ci_high = math.tanh(z - zcrit * se), math.tanh(z + zcrit * se)
    else:
        ci_low, ci_high = -1.0, 1.0

    if abs(r) >= 1.0:
        p = 0.0
    else:
        t = r * math.sqrt((n - 2) / (1.0 - r * r))
        p = 2.0 * float(scipy_stats.t.sf(abs(t), n - 2))
    return CorrelationEntry(label="", r=r, ci_low=ci_low, ci_high=ci_high, p=p)


def format_report(
    scores: dict[str, float],
    mode: str,
    correlations: list[CorrelationEntry],
    components: dict[str, float | None] | None = None,
) -> tuple[list[str], list[dict]]:
    """Render validation results as report lines plus JSONL records."""
    lines = [
        f"v_micro {scores['v_micro']:.6f}",
        f"v_meso {scores['v_meso']:.6f}",
        f"v_macro {scores['v_macro']:.6f}",
        f"macro_mode {mode}",
    ]
    records: list[dict] = [
        {"kind": "score", "name": name, "value": scores[name]}
        for name in ("v_micro", "v_meso", "v_macro")
    ]
    records.append({"kind": "mode", "value": mode})
    if components is not None:
        for name in ("S", "D", "E"):
            value = components[name]
            lines.append(f"macro_{name} " + (f"{value:.6f}" if value is not None else "none"))
            records.append({"kind": "component", "name": name, "value": value})
    for corr in correlations:
        lines.append(
            f"corr {corr.label} r {corr.r:.6f} ci {corr.ci_low:.6f} {corr.ci_high:.6f} p {corr.p:.6g}"
        )
        records.append(
            {
                "kind": "correlation",
                "label": corr.label,
                "r": corr.r,
                "ci_low": corr.ci_low,
                "ci_high": corr.ci_high,
                "p": corr.p,
            }
        )
    return lines, records
