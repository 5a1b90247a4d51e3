"""Command-line entry point: run, validate, ablate, report.

Config files are INI-style key/value sections; every field has a default
so a minimal config is three lines:

    [run]
    seed = 42
    n_agents = 100

Exit codes: 0 success, 2 config error, 3 runtime error, 4 validation-data
error.
"""

from __future__ import annotations

import argparse
import configparser
import json
import sys
from pathlib import Path

from . import validation as vals
from .agents import EmotionParams
from .config import ConfigError, RunConfig
from .engine import run
from .graph import MetricsReport, NetworkConstraints, compute_metrics, detect_communities
from .snap import parse_edges, to_graph

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
EXIT_DATA = 4

_SECTIONS = {
    "run": {
        "seed",
        "n_agents",
        "ingest",
        "steps",
        "out",
        "frame_interval",
        "workers",
        "personality_init",
    },
    "llm": {"backend", "base_url", "model", "max_reply_tokens", "cache_capacity"},
    "emotion": {"delta", "alpha", "beta"},
    "constraints": {"max_degree", "kappa", "decay_rate", "severance_threshold"},
    "memory": {
        "short_cap",
        "cache_cap",
        "coherence_alpha",
        "coherence_beta",
        "coherence_gamma",
        "consolidate_every",
        "stale_age",
        "coherence_threshold",
        "top_k",
    },
    "engine": {"schedule_alpha", "lipschitz", "checkpoint_every", "community_every"},
    "ablation": {"hierarchical_prompting", "attention_memory", "response_cache"},
}

ABLATION_ROWS = (
    ("full", dict(hierarchical_prompting=True, attention_memory=True, response_cache=True)),
    ("no_hierarchical_prompting", dict(hierarchical_prompting=False, attention_memory=True, response_cache=True)),
    ("no_attention_memory", dict(hierarchical_prompting=True, attention_memory=False, response_cache=True)),
    ("basic_caching_only", dict(hierarchical_prompting=False, attention_memory=False, response_cache=True)),
)


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc

    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        for key in parser[section]:
            if key not in _SECTIONS[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")

    cfg = RunConfig()

    def geti(section: str, key: str, default: int) -> int:
        try:
            return parser.getint(section, key, fallback=default)
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key}: {exc}") from exc

    def getf(section: str, key: str, default: float) -> float:
        try:
            return parser.getfloat(section, key, fallback=default)
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key}: {exc}") from exc

    def getb(section: str, key: str, default: bool) -> bool:
        try:
            return parser.getboolean(section, key, fallback=default)
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key}: {exc}") from exc

    cfg.seed = geti("run", "seed", cfg.seed)
    if parser.has_option("run", "n_agents"):
        cfg.n_agents = geti("run", "n_agents", 0)
    if parser.has_option("run", "ingest"):
        cfg.ingest = parser.get("run", "ingest")
    cfg.steps = geti("run", "steps", cfg.steps)
    cfg.out = parser.get("run", "out", fallback=cfg.out)
    cfg.frame_interval = geti("run", "frame_interval", cfg.frame_interval)
    cfg.workers = geti("run", "workers", cfg.workers)
    cfg.personality_init = parser.get("run", "personality_init", fallback=cfg.personality_init)

    cfg.backend = parser.get("llm", "backend", fallback=cfg.backend)
    cfg.base_url = parser.get("llm", "base_url", fallback=cfg.base_url)
    cfg.model = parser.get("llm", "model", fallback=cfg.model)
    cfg.max_reply_tokens = geti("llm", "max_reply_tokens", cfg.max_reply_tokens)
    cfg.response_cache_capacity = geti("llm", "cache_capacity", cfg.response_cache_capacity)

    try:
        cfg.emotion = EmotionParams(
            delta=getf("emotion", "delta", 0.1),
            alpha=getf("emotion", "alpha", 0.3),
            beta=getf("emotion", "beta", 0.2),
        )
        cfg.constraints = NetworkConstraints(
            max_degree=geti("constraints", "max_degree", 150),
            centrality_exponent=getf("constraints", "kappa", 1.0),
            decay_rate=getf("constraints", "decay_rate", 0.01),
            severance_threshold=getf("constraints", "severance_threshold", 0.05),
        )
        cfg.coherence_weights = (
            getf("memory", "coherence_alpha", 0.35),
            getf("memory", "coherence_beta", 0.15),
            getf("memory", "coherence_gamma", 0.5),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    cfg.short_cap = geti("memory", "short_cap", cfg.short_cap)
    cfg.memory_cache_cap = geti("memory", "cache_cap", cfg.memory_cache_cap)
    cfg.consolidate_every = geti("memory", "consolidate_every", cfg.consolidate_every)
    cfg.stale_age = geti("memory", "stale_age", cfg.stale_age)
    cfg.coherence_threshold = getf("memory", "coherence_threshold", cfg.coherence_threshold)
    cfg.retrieval_top_k = geti("memory", "top_k", cfg.retrieval_top_k)

    cfg.schedule_alpha = getf("engine", "schedule_alpha", cfg.schedule_alpha)
    cfg.lipschitz_l = getf("engine", "lipschitz", cfg.lipschitz_l)
    cfg.checkpoint_every = geti("engine", "checkpoint_every", cfg.checkpoint_every)
    cfg.community_every = geti("engine", "community_every", cfg.community_every)

    cfg.hierarchical_prompting = getb("ablation", "hierarchical_prompting", True)
    cfg.attention_memory = getb("ablation", "attention_memory", True)
    cfg.response_cache = getb("ablation", "response_cache", True)
    return cfg


def _apply_overrides(cfg: RunConfig, args: argparse.Namespace) -> None:
    if getattr(args, "out", None):
        cfg.out = args.out
    if getattr(args, "seed_override", None) is not None:
        cfg.seed = args.seed_override
    if getattr(args, "workers", None) is not None:
        cfg.workers = args.workers


def cmd_run(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    _apply_overrides(cfg, args)
    cfg.validate()
    artifacts = run(cfg)
    stats = artifacts.prompt_stats
    print(f"steps {artifacts.world.clock}")
    print(f"agents {len(artifacts.world.agents)}")
    print(f"prompt_hit_rate {stats.hit_rate:.4f}")
    print(f"tokens_billed {stats.tokens_billed}")
    print(f"drift_violations {len(artifacts.drift_violations)}")
    if artifacts.out_dir is not None:
        print(f"artifacts {artifacts.out_dir}")
    return EXIT_OK


def _parse_metrics_history(report_path: Path) -> list[MetricsReport]:
    history = []
    for line in report_path.read_text().splitlines():
        if line.startswith("history "):
            _, _step, clustering, path_len, density, _entries = line.split()
            history.append(
                MetricsReport(
                    clustering_coefficient=float(clustering),
                    avg_path_length=float(path_len),
                    density=float(density),
                    powerlaw_alpha=None,
                    powerlaw_xmin=None,
                    n_nodes=0,
                    n_edges=0,
                )
            )
    return history


def cmd_validate(args: argparse.Namespace) -> int:
    art_dir = Path(args.artifacts)
    events_path = art_dir / "events.log"
    graph_path = art_dir / "graph.edges"
    state_path = art_dir / "state.json"
    metrics_path = art_dir / "metrics.report"
    for required in (events_path, graph_path, state_path, metrics_path):
        if not required.exists():
            print(f"missing artifact: {required}", file=sys.stderr)
            return EXIT_DATA

    graph = to_graph(parse_edges(graph_path.read_text()))
    state = json.loads(state_path.read_text())
    for aid_str in state["agents"]:
        graph.add_node(int(aid_str))

    last_step = 0
    events = []
    for line in events_path.read_text().splitlines():
        rec = json.loads(line)
        last_step = max(last_step, rec["step"])
        events.append(rec)
    window_start = last_step - 99
    interactions = [
        (rec["agent"], rec["target"], rec["valence"])
        for rec in events
        if rec["approved"] and rec["target"] is not None and rec["step"] >= window_start
    ]

    neighbors = {n: set(graph.neighbors(n)) for n in graph.nodes}
    emotions = {int(aid): tuple(data["pad"]) for aid, data in state["agents"].items()}
    communities = detect_communities(graph)[0] if graph.ties else {}

    micro = vals.v_micro(interactions, neighbors)
    meso = vals.v_meso(neighbors, communities, emotions)

    history = _parse_metrics_history(metrics_path)
    metrics = compute_metrics(graph)
    reference = None
    mode = "structural-only"
    if args.reference:
        ref_path = Path(args.reference)
        if not ref_path.exists():
            print(f"missing reference graph: {ref_path}", file=sys.stderr)
            return EXIT_DATA
        reference = compute_metrics(to_graph(parse_edges(ref_path.read_text())))
        mode = "reference"
    weights = vals.ValidationWeights()
    macro = vals.v_macro(metrics, reference, weights, history)
    components = vals.macro_components(metrics, reference, history)

    correlations = []
    series = {
        "clustering": [m.clustering_coefficient for m in history],
        "path_length": [m.avg_path_length for m in history],
        "density": [m.density for m in history],
    }
    from dataclasses import replace as _replace

    for a, b in (("clustering", "path_length"), ("clustering", "density"), ("path_length", "density")):
        label = f"{a}~{b}"
        try:
            entry = _replace(vals.pearson(series[a], series[b]), label=label)
            correlations.append(entry)
        except ValueError:
            correlations.append(vals.CorrelationEntry(label=f"{label} undefined", r=0.0, ci_low=0.0, ci_high=0.0, p=1.0))

    scores = {"v_micro": micro, "v_meso": meso, "v_macro": macro}
    lines, records = vals.format_report(scores, mode, correlations, components)
    (art_dir / "validation.report").write_text("\n".join(lines) + "\n")
    with (art_dir / "validation.jsonl").open("w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    print(f"v_micro {micro:.6f}")
    print(f"v_meso {meso:.6f}")
    print(f"v_macro {macro:.6f} ({mode})")
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    _apply_overrides(cfg, args)
    if cfg.out is None:
        raise ConfigError("ablate requires an output directory ([run] out or --out)")
    base_out = Path(cfg.out) / "ablation"

    from dataclasses import replace as _replace

    rows = []
    for name, flags in ABLATION_ROWS:
        sub = _replace(cfg, out=str(base_out / name), **flags)
        sub.validate()
        artifacts = run(sub)
        stats = artifacts.prompt_stats
        rows.append(
            {
                "name": name,
                "tokens": stats.tokens_billed,
                "hit_rate": stats.hit_rate,
                "coherence": artifacts.coherence_proxy,
                "memory_bytes": artifacts.telemetry[-1].memory_bytes,
            }
        )

    baseline_cfg = _replace(
        cfg,
        out=str(base_out / "baseline"),
        hierarchical_prompting=False,
        attention_memory=True,
        response_cache=False,
    )
    baseline = run(baseline_cfg)
    full_tokens = rows[0]["tokens"]
    baseline_tokens = baseline.prompt_stats.tokens_billed
    reduction = 1.0 - full_tokens / baseline_tokens if baseline_tokens else 0.0

    lines = ["config rel_tokens hit_rate coherence memory_bytes"]
    for row in rows:
        rel = row["tokens"] / full_tokens if full_tokens else 0.0
        coh = f"{row['coherence']:.4f}" if row["coherence"] is not None else "n/a"
        lines.append(
            f"{row['name']} {rel:.4f} {row['hit_rate']:.4f} {coh} {row['memory_bytes']}"
        )
    lines.append(
        f"token_reduction_vs_baseline {reduction:.4f} (reference target "
        f"{vals.TOKEN_REDUCTION_TARGET})"
    )
    table = "\n".join(lines) + "\n"
    base_out.mkdir(parents=True, exist_ok=True)
    (base_out / "ablation.report").write_text(table)
    print(table, end="")
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    art_dir = Path(args.artifacts)
    metrics_path = art_dir / "metrics.report"
    telemetry_path = art_dir / "telemetry.csv"
    if not metrics_path.exists() or not telemetry_path.exists():
        print(f"missing artifacts in {art_dir}", file=sys.stderr)
        return EXIT_DATA
    print(f"== run report: {art_dir} ==")
    for line in metrics_path.read_text().splitlines():
        if not line.startswith("history "):
            print(line)
    validation_path = art_dir / "validation.report"
    if validation_path.exists():
        print("== validation ==")
        print(validation_path.read_text(), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="salm", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute a simulation run")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--out", default=None)
    p_run.add_argument("--seed-override", type=int, default=None)
    p_run.add_argument("--workers", type=int, default=None)
    p_run.set_defaults(func=cmd_run)

    p_val = sub.add_parser("validate", help="score run artifacts")
    p_val.add_argument("artifacts")
    p_val.add_argument("--reference", default=None, help="reference edge-list path")
    p_val.set_defaults(func=cmd_validate)

    p_abl = sub.add_parser("ablate", help="run the ablation grid")
    p_abl.add_argument("--config", required=True)
    p_abl.add_argument("--out", default=None)
    p_abl.add_argument("--seed-override", type=int, default=None)
    p_abl.add_argument("--workers", type=int, default=None)
    p_abl.set_defaults(func=cmd_ablate)

    p_rep = sub.add_parser("report", help="print a run summary")
    p_rep.add_argument("artifacts")
    p_rep.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, RuntimeError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
