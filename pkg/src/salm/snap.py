"""Parsers for SNAP ego-network files (Facebook/Twitter/Google+ layout).

All files are whitespace-delimited text: nodeId.edges, nodeId.circles,
nodeId.feat, nodeId.egofeat, nodeId.featnames, plus combined edge lists
like facebook_combined.txt. Directed variants are symmetrized into
undirected ties. Downloading is out of scope; callers supply the files.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import xxhash

from .agents import PersonalityVector
from .graph import SocialGraph

INGEST_TIE_STRENGTH = 0.5


class ParseError(ValueError):
    def __init__(self, message: str, line_no: int) -> None:
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


@dataclass
class EgoNetworkBundle:
    ego: int
    edges: list[tuple[int, int]]
    circles: dict[str, list[int]] = field(default_factory=dict)
    feature_names: list[str] = field(default_factory=list)
    node_features: dict[int, list[int]] = field(default_factory=dict)
    ego_features: list[int] = field(default_factory=list)

    def __post_init__(self) -> None:
        known = {u for edge in self.edges for u in edge} | set(self.node_features) | {self.ego}
        for name, members in self.circles.items():
            for node in members:
                if node not in known:
                    raise ValueError(f"circle {name!r} references unknown node {node}")
        width = len(self.feature_names)
        if width:
            for node, bits in self.node_features.items():
                if len(bits) != width:
                    raise ValueError(f"node {node} has {len(bits)} features, expected {width}")
            if self.ego_features and len(self.ego_features) != width:
                raise ValueError("ego feature vector length mismatch")


def parse_edges(text: str) -> list[tuple[int, int]]:
    """Undirected edge list: duplicates collapsed, self-loops dropped."""
    seen: set[tuple[int, int]] = set()
    edges: list[tuple[int, int]] = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ParseError(f"expected two node ids, got {line!r}", line_no)
        try:
            u, v = int(parts[0]), int(parts[1])
        except ValueError:
            raise ParseError(f"non-integer node id in {line!r}", line_no) from None
        if u < 0 or v < 0:
            raise ParseError(f"negative node id in {line!r}", line_no)
        if u == v:
            continue
        key = (u, v) if u < v else (v, u)
        if key not in seen:
            seen.add(key)
            edges.append(key)
    return edges


def parse_circles(text: str) -> dict[str, list[int]]:
    """Circle file: label then member node ids; members deduplicated."""
    circles: dict[str, list[int]] = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        parts = line.split()
        label = parts[0]
        members: list[int] = []
        seen: set[int] = set()
        for token in parts[1:]:
            try:
                node = int(token)
            except ValueError:
                raise ParseError(f"non-integer member {token!r}", line_no) from None
            if node not in seen:
                seen.add(node)
                members.append(node)
        circles[label] = members
    return circles


def parse_featnames(text: str) -> list[str]:
    names: list[str] = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        idx_str, _, name = line.partition(" ")
        try:
            idx = int(idx_str)
        except ValueError:
            raise ParseError(f"bad feature index {idx_str!r}", line_no) from None
        if idx != len(names):
            raise ParseError(f"non-contiguous feature index {idx}", line_no)
        names.append(name)
    return names


def parse_features(text: str) -> dict[int, list[int]]:
    """nodeId.feat lines: node id followed by the 0/1 feature vector."""
    features: dict[int, list[int]] = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        parts = line.split()
        try:
            node = int(parts[0])
            bits = [int(x) for x in parts[1:]]
        except ValueError:
            raise ParseError(f"bad feature line {line!r}", line_no) from None
        features[node] = bits
    return features


def parse_ego_features(text: str) -> list[int]:
    tokens = text.split()
    try:
        return [int(x) for x in tokens]
    except ValueError:
        raise ParseError("bad ego feature vector", 1) from None


def load_ego_bundle(directory: str | Path, ego_id: int) -> EgoNetworkBundle:
    """Read nodeId.{edges,circles,feat,egofeat,featnames} from a directory."""
    base = Path(directory)
    edges = parse_edges((base / f"{ego_id}.edges").read_text())

    def read_optional(suffix: str) -> str:
        path = base / f"{ego_id}.{suffix}"
        return path.read_text() if path.exists() else ""

    return EgoNetworkBundle(
        ego=ego_id,
        edges=edges,
        circles=parse_circles(read_optional("circles")),
        feature_names=parse_featnames(read_optional("featnames")),
        node_features=parse_features(read_optional("feat")),
        ego_features=parse_ego_features(read_optional("egofeat")),
    )


def to_graph(edges: list[tuple[int, int]], now: int = 0) -> SocialGraph:
    """Edge list to a SocialGraph with uniform initial tie strength."""
    graph = SocialGraph()
    for u, v in edges:
        if not graph.has_tie(u, v):
            graph.add_tie(u, v, INGEST_TIE_STRENGTH, now)
    return graph


def bundle_to_graph(bundle: EgoNetworkBundle, include_ego_links: bool = True) -> SocialGraph:
    """Ego bundle to a graph; SNAP ego files omit ego-alter edges, so the
    ego's links to every alter are added unless include_ego_links is off."""
    graph = to_graph(bundle.edges)
    graph.add_node(bundle.ego)
    if include_ego_links:
        alters = {u for edge in bundle.edges for u in edge} | set(bundle.node_features)
        alters.discard(bundle.ego)
        for alter in sorted(alters):
            if not graph.has_tie(bundle.ego, alter):
                graph.add_tie(bundle.ego, alter, INGEST_TIE_STRENGTH, 0)
    return graph


def serialize_edges(edges: list[tuple[int, int]]) -> str:
    return "\n".join(f"{u} {v}" for u, v in sorted(edges)) + ("\n" if edges else "")


def features_to_personality(bits: list[int], dims: int = 5) -> PersonalityVector:
    """Optional hash-based mapping from a feature bit vector to trait priors.

    Off by default in runs; each trait hashes the set-bit indices so
    similar feature vectors land near each other trait-by-trait.
    """
    on = [i for i, b in enumerate(bits) if b]
    payload = ",".join(map(str, on)).encode()
    traits = tuple(
        (xxhash.xxh64(payload, seed=dim).intdigest() % 10_000) / 9_999 for dim in range(dims)
    )
    return PersonalityVector(traits)
