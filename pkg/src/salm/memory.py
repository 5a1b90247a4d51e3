"""Three-tier per-agent memory: bounded short-term, compressed long-term,
and an LRU result cache keyed by query digest.

Retrieval combines an importance-weighted softmax over embedding
similarity with an emotional-congruence factor, renormalized over the
candidate set. Long-term items are prefiltered through coarse sign
buckets over the leading embedding components so scoring never touches
the whole archive.

Binary snapshot layout (little-endian), used by the growth telemetry:

  store   := header shortN fullrec* longN comprec* cacheN cacherec*
  header  := magic u16 | owner u64
  fullrec := 0x01 u8 | id u64 | created u32 | last u32 | tier u8 | flags u8
             | salience f32 | importance f32 | access u32 | pad 3*f32
             | emb 64*f64 | clen u32 | content
  comprec := 0x02 u8 | id u64 | created u32 | salience u8 | importance u8
             | access u16 | pad 3*i8 | scale f32 | emb 64*i8
             | clen u8 | content (<= 48 bytes)
  cacherec:= digest u64 | k u8 | k * (id u64 | score f32)
"""

from __future__ import annotations

import enum
import json
import math
import struct
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
import xxhash

from .agents import EmotionalState

EMBED_DIM = 64
_EMBED_SEED = 0x5A17
SHORT_CAP = 128
CACHE_CAP = 1024
COHERENCE_WEIGHTS = (0.35, 0.15, 0.5)
STALE_AGE = 100
COHERENCE_THRESHOLD = 0.5
COMPRESSED_CONTENT_BYTES = 48
IMPORTANCE_REFRESH = 0.05

_STORE_MAGIC = 0x534D


class Tier(str, enum.Enum):
    SHORT_TERM = "short"
    LONG_TERM = "long"
    CACHE = "cache"


def embed_text(text: str) -> np.ndarray:
    """Deterministic 64-dim feature-hash embedding of whitespace tokens.

    Each token is hashed into a bucket with a +/-1 sign; the result is
    L2-normalized (zero vector for empty/blank text). No external model,
    so identical text always embeds identically.
    """
    vec = np.zeros(EMBED_DIM)
    for token in text.lower().split():
        h = xxhash.xxh64(token, seed=_EMBED_SEED).intdigest()
        sign = 1.0 if (h >> 6) & 1 else -1.0
        vec[h % EMBED_DIM] += sign
    norm = float(np.linalg.norm(vec))
    if norm > 0:
        vec /= norm
    return vec


@dataclass
class MemoryItem:
    id: int
    owner: int
    content: str
    embedding: np.ndarray
    salience: float  # emotional salience E(m), in [0, 1]
    importance: float  # I(m), in (0, 1]
    created_at: int
    last_access: int
    pad_snapshot: tuple[float, float, float] = (0.0, 0.0, 0.0)
    access_count: int = 0
    tier: Tier = Tier.SHORT_TERM
    compressed: bool = False

    def __post_init__(self) -> None:
        if not (0.0 < self.importance <= 1.0):
            raise ValueError(f"importance {self.importance} outside (0, 1]")
        if not (0.0 <= self.salience <= 1.0):
            raise ValueError(f"salience {self.salience} outside [0, 1]")
        if self.compressed and self.tier is not Tier.LONG_TERM:
            raise ValueError("compressed items must live in the long-term tier")


@dataclass
class RetrievalQuery:
    context_embedding: np.ndarray
    emotional_state: EmotionalState
    top_k: int = 5

    def __post_init__(self) -> None:
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")


@dataclass
class ConsolidationReport:
    examined: int = 0
    moved: int = 0
    refreshed: int = 0


@dataclass
class MemoryStore:
    """One agent's memory. External serialization is the engine's job;
    concurrent access to *different* stores is always safe."""

    owner: int
    short_cap: int = SHORT_CAP
    cache_cap: int = CACHE_CAP
    coherence_weights: tuple[float, float, float] = COHERENCE_WEIGHTS
    retention_threshold: float = COHERENCE_THRESHOLD
    short_term: list[MemoryItem] = field(default_factory=list)
    long_term: list[MemoryItem] = field(default_factory=list)
    cache: OrderedDict[int, list[tuple[int, float]]] = field(default_factory=OrderedDict)
    hits: int = 0
    misses: int = 0

    def __post_init__(self) -> None:
        w = self.coherence_weights
        if any(x < 0 for x in w) or abs(sum(w) - 1.0) > 1e-9:
            raise ValueError("coherence weights must be nonnegative and sum to 1")
        self._buckets: dict[int, list[MemoryItem]] = {}
        for item in self.long_term:
            self._buckets.setdefault(_sign_bucket(item.embedding), []).append(item)

    def items_by_id(self) -> dict[int, MemoryItem]:
        index = {m.id: m for m in self.short_term}
        index.update({m.id: m for m in self.long_term})
        return index


def sign_bucket(embedding: np.ndarray) -> int:
    """Coarse locality bucket: sign bits of the first 8 components."""
    bits = 0
    for i in range(8):
        if embedding[i] >= 0:
            bits |= 1 << i
    return bits


_sign_bucket = sign_bucket


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def retrieval_score(item: MemoryItem, query: RetrievalQuery, candidates: list[MemoryItem]) -> float:
    """softmax(sim(item, query)) over candidates, times the item's importance."""
    if not candidates:
        raise ValueError("candidate set must be non-empty")
    sims = [cosine(c.embedding, query.context_embedding) for c in candidates]
    target = cosine(item.embedding, query.context_embedding)
    total = sum(math.exp(s) for s in sims)
    return math.exp(target) / total * item.importance


def coherence(item: MemoryItem, weights: tuple[float, float, float] | None = None) -> float:
    """alpha*E(m) + beta*F(m) + gamma*I(m) with F(m) = n/(n+1) access frequency."""
    a, b, g = weights if weights is not None else COHERENCE_WEIGHTS
    freq = item.access_count / (item.access_count + 1)
    return a * item.salience + b * freq + g * item.importance


def emotional_congruence(item: MemoryItem, query: RetrievalQuery) -> float:
    """(1 + cos(encoding-time PAD, query PAD)) / 2; 0.5 when either is neutral."""
    a = np.asarray(item.pad_snapshot)
    b = np.asarray(query.emotional_state.pad)
    return (1.0 + cosine(a, b)) / 2.0


def dual_path_scores(candidates: list[MemoryItem], query: RetrievalQuery) -> list[float]:
    """Retrieval score times emotional congruence, renormalized over candidates.

    Vectorized equivalent of calling retrieval_score per item; returns
    zeros when every product vanishes (all candidates emotionally opposed
    to the query).
    """
    if not candidates:
        return []
    embs = np.stack([c.embedding for c in candidates])
    norms = np.linalg.norm(embs, axis=1)
    qnorm = float(np.linalg.norm(query.context_embedding))
    sims = np.zeros(len(candidates))
    if qnorm > 0:
        nz = norms > 0
        sims[nz] = embs[nz] @ query.context_embedding / (norms[nz] * qnorm)
    soft = np.exp(sims)
    soft /= soft.sum()
    importances = np.array([c.importance for c in candidates])
    congruences = np.array([emotional_congruence(c, query) for c in candidates])
    raw = soft * importances * congruences
    total = float(raw.sum())
    if total <= 0.0:
        return [0.0] * len(candidates)
    return [float(r) / total for r in raw]


def dual_path_score(item: MemoryItem, query: RetrievalQuery, candidates: list[MemoryItem]) -> float:
    idx = next(i for i, c in enumerate(candidates) if c is item or c.id == item.id)
    return dual_path_scores(candidates, query)[idx]


def _emotion_sign(v: float) -> int:
    if v <= -0.15:
        return -1
    if v >= 0.15:
        return 1
    return 0


def query_digest(query: RetrievalQuery) -> int:
    """Stable digest of a query: rounded embedding bytes, coarse PAD signs, k.

    The emotional state enters as per-axis signs so small affect drift
    between steps still lands on the same cached result.
    """
    rounded = np.round(query.context_embedding, 2) + 0.0
    signs = ",".join(str(_emotion_sign(v)) for v in query.emotional_state.pad)
    h = xxhash.xxh64(seed=_EMBED_SEED)
    h.update(rounded.tobytes())
    h.update(signs.encode())
    h.update(struct.pack("<I", query.top_k))
    return h.intdigest()


def _candidates_for(store: MemoryStore, query: RetrievalQuery) -> list[MemoryItem]:
    bucket = store._buckets.get(_sign_bucket(query.context_embedding), [])
    return list(store.short_term) + list(bucket)


def insert(store: MemoryStore, item: MemoryItem) -> None:
    """Add a short-term item, evicting on overflow.

    The victim is the oldest item still below the retention threshold
    (so forgettable memories die before they ever turn stale), falling
    back to the global coherence minimum when everything is retained.
    Eviction drops the item entirely; migration to long-term happens only
    through consolidate, which is what keeps the archive from growing
    linearly with the run.
    """
    if len(store.short_term) >= store.short_cap:
        weak = [
            m
            for m in store.short_term
            if coherence(m, store.coherence_weights) < store.retention_threshold
        ]
        if weak:
            victim = min(weak, key=lambda m: (m.created_at, m.id))
        else:
            victim = min(
                store.short_term,
                key=lambda m: (coherence(m, store.coherence_weights), m.created_at, m.id),
            )
        store.short_term.remove(victim)
    store.short_term.append(item)


def retrieve(
    store: MemoryStore, query: RetrievalQuery, now: int | None = None
) -> list[tuple[MemoryItem, float]]:
    """Top-k items by dual-path score, served from the query cache on repeats.

    Every returned item's access count is incremented on both paths.
    Cached entries are not invalidated by later inserts (staleness is
    bounded by LRU turnover), and empty results are never cached, so a
    query asked before any memory exists is re-scored once the store has
    content.
    """
    digest = query_digest(query)
    cached = store.cache.get(digest)
    if cached is not None:
        store.hits += 1
        store.cache.move_to_end(digest)
        index = store.items_by_id()
        out = []
        for item_id, score in cached:
            item = index.get(item_id)
            if item is None:  # evicted since caching; drop silently
                continue
            _touch(item, now)
            out.append((item, score))
        return out

    store.misses += 1
    candidates = _candidates_for(store, query)
    scored: list[tuple[MemoryItem, float]] = []
    if candidates:
        scores = dual_path_scores(candidates, query)
        ranked = sorted(
            zip(candidates, scores),
            key=lambda pair: (
                -pair[1],
                -coherence(pair[0], store.coherence_weights),
                pair[0].id,
            ),
        )
        scored = ranked[: query.top_k]
        for item, _ in scored:
            _touch(item, now)
    if scored:
        store.cache[digest] = [(item.id, score) for item, score in scored]
        store.cache.move_to_end(digest)
        while len(store.cache) > store.cache_cap:
            store.cache.popitem(last=False)
    return scored


def retrieve_recent(store: MemoryStore, top_k: int) -> list[tuple[MemoryItem, float]]:
    """Recency-only degraded retrieval (ablation mode): newest k, flat scores.

    Bypasses scoring and the query cache; each call counts as a miss.
    """
    store.misses += 1
    newest = sorted(store.short_term, key=lambda m: (-m.created_at, -m.id))[:top_k]
    for item in newest:
        _touch(item, None)
    return [(item, 1.0 / max(len(newest), 1)) for item in newest]


def _touch(item: MemoryItem, now: int | None) -> None:
    item.access_count += 1
    if now is not None and now > item.last_access:
        item.last_access = now


def _truncate_utf8(text: str, limit: int) -> str:
    return text.encode()[:limit].decode(errors="ignore")


def consolidate(
    store: MemoryStore,
    now: int,
    stale_age: int = STALE_AGE,
    threshold: float = COHERENCE_THRESHOLD,
) -> ConsolidationReport:
    """Migrate stale low-coherence items to compressed long-term storage.

    Stale high-coherence items stay put with their importance refreshed
    by IMPORTANCE_REFRESH (capped at 1).
    """
    report = ConsolidationReport()
    keep: list[MemoryItem] = []
    for item in store.short_term:
        if now - item.created_at <= stale_age:
            keep.append(item)
            continue
        report.examined += 1
        if coherence(item, store.coherence_weights) < threshold:
            item.content = _truncate_utf8(item.content, COMPRESSED_CONTENT_BYTES)
            item.tier = Tier.LONG_TERM
            item.compressed = True
            store.long_term.append(item)
            store._buckets.setdefault(_sign_bucket(item.embedding), []).append(item)
            report.moved += 1
        else:
            item.importance = min(1.0, item.importance + IMPORTANCE_REFRESH)
            report.refreshed += 1
            keep.append(item)
    store.short_term = keep
    return report


# -- snapshot serialization --------------------------------------------------

_FULL_HEAD = struct.Struct("<BQIIBBffI3f")
_COMP_HEAD = struct.Struct("<BQIBBH3bf")


def _quant_u8(v: float) -> int:
    return max(0, min(255, int(round(v * 255))))


def _quant_i8(v: float) -> int:
    return max(-127, min(127, int(round(v * 127))))


def serialize_item(item: MemoryItem) -> bytes:
    if item.compressed:
        content = item.content.encode()[:COMPRESSED_CONTENT_BYTES]
        scale = float(np.max(np.abs(item.embedding))) or 1.0
        quant = np.clip(np.round(item.embedding / scale * 127), -127, 127).astype(np.int8)
        head = _COMP_HEAD.pack(
            2,
            item.id,
            item.created_at,
            _quant_u8(item.salience),
            _quant_u8(item.importance),
            min(item.access_count, 0xFFFF),
            *(_quant_i8(v) for v in item.pad_snapshot),
            scale,
        )
        return head + quant.tobytes() + struct.pack("<B", len(content)) + content
    content = item.content.encode()
    head = _FULL_HEAD.pack(
        1,
        item.id,
        item.created_at,
        item.last_access,
        1 if item.tier is Tier.LONG_TERM else 0,
        1 if item.compressed else 0,
        item.salience,
        item.importance,
        item.access_count,
        *item.pad_snapshot,
    )
    emb = np.asarray(item.embedding, dtype=np.float64).tobytes()
    return head + emb + struct.pack("<I", len(content)) + content


def serialize_store(store: MemoryStore) -> bytes:
    out = bytearray(struct.pack("<HQ", _STORE_MAGIC, store.owner))
    out += struct.pack("<I", len(store.short_term))
    for item in store.short_term:
        out += serialize_item(item)
    out += struct.pack("<I", len(store.long_term))
    for item in store.long_term:
        out += serialize_item(item)
    out += struct.pack("<I", len(store.cache))
    for digest, entries in store.cache.items():
        out += struct.pack("<QB", digest, len(entries))
        for item_id, score in entries:
            out += struct.pack("<Qf", item_id, score)
    return bytes(out)


def _read_item(buf: bytes, off: int, owner: int) -> tuple[MemoryItem, int]:
    rec_type = buf[off]
    if rec_type == 1:
        (_, item_id, created, last, tier, flags, sal, imp, acc, p0, p1, p2) = _FULL_HEAD.unpack_from(
            buf, off
        )
        off += _FULL_HEAD.size
        emb = np.frombuffer(buf, dtype=np.float64, count=EMBED_DIM, offset=off).copy()
        off += EMBED_DIM * 8
        (clen,) = struct.unpack_from("<I", buf, off)
        off += 4
        content = buf[off : off + clen].decode(errors="ignore")
        off += clen
        item = MemoryItem(
            id=item_id,
            owner=owner,
            content=content,
            embedding=emb,
            salience=sal,
            importance=imp,
            created_at=created,
            last_access=last,
            pad_snapshot=(p0, p1, p2),
            access_count=acc,
            tier=Tier.LONG_TERM if tier else Tier.SHORT_TERM,
            compressed=bool(flags),
        )
        return item, off
    if rec_type == 2:
        (_, item_id, created, sal_q, imp_q, acc, p0, p1, p2, scale) = _COMP_HEAD.unpack_from(buf, off)
        off += _COMP_HEAD.size
        quant = np.frombuffer(buf, dtype=np.int8, count=EMBED_DIM, offset=off)
        emb = quant.astype(np.float64) / 127.0 * scale
        off += EMBED_DIM
        clen = buf[off]
        off += 1
        content = buf[off : off + clen].decode(errors="ignore")
        off += clen
        item = MemoryItem(
            id=item_id,
            owner=owner,
            content=content,
            embedding=emb,
            salience=sal_q / 255.0,
            importance=max(imp_q / 255.0, 1 / 255.0),
            created_at=created,
            last_access=created,
            pad_snapshot=(p0 / 127.0, p1 / 127.0, p2 / 127.0),
            access_count=acc,
            tier=Tier.LONG_TERM,
            compressed=True,
        )
        return item, off
    raise ValueError(f"unknown record type {rec_type}")


def deserialize_store(buf: bytes) -> MemoryStore:
    magic, owner = struct.unpack_from("<HQ", buf, 0)
    if magic != _STORE_MAGIC:
        raise ValueError("bad store snapshot magic")
    off = 10
    store = MemoryStore(owner=owner)
    (n_short,) = struct.unpack_from("<I", buf, off)
    off += 4
    for _ in range(n_short):
        item, off = _read_item(buf, off, owner)
        store.short_term.append(item)
    (n_long,) = struct.unpack_from("<I", buf, off)
    off += 4
    for _ in range(n_long):
        item, off = _read_item(buf, off, owner)
        store.long_term.append(item)
        store._buckets.setdefault(_sign_bucket(item.embedding), []).append(item)
    (n_cache,) = struct.unpack_from("<I", buf, off)
    off += 4
    for _ in range(n_cache):
        digest, k = struct.unpack_from("<QB", buf, off)
        off += 9
        entries = []
        for _ in range(k):
            item_id, score = struct.unpack_from("<Qf", buf, off)
            off += 12
            entries.append((item_id, score))
        store.cache[digest] = entries
    return store


def export_text(store: MemoryStore) -> str:
    """Line-delimited JSON view of the store for human inspection."""
    lines = []
    for item in list(store.short_term) + list(store.long_term):
        lines.append(
            json.dumps(
                {
                    "id": item.id,
                    "owner": item.owner,
                    "tier": item.tier.value,
                    "compressed": item.compressed,
                    "content": item.content,
                    "salience": round(item.salience, 6),
                    "importance": round(item.importance, 6),
                    "access_count": item.access_count,
                    "created_at": item.created_at,
                    "last_access": item.last_access,
                },
                sort_keys=True,
            )
        )
    return "\n".join(lines) + ("\n" if lines else "")
