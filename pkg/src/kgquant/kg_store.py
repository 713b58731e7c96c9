"""Loading and indexing of triples, text-embedding tables, and candidate files.

All structures built here are immutable after construction and safe for
concurrent readers. Ids are assigned in first-appearance order over
train, then valid, then test, so identical files always yield identical
id spaces.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import requests

from .errors import (
    CoverageError,
    FormatError,
    ParseError,
    ProtocolError,
    ShapeError,
    TransportError,
    VocabularyError,
)

Triple = tuple[int, int, int]

REVERSE_PREFIX = "inverse relation of "


def reverse_label(label: str) -> str:
    return REVERSE_PREFIX + label


def load_triples(
    path: str | Path,
    entity_map: dict[str, int] | None = None,
    relation_map: dict[str, int] | None = None,
    growable: bool = True,
) -> tuple[list[Triple], dict[str, int], dict[str, int]]:
    """Parse a TSV triple file into id triples, extending the label maps.

    Each line is ``head<TAB>relation<TAB>tail``. With ``growable=False``
    unseen labels raise :class:`VocabularyError` instead of being appended.
    """
    entity_map = {} if entity_map is None else entity_map
    relation_map = {} if relation_map is None else relation_map

    def resolve(label: str, table: dict[str, int], kind: str, lineno: int) -> int:
        if label in table:
            return table[label]
        if not growable:
            raise VocabularyError(f"{path}:{lineno}: unknown {kind} label {label!r}")
        table[label] = len(table)
        return table[label]

    triples: list[Triple] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ParseError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
            h = resolve(parts[0], entity_map, "entity", lineno)
            r = resolve(parts[1], relation_map, "relation", lineno)
            t = resolve(parts[2], entity_map, "entity", lineno)
            triples.append((h, r, t))
    return triples, entity_map, relation_map


@dataclass(frozen=True)
class KnowledgeGraph:
    """Triple splits plus the derived neighbor and filter indices.

    ``relation_labels`` holds the original relations followed by their
    reverses, so relation k reverses to k + num_original_relations.
    ``neighbor_index`` maps an entity to its incoming (neighbor, relation)
    pairs over the training triples, both directions, sorted ascending.
    ``filter_index`` maps every (head, relation) seen in any split to the
    set of known true tails.
    """

    entity_labels: list[str]
    relation_labels: list[str]
    train: list[Triple]
    valid: list[Triple]
    test: list[Triple]
    neighbor_index: dict[int, list[tuple[int, int]]]
    filter_index: dict[tuple[int, int], set[int]]
    entity_map: dict[str, int] = field(repr=False)
    relation_map: dict[str, int] = field(repr=False)

    @property
    def num_entities(self) -> int:
        return len(self.entity_labels)

    @property
    def num_relations(self) -> int:
        return len(self.relation_labels)

    @property
    def num_original_relations(self) -> int:
        return len(self.relation_labels) // 2

    def reverse_of(self, rel_id: int) -> int:
        half = self.num_original_relations
        return rel_id + half if rel_id < half else rel_id - half

    def edge_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Training edges as (target, source, relation) arrays, sorted so the
        per-target accumulation order is fixed."""
        targets, sources, rels = [], [], []
        for ent in sorted(self.neighbor_index):
            for nbr, rel in self.neighbor_index[ent]:
                targets.append(ent)
                sources.append(nbr)
                rels.append(rel)
        return (
            np.asarray(targets, dtype=np.int64),
            np.asarray(sources, dtype=np.int64),
            np.asarray(rels, dtype=np.int64),
        )

    def training_pairs(self) -> list[tuple[int, int]]:
        """Unique (head, relation) queries over train triples, both directions,
        in ascending order."""
        pairs = {(h, r) for h, r, _ in self.train}
        pairs.update((t, self.reverse_of(r)) for h, r, t in self.train)
        return sorted(pairs)

    def train_tails(self, head: int, rel: int) -> set[int]:
        return self._train_tail_index.get((head, rel), set())

    @property
    def _train_tail_index(self) -> dict[tuple[int, int], set[int]]:
        cached = getattr(self, "_tt_cache", None)
        if cached is None:
            cached = {}
            for h, r, t in self.train:
                cached.setdefault((h, r), set()).add(t)
                cached.setdefault((t, self.reverse_of(r)), set()).add(h)
            object.__setattr__(self, "_tt_cache", cached)
        return cached


def build_graph(
    train: list[Triple],
    valid: list[Triple],
    test: list[Triple],
    entity_map: dict[str, int],
    relation_map: dict[str, int],
) -> KnowledgeGraph:
    """Assemble a KnowledgeGraph: append reverse relations, index neighbors
    from train triples (both directions), and build filter sets over all
    splits."""
    entity_labels = _labels_in_id_order(entity_map)
    original = _labels_in_id_order(relation_map)
    relation_labels = original + [reverse_label(lab) for lab in original]
    num_entities = len(entity_labels)
    half = len(original)

    for name, split in (("train", train), ("valid", valid), ("test", test)):
        for h, r, t in split:
            if not (0 <= h < num_entities and 0 <= t < num_entities):
                raise IndexError(f"{name} triple ({h},{r},{t}): entity id out of range")
            if not 0 <= r < half:
                raise IndexError(f"{name} triple ({h},{r},{t}): relation id out of range")

    neighbor_index: dict[int, list[tuple[int, int]]] = {e: [] for e in range(num_entities)}
    for h, r, t in train:
        neighbor_index[t].append((h, r))
        neighbor_index[h].append((t, r + half))
    for pairs in neighbor_index.values():
        pairs.sort()

    filter_index: dict[tuple[int, int], set[int]] = {}
    for split in (train, valid, test):
        for h, r, t in split:
            filter_index.setdefault((h, r), set()).add(t)
            filter_index.setdefault((t, r + half), set()).add(h)

    return KnowledgeGraph(
        entity_labels=entity_labels,
        relation_labels=relation_labels,
        train=list(train),
        valid=list(valid),
        test=list(test),
        neighbor_index=neighbor_index,
        filter_index=filter_index,
        entity_map=dict(entity_map),
        relation_map=dict(relation_map),
    )


def load_graph_dir(data_dir: str | Path) -> KnowledgeGraph:
    """Load train.txt / valid.txt / test.txt from a dataset directory."""
    data_dir = Path(data_dir)
    train, emap, rmap = load_triples(data_dir / "train.txt")
    valid, emap, rmap = load_triples(data_dir / "valid.txt", emap, rmap)
    test, emap, rmap = load_triples(data_dir / "test.txt", emap, rmap)
    return build_graph(train, valid, test, emap, rmap)


def _labels_in_id_order(table: dict[str, int]) -> list[str]:
    labels = [""] * len(table)
    for label, idx in table.items():
        labels[idx] = label
    return labels


@dataclass(frozen=True)
class TextEmbeddingTable:
    dim: int
    vectors: dict[int, np.ndarray]

    def matrix(self, entity_ids: list[int] | None = None) -> np.ndarray:
        ids = sorted(self.vectors) if entity_ids is None else entity_ids
        return np.stack([self.vectors[i] for i in ids])


def load_text_embeddings(path: str | Path, entity_map: dict[str, int]) -> TextEmbeddingTable:
    """Read the plain-text embedding format: a ``count dim`` header line, then
    one ``label v1 .. v_dim`` line per entity. Every entity in ``entity_map``
    must be covered."""
    vectors: dict[int, np.ndarray] = {}
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 2:
            raise FormatError(f"{path}:1: header must be 'count dim'")
        count, dim = int(header[0]), int(header[1])
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split(" ")
            if len(parts) != dim + 1:
                raise FormatError(f"{path}:{lineno}: expected {dim} values, got {len(parts) - 1}")
            label = parts[0]
            if label not in entity_map:
                raise VocabularyError(f"{path}:{lineno}: unknown entity label {label!r}")
            vec = np.array([float(v) for v in parts[1:]], dtype=np.float64)
            if not np.all(np.isfinite(vec)):
                raise FormatError(f"{path}:{lineno}: non-finite value in vector for {label!r}")
            vectors[entity_map[label]] = vec
    if len(vectors) != count:
        raise FormatError(f"{path}: header count {count} != {len(vectors)} vector lines")
    missing = [label for label, idx in entity_map.items() if idx not in vectors]
    if missing:
        raise CoverageError(f"{path}: no embedding for entities: {', '.join(sorted(missing))}")
    return TextEmbeddingTable(dim=dim, vectors=vectors)


def write_text_embeddings(path: str | Path, table: TextEmbeddingTable, entity_labels: list[str]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{len(table.vectors)} {table.dim}\n")
        for idx in sorted(table.vectors):
            vals = " ".join(repr(float(v)) for v in table.vectors[idx])
            fh.write(f"{entity_labels[idx]} {vals}\n")


def fetch_embeddings(
    endpoint_url: str,
    api_key: str,
    entity_descriptions: dict[int, str],
    batch_size: int = 64,
    max_attempts: int = 3,
    backoff_seconds: float = 0.5,
) -> TextEmbeddingTable:
    """Fetch text embeddings over HTTP in batches of ``batch_size``.

    The endpoint is expected to accept ``{"input": [texts...]}`` and answer
    ``{"data": [{"embedding": [...]}, ...]}`` with one vector per input, in
    order. Transient failures are retried ``max_attempts`` times with
    exponential backoff.
    """
    if not entity_descriptions:
        return TextEmbeddingTable(dim=0, vectors={})
    ids = sorted(entity_descriptions)
    vectors: dict[int, np.ndarray] = {}
    dim: int | None = None
    headers = {"Authorization": f"Bearer {api_key}", "Content-Type": "application/json"}
    for start in range(0, len(ids), batch_size):
        chunk = ids[start : start + batch_size]
        texts = [entity_descriptions[i] for i in chunk]
        payload = _post_with_retries(endpoint_url, headers, {"input": texts}, max_attempts, backoff_seconds)
        data = payload.get("data")
        if not isinstance(data, list) or len(data) != len(texts):
            got = len(data) if isinstance(data, list) else "no"
            raise ProtocolError(f"endpoint returned {got} embeddings for {len(texts)} inputs")
        for ent_id, item in zip(chunk, data):
            vec = np.asarray(item["embedding"], dtype=np.float64)
            if dim is None:
                dim = vec.size
            elif vec.size != dim:
                raise ProtocolError(f"embedding dim changed from {dim} to {vec.size} mid-response")
            vectors[ent_id] = vec
    return TextEmbeddingTable(dim=int(dim), vectors=vectors)


def _post_with_retries(url, headers, body, max_attempts, backoff_seconds) -> dict:
    last_error = None
    for attempt in range(max_attempts):
        try:
            resp = requests.post(url, headers=headers, json=body, timeout=60)
            if resp.status_code == 200:
                return resp.json()
            last_error = f"HTTP {resp.status_code}"
        except requests.RequestException as exc:
            last_error = str(exc)
        if attempt + 1 < max_attempts:
            time.sleep(backoff_seconds * (2**attempt))
    raise TransportError(f"POST {url} failed after {max_attempts} attempts: {last_error}")


@dataclass(frozen=True)
class CandidateTable:
    """Externally ranked candidate tails per (head, relation) query."""

    candidates: dict[tuple[int, int], list[int]]

    def __len__(self) -> int:
        return len(self.candidates)

    def get(self, head: int, rel: int) -> list[int]:
        return self.candidates[(head, rel)]


def load_candidates(path: str | Path, graph: KnowledgeGraph) -> CandidateTable:
    """Read candidate lists: ``head<TAB>relation<TAB>cand1,cand2,...`` with
    labels resolved through the graph's maps. Relation labels may name
    reverse relations."""
    rel_ids = {label: i for i, label in enumerate(graph.relation_labels)}
    table: dict[tuple[int, int], list[int]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ParseError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
            head_label, rel_label, cand_field = parts
            if head_label not in graph.entity_map:
                raise VocabularyError(f"{path}:{lineno}: unknown entity label {head_label!r}")
            if rel_label not in rel_ids:
                raise VocabularyError(f"{path}:{lineno}: unknown relation label {rel_label!r}")
            cand_ids = []
            for cand in cand_field.split(","):
                if cand not in graph.entity_map:
                    raise VocabularyError(f"{path}:{lineno}: unknown candidate label {cand!r}")
                cand_ids.append(graph.entity_map[cand])
            if len(set(cand_ids)) != len(cand_ids):
                raise FormatError(
                    f"{path}:{lineno}: duplicate candidate for query ({head_label}, {rel_label})"
                )
            table[(graph.entity_map[head_label], rel_ids[rel_label])] = cand_ids
    return CandidateTable(candidates=table)


def load_display_names(path: str | Path, entity_map: dict[str, int]) -> dict[int, str]:
    """Optional ``label<TAB>display name`` map used when rendering prompts."""
    names: dict[int, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ParseError(f"{path}:{lineno}: expected 2 tab-separated fields, got {len(parts)}")
            if parts[0] not in entity_map:
                raise VocabularyError(f"{path}:{lineno}: unknown entity label {parts[0]!r}")
            names[entity_map[parts[0]]] = parts[1]
    return names
