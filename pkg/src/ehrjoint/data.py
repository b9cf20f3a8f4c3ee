"""Paired (graph, text) examples, vocabulary bundles, and padded batches."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .graph import EhrGraph, GraphVocabulary, RelationVocabulary
from .text import SubwordVocabulary, TextSequence, tokenize

IGNORE = -100


@dataclass
class Vocabularies:
    text: SubwordVocabulary
    graph: GraphVocabulary
    relations: RelationVocabulary
    # description token ids for every graph id (empty for reserved tokens)
    descriptions: list[list[int]] = field(default_factory=list)

    def __post_init__(self):
        if not self.descriptions:
            self.descriptions = [[] if not self.graph.is_literal_id(i) else tokenize(tok, self.text)
                                 for i, tok in enumerate(self.graph.tokens)]

    def save(self, directory):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        self.text.save(d / "text_vocab.txt")
        self.graph.save(d / "graph_vocab.txt")
        (d / "relations.txt").write_text("\n".join(self.relations.names) + "\n")

    @classmethod
    def load(cls, directory) -> "Vocabularies":
        d = Path(directory)
        return cls(SubwordVocabulary.load(d / "text_vocab.txt"),
                   GraphVocabulary.load(d / "graph_vocab.txt"),
                   RelationVocabulary((d / "relations.txt").read_text().splitlines()))


@dataclass
class PairExample:
    """One admission: BFS-ordered graph nodes (as graph-vocab ids) and its text."""

    admission_key: str
    node_ids: list[int]
    literal_types: list[str | None]
    edges: list[tuple[int, int, int]]
    text_ids: list[int]
    section_ids: list[int]
    labels: dict = field(default_factory=dict)

    @property
    def n_nodes(self) -> int:
        return len(self.node_ids)

    def is_literal(self) -> np.ndarray:
        return np.array([t is not None for t in self.literal_types], dtype=bool)

    def edge_relation(self) -> dict[tuple[int, int], int]:
        return {(min(s, d), max(s, d)): r for s, d, r in self.edges}

    def with_text(self, other: "PairExample") -> "PairExample":
        return replace(self, text_ids=other.text_ids, section_ids=other.section_ids)

    def to_record(self) -> dict:
        return {"admission_key": self.admission_key, "node_ids": list(map(int, self.node_ids)),
                "literal_types": self.literal_types, "edges": [list(map(int, e)) for e in self.edges],
                "text_ids": list(map(int, self.text_ids)), "section_ids": list(map(int, self.section_ids)),
                "labels": self.labels}

    @classmethod
    def from_record(cls, rec) -> "PairExample":
        return cls(rec["admission_key"], rec["node_ids"], rec["literal_types"],
                   [tuple(e) for e in rec["edges"]], rec["text_ids"], rec["section_ids"],
                   rec.get("labels", {}))


def make_example(graph: EhrGraph, text: TextSequence, vocab: GraphVocabulary,
                 labels: dict | None = None) -> PairExample:
    return PairExample(
        admission_key=graph.admission_key,
        node_ids=[vocab.node_id(n) for n in graph.nodes],
        literal_types=[None if n.is_abstract else n.literal_type for n in graph.nodes],
        edges=list(graph.edges),
        text_ids=list(text.input_ids),
        section_ids=list(text.section_ids),
        labels=dict(labels or {}),
    )


@dataclass
class PairDataset:
    examples: list[PairExample]
    vocab: Vocabularies

    def __len__(self):
        return len(self.examples)

    def __getitem__(self, idx):
        if isinstance(idx, slice):
            return PairDataset(self.examples[idx], self.vocab)
        return self.examples[idx]

    def __iter__(self):
        return iter(self.examples)

    def subset(self, indices: Iterable[int]) -> "PairDataset":
        return PairDataset([self.examples[i] for i in indices], self.vocab)

    def save(self, path):
        write_examples(self.examples, path)

    @classmethod
    def load(cls, path, vocab: Vocabularies) -> "PairDataset":
        return cls(read_examples(path), vocab)


def write_examples(examples: Iterable[PairExample], path):
    with open(path, "w") as fh:
        for ex in examples:
            fh.write(json.dumps(ex.to_record(), sort_keys=True) + "\n")


def read_examples(path) -> list[PairExample]:
    with open(path) as fh:
        return [PairExample.from_record(json.loads(line)) for line in fh if line.strip()]


@dataclass
class PairBatch:
    """Padded arrays for B pairs.  Boolean ``*_valid`` arrays mark real positions."""

    text_ids: np.ndarray
    section_ids: np.ndarray
    text_valid: np.ndarray
    node_ids: np.ndarray
    node_valid: np.ndarray
    adjacency: np.ndarray          # (B, Lg, Lg) bool, self-loops included
    desc_ids: np.ndarray           # (B, Ld) concatenated literal descriptions
    desc_valid: np.ndarray
    desc_mean: np.ndarray          # (B, Lg, Ld) averaging weights, for +init
    node_is_literal: np.ndarray    # literal and not masked
    labels: dict = field(default_factory=dict)

    @property
    def size(self) -> int:
        return self.text_ids.shape[0]


def collate(examples: Sequence[PairExample], vocab: Vocabularies,
            text_ids: Sequence[Sequence[int]] | None = None,
            node_ids: Sequence[Sequence[int]] | None = None) -> PairBatch:
    """Pad a list of pairs.  ``text_ids``/``node_ids`` override the stored ids
    (e.g. after masking) while keeping lengths."""
    b = len(examples)
    texts = [ex.text_ids for ex in examples] if text_ids is None else text_ids
    nodes = [ex.node_ids for ex in examples] if node_ids is None else node_ids
    lt = max(len(t) for t in texts)
    lg = max(max(len(n) for n in nodes), 1)
    tid = np.full((b, lt), vocab.text.pad_id, dtype=np.int64)
    sid = np.zeros((b, lt), dtype=np.int64)
    tvalid = np.zeros((b, lt), dtype=bool)
    nid = np.full((b, lg), vocab.graph.pad_id, dtype=np.int64)
    nvalid = np.zeros((b, lg), dtype=bool)
    adj = np.zeros((b, lg, lg), dtype=bool)
    lit = np.zeros((b, lg), dtype=bool)
    descs = []
    for k, ex in enumerate(examples):
        t = texts[k]
        tid[k, :len(t)] = t
        sid[k, :len(t)] = ex.section_ids[:len(t)]
        tvalid[k, :len(t)] = True
        n = nodes[k]
        nid[k, :len(n)] = n
        nvalid[k, :len(n)] = True
        idx = np.arange(len(n))
        adj[k, idx, idx] = True
        for s, d, _ in ex.edges:
            adj[k, s, d] = adj[k, d, s] = True
        per_node = []
        for i, g in enumerate(n):
            toks = vocab.descriptions[g] if vocab.graph.is_literal_id(g) else []
            per_node.append(toks)
            lit[k, i] = bool(toks)
        descs.append(per_node)
    ld = max(1, max(sum(len(t) for t in per) for per in descs))
    did = np.full((b, ld), vocab.text.pad_id, dtype=np.int64)
    dvalid = np.zeros((b, ld), dtype=bool)
    dmean = np.zeros((b, lg, ld))
    for k, per in enumerate(descs):
        pos = 0
        for i, toks in enumerate(per):
            if toks:
                did[k, pos:pos + len(toks)] = toks
                dvalid[k, pos:pos + len(toks)] = True
                dmean[k, i, pos:pos + len(toks)] = 1.0 / len(toks)
                pos += len(toks)
    return PairBatch(tid, sid, tvalid, nid, nvalid, adj, did, dvalid, dmean, lit)
