"""Relational tables to per-admission EHR graphs.

Key columns become abstract entity nodes, non-key property cells become
literal nodes hanging off their entity (or off another literal of the same
row, e.g. a code and its long title).  Graphs are stored with nodes in BFS
order from the admission root and edges kept as directed
(parent, child, relation id) triples.
"""
from __future__ import annotations

import csv
import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .autodiff import MASK_VALUE

ABSTRACT_KINDS = ("ADM", "DX", "PX", "RX")
NOT_CONNECTED = "Not Connected"
DEFAULT_NODE_CAP = 768


class SchemaError(ValueError):
    pass


class ConversionError(ValueError):
    pass


# ---------------------------------------------------------------- schema

@dataclass
class PropertySpec:
    column: str
    relation: str
    parent: str | None = None
    corruptible: bool = False


@dataclass
class TableSpec:
    name: str
    primary_key: str
    kind: str
    foreign_keys: list[tuple[str, str]] = field(default_factory=list)
    properties: list[PropertySpec] = field(default_factory=list)

    @property
    def link_relation(self) -> str:
        return f"/{self.name}"


@dataclass
class GraphSchema:
    """Declarative table layout: primary key, foreign keys and property columns."""

    tables: dict[str, TableSpec]

    @property
    def root(self) -> TableSpec:
        roots = [t for t in self.tables.values() if not t.foreign_keys]
        if len(roots) != 1:
            raise SchemaError(f"schema needs exactly one root table, found {[t.name for t in roots]}")
        return roots[0]

    def relation_names(self) -> list[str]:
        names: list[str] = []
        for t in self.tables.values():
            if t.foreign_keys and t.link_relation not in names:
                names.append(t.link_relation)
            for p in t.properties:
                if p.relation not in names:
                    names.append(p.relation)
        return names

    def corruptible_types(self) -> list[str]:
        return [p.relation for t in self.tables.values() for p in t.properties if p.corruptible]

    @classmethod
    def from_dict(cls, spec: Mapping) -> "GraphSchema":
        tables = {}
        for name, t in spec["tables"].items():
            kind = t.get("kind", "ADM")
            if kind not in ABSTRACT_KINDS:
                raise SchemaError(f"table {name}: kind must be one of {ABSTRACT_KINDS}")
            fks = []
            for fk in t.get("foreign_keys", []):
                if isinstance(fk, str):
                    raise SchemaError(f"table {name}: foreign key {fk!r} needs a 'references' table")
                fks.append((fk["column"], fk["references"]))
            props = []
            for p in t.get("properties", []):
                if isinstance(p, str):
                    p = {"column": p}
                props.append(PropertySpec(
                    column=p["column"],
                    relation=p.get("relation", "/" + p["column"].lower()),
                    parent=p.get("parent"),
                    corruptible=bool(p.get("corruptible", False)),
                ))
            tables[name] = TableSpec(name, t["primary_key"], kind, fks, props)
        schema = cls(tables)
        schema.validate()
        return schema

    def to_dict(self) -> dict:
        return {"tables": {
            t.name: {
                "primary_key": t.primary_key,
                "kind": t.kind,
                "foreign_keys": [{"column": c, "references": r} for c, r in t.foreign_keys],
                "properties": [
                    {"column": p.column, "relation": p.relation,
                     **({"parent": p.parent} if p.parent else {}),
                     **({"corruptible": True} if p.corruptible else {})}
                    for p in t.properties],
            } for t in self.tables.values()}}

    def validate(self):
        root = self.root
        for t in self.tables.values():
            if t is not root and len(t.foreign_keys) != 1:
                raise SchemaError(f"table {t.name}: non-root tables need exactly one foreign key")
            for _, ref in t.foreign_keys:
                if ref not in self.tables:
                    raise SchemaError(f"table {t.name}: foreign key references unknown table {ref}")
            seen = set()
            for p in t.properties:
                if p.parent is not None and p.parent not in seen:
                    raise SchemaError(f"table {t.name}: property {p.column} parent {p.parent} "
                                      "must be an earlier property column")
                seen.add(p.column)

    @classmethod
    def load(cls, path) -> "GraphSchema":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)


def dxpx_schema() -> GraphSchema:
    """Diagnoses + procedures layout (merged with their description tables)."""
    return GraphSchema.from_dict({"tables": {
        "admissions": {"primary_key": "ADM_ID", "kind": "ADM"},
        "diagnoses": {
            "primary_key": "DX_ID", "kind": "DX",
            "foreign_keys": [{"column": "ADM_ID", "references": "admissions"}],
            "properties": [
                {"column": "ICD9_CODE", "relation": "/diagnoses_icd9_code"},
                {"column": "LONG_TITLE", "relation": "/diagnoses_long_title",
                 "parent": "ICD9_CODE", "corruptible": True},
            ]},
        "procedures": {
            "primary_key": "PX_ID", "kind": "PX",
            "foreign_keys": [{"column": "ADM_ID", "references": "admissions"}],
            "properties": [
                {"column": "ICD9_CODE", "relation": "/procedures_icd9_code"},
                {"column": "LONG_TITLE", "relation": "/procedures_long_title",
                 "parent": "ICD9_CODE", "corruptible": True},
            ]},
    }})


def rx_schema() -> GraphSchema:
    """Prescriptions layout."""
    return GraphSchema.from_dict({"tables": {
        "admissions": {"primary_key": "ADM_ID", "kind": "ADM"},
        "prescriptions": {
            "primary_key": "RX_ID", "kind": "RX",
            "foreign_keys": [{"column": "ADM_ID", "references": "admissions"}],
            "properties": [
                {"column": "ICUSTAY_ID", "relation": "/icustay_id"},
                {"column": "DRUG_TYPE", "relation": "/drug_type"},
                {"column": "DRUG", "relation": "/drug", "corruptible": True},
                {"column": "ROUTE", "relation": "/route", "corruptible": True},
                {"column": "FORMULARY_DRUG_CD", "relation": "/formulary_drug_cd", "corruptible": True},
                {"column": "DOSE_VAL_RX", "relation": "/drug_dose", "corruptible": True},
            ]},
    }})


# ---------------------------------------------------------------- vocabularies

class RelationVocabulary:
    """Relation name -> dense id, with ``Not Connected`` as the last id."""

    def __init__(self, names: Sequence[str]):
        names = [n for n in names if n != NOT_CONNECTED]
        self.names = list(names) + [NOT_CONNECTED]
        self.index = {n: i for i, n in enumerate(self.names)}

    def __len__(self):
        return len(self.names)

    def __getitem__(self, name: str) -> int:
        return self.index[name]

    @property
    def not_connected(self) -> int:
        return len(self.names) - 1


GRAPH_RESERVED = ("[ADM]", "[DX]", "[PX]", "[RX]", "[SUM]", "[MASK]_G", "[PAD]_G")


class GraphVocabulary:
    """Literal surface form -> id, reserved tokens occupying the first ids."""

    def __init__(self, literals: Iterable[str] = ()):
        self.tokens = list(GRAPH_RESERVED) + sorted(set(literals) - set(GRAPH_RESERVED))
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    @property
    def sum_id(self) -> int:
        return self.index["[SUM]"]

    @property
    def mask_id(self) -> int:
        return self.index["[MASK]_G"]

    @property
    def pad_id(self) -> int:
        return self.index["[PAD]_G"]

    def node_id(self, node: "Node") -> int:
        if node.is_abstract:
            return self.index[f"[{node.kind}]"]
        try:
            return self.index[node.value]
        except KeyError:
            raise KeyError(f"literal {node.value!r} not in graph vocabulary") from None

    def is_literal_id(self, i: int) -> bool:
        return i >= len(GRAPH_RESERVED)

    def save(self, path):
        Path(path).write_text("\n".join(self.tokens) + "\n")

    @classmethod
    def load(cls, path) -> "GraphVocabulary":
        tokens = Path(path).read_text().splitlines()
        if tuple(tokens[:len(GRAPH_RESERVED)]) != GRAPH_RESERVED:
            raise ValueError(f"{path}: reserved graph tokens missing or out of order")
        vocab = cls()
        vocab.tokens = tokens
        vocab.index = {t: i for i, t in enumerate(tokens)}
        return vocab


# ---------------------------------------------------------------- graph

@dataclass
class Node:
    kind: str
    value: str
    column: str
    literal_type: str | None = None

    @property
    def is_abstract(self) -> bool:
        return self.kind in ABSTRACT_KINDS

    @property
    def description(self) -> str:
        """Text attached to the node; abstract nodes carry none."""
        return "" if self.is_abstract else self.value


@dataclass
class EhrGraph:
    admission_key: str
    nodes: list[Node]
    edges: list[tuple[int, int, int]]
    relations: RelationVocabulary

    def __post_init__(self):
        n = len(self.nodes)
        for s, d, _ in self.edges:
            if not (0 <= s < n and 0 <= d < n):
                raise ValueError(f"edge ({s}, {d}) outside {n} nodes")

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    def literal_indices(self) -> list[int]:
        return [i for i, n in enumerate(self.nodes) if not n.is_abstract]

    @property
    def descriptions_concat(self) -> list[str]:
        return [n.description for n in self.nodes if not n.is_abstract]

    def edge_relation(self) -> dict[tuple[int, int], int]:
        """Undirected lookup {(min, max): relation id}."""
        return {(min(s, d), max(s, d)): r for s, d, r in self.edges}

    def children(self) -> list[list[int]]:
        out: list[list[int]] = [[] for _ in self.nodes]
        for s, d, _ in self.edges:
            out[s].append(d)
        return out

    def triples(self) -> list[tuple[str, str, str]]:
        has_children = {s for s, _, _ in self.edges}

        def label(i):
            node = self.nodes[i]
            if node.is_abstract or i in has_children:
                return f"{node.column}/{node.value}"
            return node.value

        return [(label(s), self.relations.names[r], label(d)) for s, d, r in self.edges]

    def to_record(self) -> dict:
        return {
            "admission_key": self.admission_key,
            "nodes": [{"kind": n.kind, "value": n.value, "column": n.column,
                       "literal_type": n.literal_type} for n in self.nodes],
            "edges": [list(e) for e in self.edges],
            "relations": self.relations.names,
        }

    @classmethod
    def from_record(cls, rec: Mapping) -> "EhrGraph":
        nodes = [Node(n["kind"], n["value"], n["column"], n.get("literal_type")) for n in rec["nodes"]]
        return cls(rec["admission_key"], nodes, [tuple(e) for e in rec["edges"]],
                   RelationVocabulary(rec["relations"]))


# ---------------------------------------------------------------- operations

def read_tables(directory, names: Iterable[str]) -> dict[str, dict[str, list[str]]]:
    """Load ``<name>.csv`` files as column-oriented tables."""
    tables = {}
    for name in names:
        with open(Path(directory) / f"{name}.csv", newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            cols: dict[str, list[str]] = {h: [] for h in header}
            for row in reader:
                for h, v in zip(header, row):
                    cols[h].append(v)
        tables[name] = cols
    return tables


def _n_rows(table: Mapping[str, Sequence]) -> int:
    lengths = {len(v) for v in table.values()}
    if len(lengths) > 1:
        raise ConversionError("table columns have unequal lengths")
    return lengths.pop() if lengths else 0


def _is_null(v) -> bool:
    return v is None or (isinstance(v, float) and np.isnan(v)) or str(v).strip() == ""


def convert_tables(tables: Mapping[str, Mapping[str, Sequence]], schema: GraphSchema) -> list[EhrGraph]:
    """One graph per admission key, ordered by key, nodes in BFS order."""
    relations = RelationVocabulary(schema.relation_names())
    root = schema.root
    # entity registry: (table, pk value) -> (admission key, node index)
    nodes: dict[str, list[Node]] = {}
    edges: dict[str, list[tuple[int, int, int]]] = {}
    entities: dict[tuple[str, str], tuple[str, int]] = {}

    def add_node(adm, node) -> int:
        nodes[adm].append(node)
        return len(nodes[adm]) - 1

    for tname, tspec in schema.tables.items():
        if tname not in tables:
            raise ConversionError(f"table {tname} missing from input")
        table = tables[tname]
        for col in [tspec.primary_key] + [c for c, _ in tspec.foreign_keys] + [p.column for p in tspec.properties]:
            if col not in table:
                raise ConversionError(f"table {tname} lacks column {col}")
    # parents must be registered before children
    order = _table_order(schema)
    for tname in order:
        tspec = schema.tables[tname]
        table = tables[tname]
        seen_pk = set()
        for r in range(_n_rows(table)):
            pk = str(table[tspec.primary_key][r])
            if pk in seen_pk:
                raise ConversionError(f"table {tname} row {r}: duplicate primary key {tspec.primary_key}={pk}")
            seen_pk.add(pk)
            entity = Node(tspec.kind, pk, tspec.primary_key)
            if tspec is root:
                adm = pk
                nodes[adm], edges[adm] = [], []
                idx = add_node(adm, entity)
            else:
                fk_col, ref = tspec.foreign_keys[0]
                fk = str(table[fk_col][r])
                if (ref, fk) not in entities:
                    raise ConversionError(
                        f"table {tname} row {r}: dangling foreign key {fk_col}={fk} (no row in {ref})")
                adm, parent_idx = entities[(ref, fk)]
                idx = add_node(adm, entity)
                edges[adm].append((parent_idx, idx, relations[tspec.link_relation]))
            entities[(tname, pk)] = (adm, idx)
            row_literals: dict[str, int] = {}
            for p in tspec.properties:
                v = table[p.column][r]
                if _is_null(v):
                    continue
                lit = add_node(adm, Node("literal", str(v), p.column, p.relation))
                parent = row_literals.get(p.parent, idx) if p.parent else idx
                edges[adm].append((parent, lit, relations[p.relation]))
                row_literals[p.column] = lit
    graphs = []
    for adm in sorted(nodes, key=_key_order):
        g = EhrGraph(adm, nodes[adm], edges[adm], relations)
        graphs.append(reorder(g, bfs_serialize(g)[0]))
    return graphs


def _key_order(k: str):
    return (0, int(k), "") if k.isdigit() else (1, 0, k)


def _table_order(schema: GraphSchema) -> list[str]:
    done: list[str] = []
    pending = list(schema.tables)
    while pending:
        progressed = False
        for name in list(pending):
            refs = [r for _, r in schema.tables[name].foreign_keys]
            if all(r in done for r in refs):
                done.append(name)
                pending.remove(name)
                progressed = True
        if not progressed:
            raise SchemaError(f"foreign-key cycle among {pending}")
    return done


def bfs_serialize(graph: EhrGraph) -> tuple[list[int], list[int]]:
    """BFS order from the ADM root (children in insertion order) and position ids."""
    roots = [i for i, n in enumerate(graph.nodes) if n.kind == "ADM"]
    if len(roots) != 1:
        raise ConversionError(f"graph {graph.admission_key}: expected one ADM root, found {len(roots)}")
    children = graph.children()
    order, seen = [], {roots[0]}
    queue = deque([roots[0]])
    while queue:
        u = queue.popleft()
        order.append(u)
        for v in children[u]:
            if v not in seen:
                seen.add(v)
                queue.append(v)
    if len(order) != graph.n_nodes:
        missing = sorted(set(range(graph.n_nodes)) - seen)
        raise ConversionError(f"graph {graph.admission_key}: nodes {missing} unreachable from root")
    return order, list(range(len(order)))


def reorder(graph: EhrGraph, order: Sequence[int]) -> EhrGraph:
    new_index = {old: new for new, old in enumerate(order)}
    return EhrGraph(graph.admission_key, [graph.nodes[i] for i in order],
                    [(new_index[s], new_index[d], r) for s, d, r in graph.edges], graph.relations)


def adjacency_allowed(graph: EhrGraph, seq_len: int | None = None) -> np.ndarray:
    """Boolean matrix: True where attention is allowed (self-loops + edges)."""
    n = graph.n_nodes
    seq_len = n if seq_len is None else seq_len
    if seq_len < n:
        raise ValueError(f"seq_len {seq_len} shorter than {n} nodes")
    allowed = np.zeros((seq_len, seq_len), dtype=bool)
    idx = np.arange(n)
    allowed[idx, idx] = True
    for s, d, _ in graph.edges:
        allowed[s, d] = allowed[d, s] = True
    return allowed


def build_adjacency_mask(graph: EhrGraph, seq_len: int | None = None,
                         negative: float = MASK_VALUE) -> np.ndarray:
    """Symmetric additive mask; padding rows and columns fully negative."""
    return np.where(adjacency_allowed(graph, seq_len), 0.0, negative)


def filter_oversize(graph: EhrGraph, cap: int = DEFAULT_NODE_CAP) -> bool:
    """True when the graph is kept (at most ``cap`` nodes)."""
    if cap <= 0:
        raise ValueError("cap must be positive")
    return graph.n_nodes <= cap


def build_graph_vocab(graphs: Iterable[EhrGraph]) -> GraphVocabulary:
    return GraphVocabulary(n.value for g in graphs for n in g.nodes if not n.is_abstract)


def write_graphs(graphs: Iterable[EhrGraph], path):
    with open(path, "w") as fh:
        for g in graphs:
            fh.write(json.dumps(g.to_record(), sort_keys=True) + "\n")


def read_graphs(path) -> list[EhrGraph]:
    with open(path) as fh:
        return [EhrGraph.from_record(json.loads(line)) for line in fh if line.strip()]
