"""Deterministic synthetic admissions: relational tables, paired notes, datasets.

Two layouts are supported.  ``dxpx`` emits diagnoses and procedures (code plus
long title); ``rx`` emits prescriptions.  Literal pools are built
combinatorially from small word lists, and each mentionable literal has a
fixed paraphrase so that noisy notes can name a concept with a different
surface form.
"""
from __future__ import annotations

import csv
import itertools
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import PairDataset, Vocabularies, make_example
from .graph import (DEFAULT_NODE_CAP, EhrGraph, GraphSchema, GraphVocabulary, RelationVocabulary,
                    convert_tables, dxpx_schema, filter_oversize, rx_schema)
from .text import SECTION_DX, SECTION_HEADERS, SECTION_PX, SECTION_RX, build_text_vocab, encode_text, word_count

MIN_WORDS = 5

_ADJ = ["acute", "chronic", "severe", "mild", "recurrent", "congenital", "secondary", "primary"]
_ORGANS = ["kidney", "heart", "lung", "liver", "brain", "colon", "stomach", "pancreas", "skin", "bone"]
_ORGAN_ADJ = ["renal", "cardiac", "pulmonary", "hepatic", "cerebral", "colonic", "gastric",
              "pancreatic", "dermal", "skeletal"]
_CONDITIONS = ["failure", "disease", "infection", "injury", "hemorrhage", "obstruction"]
_APPROACH = ["open", "closed", "endoscopic", "laparoscopic", "percutaneous", "partial", "total", "other"]
_PROCS = ["biopsy", "excision", "repair", "drainage", "resection", "transplant", "incision"]
_DRUG_PRE = ["ami", "beta", "cefa", "dexa", "flu", "hepa", "keto", "lora", "meto", "nitro", "pred",
             "vanco", "war", "zol", "lisi", "ator"]
_DRUG_SUF = ["prolol", "cillin", "zepam", "statin", "pril", "mycin", "sone", "farin", "pine", "dine",
             "tidine", "zole", "mide"]
_BRAND_PRE = ["zan", "tor", "lex", "vel", "cor", "pax", "mira", "nex", "sol", "tri", "ven", "xan", "lyr",
              "dor", "quin", "bex"]
_BRAND_SUF = ["ex", "ol", "ia", "ium", "ax", "or", "on", "al", "id", "us", "yn", "ene", "ix"]
_ROUTES = ["po", "iv", "im", "sc", "sl", "pr", "top", "inh", "ng", "td"]
_ROUTE_WORDS = ["by mouth", "intravenous", "intramuscular", "subcutaneous", "sublingual", "rectal",
                "topical", "inhaled", "nasogastric", "transdermal"]
_DOSES = ["1mg", "2mg", "5mg", "10mg", "20mg", "25mg", "40mg", "50mg", "100mg", "250mg", "500mg", "1000mg"]
_DRUG_TYPES = ["main", "base", "additive"]


@dataclass
class SynthSchema:
    """Everything the generator needs; saved as JSON next to the data."""

    variant: str = "dxpx"
    pools: dict[str, list] = field(default_factory=dict)
    synonyms: dict[str, str] = field(default_factory=dict)
    children: dict[str, list[int]] = field(default_factory=dict)   # table -> [min, max] rows
    noise_rate: float = 0.0
    mortality: float = 0.04
    readmission: float = 0.27
    outcome_signal: float = 0.0
    risk_fraction: float = 0.1

    def __post_init__(self):
        if self.variant not in ("dxpx", "rx"):
            raise ValueError(f"variant must be 'dxpx' or 'rx', got {self.variant!r}")
        for name, pool in self.pools.items():
            if not pool:
                raise ValueError(f"pool {name} is empty")
        for name in ("mortality", "readmission", "outcome_signal", "risk_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        if not 0.0 <= self.noise_rate < 1.0:
            raise ValueError(f"noise_rate={self.noise_rate} outside [0, 1)")
        for t, (lo, hi) in self.children.items():
            if not 0 <= lo <= hi:
                raise ValueError(f"children range for {t} must satisfy 0 <= min <= max")

    @classmethod
    def default(cls, variant: str = "dxpx", pool_size: int = 200, seed: int = 0, **kw) -> "SynthSchema":
        rng = np.random.default_rng(seed)
        pools, synonyms = {}, {}
        if variant == "dxpx":
            combos = list(itertools.product(range(len(_ADJ)), range(len(_ORGANS)), range(len(_CONDITIONS))))
            pick = rng.permutation(len(combos))[:pool_size]
            dx = []
            for k, ci in enumerate(sorted(pick)):
                a, o, c = combos[ci]
                title = f"{_ADJ[a]} {_ORGANS[o]} {_CONDITIONS[c]}"
                dx.append([str(10000 + 37 * k), title])
                synonyms[title] = f"{_ADJ[a]} {_ORGAN_ADJ[o]} {_CONDITIONS[c]}"
            combos = list(itertools.product(range(len(_APPROACH)), range(len(_PROCS)), range(len(_ORGANS))))
            pick = rng.permutation(len(combos))[:pool_size]
            px = []
            for k, ci in enumerate(sorted(pick)):
                a, p, o = combos[ci]
                title = f"{_APPROACH[a]} {_PROCS[p]} of {_ORGANS[o]}"
                px.append([str(1000 + 7 * k), title])
                synonyms[title] = f"{_APPROACH[a]} {_ORGAN_ADJ[o]} {_PROCS[p]}"
            pools = {"diagnoses": dx, "procedures": px}
            children = {"diagnoses": [1, 4], "procedures": [1, 2]}
        elif variant == "rx":
            combos = list(itertools.product(range(len(_DRUG_PRE)), range(len(_DRUG_SUF))))
            pick = sorted(rng.permutation(len(combos))[:pool_size])
            drugs = []
            for ci in pick:
                p, s = combos[ci]
                name = _DRUG_PRE[p] + _DRUG_SUF[s]
                drugs.append(name)
                synonyms[name] = _BRAND_PRE[p] + _BRAND_SUF[s]
            for r, w in zip(_ROUTES, _ROUTE_WORDS):
                synonyms[r] = w
            for d in _DOSES:
                synonyms[d] = d[:-2] + " mg"
            pools = {"drug": drugs, "route": list(_ROUTES), "dose": list(_DOSES),
                     "drug_type": list(_DRUG_TYPES), "icustay": [f"icu{200000 + 17 * k}" for k in range(50)]}
            children = {"prescriptions": [1, 4]}
        else:
            raise ValueError(f"variant must be 'dxpx' or 'rx', got {variant!r}")
        return cls(**{"variant": variant, "pools": pools, "synonyms": synonyms, "children": children, **kw})

    def graph_schema(self) -> GraphSchema:
        return dxpx_schema() if self.variant == "dxpx" else rx_schema()

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSchema":
        return cls(**d)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> "SynthSchema":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class AdmissionRecord:
    key: str
    rows: dict[str, list[dict]]
    outcomes: dict[str, int]
    sections: list[tuple[int, str]] = field(default_factory=list)
    paraphrased: list[bool] = field(default_factory=list)

    def mentions(self) -> list[tuple[int, str]]:
        """(section, literal) for every literal the note names."""
        out = []
        for r in self.rows.get("diagnoses", []):
            out.append((SECTION_DX, r["LONG_TITLE"]))
        for r in self.rows.get("procedures", []):
            out.append((SECTION_PX, r["LONG_TITLE"]))
        for r in self.rows.get("prescriptions", []):
            out += [(SECTION_RX, r["DRUG"]), (SECTION_RX, r["DOSE_VAL_RX"]), (SECTION_RX, r["ROUTE"])]
        return out


def _formulary(drug: str, dose: str) -> str:
    return drug[:4] + dose[:-2]


def _draw_rows(schema: SynthSchema, rng: np.random.Generator, counters: dict) -> dict[str, list[dict]]:
    rows: dict[str, list[dict]] = {}
    for table, (lo, hi) in schema.children.items():
        n = int(rng.integers(lo, hi + 1))
        out = []
        if table in ("diagnoses", "procedures"):
            pool = schema.pools[table]
            # distinct concepts within one admission
            for i in rng.choice(len(pool), size=min(n, len(pool)), replace=False):
                counters[table] += 1
                pk = "DX_ID" if table == "diagnoses" else "PX_ID"
                out.append({pk: str(counters[table]), "ICD9_CODE": pool[i][0], "LONG_TITLE": pool[i][1],
                            "_index": int(i)})
        elif table == "prescriptions":
            p = schema.pools
            icu = p["icustay"][int(rng.integers(len(p["icustay"])))]
            for i in rng.choice(len(p["drug"]), size=min(n, len(p["drug"])), replace=False):
                counters[table] += 1
                dose = p["dose"][int(rng.integers(len(p["dose"])))]
                drug = p["drug"][i]
                out.append({"RX_ID": str(counters[table]), "ICUSTAY_ID": icu,
                            "DRUG_TYPE": p["drug_type"][int(rng.integers(len(p["drug_type"])))],
                            "DRUG": drug, "ROUTE": p["route"][int(rng.integers(len(p["route"])))],
                            "FORMULARY_DRUG_CD": _formulary(drug, dose), "DOSE_VAL_RX": dose, "_index": int(i)})
        else:
            raise ValueError(f"unknown child table {table}")
        rows[table] = out
    return rows


def _has_risk(schema: SynthSchema, rows: dict[str, list[dict]]) -> bool:
    for table, rs in rows.items():
        pool = schema.pools["drug" if table == "prescriptions" else table]
        cut = max(1, int(round(schema.risk_fraction * len(pool))))
        if any(r["_index"] < cut for r in rs):
            return True
    return False


def render_summary(record: AdmissionRecord, noise_rate: float, rng: np.random.Generator,
                   synonyms: dict[str, str] | None = None) -> list[tuple[int, str]]:
    """Sectioned note naming each literal; a ``noise_rate`` share of mentions
    use the paraphrase instead.  Sets ``record.paraphrased``."""
    if not 0.0 <= noise_rate < 1.0:
        raise ValueError(f"noise_rate={noise_rate} outside [0, 1)")
    synonyms = synonyms or {}
    flags = []

    def say(literal: str) -> str:
        swap = bool(rng.random() < noise_rate) if noise_rate > 0 else False
        flags.append(swap)
        return synonyms.get(literal, literal) if swap else literal

    sections = []
    if "diagnoses" in record.rows or "procedures" in record.rows:
        dx = [say(r["LONG_TITLE"]) for r in record.rows.get("diagnoses", [])]
        px = [say(r["LONG_TITLE"]) for r in record.rows.get("procedures", [])]
        sections.append((SECTION_DX, " ; ".join([SECTION_HEADERS[SECTION_DX]] + dx)))
        sections.append((SECTION_PX, " ; ".join([SECTION_HEADERS[SECTION_PX]] + px)))
    if "prescriptions" in record.rows:
        rx = [f"{say(r['DRUG'])} {say(r['DOSE_VAL_RX'])} {say(r['ROUTE'])}" for r in record.rows["prescriptions"]]
        sections.append((SECTION_RX, " ; ".join([SECTION_HEADERS[SECTION_RX]] + rx)))
    record.paraphrased = flags
    return sections


def generate_records(schema: SynthSchema, n: int, seed: int) -> list[AdmissionRecord]:
    if n < 1:
        raise ValueError("n must be at least 1")
    counters = {t: 0 for t in ("diagnoses", "procedures", "prescriptions")}
    records = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        rows = _draw_rows(schema, rng, counters)
        records.append(AdmissionRecord(str(100000 + i), rows, {}))
    # risk-conditioned outcome rates keep the overall prevalence on target
    risky = np.array([_has_risk(schema, r.rows) for r in records]) if schema.outcome_signal > 0 else None
    q = float(risky.mean()) if risky is not None else 0.0
    for i, rec in enumerate(records):
        rng = np.random.default_rng([seed, i, 1])
        for name in ("mortality", "readmission"):
            prev = getattr(schema, name)
            p = prev
            if risky is not None and 0 < q < 1:
                hi = min(1.0, prev / q)
                base = (prev - q * hi) / (1 - q)
                target = hi if risky[i] else base
                p = (1 - schema.outcome_signal) * prev + schema.outcome_signal * target
            rec.outcomes[name] = int(rng.random() < p)
        rec.sections = render_summary(rec, schema.noise_rate, np.random.default_rng([seed, i, 2]),
                                      schema.synonyms)
    return records


def records_to_tables(records: Sequence[AdmissionRecord], schema: SynthSchema) -> dict[str, dict[str, list[str]]]:
    gs = schema.graph_schema()
    tables: dict[str, dict[str, list[str]]] = {}
    adm = {"ADM_ID": [], "MORTALITY": [], "READMISSION": []}
    for r in records:
        adm["ADM_ID"].append(r.key)
        adm["MORTALITY"].append(str(r.outcomes.get("mortality", 0)))
        adm["READMISSION"].append(str(r.outcomes.get("readmission", 0)))
    tables["admissions"] = adm
    for tname, tspec in gs.tables.items():
        if tname == "admissions":
            continue
        cols = [tspec.primary_key, "ADM_ID"] + [p.column for p in tspec.properties]
        t = {c: [] for c in cols}
        for r in records:
            for row in r.rows.get(tname, []):
                for c in cols:
                    t[c].append(r.key if c == "ADM_ID" else row[c])
        tables[tname] = t
    notes = {"ADM_ID": [], "SECTION": [], "TEXT": []}
    for r in records:
        for sec, text in r.sections:
            notes["ADM_ID"].append(r.key)
            notes["SECTION"].append(str(sec))
            notes["TEXT"].append(text)
    tables["notes"] = notes
    return tables


def generate_admissions(schema: SynthSchema, n: int, seed: int) -> dict[str, dict[str, list[str]]]:
    """Column-oriented tables: admissions (with outcomes), child tables, notes."""
    return records_to_tables(generate_records(schema, n, seed), schema)


def write_tables(tables: dict[str, dict[str, list[str]]], directory):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for name, cols in tables.items():
        with open(d / f"{name}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            header = list(cols)
            w.writerow(header)
            for row in zip(*(cols[h] for h in header)):
                w.writerow(row)


def notes_by_admission(tables) -> dict[str, list[tuple[int, str]]]:
    notes: dict[str, list[tuple[int, str]]] = {}
    t = tables["notes"]
    for k, s, text in zip(t["ADM_ID"], t["SECTION"], t["TEXT"]):
        notes.setdefault(str(k), []).append((int(s), text))
    return notes


def outcomes_by_admission(tables) -> dict[str, dict[str, int]]:
    a = tables["admissions"]
    out = {}
    for i, k in enumerate(a["ADM_ID"]):
        out[str(k)] = {name.lower(): int(a[name][i]) for name in ("MORTALITY", "READMISSION") if name in a}
    return out


def pool_literals(schema: SynthSchema) -> list[str]:
    """Every literal value the generator can emit, so corruption has a vocabulary."""
    vals: list[str] = []
    if schema.variant == "dxpx":
        for t in ("diagnoses", "procedures"):
            for code, title in schema.pools[t]:
                vals += [code, title]
    else:
        p = schema.pools
        vals += p["drug"] + p["route"] + p["dose"] + p["drug_type"] + p["icustay"]
        vals += [_formulary(d, s) for d in p["drug"] for s in p["dose"]]
    return vals


@dataclass
class BuiltDataset:
    splits: dict[str, PairDataset]
    vocab: Vocabularies
    graphs: list[EhrGraph]
    dropped: dict[str, list[str]]
    tables: dict


def pair_tables(tables, gschema: GraphSchema, node_cap: int = DEFAULT_NODE_CAP, min_words: int = MIN_WORDS):
    """Convert tables and pair each graph with its note.  Returns the kept
    (graph, sections, outcome labels) triples and the dropped keys by reason."""
    graphs = convert_tables(tables, gschema)
    notes = notes_by_admission(tables)
    outcomes = outcomes_by_admission(tables)
    kept, dropped = [], {"short_text": [], "oversize": [], "no_text": []}
    for g in graphs:
        secs = notes.get(g.admission_key)
        if not secs:
            dropped["no_text"].append(g.admission_key)
        elif word_count(secs) < min_words:
            dropped["short_text"].append(g.admission_key)
        elif not filter_oversize(g, node_cap):
            dropped["oversize"].append(g.admission_key)
        else:
            kept.append((g, secs, outcomes.get(g.admission_key, {})))
    return kept, dropped


def build_vocabularies(kept, relations: RelationVocabulary, extra_literals: Sequence[str] = (),
                       text_size: int | None = None) -> Vocabularies:
    corpus = [text for _, secs, _ in kept for _, text in secs]
    literals = [n.value for g, _, _ in kept for n in g.nodes if not n.is_abstract] + list(extra_literals)
    # literal descriptions must tokenize too
    corpus += sorted(set(literals))
    if text_size is None:
        words = {w for t in corpus for w in t.lower().split()}
        chars = {c for w in words for c in w}
        text_size = 5 + 2 * len(chars) + len(words)
    return Vocabularies(build_text_vocab(corpus, text_size), GraphVocabulary(literals), relations)


def split_keys(keys: Sequence[str], fractions: Sequence[float], seed: int) -> list[list[str]]:
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.shape != (3,) or np.any(fr < 0) or abs(fr.sum() - 1.0) > 1e-9:
        raise ValueError(f"split fractions {list(fractions)} must be three non-negative numbers summing to 1")
    order = np.random.default_rng([seed, 7]).permutation(len(keys))
    n = len(keys)
    n_train = int(round(fr[0] * n))
    n_valid = min(n - n_train, int(round(fr[1] * n)))
    cuts = [order[:n_train], order[n_train:n_train + n_valid], order[n_train + n_valid:]]
    out = [[keys[i] for i in sorted(c)] for c in cuts]
    for name, f, part in zip(("train", "valid", "test"), fr, out):
        if f > 0 and not part:
            raise ValueError(f"{name} split is empty")
    return out


def make_dataset(schema: SynthSchema, n: int, seed: int, fractions=(0.8, 0.1, 0.1), out_dir=None,
                 node_cap: int = DEFAULT_NODE_CAP) -> BuiltDataset:
    """Generate, convert, pair, filter, split; optionally write everything to ``out_dir``."""
    tables = generate_admissions(schema, n, seed)
    gschema = schema.graph_schema()
    kept, dropped = pair_tables(tables, gschema, node_cap=node_cap)
    if not kept:
        raise ValueError("every admission was filtered out")
    relations = RelationVocabulary(gschema.relation_names())
    vocab = build_vocabularies(kept, relations, pool_literals(schema))
    examples = {g.admission_key: make_example(g, encode_text(secs, vocab.text), vocab.graph, labels)
                for g, secs, labels in kept}
    parts = split_keys(list(examples), fractions, seed)
    splits = {name: PairDataset([examples[k] for k in part], vocab)
              for name, part in zip(("train", "valid", "test"), parts)}
    built = BuiltDataset(splits, vocab, [g for g, _, _ in kept], dropped, tables)
    if out_dir is not None:
        write_dataset(built, schema, out_dir, {"n": n, "seed": seed, "fractions": list(fractions)})
    return built


def write_dataset(built: BuiltDataset, schema: SynthSchema, out_dir, info: dict):
    from .graph import write_graphs
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    write_tables(built.tables, d / "tables")
    schema.save(d / "synth_schema.json")
    schema.graph_schema().save(d / "graph_schema.json")
    write_graphs(built.graphs, d / "graphs.jsonl")
    built.vocab.save(d)
    for name, ds in built.splits.items():
        ds.save(d / f"{name}.jsonl")
    summary = {**info, "variant": schema.variant, "pairs": {k: len(v) for k, v in built.splits.items()},
               "dropped": built.dropped}
    (d / "dataset.json").write_text(json.dumps(summary, indent=2, sort_keys=True))


def load_split(directory, name: str) -> PairDataset:
    d = Path(directory)
    return PairDataset.load(d / f"{name}.jsonl", Vocabularies.load(d))
