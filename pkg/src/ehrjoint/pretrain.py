"""Masked language modeling, masked literal prediction, relation
classification and alignment prediction, plus the estimator that trains them."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from . import autodiff as ad
from .autodiff import Tensor
from .data import IGNORE, PairBatch, PairDataset, PairExample, Vocabularies, collate
from .model import EncoderOutputs, GraphTextModel, ModelConfig, load_checkpoint, save_checkpoint
from .nn import Linear, Module
from .optim import Adam
from .validation import check_is_fitted, check_pair_dataset, check_tasks

log = logging.getLogger(__name__)

TASKS = ("mlm", "mlp", "rc", "ap")
RC_PAIR_CAP = 512
counters = {"alignment_skipped": 0}


@dataclass
class MaskingPlan:
    input_ids: list[int]
    labels: list[int]
    actions: dict[int, str] = field(default_factory=dict)

    @property
    def positions(self) -> list[int]:
        return sorted(self.actions)


def apply_mlm_mask(ids: Sequence[int], p: float, rng: np.random.Generator, vocab_size: int,
                   mask_id: int, special_ids: Iterable[int],
                   split: tuple[float, float, float] = (0.8, 0.1, 0.1)) -> MaskingPlan:
    """Select non-special tokens with probability p; replace with [MASK] /
    random token / keep according to ``split``."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"masking probability {p} outside [0, 1]")
    special = set(special_ids)
    ids = list(ids)
    out, labels, actions = list(ids), [IGNORE] * len(ids), {}
    eligible = np.array([t not in special for t in ids])
    chosen = (rng.random(len(ids)) < p) & eligible
    draws = rng.random(len(ids))
    randoms = rng.integers(len(special), vocab_size, size=len(ids)) if vocab_size > len(special) else None
    for i in np.nonzero(chosen)[0]:
        labels[i] = ids[i]
        if draws[i] < split[0]:
            out[i] = mask_id
            actions[int(i)] = "mask"
        elif draws[i] < split[0] + split[1] and randoms is not None:
            out[i] = int(randoms[i])
            actions[int(i)] = "random"
        else:
            actions[int(i)] = "keep"
    return MaskingPlan(out, labels, actions)


def apply_mlp_mask(node_ids: Sequence[int], is_literal: Sequence[bool], p: float,
                   rng: np.random.Generator, mask_id: int) -> MaskingPlan:
    """Replace selected literal nodes with [MASK]_G; never random, never keep."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"masking probability {p} outside [0, 1]")
    out, labels, actions = list(node_ids), [IGNORE] * len(node_ids), {}
    chosen = (rng.random(len(node_ids)) < p) & np.asarray(is_literal, dtype=bool)
    for i in np.nonzero(chosen)[0]:
        labels[i] = node_ids[i]
        out[i] = mask_id
        actions[int(i)] = "mask"
    return MaskingPlan(out, labels, actions)


def sample_relation_pairs(n_nodes: int, edges: Iterable[tuple[int, int, int]], not_connected: int,
                          fraction: float, rng: np.random.Generator, cap: int = RC_PAIR_CAP,
                          balanced: bool = False) -> list[tuple[int, int, int]]:
    """Uniform sample of unordered node pairs (lower index first) with relation labels."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction {fraction} outside (0, 1]")
    if n_nodes < 2:
        return []
    rel = {(min(s, d), max(s, d)): r for s, d, r in edges}
    total = n_nodes * (n_nodes - 1) // 2
    k = min(max(1, math.ceil(fraction * total)), cap)
    if balanced:
        connected = sorted(rel)
        n_conn = min(len(connected), k // 2)
        picked = [connected[i] for i in rng.choice(len(connected), size=n_conn, replace=False)]
        rest = set(picked)
        out = [(i, j, rel[(i, j)]) for i, j in picked]
        while len(out) < k and len(rest) < total:
            i, j = sorted(rng.choice(n_nodes, size=2, replace=False))
            if (i, j) not in rest:
                rest.add((i, j))
                out.append((int(i), int(j), rel.get((i, j), not_connected)))
        return out
    flat = rng.choice(total, size=k, replace=False)
    iu, ju = np.triu_indices(n_nodes, k=1)
    return [(int(iu[f]), int(ju[f]), rel.get((int(iu[f]), int(ju[f])), not_connected)) for f in flat]


def build_alignment_batch(examples: Sequence[PairExample], p_replace: float,
                          rng: np.random.Generator) -> list[tuple[PairExample, int]]:
    """Swap each pair's text for another admission's with probability p_replace."""
    out = []
    n = len(examples)
    for i, ex in enumerate(examples):
        if rng.random() < p_replace:
            if n < 2:
                counters["alignment_skipped"] += 1
                out.append((ex, 1))
                continue
            j = int(rng.integers(n - 1))
            j = j + 1 if j >= i else j
            out.append((ex.with_text(examples[j]), 0))
        else:
            out.append((ex, 1))
    return out


class PretrainHeads(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d, std = cfg.hidden_size, cfg.init_std
        self.mlm = Linear(d, cfg.text_vocab_size, rng, std)
        self.mlp = Linear(d, cfg.graph_vocab_size, rng, std)
        self.rc = Linear(2 * d, max(cfg.num_relations, 1), rng, std)
        self.ap = Linear(2 * d, 2, rng, std)


@dataclass
class PretrainBatch:
    batch: PairBatch
    mlm_labels: np.ndarray
    mlp_labels: np.ndarray
    rc_pairs: np.ndarray          # (K, 4): batch index, node i, node j, relation label
    ap_labels: np.ndarray
    plans: list = field(default_factory=list)


def make_pretrain_batch(examples: Sequence[PairExample], vocab: Vocabularies, rng: np.random.Generator,
                        mlm_prob: float = 0.15, mlp_prob: float = 0.15, rc_fraction: float = 0.1,
                        p_replace: float = 0.5, rc_cap: int = RC_PAIR_CAP,
                        rc_balanced: bool = False) -> PretrainBatch:
    pairs = build_alignment_batch(examples, p_replace, rng)
    texts, nodes, mlm_l, mlp_l, rc, plans = [], [], [], [], [], []
    for k, (ex, aligned) in enumerate(pairs):
        tplan = apply_mlm_mask(ex.text_ids, mlm_prob, rng, len(vocab.text), vocab.text.mask_id,
                               vocab.text.special_ids)
        gplan = apply_mlp_mask(ex.node_ids, ex.is_literal(), mlp_prob, rng, vocab.graph.mask_id)
        texts.append(tplan.input_ids)
        nodes.append(gplan.input_ids)
        # masked content is only recoverable against the true partner
        mlm_l.append(tplan.labels if aligned else [IGNORE] * len(tplan.labels))
        mlp_l.append(gplan.labels if aligned else [IGNORE] * len(gplan.labels))
        for i, j, r in sample_relation_pairs(ex.n_nodes, ex.edges, vocab.relations.not_connected,
                                             rc_fraction, rng, rc_cap, rc_balanced):
            rc.append((k, i, j, r))
        plans.append((tplan, gplan))
    batch = collate([ex for ex, _ in pairs], vocab, text_ids=texts, node_ids=nodes)
    return PretrainBatch(batch, _pad_labels(mlm_l, batch.text_ids.shape[1]),
                         _pad_labels(mlp_l, batch.node_ids.shape[1]),
                         np.array(rc, dtype=np.int64).reshape(-1, 4),
                         np.array([a for _, a in pairs], dtype=np.int64), plans)


def _pad_labels(rows, width) -> np.ndarray:
    out = np.full((len(rows), width), IGNORE, dtype=np.int64)
    for k, r in enumerate(rows):
        out[k, :len(r)] = r
    return out


def task_losses(out: EncoderOutputs, heads: PretrainHeads, pb: PretrainBatch,
                active: Iterable[str]) -> dict[str, Tensor]:
    losses = {}
    active = set(active)
    if "mlm" in active:
        losses["mlm"] = ad.cross_entropy(heads.mlm(out.text), pb.mlm_labels.reshape(-1), IGNORE)
    if "mlp" in active:
        losses["mlp"] = ad.cross_entropy(heads.mlp(out.nodes), pb.mlp_labels.reshape(-1), IGNORE)
    if "rc" in active:
        if len(pb.rc_pairs):
            b, i, j, r = pb.rc_pairs.T
            nodes = out.nodes
            feats = ad.concat([nodes[b, i], nodes[b, j]], axis=1)
            losses["rc"] = ad.cross_entropy(heads.rc(feats), r)
        else:
            losses["rc"] = Tensor(0.0)
    if "ap" in active:
        losses["ap"] = ad.cross_entropy(heads.ap(out.pooled), pb.ap_labels)
    return losses


def pretrain_step(model: GraphTextModel, heads: PretrainHeads, pb: PretrainBatch,
                  active_tasks: Iterable[str], rng: np.random.Generator | None = None
                  ) -> tuple[dict[str, Tensor], Tensor]:
    """Forward all active objectives; total is their unweighted sum."""
    active = check_tasks(active_tasks)
    out = model(pb.batch, rng=rng)
    losses = task_losses(out, heads, pb, active)
    total = losses[active[0]]
    for t in active[1:]:
        total = total + losses[t]
    return losses, total


# hyperparameters carried through checkpoints so a reloaded estimator evaluates identically
_TRAIN_PARAMS = ("epochs", "batch_size", "lr", "mlm_prob", "mlp_prob", "rc_fraction", "p_replace", "rc_balanced",
                 "clip_norm", "seed")


class Pretrainer(BaseEstimator, TransformerMixin):
    """Pre-train the two-stream encoder on paired graph/text data.

    ``fit`` consumes a :class:`PairDataset`; ``transform`` returns the pooled
    [SUM]+[CLS] features of each pair.
    """

    def __init__(self, hidden_size=128, num_heads=4, text_layers=2, graph_layers=2, cross_layers=4,
                 intermediate_size=512, dropout=0.1, use_summary=True, use_init_embedding=False,
                 use_adjacency=True, tasks=TASKS, lr=1e-4, epochs=40, batch_size=16, mlm_prob=0.15,
                 mlp_prob=0.15, rc_fraction=0.1, p_replace=0.5, rc_balanced=False, clip_norm=1.0,
                 seed=0, init_weights=None, callback=None):
        self.hidden_size = hidden_size
        self.num_heads = num_heads
        self.text_layers = text_layers
        self.graph_layers = graph_layers
        self.cross_layers = cross_layers
        self.intermediate_size = intermediate_size
        self.dropout = dropout
        self.use_summary = use_summary
        self.use_init_embedding = use_init_embedding
        self.use_adjacency = use_adjacency
        self.tasks = tasks
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.mlm_prob = mlm_prob
        self.mlp_prob = mlp_prob
        self.rc_fraction = rc_fraction
        self.p_replace = p_replace
        self.rc_balanced = rc_balanced
        self.clip_norm = clip_norm
        self.seed = seed
        self.init_weights = init_weights
        self.callback = callback

    def model_config(self, vocab: Vocabularies) -> ModelConfig:
        return ModelConfig(
            hidden_size=self.hidden_size, num_heads=self.num_heads, text_layers=self.text_layers,
            graph_layers=self.graph_layers, cross_layers=self.cross_layers,
            intermediate_size=self.intermediate_size, dropout=self.dropout,
            use_summary=self.use_summary, use_init_embedding=self.use_init_embedding,
            use_adjacency=self.use_adjacency, text_vocab_size=len(vocab.text),
            graph_vocab_size=len(vocab.graph), num_relations=len(vocab.relations))

    def _init(self, vocab: Vocabularies):
        cfg = self.model_config(vocab)
        self.model_ = GraphTextModel(cfg, seed=self.seed)
        if self.init_weights is not None:
            from .model import import_weights
            self.imported_ = import_weights(self.model_, self.init_weights)
        self.heads_ = PretrainHeads(cfg, np.random.default_rng([self.seed, 1]))
        self.vocab_ = vocab
        self.tasks_ = check_tasks(self.tasks)
        self.history_ = []
        self.step_log_ = []
        self.epoch_ = 0

    def fit(self, X: PairDataset, y=None):
        check_pair_dataset(X)
        self._init(X.vocab)
        self.partial_fit(X, epochs=self.epochs)
        return self

    def partial_fit(self, X: PairDataset, y=None, epochs: int = 1):
        """Continue training for ``epochs`` more epochs (initialising if needed)."""
        check_pair_dataset(X)
        if not hasattr(self, "model_"):
            self._init(X.vocab)
        if not hasattr(self, "optimizer_"):
            self.optimizer_ = Adam(self.model_.parameters() + self.heads_.parameters(),
                                   lr=self.lr, clip_norm=self.clip_norm)
        for _ in range(epochs):
            self._run_epoch(X)
            if self.callback is not None and self.callback(self) is False:
                break
        return self

    def _run_epoch(self, X: PairDataset):
        epoch = self.epoch_
        order = np.random.default_rng([self.seed, epoch, 0]).permutation(len(X))
        self.model_.train()
        self.heads_.train()
        sums: dict[str, float] = {}
        n_steps = 0
        for step, start in enumerate(range(0, len(X), self.batch_size)):
            idx = order[start:start + self.batch_size]
            rng = np.random.default_rng([self.seed, epoch, step + 1])
            pb = make_pretrain_batch([X[i] for i in idx], X.vocab, rng, self.mlm_prob, self.mlp_prob,
                                     self.rc_fraction, self.p_replace if "ap" in self.tasks_ else 0.0,
                                     rc_balanced=self.rc_balanced)
            self.optimizer_.zero_grad()
            losses, total = pretrain_step(self.model_, self.heads_, pb, self.tasks_, rng)
            ad.backward(total)
            self.optimizer_.step()
            n_steps += 1
            entry = {"epoch": epoch, "step": step, **{k: float(v.data) for k, v in losses.items()},
                     "total": float(total.data)}
            self.step_log_.append(entry)
            for k, v in entry.items():
                if k not in ("epoch", "step"):
                    sums[k] = sums.get(k, 0.0) + v
            log.debug("%s", entry)
        record = {"epoch": epoch, **{k: v / n_steps for k, v in sums.items()}}
        self.history_.append(record)
        self.epoch_ += 1
        return record

    def encode(self, X: PairDataset, batch_size: int = 32, s2s: bool = False) -> list[EncoderOutputs]:
        check_is_fitted(self, "model_")
        self.model_.eval()
        outs = []
        with ad.no_grad():
            for start in range(0, len(X), batch_size):
                outs.append(self.model_(collate(X.examples[start:start + batch_size], X.vocab), s2s=s2s))
        return outs

    def transform(self, X: PairDataset) -> np.ndarray:
        return np.concatenate([o.pooled.data for o in self.encode(X)], axis=0)

    def alignment_accuracy(self, X: PairDataset, seed: int = 0) -> float:
        """AP accuracy over every pair aligned plus one misaligned copy each."""
        check_is_fitted(self, "model_")
        n = len(X)
        rng = np.random.default_rng(seed)
        shift = rng.integers(1, n) if n > 1 else 0
        pairs = [(ex, 1) for ex in X] + [(ex.with_text(X[(i + shift) % n]), 0) for i, ex in enumerate(X)
                                         if n > 1]
        correct = 0
        self.model_.eval()
        with ad.no_grad():
            for start in range(0, len(pairs), 32):
                chunk = pairs[start:start + 32]
                out = self.model_(collate([p for p, _ in chunk], X.vocab))
                pred = self.heads_.ap(out.pooled).data.argmax(axis=1)
                correct += int((pred == np.array([a for _, a in chunk])).sum())
        return correct / len(pairs)

    def score(self, X: PairDataset, y=None) -> float:
        return self.alignment_accuracy(X)

    def evaluate_losses(self, X: PairDataset, seed: int = 0) -> dict[str, float]:
        """Mean per-task losses under a fixed masking draw, dropout off."""
        check_is_fitted(self, "model_")
        self.model_.eval()
        sums, n = {}, 0
        with ad.no_grad():
            for step, start in enumerate(range(0, len(X), self.batch_size)):
                rng = np.random.default_rng([seed, step])
                pb = make_pretrain_batch(X.examples[start:start + self.batch_size], X.vocab, rng,
                                         self.mlm_prob, self.mlp_prob, self.rc_fraction,
                                         self.p_replace if "ap" in self.tasks_ else 0.0)
                losses, total = pretrain_step(self.model_, self.heads_, pb, self.tasks_)
                for k, v in losses.items():
                    sums[k] = sums.get(k, 0.0) + float(v.data)
                n += 1
        return {k: v / n for k, v in sums.items()}

    def save(self, path, meta: dict | None = None):
        check_is_fitted(self, "model_")
        heads = {f"heads/{k}": v for k, v in self.heads_.state_dict().items()}
        save_checkpoint(path, self.model_.config, self.model_.state_dict(), heads,
                        {"tasks": list(self.tasks_), "epochs_trained": self.epoch_,
                         "train_params": {k: self.get_params()[k] for k in _TRAIN_PARAMS}, **(meta or {})})

    @classmethod
    def load(cls, path, vocab: Vocabularies | None = None) -> "Pretrainer":
        cfg, state, extra, meta = load_checkpoint(path)
        est = cls(hidden_size=cfg.hidden_size, num_heads=cfg.num_heads, text_layers=cfg.text_layers,
                  graph_layers=cfg.graph_layers, cross_layers=cfg.cross_layers,
                  intermediate_size=cfg.intermediate_size, dropout=cfg.dropout,
                  use_summary=cfg.use_summary, use_init_embedding=cfg.use_init_embedding,
                  use_adjacency=cfg.use_adjacency, tasks=tuple(meta.get("tasks", TASKS)),
                  **meta.get("train_params", {}))
        est.model_ = GraphTextModel(cfg)
        est.model_.load_state_dict({k[len("model/"):]: v for k, v in state.items()})
        est.heads_ = PretrainHeads(cfg, np.random.default_rng(0))
        heads = {k[len("heads/"):]: v for k, v in extra.items() if k.startswith("heads/")}
        if heads:
            est.heads_.load_state_dict(heads)
        est.tasks_ = check_tasks(est.tasks)
        est.vocab_ = vocab
        est.history_ = []
        est.step_log_ = []
        est.epoch_ = int(meta.get("epochs_trained", 0))
        return est
