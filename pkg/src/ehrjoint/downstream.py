"""Fine-tuning heads, task protocols and decoding.

Tasks: cross-modal retrieval, binary outcome prediction, per-node error
detection, and note generation under a causal text mask.
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from . import autodiff as ad
from .autodiff import Tensor
from .data import IGNORE, PairBatch, PairDataset, PairExample, Vocabularies, collate
from .metrics import auprc, f1, hits_at_k, mrr, rank_of_true, rouge
from .model import GraphTextModel, ModelConfig, additive, causal_allowed, load_checkpoint, save_checkpoint
from .nn import Linear, Module
from .optim import Adam
from .pretrain import apply_mlm_mask
from .text import SECTION_DX, SECTION_PX, SECTION_RX, detokenize
from .validation import check_is_fitted, check_pair_dataset, check_probability

counters = {"corrupt_skipped": 0}


# ------------------------------------------------------------------ heads

class PairScoreHead(Module):
    """Two affine layers with tanh between, on the [SUM]+[CLS] feature."""

    def __init__(self, hidden: int, n_out: int, rng: np.random.Generator, std: float = 0.02):
        self.hidden = hidden
        self.dense = Linear(2 * hidden, hidden, rng, std)
        self.out = Linear(hidden, n_out, rng, std)

    def __call__(self, pooled: Tensor) -> Tensor:
        if pooled.shape[-1] != 2 * self.hidden:
            raise ad.ShapeError(f"pair head expects width {2 * self.hidden}, got {pooled.shape[-1]}")
        return self.out(ad.tanh(self.dense(pooled)))


class OvaHead(Module):
    """Per-node logit for one-versus-all classification."""

    def __init__(self, hidden: int, rng: np.random.Generator, std: float = 0.02):
        self.proj = Linear(hidden, 1, rng, std)

    def __call__(self, nodes: Tensor) -> Tensor:
        return self.proj(nodes)


@dataclass
class GenerationConfig:
    strategy: str = "greedy"
    p: float = 0.9
    max_length: int = 512
    stop_seps: int = 2
    sep_mask_prob: float = 0.5
    sections: tuple[int, ...] = (SECTION_DX, SECTION_PX)

    def __post_init__(self):
        if self.strategy not in ("greedy", "top_p"):
            raise ValueError(f"strategy must be greedy or top_p, got {self.strategy!r}")
        check_probability(self.p, "p", open_low=True)
        if self.stop_seps not in (1, 2):
            raise ValueError("stop_seps must be 1 or 2")
        if self.max_length < 2:
            raise ValueError("max_length must be at least 2")

    @classmethod
    def for_variant(cls, variant: str, **kw) -> "GenerationConfig":
        if variant == "rx":
            return cls(**{"strategy": "top_p", "stop_seps": 1, "sections": (SECTION_RX,), **kw})
        return cls(**{"strategy": "greedy", "stop_seps": 2, "sections": (SECTION_DX, SECTION_PX), **kw})


# ------------------------------------------------------------------ scoring

def _forward(model: GraphTextModel, examples: Sequence[PairExample], vocab: Vocabularies, s2s=False):
    return model(collate(examples, vocab), s2s=s2s)


def alignment_score(model: GraphTextModel, head: PairScoreHead, examples: Sequence[PairExample],
                    vocab: Vocabularies, batch_size: int = 64) -> np.ndarray:
    """P(aligned) for each pair, softmax over the two head logits."""
    model.eval()
    out = []
    with ad.no_grad():
        for start in range(0, len(examples), batch_size):
            logits = head(_forward(model, examples[start:start + batch_size], vocab).pooled).data
            out.append(np.exp(ad.log_softmax_np(logits))[:, 1])
    return np.concatenate(out) if out else np.zeros(0)


@dataclass
class RetrievalOutcome:
    order: list[int]          # candidate indices, best first
    rank: int                 # 1-based rank of the true partner
    scores: np.ndarray


def retrieve(scores, true_index: int) -> RetrievalOutcome:
    """Rank a scored pool; ties go to the candidate earlier in pool order."""
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        raise ValueError("empty candidate pool")
    order = sorted(range(s.size), key=lambda j: (-s[j], j))
    return RetrievalOutcome(order, rank_of_true(s, true_index), s)


def candidate_pairs(query: PairExample, pool: Sequence[PairExample], direction: str) -> list[PairExample]:
    """text-ret: graph query against candidate texts; graph-ret: the reverse."""
    if direction == "text":
        return [query.with_text(c) for c in pool]
    if direction == "graph":
        return [c.with_text(query) for c in pool]
    raise ValueError(f"direction must be 'text' or 'graph', got {direction!r}")


def predict_binary(model: GraphTextModel, head: PairScoreHead, examples: Sequence[PairExample],
                   vocab: Vocabularies, batch_size: int = 64) -> np.ndarray:
    model.eval()
    out = []
    with ad.no_grad():
        for start in range(0, len(examples), batch_size):
            logits = head(_forward(model, examples[start:start + batch_size], vocab).pooled).data
            out.append(ad._sigmoid(logits[:, 0]))
    return np.concatenate(out) if out else np.zeros(0)


# ------------------------------------------------------------------ corruption

def literal_pools(examples: Sequence[PairExample], vocab: Vocabularies | None = None) -> dict[str, list[int]]:
    """Literal graph ids observed per literal type."""
    pools: dict[str, set[int]] = {}
    for ex in examples:
        for g, t in zip(ex.node_ids, ex.literal_types):
            if t is not None:
                pools.setdefault(t, set()).add(int(g))
    return {t: sorted(v) for t, v in sorted(pools.items())}


def corrupt_graph(example: PairExample, p: float, pools: dict[str, Sequence[int]], rng: np.random.Generator,
                  types: Sequence[str] | None = None, avoid_present: bool = False
                  ) -> tuple[PairExample, np.ndarray]:
    """Replace each literal (of an eligible type) with probability p by a
    different literal of the same type.  Returns the new pair and 0/1 labels."""
    check_probability(p)
    nodes = list(example.node_ids)
    labels = np.zeros(len(nodes), dtype=np.int64)
    present = set(nodes) if avoid_present else set()
    for i, (g, t) in enumerate(zip(example.node_ids, example.literal_types)):
        if t is None or (types is not None and t not in types):
            continue
        if rng.random() >= p:
            continue
        choices = [c for c in pools.get(t, ()) if c != g and c not in present]
        if not choices:
            counters["corrupt_skipped"] += 1
            continue
        nodes[i] = int(choices[int(rng.integers(len(choices)))])
        labels[i] = 1
    return replace(example, node_ids=nodes), labels


def corrupt_dataset(X: PairDataset, p: float, seed: int, pools=None, types=None, avoid_present=False):
    pools = literal_pools(X.examples) if pools is None else pools
    out, labels = [], []
    for i, ex in enumerate(X):
        c, y = corrupt_graph(ex, p, pools, np.random.default_rng([seed, i]), types, avoid_present)
        out.append(c)
        labels.append(y)
    return PairDataset(out, X.vocab), labels


def _node_logits(model, head, batch: PairBatch, rng=None) -> Tensor:
    out = model(batch, rng=rng)
    return head(out.nodes)[..., 0]


def detect_errors(model: GraphTextModel, head: OvaHead, examples: Sequence[PairExample],
                  vocab: Vocabularies, batch_size: int = 64) -> list[np.ndarray]:
    """Per-node corruption probability, one array of length N_v per pair."""
    model.eval()
    out = []
    with ad.no_grad():
        for start in range(0, len(examples), batch_size):
            chunk = examples[start:start + batch_size]
            probs = ad._sigmoid(_node_logits(model, head, collate(chunk, vocab)).data)
            out += [probs[k, :ex.n_nodes] for k, ex in enumerate(chunk)]
    return out


def node_loss(logits: Tensor, labels: Sequence[np.ndarray], valid: np.ndarray) -> Tensor:
    """Mean BCE over real graph positions."""
    target = np.zeros(valid.shape)
    for k, y in enumerate(labels):
        target[k, :len(y)] = y
    return ad.binary_cross_entropy_with_logits(logits.reshape(-1), target.reshape(-1),
                                               valid.reshape(-1).astype(float))


# ------------------------------------------------------------------ generation

@dataclass
class S2SMasks:
    text_self: np.ndarray       # (T, T) additive, causal
    graph_self: np.ndarray      # (G, G) additive, unrestricted
    text_to_graph: np.ndarray   # (T, G) additive, unrestricted
    graph_to_text: None = None  # severed


def build_s2s_mask(graph_len: int, text_len: int, negative: float = ad.MASK_VALUE) -> S2SMasks:
    if graph_len < 1 or text_len < 1:
        raise ValueError("lengths must be positive")
    causal = causal_allowed(np.ones((1, text_len), dtype=bool))[0]
    return S2SMasks(additive(causal, negative), np.zeros((graph_len, graph_len)),
                    np.zeros((text_len, graph_len)))


def apply_generation_mask(ids: Sequence[int], vocab: Vocabularies, rng: np.random.Generator,
                          mlm_prob: float = 0.15, sep_prob: float = 0.5):
    """Standard text masking plus each [SEP] masked with probability ``sep_prob``."""
    plan = apply_mlm_mask(ids, mlm_prob, rng, len(vocab.text), vocab.text.mask_id, vocab.text.special_ids)
    out, labels = list(plan.input_ids), list(plan.labels)
    sep = vocab.text.sep_id
    for i, t in enumerate(ids):
        if t == sep and rng.random() < sep_prob:
            out[i] = vocab.text.mask_id
            labels[i] = sep
    return out, labels


def generation_loss(model: GraphTextModel, head: Linear, examples: Sequence[PairExample], vocab: Vocabularies,
                    masked_ids: Sequence[Sequence[int]], labels: Sequence[Sequence[int]], rng=None) -> Tensor:
    batch = collate(examples, vocab, text_ids=masked_ids)
    out = model(batch, s2s=True, rng=rng)
    width = batch.text_ids.shape[1]
    target = np.full((len(examples), width), IGNORE, dtype=np.int64)
    for k, y in enumerate(labels):
        target[k, :len(y)] = y
    return ad.cross_entropy(head(out.text), target.reshape(-1), IGNORE)


def finetune_generation_step(model, head, examples, vocab, rng, mlm_prob=0.15, sep_prob=0.5):
    masked, labels = zip(*(apply_generation_mask(ex.text_ids, vocab, rng, mlm_prob, sep_prob) for ex in examples))
    return generation_loss(model, head, examples, vocab, masked, labels, rng)


def nucleus_support(probs: np.ndarray, p: float) -> np.ndarray:
    """Smallest probability-sorted prefix whose mass reaches p (ties by id)."""
    order = np.argsort(-probs, kind="stable")
    cum = np.cumsum(probs[order])
    k = int(np.searchsorted(cum, p * cum[-1] - 1e-15)) + 1
    return order[:max(1, min(k, order.size))]


def choose_token(logits: np.ndarray, cfg: GenerationConfig, rng: np.random.Generator | None,
                 banned: Sequence[int] = ()) -> int:
    logits = np.array(logits, dtype=np.float64)
    logits[list(banned)] = -np.inf
    if cfg.strategy == "greedy":
        return int(np.argmax(logits))
    probs = np.exp(logits - logits.max())
    probs /= probs.sum()
    support = nucleus_support(probs, cfg.p)
    if support.size == 1:
        return int(support[0])
    w = probs[support] / probs[support].sum()
    return int(support[rng.choice(support.size, p=w)])


@dataclass
class GenerationResult:
    ids: list[int]
    text: str
    truncated: bool
    sections: list[int] = field(default_factory=list)


def decode(step: Callable[[list[int], list[int]], np.ndarray], vocab: Vocabularies, cfg: GenerationConfig,
           rng: np.random.Generator | None = None) -> GenerationResult:
    """Autoregressive loop.  ``step(ids, sections)`` returns logits for the
    final position of ``ids`` (which ends in [MASK])."""
    v = vocab.text
    banned = (v.cls_id, v.mask_id, v.pad_id)
    ids, secs = [v.cls_id], [cfg.sections[0]]
    sec_idx, seps = 0, 0
    truncated = True
    while len(ids) < cfg.max_length:
        logits = step(ids + [v.mask_id], secs + [cfg.sections[sec_idx]])
        tok = choose_token(logits, cfg, rng, banned)
        ids.append(tok)
        secs.append(cfg.sections[sec_idx])
        if tok == v.sep_id:
            seps += 1
            if seps >= cfg.stop_seps:
                truncated = False
                break
            sec_idx = min(sec_idx + 1, len(cfg.sections) - 1)
    return GenerationResult(ids, detokenize(ids, v), truncated, secs)


def generate_note(model: GraphTextModel, head: Linear, example: PairExample, vocab: Vocabularies,
                  cfg: GenerationConfig, rng: np.random.Generator | None = None) -> GenerationResult:
    """Generate the note for ``example``'s graph (its own text is ignored)."""
    model.eval()
    max_len = min(cfg.max_length, model.config.max_text_len)
    cfg = replace(cfg, max_length=max_len)

    def step(ids, secs):
        ex = replace(example, text_ids=ids, section_ids=secs)
        with ad.no_grad():
            out = model(collate([ex], vocab), s2s=True)
            return head(out.text[:, -1, :]).data[0]

    return decode(step, vocab, cfg, rng)


# ------------------------------------------------------------------ estimators

def _resolve_backbone(pretrained, model_params: dict | None, vocab: Vocabularies, seed: int):
    """(model, pretrain heads or None) from a Pretrainer, a checkpoint path, or fresh."""
    from .pretrain import Pretrainer
    if isinstance(pretrained, Pretrainer):
        check_is_fitted(pretrained, "model_")
        return copy.deepcopy(pretrained.model_), copy.deepcopy(pretrained.heads_)
    if pretrained is not None:
        p = Pretrainer.load(pretrained)
        return p.model_, p.heads_
    params = dict(model_params or {})
    cfg = ModelConfig(text_vocab_size=len(vocab.text), graph_vocab_size=len(vocab.graph),
                      num_relations=len(vocab.relations), **params)
    return GraphTextModel(cfg, seed=seed), None


class _FineTuner(BaseEstimator):
    """Shared training loop; subclasses define the head and per-batch loss."""

    def _setup(self, X: PairDataset):
        check_pair_dataset(X)
        self.model_, pre_heads = _resolve_backbone(self.pretrained, self.model_params, X.vocab, self.seed)
        self.head_ = self._make_head(self.model_.config, np.random.default_rng([self.seed, 2]), pre_heads)
        self.vocab_ = X.vocab
        self.history_ = []
        self.epoch_ = 0
        self.optimizer_ = Adam(self.model_.parameters() + self.head_.parameters(), lr=self.lr,
                               clip_norm=self.clip_norm)

    def fit(self, X: PairDataset, y=None):
        self._setup(X)
        for _ in range(self.epochs):
            self._epoch(X)
            if self.callback is not None and self.callback(self) is False:
                break
        return self

    def _epoch(self, X: PairDataset):
        epoch = self.epoch_
        order = np.random.default_rng([self.seed, epoch, 0]).permutation(len(X))
        self.model_.train()
        self.head_.train()
        total, steps = 0.0, 0
        for step, start in enumerate(range(0, len(X), self.batch_size)):
            rng = np.random.default_rng([self.seed, epoch, step + 1])
            idx = order[start:start + self.batch_size]
            self.optimizer_.zero_grad()
            loss = self._loss([X[i] for i in idx], idx, X, rng)
            ad.backward(loss)
            self.optimizer_.step()
            total += float(loss.data)
            steps += 1
        self.history_.append({"epoch": epoch, "loss": total / max(steps, 1)})
        self.epoch_ += 1

    def save(self, path, meta: dict | None = None):
        check_is_fitted(self, "model_")
        head = {f"head/{k}": v for k, v in self.head_.state_dict().items()}
        info = {"estimator": type(self).__name__, "params": _jsonable(self.get_params()),
                "epochs_trained": self.epoch_, **(meta or {})}
        save_checkpoint(path, self.model_.config, self.model_.state_dict(), head, info)

    @classmethod
    def load(cls, path, vocab: Vocabularies):
        cfg, state, extra, meta = load_checkpoint(path)
        params = {k: v for k, v in meta.get("params", {}).items() if k in cls._get_param_names()}
        params.pop("pretrained", None)
        params.pop("callback", None)
        est = cls(**params)
        est.model_ = GraphTextModel(cfg)
        est.model_.load_state_dict({k[len("model/"):]: v for k, v in state.items()})
        est.head_ = est._make_head(cfg, np.random.default_rng(0), None)
        est.head_.load_state_dict({k[len("head/"):]: v for k, v in extra.items() if k.startswith("head/")})
        est.vocab_ = vocab
        est.history_ = []
        est.epoch_ = int(meta.get("epochs_trained", 0))
        return est


def _jsonable(params: dict) -> dict:
    out = {}
    for k, v in params.items():
        if v is None or isinstance(v, (bool, int, float, str)):
            out[k] = v
        elif isinstance(v, (list, tuple)):
            out[k] = list(v)
        elif isinstance(v, dict):
            out[k] = v
    return out


class CrossModalRetriever(_FineTuner):
    """Pair classifier trained with one in-batch negative per positive; ranks pools."""

    def __init__(self, pretrained=None, model_params=None, lr=1e-5, epochs=20, batch_size=16, negatives=1,
                 clip_norm=1.0, seed=0, callback=None):
        self.pretrained = pretrained
        self.model_params = model_params
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.negatives = negatives
        self.clip_norm = clip_norm
        self.seed = seed
        self.callback = callback

    def _make_head(self, cfg, rng, pre_heads):
        return PairScoreHead(cfg.hidden_size, 2, rng, cfg.init_std)

    def _loss(self, examples, idx, X, rng):
        n = len(examples)
        pairs, labels = list(examples), [1] * n
        if n > 1:
            for i, ex in enumerate(examples):
                for _ in range(self.negatives):
                    j = int(rng.integers(n - 1))
                    j = j + 1 if j >= i else j
                    pairs.append(ex.with_text(examples[j]))
                    labels.append(0)
        out = self.model_(collate(pairs, X.vocab), rng=rng)
        return ad.cross_entropy(self.head_(out.pooled), np.array(labels))

    def score_pool(self, query: PairExample, pool: Sequence[PairExample], direction: str = "text") -> np.ndarray:
        check_is_fitted(self, "model_")
        return alignment_score(self.model_, self.head_, candidate_pairs(query, pool, direction), self.vocab_)

    def rank(self, X: PairDataset, direction: str = "text") -> np.ndarray:
        """Rank of the true partner for every query, the pool being all of X."""
        return np.array([retrieve(self.score_pool(q, X.examples, direction), i).rank for i, q in enumerate(X)])

    def evaluate(self, X: PairDataset, direction: str = "text") -> dict[str, float]:
        r = self.rank(X, direction)
        return {"mrr": mrr(r), "hits@1": hits_at_k(r, 1), "hits@5": hits_at_k(r, 5), "hits@10": hits_at_k(r, 10)}

    def predict_proba(self, X: PairDataset) -> np.ndarray:
        check_is_fitted(self, "model_")
        p = alignment_score(self.model_, self.head_, X.examples, X.vocab)
        return np.stack([1 - p, p], axis=1)

    def score(self, X: PairDataset, y=None) -> float:
        return self.evaluate(X)["mrr"]


class TemporalPredictor(_FineTuner, ClassifierMixin):
    """Binary outcome from the pooled pair feature (e.g. mortality, readmission)."""

    def __init__(self, pretrained=None, model_params=None, label="mortality", lr=1e-4, epochs=20, batch_size=16,
                 clip_norm=1.0, seed=0, callback=None):
        self.pretrained = pretrained
        self.model_params = model_params
        self.label = label
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.clip_norm = clip_norm
        self.seed = seed
        self.callback = callback

    def _make_head(self, cfg, rng, pre_heads):
        return PairScoreHead(cfg.hidden_size, 1, rng, cfg.init_std)

    def _targets(self, examples) -> np.ndarray:
        try:
            return np.array([float(ex.labels[self.label]) for ex in examples])
        except KeyError:
            raise ValueError(f"pairs lack the {self.label!r} label") from None

    def fit(self, X: PairDataset, y=None):
        self._targets(X.examples)
        self.classes_ = np.array([0, 1])
        return super().fit(X, y)

    def _loss(self, examples, idx, X, rng):
        out = self.model_(collate(examples, X.vocab), rng=rng)
        return ad.binary_cross_entropy_with_logits(self.head_(out.pooled).reshape(-1), self._targets(examples))

    def predict_proba(self, X: PairDataset) -> np.ndarray:
        check_is_fitted(self, "model_")
        p = predict_binary(self.model_, self.head_, X.examples, X.vocab)
        return np.stack([1 - p, p], axis=1)

    def predict(self, X: PairDataset) -> np.ndarray:
        return (self.predict_proba(X)[:, 1] >= 0.5).astype(int)

    def evaluate(self, X: PairDataset) -> dict[str, float]:
        y = self._targets(X.examples)
        p = self.predict_proba(X)[:, 1]
        return {"auprc": auprc(p, y) if y.sum() > 0 else float("nan"), "f1": f1(p >= 0.5, y)}

    def score(self, X: PairDataset, y=None) -> float:
        return self.evaluate(X)["auprc"]


class ErrorDetector(_FineTuner):
    """Per-node detector of replaced literals; corruption is redrawn every epoch."""

    def __init__(self, pretrained=None, model_params=None, corruption=0.25, types=None, avoid_present=True,
                 lr=1e-5, epochs=20, batch_size=16, clip_norm=1.0, seed=0, callback=None):
        self.pretrained = pretrained
        self.model_params = model_params
        self.corruption = corruption
        self.types = types
        self.avoid_present = avoid_present
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.clip_norm = clip_norm
        self.seed = seed
        self.callback = callback

    def _make_head(self, cfg, rng, pre_heads):
        return OvaHead(cfg.hidden_size, rng, cfg.init_std)

    def fit(self, X: PairDataset, y=None):
        self.pools_ = literal_pools(X.examples)
        return super().fit(X, y)

    def _loss(self, examples, idx, X, rng):
        corrupted, labels = zip(*(corrupt_graph(ex, self.corruption, self.pools_, rng, self.types,
                                                self.avoid_present) for ex in examples))
        batch = collate(corrupted, X.vocab)
        return node_loss(_node_logits(self.model_, self.head_, batch, rng), labels, batch.node_valid)

    def corrupt(self, X: PairDataset, seed: int | None = None):
        """Deterministic held-out corruption (pools from training data when fitted)."""
        pools = getattr(self, "pools_", None)
        return corrupt_dataset(X, self.corruption, self.seed + 10_000 if seed is None else seed, pools,
                               self.types, self.avoid_present)

    def predict_proba(self, X: PairDataset) -> list[np.ndarray]:
        check_is_fitted(self, "model_")
        return detect_errors(self.model_, self.head_, X.examples, X.vocab)

    def predict(self, X: PairDataset) -> list[np.ndarray]:
        return [(p >= 0.5).astype(int) for p in self.predict_proba(X)]

    def evaluate(self, X: PairDataset, labels: Sequence[np.ndarray]) -> dict[str, float]:
        pred = np.concatenate(self.predict(X))
        y = np.concatenate(labels)
        return {"f1": f1(pred, y), "auprc": auprc(np.concatenate(self.predict_proba(X)), y) if y.sum() else float("nan")}

    def score(self, X: PairDataset, y=None) -> float:
        if y is None:
            X, y = self.corrupt(X)
        return self.evaluate(X, y)["f1"]


class NoteGenerator(_FineTuner):
    """Causal-text fine-tuning and decoding of notes from graphs."""

    def __init__(self, pretrained=None, model_params=None, lr=3e-5, epochs=30, batch_size=16, mlm_prob=0.15,
                 sep_mask_prob=0.5, strategy="greedy", top_p=0.9, stop_seps=2, sections=(SECTION_DX, SECTION_PX),
                 max_length=512, clip_norm=1.0, seed=0, callback=None):
        self.pretrained = pretrained
        self.model_params = model_params
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.mlm_prob = mlm_prob
        self.sep_mask_prob = sep_mask_prob
        self.strategy = strategy
        self.top_p = top_p
        self.stop_seps = stop_seps
        self.sections = sections
        self.max_length = max_length
        self.clip_norm = clip_norm
        self.seed = seed
        self.callback = callback

    def _make_head(self, cfg, rng, pre_heads):
        head = Linear(cfg.hidden_size, cfg.text_vocab_size, rng, cfg.init_std)
        if pre_heads is not None:
            head.load_state_dict(pre_heads.mlm.state_dict())
        return head

    def _loss(self, examples, idx, X, rng):
        return finetune_generation_step(self.model_, self.head_, examples, X.vocab, rng, self.mlm_prob,
                                        self.sep_mask_prob)

    def generation_config(self, **overrides) -> GenerationConfig:
        kw = dict(strategy=self.strategy, p=self.top_p, stop_seps=self.stop_seps, sections=tuple(self.sections),
                  max_length=self.max_length, sep_mask_prob=self.sep_mask_prob)
        kw.update(overrides)
        return GenerationConfig(**kw)

    def generate(self, X: PairDataset, cfg: GenerationConfig | None = None, seed: int | None = None
                 ) -> list[GenerationResult]:
        check_is_fitted(self, "model_")
        cfg = cfg or self.generation_config()
        seed = self.seed if seed is None else seed
        return [generate_note(self.model_, self.head_, ex, X.vocab, cfg, np.random.default_rng([seed, i]))
                for i, ex in enumerate(X)]

    def evaluate(self, X: PairDataset, cfg: GenerationConfig | None = None) -> dict[str, float]:
        results = self.generate(X, cfg)
        refs = [detokenize(ex.text_ids, X.vocab.text) for ex in X]
        return {"rouge2": float(np.mean([rouge(r.text, ref, "RG2") for r, ref in zip(results, refs)])),
                "rougeL": float(np.mean([rouge(r.text, ref, "RGL") for r, ref in zip(results, refs)]))}

    def score(self, X: PairDataset, y=None) -> float:
        return self.evaluate(X)["rougeL"]


def write_predictions(records: Sequence[dict], path):
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
