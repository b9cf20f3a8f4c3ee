"""Two-stream graph/text encoder with a cross-modal encoder on top.

Text stream: token + position + section embeddings, ``text_layers`` of
self-attention.  Graph stream: node + position embeddings, ``graph_layers``
of adjacency-masked self-attention, plus a summary vector that attends over
the raw description token embeddings.  The cross-modal encoder stacks blocks
of (cross-attention both ways, self-attention, feed-forward).
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import MASK_VALUE, Tensor
from .data import PairBatch
from .graph import GRAPH_RESERVED
from .nn import AttentionBlock, Embedding, FeedForward, Module, TransformerLayer

CHECKPOINT_FORMAT = "ehrjoint-checkpoint-v1"
SUM_ID = GRAPH_RESERVED.index("[SUM]")


@dataclass
class ModelConfig:
    hidden_size: int = 128
    num_heads: int = 4
    text_layers: int = 2
    graph_layers: int = 2
    cross_layers: int = 4
    intermediate_size: int = 512
    dropout: float = 0.1
    use_summary: bool = True
    use_init_embedding: bool = False
    use_adjacency: bool = True
    text_vocab_size: int = 0
    graph_vocab_size: int = 0
    num_relations: int = 0
    num_sections: int = 3
    max_text_len: int = 512
    max_nodes: int = 768
    mask_value: float = MASK_VALUE
    init_std: float = 0.02
    layer_norm_eps: float = 1e-12

    def __post_init__(self):
        if self.hidden_size % self.num_heads:
            raise ValueError(f"hidden_size {self.hidden_size} not divisible by num_heads {self.num_heads}")
        for name in ("hidden_size", "num_heads", "intermediate_size", "cross_layers"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("text_layers", "graph_layers"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @property
    def head_dim(self) -> int:
        return self.hidden_size // self.num_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class EncoderOutputs:
    text: Tensor                    # (B, Lt, d)
    graph: Tensor                   # (B, 1 + Lg, d); position 0 is the summary slot
    summary: Tensor                 # (B, d), s fed to the cross-modal encoder
    graph_uni: Tensor               # (B, Lg, d), graph encoder output before cross-modal
    text_uni: Tensor
    attentions: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def pooled(self) -> Tensor:
        """[SUM] state concatenated with [CLS] state, (B, 2d)."""
        return ad.concat([self.graph[:, 0, :], self.text[:, 0, :]], axis=1)

    @property
    def nodes(self) -> Tensor:
        return self.graph[:, 1:, :]


def additive(allowed: np.ndarray, negative: float = MASK_VALUE) -> np.ndarray:
    return np.where(allowed, 0.0, negative)


def key_mask(valid: np.ndarray, negative: float = MASK_VALUE) -> np.ndarray:
    """(B, L) validity -> (B, 1, 1, L) additive key mask."""
    return additive(valid[:, None, None, :], negative)


def causal_allowed(valid: np.ndarray) -> np.ndarray:
    """(B, L) -> (B, L, L): position t may attend to valid positions <= t."""
    n = valid.shape[1]
    tri = np.tril(np.ones((n, n), dtype=bool))
    return tri[None] & valid[:, None, :]


class CrossModalBlock(Module):
    def __init__(self, cfg: ModelConfig, rng):
        args = (cfg.hidden_size, cfg.num_heads, rng, cfg.init_std, cfg.dropout, cfg.layer_norm_eps)
        self.cross_text = AttentionBlock(*args)    # text queries graph
        self.cross_graph = AttentionBlock(*args)   # graph queries text
        self.self_text = AttentionBlock(*args)
        self.self_graph = AttentionBlock(*args)
        ffn = (cfg.hidden_size, cfg.intermediate_size, rng, cfg.init_std, cfg.dropout, cfg.layer_norm_eps)
        self.ffn_text = FeedForward(*ffn)
        self.ffn_graph = FeedForward(*ffn)


class GraphTextModel(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        if min(cfg.text_vocab_size, cfg.graph_vocab_size) <= 0:
            raise ValueError("vocabulary sizes must be set before building the model")
        self.config = cfg
        rng = np.random.default_rng(seed)
        d, std = cfg.hidden_size, cfg.init_std
        self.word_embeddings = Embedding(cfg.text_vocab_size, d, rng, std)
        self.text_positions = Embedding(cfg.max_text_len, d, rng, std)
        self.section_embeddings = Embedding(cfg.num_sections, d, rng, std)
        self.node_embeddings = Embedding(cfg.graph_vocab_size, d, rng, std)
        self.node_positions = Embedding(cfg.max_nodes, d, rng, std)
        layer = (d, cfg.num_heads, cfg.intermediate_size, rng, std, cfg.dropout, cfg.layer_norm_eps)
        self.text_encoder = [TransformerLayer(*layer) for _ in range(cfg.text_layers)]
        self.graph_encoder = [TransformerLayer(*layer) for _ in range(cfg.graph_layers)]
        self.summary_encoder = ([TransformerLayer(*layer) for _ in range(cfg.graph_layers)]
                                if cfg.use_summary else [])
        self.cross_encoder = [CrossModalBlock(cfg, rng) for _ in range(cfg.cross_layers)]

    # ------------------------------------------------------------ embeddings

    def embed_text(self, text_ids, section_ids, rng=None) -> Tensor:
        n = text_ids.shape[1]
        if n > self.config.max_text_len:
            raise ValueError(f"text length {n} exceeds {self.config.max_text_len}")
        h = (self.word_embeddings(text_ids)
             + self.text_positions(np.arange(n))
             + self.section_embeddings(section_ids))
        return ad.dropout(h, self.config.dropout, rng, self.training)

    def embed_graph(self, node_ids, desc_ids=None, desc_mean=None, literal=None, rng=None) -> Tensor:
        n = node_ids.shape[1]
        if n > self.config.max_nodes:
            raise ValueError(f"graph of {n} nodes exceeds {self.config.max_nodes}")
        nodes = self.node_embeddings(node_ids)
        if self.config.use_init_embedding and desc_ids is not None:
            mean_desc = Tensor(desc_mean) @ self.word_embeddings(desc_ids)
            keep = (~literal)[..., None].astype(float)
            nodes = nodes * keep + mean_desc
        h = nodes + self.node_positions(np.arange(n))
        return ad.dropout(h, self.config.dropout, rng, self.training)

    # ------------------------------------------------------------ encoders

    def text_encode(self, h: Tensor, mask: np.ndarray, rng=None, attn=None) -> Tensor:
        for i, layer in enumerate(self.text_encoder):
            h = layer(h, h, mask, rng)
            if attn is not None:
                attn[f"text.{i}"] = layer.attn.attention.last_attention
        return h

    def graph_encode(self, h: Tensor, graph_mask: np.ndarray, s: Tensor, h_d: Tensor | None,
                     desc_mask: np.ndarray | None, rng=None, attn=None) -> tuple[Tensor, Tensor]:
        for i, layer in enumerate(self.graph_encoder):
            h = layer(h, h, graph_mask, rng)
            if attn is not None:
                attn[f"graph.{i}"] = layer.attn.attention.last_attention
        if self.config.use_summary and h_d is not None:
            for i, layer in enumerate(self.summary_encoder):
                s = layer(s, h_d, desc_mask, rng)
                if attn is not None:
                    attn[f"summary.{i}"] = layer.attn.attention.last_attention
        return h, s

    def cross_encode(self, o_t: Tensor, o_g: Tensor, t_key: np.ndarray, g_key: np.ndarray,
                     t_self: np.ndarray, g_self: np.ndarray, s2s: bool, rng=None, attn=None):
        for i, blk in enumerate(self.cross_encoder):
            new_t = blk.cross_text(o_t, o_g, g_key, rng)
            if attn is not None:
                attn[f"cross.{i}.text_to_graph"] = blk.cross_text.attention.last_attention
            if s2s:
                new_g = o_g
            else:
                new_g = blk.cross_graph(o_g, o_t, t_key, rng)
                if attn is not None:
                    attn[f"cross.{i}.graph_to_text"] = blk.cross_graph.attention.last_attention
            o_t = blk.ffn_text(blk.self_text(new_t, new_t, t_self, rng), rng)
            o_g = blk.ffn_graph(blk.self_graph(new_g, new_g, g_self, rng), rng)
            if attn is not None:
                attn[f"cross.{i}.text_self"] = blk.self_text.attention.last_attention
                attn[f"cross.{i}.graph_self"] = blk.self_graph.attention.last_attention
        return o_t, o_g

    # ------------------------------------------------------------ full pass

    def __call__(self, batch: PairBatch, s2s: bool = False, retain_attention: bool = False,
                 rng: np.random.Generator | None = None) -> EncoderOutputs:
        return self.forward(batch, s2s, retain_attention, rng)

    def forward(self, batch: PairBatch, s2s: bool = False, retain_attention: bool = False,
                rng: np.random.Generator | None = None) -> EncoderOutputs:
        cfg = self.config
        neg = cfg.mask_value
        b = batch.size
        attn = {} if retain_attention else None

        if s2s:
            text_self = additive(causal_allowed(batch.text_valid), neg)[:, None]
        else:
            text_self = key_mask(batch.text_valid, neg)
        text_keys = key_mask(batch.text_valid, neg)
        if cfg.use_adjacency:
            graph_mask = additive(batch.adjacency, neg)[:, None]
        else:
            graph_mask = key_mask(batch.node_valid, neg)
        stream_valid = np.concatenate([np.ones((b, 1), dtype=bool), batch.node_valid], axis=1)
        graph_keys = key_mask(stream_valid, neg)

        h_t = self.text_encode(self.embed_text(batch.text_ids, batch.section_ids, rng),
                               text_self, rng, attn)
        h_g0 = self.embed_graph(batch.node_ids, batch.desc_ids, batch.desc_mean,
                                batch.node_is_literal, rng)
        s0 = self.node_embeddings(np.full((b, 1), SUM_ID))
        h_d = self.word_embeddings(batch.desc_ids) if cfg.use_summary else None
        h_g, s = self.graph_encode(h_g0, graph_mask, s0, h_d, key_mask(batch.desc_valid, neg), rng, attn)

        o_g0 = ad.concat([s, h_g], axis=1)
        o_t, o_g = self.cross_encode(h_t, o_g0, text_keys, graph_keys, text_self, graph_keys,
                                     s2s, rng, attn)
        return EncoderOutputs(o_t, o_g, s[:, 0, :], h_g, h_t, attn or {})

    # ------------------------------------------------------------ persistence

    def save(self, path, extra: dict[str, np.ndarray] | None = None, meta: dict | None = None):
        save_checkpoint(path, self.config, self.state_dict(), extra, meta)

    @classmethod
    def load(cls, path) -> "GraphTextModel":
        cfg, state, _, _ = load_checkpoint(path)
        model = cls(cfg)
        model.load_state_dict({k[len("model/"):]: v for k, v in state.items() if k.startswith("model/")})
        return model


def save_checkpoint(path, cfg: ModelConfig, model_state: dict[str, np.ndarray],
                    extra: dict[str, np.ndarray] | None = None, meta: dict | None = None):
    """npz container: parameter path -> float64 array, plus JSON config/meta."""
    arrays = {f"model/{k}": np.asarray(v, dtype=np.float64) for k, v in model_state.items()}
    for k, v in (extra or {}).items():
        arrays[f"extra/{k}"] = np.asarray(v, dtype=np.float64)
    header = {"format": CHECKPOINT_FORMAT, "config": cfg.to_dict(), "meta": meta or {}}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, __header__=np.frombuffer(json.dumps(header).encode(), dtype=np.uint8), **arrays)


def load_checkpoint(path) -> tuple[ModelConfig, dict[str, np.ndarray], dict[str, np.ndarray], dict]:
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(bytes(z["__header__"]).decode())
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: unsupported checkpoint format {header.get('format')!r}")
        model = {k: z[k] for k in z.files if k.startswith("model/")}
        extra = {k[len("extra/"):]: z[k] for k in z.files if k.startswith("extra/")}
    return ModelConfig.from_dict(header["config"]), model, extra, header.get("meta", {})


def import_weights(model: Module, path) -> list[str]:
    """Load any matching parameter paths from an npz file (e.g. a text encoder
    trained elsewhere); returns the imported paths."""
    with np.load(path, allow_pickle=False) as z:
        state = {k: z[k] for k in z.files if not k.startswith("__")}
    state = {k[len("model/"):] if k.startswith("model/") else k: v for k, v in state.items()}
    own = dict(model.named_parameters())
    return model.load_state_dict({k: v for k, v in state.items() if k in own}, strict=False)
