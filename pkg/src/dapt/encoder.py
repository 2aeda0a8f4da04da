"""BERT-style bidirectional transformer encoder (post-LN, learned positions)."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .vocab import Casing

SEGMENT_TYPES = 2
INIT_STD = 0.02

# (num_layers, hidden_size, num_heads, ff_size, max_positions)
PRESETS = {
    "base": (12, 768, 12, 3072, 512),
    "large": (24, 1024, 16, 4096, 512),
    "tiny": (2, 64, 4, 256, 128),
}


class EncoderError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    num_layers: int
    hidden_size: int
    num_heads: int
    ff_size: int
    max_positions: int
    vocab_size: int
    dropout: float = 0.1
    casing: str = Casing.UNCASED.value

    def __post_init__(self):
        object.__setattr__(self, "casing", Casing(self.casing).value)
        if self.hidden_size % self.num_heads:
            raise EncoderError(f"hidden_size {self.hidden_size} not divisible by num_heads {self.num_heads}")
        if self.max_positions < 1:
            raise EncoderError("max_positions must be at least 1")
        if self.ff_size < self.hidden_size:
            raise EncoderError("ff_size must be at least hidden_size")
        if self.num_layers < 1 or self.vocab_size < 1:
            raise EncoderError("num_layers and vocab_size must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise EncoderError("dropout must lie in [0, 1)")

    @classmethod
    def preset(cls, name: str, vocab_size: int, **overrides) -> EncoderConfig:
        try:
            layers, hidden, heads, ff, positions = PRESETS[name]
        except KeyError:
            raise EncoderError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
        base = cls(layers, hidden, heads, ff, positions, vocab_size)
        return replace(base, **overrides)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> EncoderConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise EncoderError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def parameter_count(config: EncoderConfig) -> int:
    """Closed-form number of scalar parameters for ``config``."""
    h, f, v, p = config.hidden_size, config.ff_size, config.vocab_size, config.max_positions
    embeddings = (v + p + SEGMENT_TYPES) * h + 2 * h
    attention = 4 * (h * h + h) + 2 * h
    feed_forward = h * f + f + f * h + h + 2 * h
    pooler = h * h + h
    return embeddings + config.num_layers * (attention + feed_forward) + pooler


def truncated_normal(rng: np.random.Generator, shape, std: float = INIT_STD, dtype=np.float32) -> np.ndarray:
    """Normal(0, std) resampled until every value lies within two std."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(dtype)


class EncoderModel:
    def __init__(self, config: EncoderConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params
        self.last_attention: list[np.ndarray] = []

    @property
    def dtype(self):
        return self.params["embeddings.word"].dtype

    def named_parameters(self) -> dict[str, Tensor]:
        return dict(self.params)

    def __call__(self, token_ids, segment_ids=None, attention_mask=None, train=False, rng=None):
        return encode(self, token_ids, segment_ids, attention_mask, train, rng)


def init_params(config: EncoderConfig, seed: int = 0, dtype=np.float32) -> EncoderModel:
    """Truncated-normal weights (std 0.02), zero biases, unit layer-norm gains."""
    rng = np.random.default_rng(seed)
    h, f = config.hidden_size, config.ff_size
    p: dict[str, np.ndarray] = {}

    def dense(name, n_in, n_out):
        p[f"{name}.weight"] = truncated_normal(rng, (n_in, n_out), dtype=dtype)
        p[f"{name}.bias"] = np.zeros(n_out, dtype=dtype)

    def norm(name):
        p[f"{name}.gain"] = np.ones(h, dtype=dtype)
        p[f"{name}.bias"] = np.zeros(h, dtype=dtype)

    p["embeddings.word"] = truncated_normal(rng, (config.vocab_size, h), dtype=dtype)
    p["embeddings.position"] = truncated_normal(rng, (config.max_positions, h), dtype=dtype)
    p["embeddings.segment"] = truncated_normal(rng, (SEGMENT_TYPES, h), dtype=dtype)
    norm("embeddings.ln")
    for i in range(config.num_layers):
        for part in ("query", "key", "value", "output"):
            dense(f"layer.{i}.attn.{part}", h, h)
        norm(f"layer.{i}.attn.ln")
        dense(f"layer.{i}.ffn.inter", h, f)
        dense(f"layer.{i}.ffn.out", f, h)
        norm(f"layer.{i}.ffn.ln")
    dense("pooler", h, h)
    return EncoderModel(config, {k: Tensor(v, requires_grad=True) for k, v in p.items()})


def _linear(x: Tensor, params: dict[str, Tensor], name: str) -> Tensor:
    return T.add(T.matmul(x, params[f"{name}.weight"]), params[f"{name}.bias"])


def attention_bias(attention_mask: np.ndarray, num_heads: int, dtype) -> np.ndarray:
    """Additive key mask of shape (batch, heads, len, len): 0 keep, NEG_INF drop."""
    b, n = attention_mask.shape
    drop = (1.0 - attention_mask.astype(dtype)) * T.NEG_INF
    return np.ascontiguousarray(np.broadcast_to(drop[:, None, None, :], (b, num_heads, n, n)), dtype=dtype)


def encode(
    model: EncoderModel,
    token_ids,
    segment_ids=None,
    attention_mask=None,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, Tensor]:
    """Run the encoder; returns ``(sequence_vectors, pooled_cls)``.

    ``token_ids``, ``segment_ids`` and ``attention_mask`` are ``(batch, len)``
    integer arrays. Masked keys receive an additive ``NEG_INF`` so padded
    positions cannot influence real ones.
    """
    cfg, p = model.config, model.params
    ids = np.asarray(token_ids)
    if ids.ndim != 2:
        raise EncoderError(f"token_ids must be (batch, len), got shape {ids.shape}")
    b, n = ids.shape
    if n > cfg.max_positions:
        raise EncoderError(f"sequence length {n} exceeds max_positions {cfg.max_positions}")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise EncoderError(f"token id out of range for vocab_size {cfg.vocab_size}")
    segs = np.zeros_like(ids) if segment_ids is None else np.asarray(segment_ids)
    mask = np.ones_like(ids) if attention_mask is None else np.asarray(attention_mask)
    if segs.shape != ids.shape or mask.shape != ids.shape:
        raise EncoderError("segment_ids and attention_mask must match token_ids in shape")
    if not mask.any(axis=1).all():
        raise EncoderError("every attention_mask row needs at least one unmasked position")
    dt = model.dtype
    h, heads = cfg.hidden_size, cfg.num_heads
    dh = h // heads
    drop = cfg.dropout

    x = T.add(
        T.add(T.embedding_lookup(p["embeddings.word"], ids),
              T.broadcast_to(p["embeddings.position"][:n], (b, n, h))),
        T.embedding_lookup(p["embeddings.segment"], segs),
    )
    x = T.layer_norm(x, p["embeddings.ln.gain"], p["embeddings.ln.bias"])
    x = T.dropout(x, drop, rng, train)

    bias = Tensor(attention_bias(mask, heads, dt))
    scale = 1.0 / math.sqrt(dh)
    model.last_attention = []
    for i in range(cfg.num_layers):
        pre = f"layer.{i}"

        def split_heads(t):
            return T.transpose(T.reshape(t, (b, n, heads, dh)), (0, 2, 1, 3))

        q = split_heads(_linear(x, p, f"{pre}.attn.query"))
        k = split_heads(_linear(x, p, f"{pre}.attn.key"))
        v = split_heads(_linear(x, p, f"{pre}.attn.value"))
        scores = T.add(T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), scale), bias)
        probs = T.softmax(scores, axis=-1)
        model.last_attention.append(probs.data)
        probs = T.dropout(probs, drop, rng, train)
        ctx = T.reshape(T.transpose(T.matmul(probs, v), (0, 2, 1, 3)), (b, n, h))
        attn = T.dropout(_linear(ctx, p, f"{pre}.attn.output"), drop, rng, train)
        x = T.layer_norm(T.add(x, attn), p[f"{pre}.attn.ln.gain"], p[f"{pre}.attn.ln.bias"])
        ff = _linear(T.gelu(_linear(x, p, f"{pre}.ffn.inter")), p, f"{pre}.ffn.out")
        ff = T.dropout(ff, drop, rng, train)
        x = T.layer_norm(T.add(x, ff), p[f"{pre}.ffn.ln.gain"], p[f"{pre}.ffn.ln.bias"])

    pooled = T.tanh(_linear(x[:, 0], p, "pooler"))
    return x, pooled


def extend_positions(model: EncoderModel, new_max: int, seed: int = 0) -> EncoderModel:
    """Grow the position table; existing rows are kept bit-for-bit."""
    old = model.config.max_positions
    if new_max <= old:
        raise EncoderError(f"new max_positions {new_max} must exceed current {old}")
    rng = np.random.default_rng(seed)
    table = model.params["embeddings.position"].data
    fresh = truncated_normal(rng, (new_max - old, table.shape[1]), dtype=table.dtype)
    params = dict(model.params)
    params["embeddings.position"] = Tensor(np.concatenate([table, fresh]), requires_grad=True)
    return EncoderModel(replace(model.config, max_positions=new_max), params)


def extend_vocab(model: EncoderModel, new_size: int, seed: int = 0) -> EncoderModel:
    """Append freshly initialized word-embedding rows (e.g. for entity markers)."""
    old = model.config.vocab_size
    if new_size < old:
        raise EncoderError(f"cannot shrink vocabulary from {old} to {new_size}")
    if new_size == old:
        return model
    rng = np.random.default_rng(seed)
    table = model.params["embeddings.word"].data
    fresh = truncated_normal(rng, (new_size - old, table.shape[1]), dtype=table.dtype)
    params = dict(model.params)
    params["embeddings.word"] = Tensor(np.concatenate([table, fresh]), requires_grad=True)
    return EncoderModel(replace(model.config, vocab_size=new_size), params)


def copy_model(model: EncoderModel) -> EncoderModel:
    return EncoderModel(model.config, {k: Tensor(v.data.copy(), requires_grad=True) for k, v in model.params.items()})


def save_encoder(model: EncoderModel, directory, dtype: str | None = None) -> None:
    """Parameter archive plus ``config.json``. float64 models are stored as float64."""
    directory = Path(directory)
    if dtype is None:
        dtype = "<f8" if model.dtype == np.float64 else "<f4"
    T.save_params(model.params, directory, dtype=dtype)
    (directory / "config.json").write_text(json.dumps(model.config.to_dict(), indent=2) + "\n", encoding="utf-8")


def load_encoder(directory, dtype=None) -> EncoderModel:
    directory = Path(directory)
    config = EncoderConfig.from_dict(json.loads((directory / "config.json").read_text(encoding="utf-8")))
    arrays = T.load_params(directory, dtype=dtype)
    return EncoderModel(config, {k: Tensor(v.copy(), requires_grad=True) for k, v in arrays.items()})
