"""Shared builders for small encoders and vocabularies."""

from __future__ import annotations

import numpy as np

from dapt.encoder import EncoderConfig, init_params
from dapt.synthetic import toy_corpus
from dapt.vocab import train_vocab


def toy_vocab(size: int = 120, casing: str = "uncased"):
    return train_vocab(toy_corpus(5, 10, seed=0), size, casing=casing)


def micro_encoder(vocab_size: int, seed: int = 0, dtype=np.float64, **overrides):
    """One layer, hidden 16, two heads: fast enough for finite differences."""
    cfg = dict(num_layers=1, hidden_size=16, num_heads=2, ff_size=32, max_positions=64, dropout=0.0)
    cfg.update(overrides)
    return init_params(EncoderConfig.preset("tiny", vocab_size, **cfg), seed, dtype)


def well_conditioned(model, std: float = 0.3, seed: int = 0):
    """Redraw every weight matrix with a larger scale, in place.

    At the default 0.02 scale the attention logits are nearly constant, so
    the query/key gradients are tiny and finite differences are dominated by
    rounding. Larger weights give a gradient check something to measure.
    """
    rng = np.random.default_rng(seed)
    for name, p in model.params.items():
        if p.data.ndim == 2 and not name.startswith("embeddings.position"):
            p.data[...] = rng.normal(0.0, std, p.data.shape)
    return model
