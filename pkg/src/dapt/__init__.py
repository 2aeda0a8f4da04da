"""Domain-adaptive pretraining of a small BERT-style encoder, with task heads,
frozen-feature baselines, metrics and a command-line driver."""

__version__ = "0.1.0"
