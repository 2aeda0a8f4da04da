"""Optimization: Adam, linear warmup/decay schedule, early stopping, dev-set grid."""

from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from .tensor import Tensor


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("betas must lie in [0, 1)")
        if self.eps <= 0:
            raise ValueError("eps must be positive")


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], state: AdamState, lr_t: float, config: AdamConfig = AdamConfig()) -> None:
    """One bias-corrected Adam update, in place, over every parameter with a grad."""
    for name, p in params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise TrainingError(f"non-finite gradient in parameter {name!r}")
    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        if m.shape != p.shape:
            raise TrainingError(f"moment shape {m.shape} does not match parameter {name!r} {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if lr_t:
            p.data -= (lr_t * (m / c1) / (np.sqrt(v / c2) + config.eps)).astype(p.dtype)


class Adam:
    """Holds parameters by name plus their moment state."""

    def __init__(self, params: Mapping[str, Tensor], config: AdamConfig = AdamConfig()):
        self.params = dict(params)
        self.config = config
        self.state = AdamState()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr_t: float | None = None) -> None:
        adam_step(self.params, self.state, self.config.lr if lr_t is None else lr_t, self.config)

    def replace_param(self, name: str, tensor: Tensor) -> None:
        """Swap in a grown parameter; existing moments are zero-padded along axis 0."""
        self.params[name] = tensor
        for moments in (self.state.m, self.state.v):
            if name in moments:
                old = moments[name]
                grown = np.zeros_like(tensor.data)
                grown[: old.shape[0]] = old
                moments[name] = grown


@dataclass(frozen=True)
class TriangularSchedule:
    lr_max: float
    total_steps: int
    warmup_fraction: float = 0.1

    def __post_init__(self):
        if not 0.0 < self.warmup_fraction < 1.0:
            raise ValueError("warmup_fraction must lie in (0, 1)")
        if self.total_steps < 2:
            raise ValueError("total_steps must be at least 2")

    @property
    def warmup_steps(self) -> int:
        return round(self.warmup_fraction * self.total_steps)


def lr_at(schedule: TriangularSchedule, step: int) -> float:
    """Linear rise to ``lr_max`` at the warmup boundary, then linear decay to 0."""
    total = schedule.total_steps
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    w = schedule.warmup_steps
    if w > 0 and step <= w:
        return schedule.lr_max * step / w
    return schedule.lr_max * (total - step) / (total - w)


@dataclass(frozen=True)
class EarlyStopConfig:
    patience: int = 10

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError("patience must be at least 1")


@dataclass
class EarlyStopResult:
    best_epoch: int
    best_score: Any
    checkpoint: Any
    epochs_run: int
    scores: list


def early_stop_loop(
    train_epoch: Callable[[int], None],
    evaluate: Callable[[], Any],
    config: EarlyStopConfig,
    max_epochs: int,
    snapshot: Callable[[], Any] = lambda: None,
) -> EarlyStopResult:
    """Train epoch by epoch (1-indexed) until ``patience`` epochs pass without
    a strictly better dev score. Returns the snapshot taken at the best epoch.

    Scores may be floats or tuples compared lexicographically, e.g.
    ``(metric, -loss)`` to let the loss break metric ties.
    """
    if max_epochs < 1:
        raise ValueError("max_epochs must be at least 1")
    best_epoch, best_score, best_ckpt = 0, None, None
    scores: list = []
    stale = 0
    for epoch in range(1, max_epochs + 1):
        train_epoch(epoch)
        score = evaluate()
        scores.append(score)
        if best_score is None or score > best_score:
            best_epoch, best_score, best_ckpt = epoch, score, snapshot()
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    return EarlyStopResult(best_epoch, best_score, best_ckpt, len(scores), scores)


@dataclass(frozen=True)
class GridSpec:
    epochs_choices: tuple[int, ...] = (2, 3, 4, 5)
    lr_choices: tuple[float, ...] = (5e-6, 1e-5, 2e-5, 5e-5)
    batch_size: int = 32

    def __post_init__(self):
        if not self.epochs_choices or not self.lr_choices:
            raise ValueError("grid choice sets must be non-empty")

    @classmethod
    def fast(cls) -> GridSpec:
        return cls(epochs_choices=(2, 4), lr_choices=(2e-5,))

    def configs(self) -> list[dict]:
        return [
            {"epochs": e, "lr": lr, "batch_size": self.batch_size}
            for lr, e in itertools.product(sorted(self.lr_choices), sorted(self.epochs_choices))
        ]

    def to_dict(self) -> dict:
        return {"epochs_choices": list(self.epochs_choices), "lr_choices": list(self.lr_choices),
                "batch_size": self.batch_size}


def config_key(config: Mapping) -> str:
    return f"epochs={config['epochs']},lr={config['lr']:g}"


@dataclass
class RunReport:
    task: str
    dataset: str
    grid: dict
    per_config_dev_scores: dict[str, list[float]]
    selected_config: dict
    per_seed_test_scores: list[float]
    mean_test_score: float
    bootstrap_interval: list[float] | None
    seeds: list[int]
    mode: str = "finetune"
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _preferred(a: tuple[float, dict], b: tuple[float, dict]) -> bool:
    """True if candidate ``a`` beats ``b``: higher dev mean, then lower lr, then fewer epochs."""
    (sa, ca), (sb, cb) = a, b
    if sa != sb:
        return sa > sb
    return (ca["lr"], ca["epochs"]) < (cb["lr"], cb["epochs"])


def run_grid(
    train_fn: Callable[[dict, int], Any],
    dev_fn: Callable[[Any], float],
    test_fn: Callable[[Any], Any],
    grid: GridSpec,
    seeds: Sequence[int],
    task: str = "",
    dataset: str = "",
    configs: Sequence[dict] | None = None,
    mode: str = "finetune",
) -> tuple[dict, RunReport]:
    """Train every (config, seed), select on mean dev score, test only the winner.

    ``test_fn`` may return a float or an object with ``value`` and optional
    ``ci_low``/``ci_high`` (a metrics ``MetricResult``).
    """
    if not seeds:
        raise ValueError("run_grid needs at least one seed")
    configs = list(configs) if configs is not None else grid.configs()
    per_config: dict[str, list[float]] = {}
    best: tuple[float, dict] | None = None
    best_models: list[Any] = []
    for cfg in configs:
        models, scores = [], []
        for seed in seeds:
            try:
                model = train_fn(dict(cfg), seed)
                scores.append(float(dev_fn(model)))
            except Exception as exc:
                raise TrainingError(f"grid run failed for {config_key(cfg)} seed={seed}: {exc}") from exc
            models.append(model)
        per_config[config_key(cfg)] = scores
        candidate = (float(np.mean(scores)), dict(cfg))
        if best is None or _preferred(candidate, best):
            best, best_models = candidate, models
        del models
    assert best is not None
    test_scores, lows, highs = [], [], []
    for model in best_models:
        result = test_fn(model)
        value = getattr(result, "value", result)
        test_scores.append(float(value))
        if getattr(result, "ci_low", None) is not None:
            lows.append(result.ci_low)
            highs.append(result.ci_high)
    interval = [float(np.mean(lows)), float(np.mean(highs))] if lows else None
    report = RunReport(
        task=task,
        dataset=dataset,
        grid=grid.to_dict(),
        per_config_dev_scores=per_config,
        selected_config=best[1],
        per_seed_test_scores=test_scores,
        mean_test_score=float(np.mean(test_scores)),
        bootstrap_interval=interval,
        seeds=list(seeds),
        mode=mode,
    )
    return best[1], report
