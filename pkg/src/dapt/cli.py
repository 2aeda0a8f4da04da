"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 configuration or usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import datasets as D
from . import metrics as M
from .corpus import CorpusError, corpus_stats, read_sentence_lists
from .encoder import EncoderConfig, EncoderModel, init_params, load_encoder, save_encoder
from .pretrain import Curriculum, PhasePlan, PretrainConfig
from .tasks import TASKS, TaskData, check_task, metric_fn, run_task
from .trainer import GridSpec
from .vocab import Casing, VocabError, load_vocab, save_vocab, train_vocab, vocab_overlap

log = logging.getLogger("dapt")


class ConfigError(Exception):
    """Bad flags, unknown config keys or missing inputs (exit code 2)."""


# --- helpers ---------------------------------------------------------------

def _require_file(path, what: str) -> Path:
    if path is None:
        raise ConfigError(f"missing {what}")
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{what} not found: {p}")
    return p


def _emit(obj: dict, out: str | None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True)
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text + "\n", encoding="utf-8")
    print(text)


def _load_vocab(path, casing=None):
    try:
        return load_vocab(_require_file(path, "vocabulary file"), casing)
    except VocabError as exc:
        raise ConfigError(str(exc)) from exc


def load_checkpoint(directory) -> tuple[EncoderModel, object]:
    """An encoder directory plus ``vocab.txt``; accepts a pretrain ``--out`` directory too."""
    root = Path(directory)
    if not root.is_dir():
        raise ConfigError(f"checkpoint directory not found: {root}")
    enc_dir = root / "encoder" if (root / "encoder" / "config.json").is_file() else root
    if not (enc_dir / "config.json").is_file():
        raise ConfigError(f"no encoder config.json under {root}")
    vocab = _load_vocab(root / "vocab.txt")
    return load_encoder(enc_dir), vocab


# --- pretraining configuration --------------------------------------------

MODEL_KEYS = {"preset", "num_layers", "hidden_size", "num_heads", "ff_size", "max_positions", "dropout", "dtype"}
PLAN_KEYS = {f.name for f in fields(PhasePlan)}
TRAIN_KEYS = {f.name for f in fields(PretrainConfig)}
PRETRAIN_KEYS = MODEL_KEYS | PLAN_KEYS | TRAIN_KEYS | {"seed"}
PRETRAIN_DEFAULTS = {"preset": "tiny", "dtype": "float32", "seed": 0,
                     **asdict(PhasePlan()), **asdict(PretrainConfig())}


def resolve_pretrain_config(config_path, overrides: dict) -> dict:
    cfg = dict(PRETRAIN_DEFAULTS)
    if config_path:
        try:
            loaded = json.loads(_require_file(config_path, "config file").read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc.msg}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a JSON object")
        unknown = sorted(set(loaded) - PRETRAIN_KEYS)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        cfg.update(loaded)
    cfg.update({k: v for k, v in overrides.items() if v is not None})
    if cfg["dtype"] not in ("float32", "float64"):
        raise ConfigError("dtype must be float32 or float64")
    return cfg


def build_pretrain(cfg: dict, vocab_size: int):
    model_over = {k: cfg[k] for k in MODEL_KEYS - {"preset", "dtype"} if k in cfg}
    try:
        enc_cfg = EncoderConfig.preset(cfg["preset"], vocab_size, **model_over)
        plan = PhasePlan(**{k: cfg[k] for k in PLAN_KEYS})
        train = PretrainConfig(**{k: cfg[k] for k in TRAIN_KEYS})
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    if enc_cfg.max_positions < plan.phase1_max_len:
        enc_cfg = EncoderConfig.from_dict({**enc_cfg.to_dict(), "max_positions": plan.phase1_max_len})
    return enc_cfg, plan, train


def pretrain(corpus_path, vocab_path, cfg: dict, out) -> dict:
    """Run (or resume) the curriculum into ``out``; returns a summary."""
    out = Path(out)
    vocab = _load_vocab(vocab_path)
    docs = list(read_sentence_lists(_require_file(corpus_path, "corpus")))
    enc_cfg, plan, train = build_pretrain(cfg, len(vocab))
    dtype = np.float64 if cfg["dtype"] == "float64" else np.float32
    resolved_path = out / "run_config.json"
    ckpt = out / "checkpoints"
    if resolved_path.is_file():
        previous = json.loads(resolved_path.read_text(encoding="utf-8"))
        differing = sorted(k for k in set(previous) | set(cfg) if previous.get(k) != cfg.get(k))
        if differing:
            raise ConfigError(f"cannot resume: config differs from the saved run in keys: {', '.join(differing)}")
    out.mkdir(parents=True, exist_ok=True)
    resolved_path.write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    model = init_params(enc_cfg, cfg["seed"], dtype)
    cur = Curriculum(model, vocab, docs, plan, train, cfg["seed"], checkpoint_dir=ckpt)
    if (ckpt / "latest" / "state.json").is_file():
        log.info("resuming from %s", ckpt / "latest")
        cur.restore(ckpt / "latest")
    model, tlog = cur.run()
    save_encoder(model, out / "encoder")
    save_vocab(vocab, out / "vocab.txt")
    tlog.write_jsonl(out / "log.jsonl")
    return {"steps": len(tlog.records), "switch_step": tlog.switch_step, "plateau_reached": tlog.plateau_reached,
            "phase2_max_example_len": tlog.phase2_max_example_len, "out": str(out), "config": cfg}


# --- commands --------------------------------------------------------------

def cmd_build_vocab(args) -> None:
    corpus = _require_file(args.corpus, "corpus")
    try:
        docs = list(read_sentence_lists(corpus))
    except CorpusError as exc:
        raise ConfigError(str(exc)) from exc
    try:
        vocab = train_vocab(docs, args.size, args.min_frequency, Casing(args.casing))
    except VocabError as exc:
        raise ConfigError(str(exc)) from exc
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_vocab(vocab, out)
    stats = {"size": len(vocab), "requested_size": args.size, "casing": vocab.casing.value,
             "min_frequency": args.min_frequency, "corpus": json.loads(corpus_stats(docs).to_json())}
    out.with_name(out.name + ".stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n",
                                                        encoding="utf-8")
    print(json.dumps(stats, sort_keys=True))


def cmd_vocab_overlap(args) -> None:
    a, b = _load_vocab(args.a), _load_vocab(args.b)
    print(vocab_overlap(a, b).to_json())


def cmd_corpus_stats(args) -> None:
    try:
        stats = corpus_stats(read_sentence_lists(_require_file(args.corpus, "corpus")))
    except CorpusError as exc:
        raise ConfigError(str(exc)) from exc
    print(stats.to_json())


def cmd_pretrain(args) -> None:
    overrides = {"seed": args.seed, "max_phase1_steps": args.max_phase1_steps, "phase2_steps": args.phase2_steps,
                 "checkpoint_every": args.checkpoint_every, "dtype": args.dtype}
    cfg = resolve_pretrain_config(args.config, overrides)
    print(json.dumps(pretrain(args.corpus, args.vocab, cfg, args.out), indent=2, sort_keys=True))


def _grid(name) -> GridSpec:
    if isinstance(name, dict):
        try:
            return GridSpec(tuple(name.get("epochs_choices", (2, 3, 4, 5))),
                            tuple(name.get("lr_choices", (5e-6, 1e-5, 2e-5, 5e-5))),
                            int(name.get("batch_size", 32)))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad grid: {exc}") from exc
    if name == "default":
        return GridSpec()
    if name == "fast":
        return GridSpec.fast()
    raise ConfigError(f"unknown grid {name!r}; use 'default' or 'fast'")


def _seeds(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in str(text).split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"seeds must be comma-separated integers, got {text!r}") from None
    if not seeds:
        raise ConfigError("need at least one seed")
    return seeds


def _task_data(task, train, dev, test) -> TaskData:
    paths = {"train": train, "dev": dev, "test": test}
    loaded = {}
    for split, path in paths.items():
        p = _require_file(path, f"--{split} file")
        try:
            loaded[split] = D.read_task(task, p)
        except D.DatasetError as exc:
            raise ConfigError(str(exc)) from exc
    return TaskData(**loaded)


def _check_casing(task, vocab, override) -> None:
    if override is not None and Casing(override) != vocab.casing:
        raise ConfigError(f"--casing {override} requested but the checkpoint vocabulary is {vocab.casing.value}")


def _finetune_like(args, mode: str) -> None:
    check_task(args.task)
    encoder, vocab = load_checkpoint(args.ckpt)
    data = _task_data(args.task, args.train, args.dev, args.test)
    _check_casing(args.task, vocab, args.casing)
    grid = _grid(args.grid) if mode == "finetune" else GridSpec()
    seeds = _seeds(args.seeds)
    report = run_task(args.task, encoder, vocab, data, grid, seeds, mode, dataset=args.dataset or Path(args.train).parent.name,
                      max_frozen_epochs=getattr(args, "max_epochs", 100), resamples=args.resamples,
                      rel_mode=args.rel_metric, warn_casing=args.casing is None)
    report.extra["config"] = {k: v for k, v in vars(args).items() if k != "func"}
    if not args.keep_traces:
        report.extra.pop("train_traces", None)
    _emit(report.to_dict(), args.out)


def cmd_finetune(args) -> None:
    _finetune_like(args, "finetune")


def cmd_frozen(args) -> None:
    _finetune_like(args, "frozen")


def _first_mismatch(task, gold, pred) -> int | None:
    for i, (g, p) in enumerate(zip(gold, pred)):
        if task in ("ner", "pico", "dep", "rel"):
            if tuple(g.tokens) != tuple(p.tokens):
                return i
        elif g.text != p.text:
            return i
    if len(gold) != len(pred):
        return min(len(gold), len(pred))
    return None


def evaluate_files(task: str, gold_path, pred_path, resamples: int = 1000, seed: int = 0, rel_mode: str = "macro") -> dict:
    check_task(task)
    gold = D.read_task(task, _require_file(gold_path, "--gold file"))
    if task == "dep":
        pred = D.read_dep(_require_file(pred_path, "--pred file"), validate=False)
    else:
        pred = D.read_task(task, _require_file(pred_path, "--pred file"))
    bad = _first_mismatch(task, gold, pred)
    if bad is not None:
        raise RuntimeError(f"gold and predictions are misaligned at sentence {bad}")
    if task in ("ner", "pico"):
        units = [list(p.tags) for p in pred]
    elif task == "dep":
        units = pred
    else:
        units = [p.label for p in pred]
    out = {"task": task, "units": len(gold), "bootstrap_unit": "sentence", "seed": seed, "resamples": resamples}
    if task == "dep":
        for name, fn in (("uas", M.uas_fn), ("las", M.las_fn)):
            res = M.with_ci(fn, gold, pred, resamples, seed) if len(gold) >= 2 else M.MetricResult(name, fn(gold, pred))
            out[name] = {"value": res.value, "ci_low": res.ci_low, "ci_high": res.ci_high}
    else:
        fn = metric_fn(task, rel_mode)
        res = M.with_ci(fn, gold, units, resamples, seed) if len(gold) >= 2 else fn(gold, units)
        out["metric"] = res.to_dict()
    return out


def cmd_evaluate(args) -> None:
    _emit(evaluate_files(args.task, args.gold, args.pred, args.resamples, args.seed, args.rel_metric), args.out)


# --- vocabulary ablation ---------------------------------------------------

SUITE_KEYS = {"tasks", "seeds", "grid", "pretrain", "mode", "resamples"}


def load_suite(path) -> dict:
    path = _require_file(path, "task suite")
    try:
        suite = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"task suite is not valid JSON: {exc.msg}") from exc
    unknown = sorted(set(suite) - SUITE_KEYS)
    if unknown:
        raise ConfigError(f"unknown task-suite keys: {', '.join(unknown)}")
    if not suite.get("tasks"):
        raise ConfigError("task suite lists no tasks")
    base = path.parent
    for entry in suite["tasks"]:
        if entry.get("task") not in TASKS:
            raise ConfigError(f"unknown task {entry.get('task')!r} in task suite")
        for split in ("train", "dev", "test"):
            if split not in entry:
                raise ConfigError(f"task {entry.get('name', entry['task'])!r} is missing its {split} file")
            entry[split] = str((base / entry[split]).resolve()) if not Path(entry[split]).is_absolute() else entry[split]
    return suite


def paired_deltas(scores_a, scores_b) -> dict:
    """Per-seed deltas (b - a) with a seed-level standard error.

    The standard error treats the two arms as independent samples of seed
    noise, so it stays informative when the arms coincide exactly.
    """
    a, b = np.asarray(scores_a, dtype=float), np.asarray(scores_b, dtype=float)
    deltas = b - a
    n = len(deltas)
    se = float(np.sqrt(a.var(ddof=1) / n + b.var(ddof=1) / n)) if n > 1 else float("nan")
    mean = float(deltas.mean())
    return {"scores_a": a.tolist(), "scores_b": b.tolist(), "deltas": deltas.tolist(), "mean_delta": mean,
            "seed_se": se, "within_2se": bool(abs(mean) < 2 * se) if n > 1 else None}


def ablate_vocab(corpus, vocab_a, vocab_b, suite_path, out) -> dict:
    suite = load_suite(suite_path)
    out = Path(out)
    cfg = resolve_pretrain_config(None, {})
    extra = suite.get("pretrain", {})
    unknown = sorted(set(extra) - PRETRAIN_KEYS)
    if unknown:
        raise ConfigError(f"unknown pretrain keys in task suite: {', '.join(unknown)}")
    cfg.update(extra)
    seeds = [int(s) for s in suite.get("seeds", [0, 1, 2])]
    grid = _grid(suite.get("grid", "fast"))
    mode = suite.get("mode", "finetune")
    arms = {}
    for arm, vpath in (("a", vocab_a), ("b", vocab_b)):
        log.info("pretraining arm %s", arm)
        pretrain(corpus, vpath, cfg, out / f"arm_{arm}")
        arms[arm] = load_checkpoint(out / f"arm_{arm}")
    results = []
    for entry in suite["tasks"]:
        task = entry["task"]
        data = _task_data(task, entry["train"], entry["dev"], entry["test"])
        per_arm = {}
        for arm, (encoder, vocab) in arms.items():
            rep = run_task(task, encoder, vocab, data, grid, seeds, mode, dataset=entry.get("name", task),
                           resamples=int(suite.get("resamples", 200)))
            per_arm[arm] = rep
        row = {"name": entry.get("name", task), "task": task,
               "selected_config_a": per_arm["a"].selected_config, "selected_config_b": per_arm["b"].selected_config,
               **paired_deltas(per_arm["a"].per_seed_test_scores, per_arm["b"].per_seed_test_scores)}
        results.append(row)
    report = {"vocab_a": str(vocab_a), "vocab_b": str(vocab_b), "seeds": seeds, "grid": grid.to_dict(),
              "pretrain_config": cfg, "mode": mode, "tasks": results}
    (out / "ablation.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return report


def cmd_ablate_vocab(args) -> None:
    print(json.dumps(ablate_vocab(args.corpus, args.vocab_a, args.vocab_b, args.task_suite, args.out),
                     indent=2, sort_keys=True))


# --- parser ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dapt", description="Domain-adaptive encoder pretraining and evaluation.")
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("build-vocab", help="train a subword vocabulary")
    s.add_argument("--corpus", required=True)
    s.add_argument("--size", type=int, default=30000)
    s.add_argument("--casing", choices=[c.value for c in Casing], default="uncased")
    s.add_argument("--min-frequency", type=int, default=1)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_build_vocab)

    s = sub.add_parser("vocab-overlap", help="fraction of vocabulary a found in b")
    s.add_argument("--a", required=True)
    s.add_argument("--b", required=True)
    s.set_defaults(func=cmd_vocab_overlap)

    s = sub.add_parser("corpus-stats", help="document/sentence/character counts")
    s.add_argument("--corpus", required=True)
    s.set_defaults(func=cmd_corpus_stats)

    s = sub.add_parser("pretrain", help="masked-LM + next-sentence pretraining with the length curriculum")
    s.add_argument("--corpus", required=True)
    s.add_argument("--vocab", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--max-phase1-steps", type=int)
    s.add_argument("--phase2-steps", type=int)
    s.add_argument("--checkpoint-every", type=int)
    s.add_argument("--dtype", choices=["float32", "float64"])
    s.set_defaults(func=cmd_pretrain)

    for name, func, helptext in (("finetune", cmd_finetune, "finetune encoder + head over the dev grid"),
                                 ("frozen", cmd_frozen, "train BiLSTM models over frozen encoder vectors")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--task", required=True, choices=TASKS)
        s.add_argument("--ckpt", required=True)
        s.add_argument("--train", required=True)
        s.add_argument("--dev")
        s.add_argument("--test", required=True)
        s.add_argument("--seeds", default="0,1,2")
        s.add_argument("--casing", choices=[c.value for c in Casing])
        s.add_argument("--dataset", default="")
        s.add_argument("--resamples", type=int, default=1000)
        s.add_argument("--rel-metric", choices=["macro", "micro"], default="macro")
        s.add_argument("--keep-traces", action="store_true", help="include per-step lr/loss traces in the report")
        s.add_argument("--out")
        if name == "finetune":
            s.add_argument("--grid", default="default", choices=["default", "fast"])
        else:
            s.add_argument("--max-epochs", type=int, default=100)
        s.set_defaults(func=func)

    s = sub.add_parser("ablate-vocab", help="pretrain with two vocabularies and compare finetuning results")
    s.add_argument("--corpus", required=True)
    s.add_argument("--vocab-a", required=True)
    s.add_argument("--vocab-b", required=True)
    s.add_argument("--task-suite", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ablate_vocab)

    s = sub.add_parser("evaluate", help="score predictions against gold files")
    s.add_argument("--task", required=True, choices=TASKS)
    s.add_argument("--gold", required=True)
    s.add_argument("--pred", required=True)
    s.add_argument("--resamples", type=int, default=1000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--rel-metric", choices=["macro", "micro"], default="macro")
    s.add_argument("--out")
    s.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - every other failure is a runtime error
        print(f"error: {exc}", file=sys.stderr)
        log.debug("traceback", exc_info=True)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
