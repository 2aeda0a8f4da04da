import json
import shutil

import pytest

from dapt import datasets as D
from dapt.cli import ConfigError, load_checkpoint, main, paired_deltas, resolve_pretrain_config
from dapt.encoder import save_encoder
from dapt.synthetic import toy_corpus, write_corpus_jsonl, write_task_files
from dapt.vocab import SPECIALS, save_vocab
from helpers import micro_encoder, toy_vocab


@pytest.fixture
def corpus(tmp_path):
    path = tmp_path / "corpus.jsonl"
    write_corpus_jsonl(toy_corpus(6, 8, seed=0), path)
    return path


@pytest.fixture
def ckpt(tmp_path):
    vocab = toy_vocab()
    out = tmp_path / "ckpt"
    save_encoder(micro_encoder(len(vocab)), out)
    save_vocab(vocab, out / "vocab.txt")
    return out


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


class TestBuildVocab:
    def test_small_vocab_specials_first(self, tmp_path, corpus, capsys):
        out = tmp_path / "v.txt"
        code, stdout, _ = run(capsys, "build-vocab", "--corpus", corpus, "--size", 50, "--out", out)
        assert code == 0
        lines = out.read_text(encoding="utf-8").splitlines()
        assert len(lines) <= 50 and tuple(lines[:5]) == SPECIALS
        assert json.loads(stdout)["casing"] == "uncased"
        assert (tmp_path / "v.txt.stats.json").is_file()

    def test_rerun_is_byte_identical(self, tmp_path, corpus, capsys):
        for name in ("a.txt", "b.txt"):
            assert run(capsys, "build-vocab", "--corpus", corpus, "--size", 80, "--out", tmp_path / name)[0] == 0
        assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()

    def test_size_below_alphabet(self, tmp_path, corpus, capsys):
        code, _, err = run(capsys, "build-vocab", "--corpus", corpus, "--size", 3, "--out", tmp_path / "v.txt")
        assert code == 2 and "at least" in err

    def test_missing_corpus(self, tmp_path, capsys):
        code, _, err = run(capsys, "build-vocab", "--corpus", tmp_path / "nope.jsonl", "--out", tmp_path / "v.txt")
        assert code == 2 and "not found" in err

    def test_bad_flag_is_usage_error(self, capsys):
        assert run(capsys, "build-vocab", "--bogus")[0] == 2


class TestInspect:
    def test_overlap(self, tmp_path, corpus, capsys):
        run(capsys, "build-vocab", "--corpus", corpus, "--size", 60, "--out", tmp_path / "a.txt")
        code, out, _ = run(capsys, "vocab-overlap", "--a", tmp_path / "a.txt", "--b", tmp_path / "a.txt")
        assert code == 0 and json.loads(out)["overlap_fraction"] == 1.0

    def test_overlap_missing_file(self, tmp_path, capsys):
        assert run(capsys, "vocab-overlap", "--a", tmp_path / "x", "--b", tmp_path / "y")[0] == 2

    def test_corpus_stats(self, corpus, capsys):
        code, out, _ = run(capsys, "corpus-stats", "--corpus", corpus)
        assert code == 0 and json.loads(out)["document_count"] == 6


class TestEvaluate:
    def test_perfect_cls_interval(self, tmp_path, capsys):
        paths = write_task_files("cls", tmp_path, sizes=(4, 4, 20))
        code, out, _ = run(capsys, "evaluate", "--task", "cls", "--gold", paths["test"], "--pred", paths["test"],
                           "--resamples", 100)
        metric = json.loads(out)["metric"]
        assert code == 0 and (metric["value"], metric["ci_low"], metric["ci_high"]) == (1.0, 1.0, 1.0)

    def test_dep_reports_both_scores(self, tmp_path, capsys):
        paths = write_task_files("dep", tmp_path, sizes=(4, 4, 10))
        code, out, _ = run(capsys, "evaluate", "--task", "dep", "--gold", paths["test"], "--pred", paths["test"],
                           "--resamples", 50)
        rep = json.loads(out)
        assert code == 0 and rep["uas"]["value"] == rep["las"]["value"] == 1.0

    def test_misaligned_is_runtime_error(self, tmp_path, capsys):
        paths = write_task_files("ner", tmp_path, sizes=(4, 6, 6))
        code, _, err = run(capsys, "evaluate", "--task", "ner", "--gold", paths["dev"], "--pred", paths["test"])
        assert code == 1 and "misaligned" in err

    def test_writes_out_file(self, tmp_path, capsys):
        paths = write_task_files("rel", tmp_path, sizes=(4, 4, 8))
        out = tmp_path / "res" / "eval.json"
        run(capsys, "evaluate", "--task", "rel", "--gold", paths["test"], "--pred", paths["test"], "--out", out,
            "--resamples", 20)
        assert json.loads(out.read_text())["task"] == "rel"


class TestFinetune:
    def test_missing_checkpoint_vocab(self, tmp_path, ckpt, capsys):
        (ckpt / "vocab.txt").unlink()
        paths = write_task_files("cls", tmp_path / "data")
        code, _, err = run(capsys, "finetune", "--task", "cls", "--ckpt", ckpt, "--train", paths["train"],
                           "--dev", paths["dev"], "--test", paths["test"])
        assert code == 2 and "vocab" in err

    def test_missing_dev(self, tmp_path, ckpt, capsys):
        paths = write_task_files("cls", tmp_path / "data")
        code, _, err = run(capsys, "finetune", "--task", "cls", "--ckpt", ckpt, "--train", paths["train"],
                           "--test", paths["test"])
        assert code == 2 and "dev" in err

    def test_report_and_casing_warning(self, tmp_path, ckpt, capsys, caplog):
        paths = write_task_files("ner", tmp_path / "data", sizes=(8, 4, 4))
        out = tmp_path / "report.json"
        code, _, _ = run(capsys, "finetune", "--task", "ner", "--ckpt", ckpt, "--train", paths["train"],
                           "--dev", paths["dev"], "--test", paths["test"], "--seeds", "0", "--grid", "fast",
                           "--resamples", 20, "--out", out)
        assert code == 0 and "conventionally uses a cased" in caplog.text
        rep = json.loads(out.read_text())
        assert rep["task"] == "ner" and len(rep["per_seed_test_scores"]) == 1
        assert "train_traces" not in rep["extra"]

    def test_casing_override_mismatch(self, tmp_path, ckpt, capsys):
        paths = write_task_files("cls", tmp_path / "data")
        code, _, _ = run(capsys, "finetune", "--task", "cls", "--ckpt", ckpt, "--train", paths["train"],
                         "--dev", paths["dev"], "--test", paths["test"], "--casing", "cased")
        assert code == 2

    def test_frozen_command(self, tmp_path, ckpt, capsys):
        paths = write_task_files("cls", tmp_path / "data", sizes=(8, 4, 4))
        code, out, _ = run(capsys, "frozen", "--task", "cls", "--ckpt", ckpt, "--train", paths["train"],
                           "--dev", paths["dev"], "--test", paths["test"], "--seeds", "0", "--max-epochs", 2,
                           "--resamples", 20)
        rep = json.loads(out)
        assert code == 0 and rep["mode"] == "frozen" and rep["extra"]["encoder_unchanged"]


class TestConfig:
    def test_unknown_key(self, tmp_path):
        (tmp_path / "c.json").write_text('{"hidden": 3}')
        with pytest.raises(ConfigError, match="hidden"):
            resolve_pretrain_config(tmp_path / "c.json", {})

    def test_overrides_win(self, tmp_path):
        (tmp_path / "c.json").write_text('{"seed": 3, "max_phase1_steps": 9}')
        cfg = resolve_pretrain_config(tmp_path / "c.json", {"seed": 5, "phase2_steps": None})
        assert (cfg["seed"], cfg["max_phase1_steps"]) == (5, 9)

    def test_load_checkpoint_missing_dir(self, tmp_path):
        with pytest.raises(ConfigError):
            load_checkpoint(tmp_path / "none")

    def test_paired_deltas_identical_arms(self):
        d = paired_deltas([0.5, 0.7, 0.6], [0.5, 0.7, 0.6])
        assert d["deltas"] == [0.0, 0.0, 0.0] and d["seed_se"] > 0 and d["within_2se"]


MICRO_PRETRAIN = {"num_layers": 1, "hidden_size": 16, "num_heads": 2, "ff_size": 32, "max_positions": 64,
                  "phase1_max_len": 32, "phase2_max_len": 64, "max_phase1_steps": 20, "phase2_steps": 2,
                  "plateau_window": 2, "plateau_epsilon": 10.0, "batch_size": 4, "dupe_factor": 1}


class TestPretrainAndAblate:
    def test_pretrain_then_resume_is_noop(self, tmp_path, corpus, capsys):
        vocab = tmp_path / "v.txt"
        run(capsys, "build-vocab", "--corpus", corpus, "--size", 80, "--out", vocab)
        (tmp_path / "cfg.json").write_text(json.dumps(MICRO_PRETRAIN))
        args = ["pretrain", "--corpus", corpus, "--vocab", vocab, "--config", tmp_path / "cfg.json",
                "--out", tmp_path / "run"]
        code, out, _ = run(capsys, *args)
        summary = json.loads(out)
        assert code == 0 and summary["plateau_reached"]
        assert summary["steps"] == summary["switch_step"] + 2
        encoder, v = load_checkpoint(tmp_path / "run")
        assert len(v) == encoder.config.vocab_size
        code, _, err = run(capsys, *args, "--seed", 9)
        assert code == 2 and "seed" in err

    def test_ablate_reports_paired_deltas(self, tmp_path, corpus, capsys):
        vocab = tmp_path / "v.txt"
        run(capsys, "build-vocab", "--corpus", corpus, "--size", 80, "--out", vocab)
        shutil.copy(vocab, tmp_path / "v2.txt")
        paths = write_task_files("cls", tmp_path / "cls", sizes=(8, 4, 6))
        suite = {"tasks": [{"task": "cls", "name": "toy-cls", "train": str(paths["train"]),
                            "dev": str(paths["dev"]), "test": str(paths["test"])}],
                 "seeds": [0, 1], "grid": {"epochs_choices": [1], "lr_choices": [1e-3], "batch_size": 8},
                 "pretrain": MICRO_PRETRAIN, "resamples": 20}
        (tmp_path / "suite.json").write_text(json.dumps(suite))
        code, out, _ = run(capsys, "ablate-vocab", "--corpus", corpus, "--vocab-a", vocab, "--vocab-b",
                           tmp_path / "v2.txt", "--task-suite", tmp_path / "suite.json", "--out", tmp_path / "abl")
        assert code == 0
        row = json.loads(out)["tasks"][0]
        assert len(row["deltas"]) == 2 and row["name"] == "toy-cls"
        assert (tmp_path / "abl" / "ablation.json").is_file()

    def test_suite_unknown_key(self, tmp_path, corpus, capsys):
        (tmp_path / "suite.json").write_text('{"tasks": [], "bogus": 1}')
        code, _, err = run(capsys, "ablate-vocab", "--corpus", corpus, "--vocab-a", "a", "--vocab-b", "b",
                           "--task-suite", tmp_path / "suite.json", "--out", tmp_path / "o")
        assert code == 2 and "bogus" in err


def test_read_back_written_files(tmp_path):
    paths = write_task_files("pico", tmp_path)
    assert len(D.read_task("pico", paths["train"])) == 64
