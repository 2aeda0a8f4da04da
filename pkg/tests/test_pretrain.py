import math

import numpy as np
import pytest

from dapt.corpus import SentenceList
from dapt.encoder import EncoderConfig, init_params
from dapt.pretrain import (
    Curriculum,
    PhasePlan,
    PretrainConfig,
    PretrainError,
    PretrainExample,
    PretrainHeads,
    apply_mlm_mask,
    build_examples,
    collate,
    load_examples,
    make_nsp_pairs,
    plateaued,
    pretrain_losses,
    pretrain_step,
    save_examples,
)
from dapt.synthetic import toy_corpus
from dapt.vocab import SPECIALS, Vocabulary, train_vocab


@pytest.fixture(scope="module")
def docs():
    return toy_corpus(5, 10, seed=0)


@pytest.fixture(scope="module")
def vocab(docs):
    return train_vocab(docs, 100)


def plain_example(n=40, vocab_size=100, seed=0):
    body = tuple(int(x) for x in np.random.default_rng(seed).integers(5, vocab_size, n))
    ids = (2,) + body[: n // 2] + (3,) + body[n // 2:] + (3,)
    segs = (0,) * (n // 2 + 2) + (1,) * (n - n // 2 + 1)
    return PretrainExample(ids, segs, True)


class TestNspPairs:
    def test_layout(self, docs, vocab):
        for ex in make_nsp_pairs(docs, vocab, 32, seed=0):
            assert ex.token_ids[0] == vocab.cls_id
            assert ex.token_ids.count(vocab.sep_id) == 2 and ex.token_ids[-1] == vocab.sep_id
            assert ex.token_ids.count(vocab.cls_id) == 1
            sep = ex.token_ids.index(vocab.sep_id)
            assert ex.segment_ids == (0,) * (sep + 1) + (1,) * (len(ex) - sep - 1)
            assert len(ex) <= 32

    def test_deterministic(self, docs, vocab):
        assert list(make_nsp_pairs(docs, vocab, 32, seed=4)) == list(make_nsp_pairs(docs, vocab, 32, seed=4))

    def test_is_next_fraction(self):
        two = [SentenceList("a", ("alpha beta.", "gamma delta.")), SentenceList("b", ("beta alpha.", "delta gamma."))]
        v = train_vocab(two, 40)
        pairs = list(make_nsp_pairs(two, v, 64, seed=0, dupe_factor=500))
        assert len(pairs) == 1000
        frac = np.mean([p.is_next for p in pairs])
        assert 0.4 <= frac <= 0.6

    def test_not_next_from_other_document(self):
        a = SentenceList("a", ("aa aa.", "aa aa."))
        b = SentenceList("b", ("bb bb.", "bb bb."))
        v = Vocabulary(SPECIALS + ("aa", "bb", "."))
        for ex in make_nsp_pairs([a, b], v, 64, seed=0, dupe_factor=50):
            sep = ex.token_ids.index(v.sep_id)
            first, second = set(ex.token_ids[1:sep]), set(ex.token_ids[sep + 1:-1])
            assert (first == second) == ex.is_next

    def test_truncation_fits(self, docs, vocab):
        assert all(len(ex) <= 12 for ex in make_nsp_pairs(docs, vocab, 12, seed=0))

    def test_single_document_rejected(self, vocab):
        with pytest.raises(PretrainError):
            list(make_nsp_pairs([SentenceList("a", ("one.",))], vocab, 32, seed=0))


class TestMasking:
    def test_statistics(self):
        v = Vocabulary(SPECIALS + tuple(f"w{i}" for i in range(95)))
        rng = np.random.default_rng(0)
        selected = masked = randomized = kept = candidates = 0
        for i in range(800):
            ex = plain_example(100, seed=i)
            out = apply_mlm_mask(ex, v, 0.15, rng)
            candidates += 100
            for pos, label in zip(out.mlm_positions, out.mlm_labels):
                assert ex.token_ids[pos] == label
                assert label not in v.special_ids
                selected += 1
                new = out.token_ids[pos]
                if new == v.mask_id:
                    masked += 1
                elif new == label:
                    kept += 1
                else:
                    randomized += 1
                    assert new not in v.special_ids
        assert selected >= 10_000
        assert abs(selected / candidates - 0.15) <= 0.01
        assert abs(masked / selected - 0.8) <= 0.02
        assert abs(randomized / selected - 0.1) <= 0.02
        assert abs(kept / selected - 0.1) <= 0.02

    def test_rate_zero(self, vocab):
        ex = plain_example(30)
        assert apply_mlm_mask(ex, vocab, 0.0, 1).mlm_positions == ()

    def test_specials_never_selected(self, vocab):
        rng = np.random.default_rng(1)
        ex = plain_example(10)
        specials = {i for i, t in enumerate(ex.token_ids) if t in vocab.special_ids}
        for _ in range(20_000):
            out = apply_mlm_mask(ex, vocab, 0.5, rng)
            assert not specials & set(out.mlm_positions)

    def test_count_bounded(self, vocab):
        for seed in range(200):
            ex = plain_example(23, seed=seed)
            out = apply_mlm_mask(ex, vocab, 0.15, seed)
            assert len(out.mlm_positions) <= math.ceil(0.15 * 23)

    def test_cache_round_trip(self, docs, vocab, tmp_path):
        exs = build_examples(docs, vocab, 32, seed=0)
        save_examples(exs, tmp_path / "cache.bin")
        assert load_examples(tmp_path / "cache.bin") == exs


class TestLosses:
    def test_untrained_loss_levels(self):
        v = Vocabulary(SPECIALS + tuple(f"w{i}" for i in range(95)))
        losses = {"mlm": [], "nsp": []}
        for seed in range(4):
            model = init_params(EncoderConfig.preset("tiny", 100), seed)
            heads = PretrainHeads(64, 100, seed)
            exs = [apply_mlm_mask(plain_example(40, seed=10 * seed + i), v, 0.15, i) for i in range(8)]
            exs = [e if i % 2 else PretrainExample(e.token_ids, e.segment_ids, False, e.mlm_positions, e.mlm_labels)
                   for i, e in enumerate(exs)]
            mlm, nsp = pretrain_losses(model, heads, collate(exs), train=False)
            losses["mlm"].append(mlm.item())
            losses["nsp"].append(nsp.item())
        assert abs(np.mean(losses["mlm"]) - math.log(100)) <= 0.3
        assert abs(np.mean(losses["nsp"]) - math.log(2)) <= 0.1

    def test_no_masked_positions_gives_zero(self):
        model = init_params(EncoderConfig.preset("tiny", 100), 0)
        out = pretrain_step(model, PretrainHeads(64, 100), collate([plain_example(20)]), train=False)
        assert out["mlm"] == 0.0 and out["total"] == out["nsp"]

    def test_training_reduces_loss(self, docs, vocab):
        model = init_params(EncoderConfig.preset("tiny", len(vocab), num_layers=1), 0)
        plan = PhasePlan(plateau_window=1000, max_phase1_steps=200)
        cur = Curriculum(model, vocab, docs, plan, PretrainConfig(batch_size=8, lr=1e-3), seed=0)
        _, log = cur.run()
        totals = log.losses("mlm_loss")
        assert len(totals) == 200
        first = log.records[0]["mlm_loss"] + log.records[0]["nsp_loss"]
        last = np.mean([r["mlm_loss"] + r["nsp_loss"] for r in log.records[-10:]])
        assert last < first


class TestCurriculum:
    def test_plateau_rule(self):
        assert not plateaued([5.0] * 9, 5, 1e-3)
        assert plateaued([5.0] * 10, 5, 1e-3)
        assert not plateaued([5.0] * 5 + [4.0] * 5, 5, 1e-3)
        assert plateaued([4.0] * 5 + [5.0] * 5, 5, 1e-3)

    def _small(self, vocab, **plan):
        cfg = EncoderConfig(1, 16, 2, 32, 16, len(vocab), dropout=0.0)
        return init_params(cfg, 0, np.float64), PhasePlan(phase1_max_len=16, phase2_max_len=48, **plan)

    def test_large_epsilon_switches_early(self, docs, vocab):
        model, plan = self._small(vocab, plateau_window=2, plateau_epsilon=10.0, phase2_steps=3)
        model, log = Curriculum(model, vocab, docs, plan, PretrainConfig(batch_size=4), seed=0).run()
        assert log.switch_step == 4 and log.plateau_reached
        assert model.config.max_positions == 48
        assert log.phase2_max_example_len > 16

    def test_zero_epsilon_never_switches(self, docs, vocab):
        model, plan = self._small(vocab, plateau_window=2, plateau_epsilon=0.0, max_phase1_steps=12)
        _, log = Curriculum(model, vocab, docs, plan, PretrainConfig(batch_size=4, lr=1e-2), seed=0).run()
        assert log.switch_step is None and not log.plateau_reached
        assert len(log.records) == 12

    def test_resume_matches_uninterrupted(self, docs, vocab, tmp_path):
        def fresh(ckpt):
            model, plan = self._small(vocab, plateau_window=3, plateau_epsilon=0.5, phase2_steps=4,
                                      max_phase1_steps=30)
            return Curriculum(model, vocab, docs, plan, PretrainConfig(batch_size=4, checkpoint_every=5), seed=0,
                              checkpoint_dir=ckpt)

        _, full = fresh(tmp_path / "full").run()

        class Killed(Exception):
            pass

        interrupted = fresh(tmp_path / "part")
        step = interrupted.step

        def dying_step():
            if len(interrupted.log.records) == 8:
                raise Killed
            return step()

        interrupted.step = dying_step
        with pytest.raises(Killed):
            interrupted.run()
        resumed = fresh(tmp_path / "part")
        resumed.restore(tmp_path / "part" / "latest")
        assert len(resumed.log.records) < 8
        _, log = resumed.run()
        assert log.records == full.records
        assert log.switch_step == full.switch_step
