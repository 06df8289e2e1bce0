"""Training engine: schedules, parameter freezing, determinism, checkpoint
selection, and the two-phase sparse-mask procedure."""

import json

import numpy as np
import pytest
from conftest import exact_delta_exists

from xlrank.adapters import AdapterConfig, AdapterParams, AdapterStack
from xlrank.encoder import Encoder, EncoderConfig
from xlrank.errors import ConfigError, ContractError
from xlrank.sftm import compose
from xlrank.tokenizer import MASK as MASK_ID
from xlrank.tokenizer import Tokenizer
from xlrank.training import (
    RankingExample,
    TrainConfig,
    WarmupSchedule,
    _mask_batch,
    build_ranking_examples,
    encoder_eligible_indices,
    learn_mask,
    mlm_eval,
    phase2_train,
    select_all,
    select_modules,
    select_theta,
    train_full,
    train_mlm,
    train_ranking,
    write_log,
)

TINY = EncoderConfig(
    num_layers=2, hidden=8, heads=2, ffn_dim=16, vocab_size=32, max_seq_len=16
)
TEXTS = [
    "alpha beta gamma", "beta gamma delta", "gamma delta alpha",
    "delta alpha beta", "alpha gamma beta", "beta delta gamma",
]
QUERIES = {"q1": "alpha beta", "q2": "delta gamma"}
DOCS = {
    "d1": "alpha beta alpha beta", "d2": "zeta eta zeta eta",
    "d3": "delta gamma delta gamma", "d4": "eta zeta eta zeta",
}
EXAMPLES = [
    RankingExample("q1", "d1", 1), RankingExample("q1", "d2", 0),
    RankingExample("q2", "d3", 1), RankingExample("q2", "d4", 0),
]


def fresh_encoder(seed=11):
    tok = Tokenizer.build(TEXTS + list(DOCS.values()) + list(QUERIES.values()), cap=32)
    return Encoder.init(TINY, tok, seed=seed)


def cfg(**kw):
    base = dict(learning_rate=3e-3, batch_size=4, total_steps=40,
                warmup_steps=4, eval_interval=20, seed=5, max_seq_len=16)
    base.update(kw)
    return TrainConfig(**base)


class TestSchedule:
    def test_linear_warmup_then_constant(self):
        s = WarmupSchedule(base_lr=0.1, warmup_steps=4)
        assert s.lr_at(1) == pytest.approx(0.025)
        assert s.lr_at(4) == pytest.approx(0.1)
        assert s.lr_at(5) == pytest.approx(0.1)
        assert s.lr_at(400) == pytest.approx(0.1)

    def test_zero_warmup(self):
        s = WarmupSchedule(0.2, 0)
        assert s.lr_at(1) == 0.2

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            TrainConfig(warmup_steps=10, total_steps=5)
        with pytest.raises(ConfigError):
            TrainConfig(batch_size=0)

    def test_label_validation(self):
        with pytest.raises(ContractError):
            RankingExample("q", "d", 2)


class TestMaskingPolicy:
    def test_proportions(self):
        rng = np.random.default_rng(0)
        ids = rng.integers(5, 32, size=(200, 20))
        mask = np.ones(ids.shape)
        inputs, positions, targets = _mask_batch(ids, mask, 32, rng)
        frac = len(positions) / ids.size
        assert abs(frac - 0.15) < 0.02
        flat_in = inputs.ravel()
        as_mask = (flat_in[positions] == MASK_ID).mean()
        unchanged = (flat_in[positions] == targets).mean()
        assert abs(as_mask - 0.80) < 0.05
        assert abs(unchanged - 0.10) < 0.05
        np.testing.assert_array_equal(targets, ids.ravel()[positions])

    def test_specials_never_masked(self):
        rng = np.random.default_rng(1)
        ids = np.array([[2, 7, 8, 3, 0, 0]] * 50)
        mask = np.array([[1, 1, 1, 1, 0, 0]] * 50, dtype=float)
        _, positions, _ = _mask_batch(ids, mask, 32, rng)
        cols = positions % 6
        assert set(cols.tolist()) <= {1, 2}

    def test_at_least_one_masked(self):
        rng = np.random.default_rng(2)
        ids = np.array([[2, 7, 3]])
        for _ in range(20):
            _, positions, _ = _mask_batch(ids, np.ones(ids.shape), 32, rng)
            assert len(positions) >= 1


class TestFreezeAndDeterminism:
    def test_zero_learning_rate_keeps_theta(self):
        enc = fresh_encoder()
        before = enc.params.flatten()
        train_mlm(TEXTS, enc, select_all(enc.params), cfg(learning_rate=0.0))
        assert (enc.params.flatten() == before).all()

    def test_adapter_selector_freezes_base(self):
        enc = fresh_encoder()
        la = AdapterParams.init(AdapterConfig(2, TINY.hidden), TINY.num_layers, 3)
        stack = AdapterStack(TINY.num_layers, la_q=la)
        before = enc.params.flatten()
        before_adapter = la.layers[0]["down_w"].data.copy()
        train_mlm(TEXTS, enc, select_modules(la.tensors()), cfg(), plugins=stack)
        assert (enc.params.flatten() == before).all()
        assert not (la.layers[0]["down_w"].data == before_adapter).all()

    def test_support_selector_freezes_complement(self):
        enc = fresh_encoder()
        support = np.arange(0, enc.params.dim, 97, dtype=np.int64)
        before = enc.params.flatten()
        train_mlm(TEXTS, enc, select_theta(support), cfg(total_steps=10))
        after = enc.params.flatten()
        off = np.setdiff1d(np.arange(enc.params.dim), support)
        assert (after[off] == before[off]).all()
        assert not (after[support] == before[support]).all()

    def test_same_seed_same_checkpoint(self):
        runs = []
        for _ in range(2):
            enc = fresh_encoder(seed=21)
            train_mlm(TEXTS, enc, select_all(enc.params), cfg(total_steps=15))
            runs.append(enc.params.flatten())
        assert (runs[0] == runs[1]).all()

    def test_zero_steps_is_identity(self):
        enc = fresh_encoder()
        before = enc.params.flatten()
        res = train_ranking(EXAMPLES, enc, select_all(enc.params),
                            cfg(total_steps=0, warmup_steps=0, eval_interval=1),
                            QUERIES, DOCS)
        assert (enc.params.flatten() == before).all()
        assert res.records == []


class TestObjectives:
    def test_mlm_improves_heldout(self):
        enc = fresh_encoder()
        c = cfg(total_steps=150, batch_size=8)
        before_loss, before_acc = mlm_eval(enc, TEXTS, c)
        train_mlm(TEXTS, enc, select_all(enc.params), c)
        after_loss, after_acc = mlm_eval(enc, TEXTS, c)
        assert after_loss < before_loss
        assert after_acc >= before_acc

    def test_empty_corpus_rejected(self):
        enc = fresh_encoder()
        with pytest.raises(ContractError):
            train_mlm([], enc, select_all(enc.params), cfg())

    def test_separable_ranking_reaches_low_loss(self):
        enc = fresh_encoder()
        res = train_ranking(EXAMPLES, enc, select_all(enc.params),
                            cfg(total_steps=150, batch_size=4), QUERIES, DOCS)
        tail = [r["loss"] for r in res.records[-15:]]
        assert np.mean(tail) < np.log(2)

    def test_loss_trend_down(self):
        enc = fresh_encoder()
        res = train_mlm(TEXTS, enc, select_all(enc.params), cfg(total_steps=100))
        losses = [r["loss"] for r in res.records]
        assert np.mean(losses[-10:]) < np.mean(losses[:10])

    def test_single_label_rejected(self):
        enc = fresh_encoder()
        only_pos = [e for e in EXAMPLES if e.label == 1]
        with pytest.raises(ContractError):
            train_ranking(only_pos, enc, select_all(enc.params), cfg(),
                          QUERIES, DOCS)

    def test_empty_examples_rejected(self):
        enc = fresh_encoder()
        with pytest.raises(ContractError):
            train_ranking([], enc, select_all(enc.params), cfg(), QUERIES, DOCS)

    def test_full_equals_ranking_with_select_all(self):
        enc_a = fresh_encoder(seed=31)
        train_full(EXAMPLES, enc_a, cfg(total_steps=25), QUERIES, DOCS)
        enc_b = fresh_encoder(seed=31)
        train_ranking(EXAMPLES, enc_b, select_all(enc_b.params),
                      cfg(total_steps=25), QUERIES, DOCS)
        assert (enc_a.params.flatten() == enc_b.params.flatten()).all()


class TestCheckpointSelection:
    def test_best_restored_and_metrics_ordered(self):
        enc = fresh_encoder()
        snapshots = {}
        fake_metrics = iter([0.9, 0.5, 0.3, 0.1])

        def validator():
            m = next(fake_metrics)
            snapshots[m] = enc.params.flatten()
            return m

        res = train_ranking(EXAMPLES, enc, select_all(enc.params),
                            cfg(total_steps=40, eval_interval=10),
                            QUERIES, DOCS, validator=validator)
        assert res.best_metric == 0.9
        assert res.final_metric == 0.1
        assert res.best_metric >= res.final_metric
        assert (enc.params.flatten() == snapshots[0.9]).all()

    def test_mlm_best_is_lowest_loss(self):
        enc = fresh_encoder()
        res = train_mlm(TEXTS, enc, select_all(enc.params),
                        cfg(total_steps=60, eval_interval=20), heldout=TEXTS)
        vals = [r["val"] for r in res.records if "val" in r]
        assert res.best_metric == min(vals)


class TestTwoPhase:
    def test_empty_support_returns_base(self):
        enc = fresh_encoder()
        theta0 = enc.params.flatten()
        theta2 = phase2_train(enc, theta0, np.array([], dtype=np.int64),
                              cfg(total_steps=10), "mlm", texts=TEXTS)
        assert (theta2 == theta0).all()

    def test_full_support_equals_full_finetune(self):
        enc = fresh_encoder(seed=41)
        theta0 = enc.params.flatten()
        theta2 = phase2_train(enc, theta0, np.arange(enc.params.dim),
                              cfg(total_steps=20), "ranking",
                              examples=EXAMPLES, queries=QUERIES, docs=DOCS)
        enc.params.unflatten(theta0)
        train_full(EXAMPLES, enc, cfg(total_steps=20), QUERIES, DOCS)
        assert (theta2 == enc.params.flatten()).all()

    def test_off_support_bit_identical(self):
        enc = fresh_encoder()
        theta0 = enc.params.flatten()
        support = np.sort(np.random.default_rng(0).choice(
            enc.params.dim, size=500, replace=False))
        theta2 = phase2_train(enc, theta0, support, cfg(total_steps=15),
                              "mlm", texts=TEXTS)
        off = np.setdiff1d(np.arange(enc.params.dim), support)
        assert (theta2[off] == theta0[off]).all()
        assert not (theta2[support] == theta0[support]).all()

    def test_phase2_reduces_training_loss(self):
        enc = fresh_encoder()
        theta0 = enc.params.flatten()
        c = cfg(total_steps=120, batch_size=8)
        loss0, _ = mlm_eval(enc, TEXTS, c)
        support = encoder_eligible_indices(enc.params)
        phase2_train(enc, theta0, support, c, "mlm", texts=TEXTS)
        loss2, _ = mlm_eval(enc, TEXTS, c)
        assert loss2 <= loss0

    def test_learn_mask_contracts(self):
        enc = fresh_encoder(seed=51)
        theta_base = enc.params.flatten()
        k = 300
        mask, head, theta2 = learn_mask(
            enc, k, cfg(total_steps=20), cfg(total_steps=20),
            "ranking", "ranking", "rank",
            examples=EXAMPLES, queries=QUERIES, docs=DOCS, train_head=True,
        )
        assert len(mask) <= k
        head_idx = enc.params.indices_of(["head.w", "head.b"])
        assert not np.intersect1d(mask.indices, head_idx).size
        composed = compose(theta_base, mask)
        eligible = encoder_eligible_indices(enc.params)
        # composition reproduces θ² exactly wherever float arithmetic admits
        # an exact delta; rounding can rule out every candidate on coordinates
        # whose sign flipped, where the stored delta is the closest attainable
        miss = eligible[composed[eligible] != theta2[eligible]]
        assert miss.size <= 0.25 * len(mask)
        for i in miss:
            assert not exact_delta_exists(theta_base[i], theta2[i])
            v = mask.values[np.searchsorted(mask.indices, i)]
            assert abs(composed[i] - theta2[i]) <= abs(np.spacing(v))
        assert head is not None and head["w"].shape == (TINY.hidden, 1)
        np.testing.assert_array_equal(
            head["w"].ravel(),
            theta2[enc.params.slices["head.w"]],
        )


class TestHelpers:
    def test_build_ranking_examples(self):
        qrels = {"q1": {"d1"}, "q2": {"d3"}}
        rankings = {"q1": ["d2", "d1", "d4"], "q2": ["d3", "d4"]}
        ex = build_ranking_examples(qrels, rankings, depth=2)
        got = [(e.query_id, e.doc_id, e.label) for e in ex]
        assert got == [
            ("q1", "d1", 1), ("q1", "d2", 0),
            ("q2", "d3", 1), ("q2", "d4", 0),
        ]

    def test_eligible_excludes_head(self):
        enc = fresh_encoder()
        eligible = encoder_eligible_indices(enc.params)
        head_idx = enc.params.indices_of(["head.w", "head.b"])
        assert not np.intersect1d(eligible, head_idx).size
        assert len(eligible) + len(head_idx) == enc.params.dim

    def test_write_log(self, tmp_path):
        path = tmp_path / "log.jsonl"
        write_log(path, [{"step": 1, "loss": 0.5, "lr": 0.1}])
        lines = path.read_text().splitlines()
        assert json.loads(lines[0]) == {"step": 1, "loss": 0.5, "lr": 0.1}
