import math

import numpy as np
import pytest

from regionvqa.ban import BanConfig, VqaNet
from regionvqa.errors import ConfigurationError, DivergenceError
from regionvqa.io import load_checkpoint
from regionvqa.language import EncoderConfig, encode_question
from regionvqa.numerics import Tensor
from regionvqa.training import (TABLE_COLUMNS, EvalReport, TrainConfig, VqaItem, bce_soft_loss, cosine_lr,
                                ensemble_predict, evaluate, evaluate_predictions, format_table, soft_scores, train,
                                vqa_accuracy)


class FixedModel:
    def __init__(self, probs, classes=("a", "b")):
        self.probs = np.asarray(probs, dtype=np.float64)
        self.classes_ = np.asarray(classes)

    def predict_proba(self, X):
        return np.tile(self.probs, (len(X), 1))


def tiny_net(seed=0):
    enc = EncoderConfig(num_layers=1, hidden_size=8, num_heads=2, ffn_size=8, vocab_size=16, max_positions=8,
                        seed=seed)
    return VqaNet.build("bert", enc, BanConfig(glimpses=2, joint_dim=6, visual_dim=5, question_dim=8,
                                               num_answers=4, seed=seed))


def tiny_items(n=6, seed=0):
    rng = np.random.default_rng(seed)
    cfg = EncoderConfig(vocab_size=16, max_positions=8)
    items = []
    for i in range(n):
        ans = [i % 4] * 10
        items.append(VqaItem(rng.standard_normal((3, 5)).astype(np.float32),
                             encode_question(rng.integers(4, 16, 3), cfg), soft_scores(ans, 4), ans, "other", i))
    return items


class TestBceLoss:
    def test_symmetric_point(self):
        assert bce_soft_loss(Tensor(np.zeros(3)), np.full(3, 0.5)).item() == pytest.approx(math.log(2))

    def test_saturation(self):
        assert bce_soft_loss(Tensor(np.array([40.0, -40.0])), np.array([1.0, 0.0])).item() < 1e-15

    def test_two_answer_formula(self):
        x, t = np.array([0.3, -1.7]), np.array([1.0, 1 / 3])
        sig = 1 / (1 + np.exp(-x))
        expect = -np.mean(t * np.log(sig) + (1 - t) * np.log(1 - sig))
        assert bce_soft_loss(Tensor(x), t).item() == pytest.approx(expect, rel=1e-12)

    def test_target_out_of_range(self):
        with pytest.raises(ValueError):
            bce_soft_loss(Tensor(np.zeros(2)), np.array([0.5, 1.5]))


class TestCosine:
    def test_endpoints_and_midpoint(self):
        assert cosine_lr(0, 10, 1e-3, 1e-5) == 1e-3
        assert cosine_lr(10, 10, 1e-3, 1e-5) == 1e-5
        assert cosine_lr(5, 10, 1e-3, 0.0) == pytest.approx(5e-4, rel=1e-15)

    def test_monotone(self):
        values = [cosine_lr(s, 50, 1.0) for s in range(51)]
        assert all(a >= b for a, b in zip(values, values[1:]))

    def test_zero_total_steps(self):
        with pytest.raises(ValueError):
            cosine_lr(0, 0, 1.0)

    def test_step_out_of_range(self):
        with pytest.raises(ValueError):
            cosine_lr(11, 10, 1.0)


class TestTrainConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert cfg.max_epochs == 20 and cfg.language_lr == 5e-5 and cfg.schedule == "cosine"

    @pytest.mark.parametrize("kw", [dict(max_epochs=0), dict(base_lr=-1.0), dict(schedule="step")])
    def test_invalid(self, kw):
        with pytest.raises(ConfigurationError):
            TrainConfig(**kw)


class TestTrain:
    def test_zero_rate_leaves_parameters(self):
        net = tiny_net()
        before = net.state_dict()
        train(net, tiny_items(1), TrainConfig(max_epochs=1, base_lr=0.0, language_lr=0.0, batch_size=1))
        after = net.state_dict()
        assert all(np.array_equal(before[k], after[k]) for k in before)

    def test_default_epoch_cap(self):
        result = train(tiny_net(), tiny_items(2), TrainConfig(batch_size=2))
        assert result.epochs_run == 20 and len(result.epoch_losses) == 20

    def test_same_seed_same_trajectory(self):
        cfg = TrainConfig(max_epochs=3, batch_size=2, seed=4)
        a = train(tiny_net(), tiny_items(), cfg).epoch_losses
        b = train(tiny_net(), tiny_items(), cfg).epoch_losses
        assert a == b

    def test_rate_ratio_is_fixed(self):
        cfg = TrainConfig(max_epochs=3, batch_size=2, base_lr=2e-3)
        result = train(tiny_net(), tiny_items(), cfg)
        total = len(result.applied_lrs)
        for step, lrs in enumerate(result.applied_lrs):
            factor = cosine_lr(step, total, 1.0, 0.0)
            assert lrs["language"] == 5e-5 * factor and lrs["base"] == 2e-3 * factor
            if lrs["base"]:
                assert lrs["language"] / lrs["base"] == pytest.approx(5e-5 / 2e-3, rel=1e-12)

    def test_loss_decreases(self):
        cfg = TrainConfig(max_epochs=6, batch_size=3, base_lr=3e-3, schedule="constant")
        losses = train(tiny_net(), tiny_items(), cfg).epoch_losses
        assert losses[-1] < losses[0]

    def test_divergence(self, monkeypatch):
        import regionvqa.training as training_mod

        real = training_mod.bce_soft_loss
        monkeypatch.setattr(training_mod, "bce_soft_loss", lambda logits, t: real(logits, t) * float("nan"))
        with pytest.raises(DivergenceError):
            train(tiny_net(), tiny_items(2), TrainConfig(max_epochs=1, batch_size=2))

    def test_checkpoint(self, tmp_path):
        net = tiny_net()
        train(net, tiny_items(2), TrainConfig(max_epochs=1), checkpoint_path=tmp_path / "m.rvqw")
        state = load_checkpoint(tmp_path / "m.rvqw")
        assert set(state) == set(net.state_dict())
        assert (tmp_path / "m.rvqw").read_bytes()[:4] == b"RVQW"

    def test_empty_dataset(self):
        with pytest.raises(ValueError):
            train(tiny_net(), [], TrainConfig())


class TestVqaAccuracy:
    def test_cap(self):
        assert vqa_accuracy("a", ["a"] * 4 + ["b"] * 6) == 1.0

    def test_single_match(self):
        assert vqa_accuracy("a", ["a"] + ["b"] * 9) == pytest.approx(1 / 3)

    def test_no_match(self):
        assert vqa_accuracy("c", ["a"] * 10) == 0.0

    def test_empty(self):
        with pytest.raises(ValueError):
            vqa_accuracy("a", [])

    def test_soft_scores(self):
        np.testing.assert_allclose(soft_scores([0, 0, 1, 2, 2, 2, 2], 4), [2 / 3, 1 / 3, 1.0, 0.0])


def _item(qtype, answers):
    return VqaItem(np.zeros((1, 1)), None, np.zeros(1), answers, qtype)


class TestEvaluate:
    def test_perfect(self):
        items = [_item(t, ["x"] * 10) for t in ("yesno", "number", "other")]
        report = evaluate_predictions(["x"] * 3, items)
        assert report.cells() == {c: 100.0 for c in TABLE_COLUMNS}

    def test_empty_bucket_is_absent(self):
        report = evaluate_predictions(["x"], [_item("yesno", ["x"] * 10)])
        assert report.number is None and report.other is None
        assert report.to_kv()["number"] == "absent"
        assert "absent" in format_table([({}, report)])

    def test_hand_aggregation(self):
        items = [_item("yesno", ["y"] * 10), _item("yesno", ["y"] + ["n"] * 9), _item("number", ["2"] * 2 + ["3"] * 8),
                 _item("other", ["red"] * 10), _item("other", ["blue"] * 10)]
        preds = ["y", "y", "2", "red", "red"]
        per_q = [1.0, 1 / 3, 2 / 3, 1.0, 0.0]
        report = evaluate_predictions(preds, items)
        assert report.yes_no == pytest.approx(100 * (1 + 1 / 3) / 2, abs=1e-9)
        assert report.number == pytest.approx(100 * 2 / 3, abs=1e-9)
        assert report.other == pytest.approx(50.0, abs=1e-9)
        assert report.overall == pytest.approx(100 * sum(per_q) / 5, abs=1e-9)
        assert report.counts == {"yesno": 2, "number": 1, "other": 2}

    def test_unknown_type(self):
        with pytest.raises(ValueError):
            evaluate_predictions(["x"], [_item("colour", ["x"] * 10)])

    def test_estimator_path(self):
        class Const:
            def predict(self, X):
                return ["x"] * len(X)
        report = evaluate(Const(), [_item("other", ["x"] * 10), _item("other", ["y"] * 10)])
        assert report.other == 50.0

    def test_table_columns(self):
        report = EvalReport(50.0, 25.0, 10.0, 30.0, {})
        header = format_table([({"Model": "m"}, report)], ["Model"]).splitlines()[1]
        assert [c.strip() for c in header.strip("|").split("|")] == ["Model", *TABLE_COLUMNS]


class TestEnsemble:
    def test_copies_reproduce_member(self):
        p = np.array([0.1, 0.35, 0.55])
        m = FixedModel(p, ("a", "b", "c"))
        out = ensemble_predict([m] * 7, [0, 1])
        np.testing.assert_allclose(out, np.tile(p, (2, 1)), rtol=0, atol=1e-12)

    def test_two_model_average(self):
        out = ensemble_predict([FixedModel([0.6, 0.4]), FixedModel([0.2, 0.8])], [0])
        np.testing.assert_allclose(out[0], [0.4, 0.6], atol=1e-15)

    def test_stays_on_simplex(self):
        rng = np.random.default_rng(0)
        members = [FixedModel(rng.dirichlet(np.ones(5)), list("abcde")) for _ in range(9)]
        out = ensemble_predict(members, [0, 1, 2])
        assert np.all(out >= 0) and np.all(np.abs(out.sum(axis=1) - 1) <= 1e-9)

    def test_mismatched_vocabularies(self):
        with pytest.raises(ValueError):
            ensemble_predict([FixedModel([0.5, 0.5], ("a", "b")), FixedModel([0.5, 0.5], ("b", "a"))], [0])

    def test_empty(self):
        with pytest.raises(ValueError):
            ensemble_predict([], [0])
