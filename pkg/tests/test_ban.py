import numpy as np
import pytest

from regionvqa import ban as ban_mod
from regionvqa.ban import BanConfig, BanFusion
from regionvqa.errors import ConfigurationError
from regionvqa.numerics import Tensor, precision


def toy_model(**kw):
    cfg = BanConfig(**{**dict(glimpses=2, joint_dim=3, visual_dim=4, question_dim=5, num_answers=6,
                              classifier_hidden=4, init_std=0.5), **kw})
    return BanFusion(cfg, dtype=np.float64)


def inputs(rng, n=3, t=4, dv=4, dq=5):
    return Tensor(rng.standard_normal((n, dv))), Tensor(rng.standard_normal((t, dq)))


def relu(x):
    return np.maximum(x, 0)


class TestAttentionMap:
    def test_zero_projections_uniform(self):
        model = toy_model()
        model.att_v.weight.data[:] = 0
        v, q = inputs(np.random.default_rng(0))
        a = ban_mod.bilinear_attention_map(v, q, 0, model).data
        np.testing.assert_allclose(a, 1.0 / 12)

    def test_single_entry(self):
        model = toy_model()
        v, q = inputs(np.random.default_rng(1), n=1, t=1)
        assert ban_mod.bilinear_attention_map(v, q, 1, model).data[0, 0] == 1.0

    def test_two_by_two_by_hand(self):
        model = toy_model(joint_dim=2, visual_dim=2, question_dim=2)
        u = np.array([[1.0, 0.5], [-0.5, 1.0]])
        w = np.array([[0.3, 1.0], [1.0, 0.2]])
        p = np.array([[1.0, -2.0], [0.5, 0.5]])
        model.att_v.weight.data, model.att_q.weight.data, model.att_p.data = u, w, p
        vd = np.array([[1.0, 2.0], [0.5, -1.0]])
        qd = np.array([[2.0, 0.0], [1.0, 1.0]])
        logits = relu(vd @ u) @ np.diag(p[0]) @ relu(qd @ w).T
        expect = np.exp(logits) / np.exp(logits).sum()
        got = ban_mod.bilinear_attention_map(Tensor(vd), Tensor(qd), 0, model).data
        np.testing.assert_allclose(got, expect, atol=1e-14)

    def test_masked_tokens_get_zero(self):
        model = toy_model()
        v, q = inputs(np.random.default_rng(2))
        a = ban_mod.bilinear_attention_map(v, q, 0, model, np.array([True, False, True, False])).data
        np.testing.assert_array_equal(a[:, [1, 3]], 0.0)
        assert abs(a.sum() - 1) < 1e-12

    def test_all_masked(self):
        model = toy_model()
        v, q = inputs(np.random.default_rng(3))
        with pytest.raises(ValueError):
            ban_mod.bilinear_attention_map(v, q, 0, model, np.zeros(4, bool))


class TestGlimpseJoin:
    def test_delta_attention(self):
        model = toy_model()
        v, q = inputs(np.random.default_rng(4))
        a = np.zeros((3, 4))
        a[2, 1] = 1.0
        got = ban_mod.glimpse_join(v, q, Tensor(a), 0, model).data
        pv = relu(v.data @ model.join_v[0].weight.data)
        pq = relu(q.data @ model.join_q[0].weight.data)
        np.testing.assert_allclose(got, pv[2] * pq[1], atol=1e-14)

    def test_zero_visual_input(self):
        model = toy_model()
        _, q = inputs(np.random.default_rng(5))
        a = Tensor(np.full((3, 4), 1 / 12))
        np.testing.assert_array_equal(ban_mod.glimpse_join(Tensor(np.zeros((3, 4))), q, a, 1, model).data, 0.0)

    def test_triple_loop_oracle(self):
        rng = np.random.default_rng(6)
        model = toy_model()
        for p in model.parameters():
            p.data = rng.standard_normal(p.shape)
        v, q = inputs(rng, n=2, t=2)
        a = rng.random((2, 2))
        a /= a.sum()
        pv = relu(v.data @ model.join_v[1].weight.data + model.join_v[1].bias.data)
        pq = relu(q.data @ model.join_q[1].weight.data + model.join_q[1].bias.data)
        expect = np.zeros(3)
        for k in range(3):
            for i in range(2):
                for j in range(2):
                    expect[k] += pv[i, k] * a[i, j] * pq[j, k]
        np.testing.assert_allclose(ban_mod.glimpse_join(v, q, Tensor(a), 1, model).data, expect, atol=1e-14)


class TestBanForward:
    def test_one_glimpse_is_single_projected_join(self):
        model = toy_model(glimpses=1)
        v, q = inputs(np.random.default_rng(7))
        fused, maps = ban_mod.ban_forward(v, q, model)
        join = ban_mod.glimpse_join(v, q, maps[0], 0, model).data
        expect = join @ model.proj[0].weight.data + model.proj[0].bias.data
        np.testing.assert_allclose(fused.data, expect, atol=1e-14)

    def test_default_eight_glimpses(self):
        model = BanFusion(BanConfig(joint_dim=4, visual_dim=4, question_dim=5, num_answers=3), dtype=np.float64)
        v, q = inputs(np.random.default_rng(8))
        _, maps = ban_mod.ban_forward(v, q, model)
        assert len(maps) == 8
        for a in maps:
            assert np.all(a.data >= 0) and abs(a.data.sum() - 1) < 1e-6

    def test_two_glimpses_compose(self):
        model = toy_model()
        v, q = inputs(np.random.default_rng(9))
        fused, maps = ban_mod.ban_forward(v, q, model)
        f = np.zeros(3)
        for g in range(2):
            j = ban_mod.glimpse_join(v, q, maps[g], g, model).data
            f = f + j @ model.proj[g].weight.data + model.proj[g].bias.data
        np.testing.assert_allclose(fused.data, f, atol=1e-14)

    def test_first_join_residual_start(self):
        model = toy_model(residual_init="first_join")
        v, q = inputs(np.random.default_rng(10))
        fused, maps = ban_mod.ban_forward(v, q, model)
        zeros_model = toy_model()
        plain, _ = ban_mod.ban_forward(v, q, zeros_model)
        first = ban_mod.glimpse_join(v, q, maps[0], 0, model).data
        np.testing.assert_allclose(fused.data, plain.data + first, atol=1e-13)

    def test_calls_glimpse_join_once_per_glimpse(self, monkeypatch):
        model = toy_model(glimpses=5)
        calls = []
        real = ban_mod.glimpse_join
        monkeypatch.setattr(ban_mod, "glimpse_join", lambda *a: calls.append(a[3]) or real(*a))
        ban_mod.ban_forward(*inputs(np.random.default_rng(11)), model)
        assert calls == [0, 1, 2, 3, 4]

    def test_masked_slot_order_irrelevant(self):
        model = toy_model()
        rng = np.random.default_rng(12)
        v, q = inputs(rng)
        mask = np.array([True, True, False, False])
        a, _ = ban_mod.ban_forward(v, q, model, mask)
        swapped = Tensor(q.data[[0, 1, 3, 2]])
        b, _ = ban_mod.ban_forward(v, swapped, model, mask)
        np.testing.assert_allclose(a.data, b.data, atol=1e-14)

    def test_region_permutation_invariance(self):
        model = toy_model()
        rng = np.random.default_rng(13)
        v, q = inputs(rng, n=5)
        perm = rng.permutation(5)
        la = ban_mod.answer_logits(ban_mod.ban_forward(v, q, model)[0], model).data
        lb = ban_mod.answer_logits(ban_mod.ban_forward(Tensor(v.data[perm]), q, model)[0], model).data
        np.testing.assert_allclose(la, lb, atol=1e-6)


class TestAnswerLogits:
    def test_zero_weights(self):
        model = toy_model()
        model.cls_fc2.weight.data[:] = 0
        out = ban_mod.answer_logits(Tensor(np.array([1.0, -2.0, 3.0])), model)
        np.testing.assert_array_equal(out.data, 0.0)

    def test_identity_like_head(self):
        model = toy_model(joint_dim=3, classifier_hidden=3, num_answers=5)
        model.cls_fc1.weight.data = np.eye(3)
        model.cls_fc2.weight.data = np.eye(3, 5)
        f = np.array([0.5, 2.0, 1.25])
        np.testing.assert_array_equal(ban_mod.answer_logits(Tensor(f), model).data, [0.5, 2.0, 1.25, 0.0, 0.0])

    def test_distribution_contract(self):
        model = toy_model()
        logits = ban_mod.answer_logits(ban_mod.ban_forward(*inputs(np.random.default_rng(14)), model)[0], model).data
        from regionvqa.training import softmax_rows
        p = softmax_rows(logits[None])[0]
        assert logits.shape == (6,) and abs(p.sum() - 1) < 1e-12 and np.all(p > 0)


class TestConfig:
    def test_defaults(self):
        cfg = BanConfig()
        assert cfg.glimpses == 8 and cfg.visual_dim == 2048 and cfg.residual_init == "zeros"

    def test_invalid_residual(self):
        with pytest.raises(ConfigurationError):
            BanConfig(residual_init="ones")

    def test_network_checks_question_width(self):
        from regionvqa.language import EncoderConfig
        with pytest.raises(ConfigurationError):
            ban_mod.VqaNet.build("bert", EncoderConfig.toy(), BanConfig(joint_dim=4, visual_dim=4, question_dim=7))

    def test_parameter_groups_split_language(self):
        from regionvqa.language import GruConfig
        with precision("float64"):
            net = ban_mod.VqaNet.build("gru", GruConfig(vocab_size=8, embed_dim=3, hidden_size=4),
                                       BanConfig(glimpses=1, joint_dim=2, visual_dim=3, question_dim=4,
                                                 num_answers=2))
        groups = net.parameter_groups()
        assert sum(p.size for p in groups["language"]) == net.encoder.num_parameters()
        assert len(groups["language"]) + len(groups["base"]) == len(net.parameters())
