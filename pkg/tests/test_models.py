import numpy as np
import pytest

from cilda import autodiff as ad
from cilda import models as mm
from cilda.autodiff import Tensor
from cilda.models import CLS_ID, PAD_ID, SEP_ID, EncoderConfig


def expected_param_count(cfg: EncoderConfig) -> int:
    """Independent closed-form parameter count (frozen before the build)."""
    d, ff = cfg.d_model, cfg.d_ff
    embeddings = cfg.vocab_size * d + cfg.max_len * d + 2 * d
    per_block = (4 * d * d + 4 * d) + 2 * d + (d * ff + ff) + (ff * d + d) + 2 * d
    if cfg.head_kind == mm.CLASSIFIER:
        head = d * cfg.num_classes + cfg.num_classes
    else:
        head = cfg.vocab_size
    return embeddings + cfg.num_layers * per_block + head


def tiny_config(**over):
    base = dict(
        num_layers=2, d_model=16, num_heads=2, d_ff=32,
        vocab_size=12, max_len=10, dropout=0.0, head_kind=mm.CLASSIFIER, num_classes=2,
    )
    base.update(over)
    return EncoderConfig(**base)


def sample_batch(k=3, seq=6, vocab=12, seed=0, pad_tail=0):
    rng = np.random.default_rng(seed)
    ids = rng.integers(4, vocab, size=(k, seq))
    ids[:, 0] = CLS_ID
    ids[:, -1] = SEP_ID
    if pad_tail:
        ids = np.concatenate([ids, np.full((k, pad_tail), PAD_ID)], axis=1)
    return ids


class TestInit:
    def test_same_seed_same_bytes(self):
        a = mm.init_params(tiny_config(), seed=7)
        b = mm.init_params(tiny_config(), seed=7)
        assert a.param_bytes() == b.param_bytes()
        c = mm.init_params(tiny_config(), seed=8)
        assert a.param_bytes() != c.param_bytes()

    def test_layernorm_gains_are_one(self):
        model = mm.init_params(tiny_config(), seed=0)
        for name, p in model.params.items():
            if name.endswith(".gain"):
                assert (p.data == 1.0).all(), name
            if name.endswith((".bias", ".b1", ".b2", ".bq", ".bk", ".bv", ".bo")) or name in ("head.b", "head.lm_bias"):
                assert (p.data == 0.0).all(), name

    def test_weights_truncated(self):
        model = mm.init_params(tiny_config(), seed=1)
        w = model.params["embed.tok"].data
        assert np.abs(w).max() <= 2 * mm.INIT_STD
        assert w.std() > 0.01

    def test_param_count_matches_closed_form(self):
        cfg = EncoderConfig(num_layers=2, d_model=32, num_heads=2, d_ff=64,
                            vocab_size=64, max_len=32, head_kind=mm.CLASSIFIER, num_classes=2)
        model = mm.init_params(cfg, seed=0)
        assert model.num_params() == expected_param_count(cfg) == 20290

    def test_param_count_masked_lm(self):
        cfg = tiny_config(head_kind=mm.MASKED_LM)
        model = mm.init_params(cfg, seed=0)
        assert model.num_params() == expected_param_count(cfg)

    def test_invalid_config_names_field(self):
        with pytest.raises(ValueError, match="num_heads|d_model"):
            tiny_config(num_heads=3)
        with pytest.raises(ValueError, match="vocab_size"):
            tiny_config(vocab_size=2)
        with pytest.raises(ValueError, match="dropout"):
            tiny_config(dropout=1.5)


class TestEncode:
    def test_pad_extension_leaves_cls_unchanged(self):
        model = mm.init_params(tiny_config(), seed=2)
        ids = sample_batch()
        base = mm.encode(model, ids)
        padded = mm.encode(model, sample_batch(pad_tail=3))
        for a, b in zip(base.cls_per_layer, padded.cls_per_layer):
            np.testing.assert_allclose(a.data, b.data, atol=1e-9)

    def test_layer_count(self):
        model = mm.init_params(tiny_config(num_layers=2), seed=0)
        stack = mm.encode(model, sample_batch())
        assert len(stack.cls_per_layer) == 2
        assert stack.cls_per_layer[0].shape == (3, 16)
        assert stack.final_hidden.shape == (3, 6, 16)

    def test_permutation_equivariance(self):
        model = mm.init_params(tiny_config(), seed=3)
        ids = sample_batch(k=5)
        perm = np.array([4, 0, 3, 1, 2])
        base = mm.encode(model, ids)
        shuffled = mm.encode(model, ids[perm])
        for a, b in zip(base.cls_per_layer, shuffled.cls_per_layer):
            np.testing.assert_allclose(a.data[perm], b.data, atol=1e-12)

    def test_out_of_range_token_reports_position(self):
        model = mm.init_params(tiny_config(), seed=0)
        ids = sample_batch()
        ids[1, 3] = 99
        with pytest.raises(ValueError, match="row 1, position 3"):
            mm.encode(model, ids)

    def test_missing_cls_rejected(self):
        model = mm.init_params(tiny_config(), seed=0)
        ids = sample_batch()
        ids[0, 0] = SEP_ID
        with pytest.raises(ValueError, match="CLS"):
            mm.encode(model, ids)

    def test_too_long_rejected(self):
        model = mm.init_params(tiny_config(max_len=4), seed=0)
        with pytest.raises(ValueError, match="max_len"):
            mm.encode(model, sample_batch(seq=6))

    def test_deterministic_without_dropout(self):
        model = mm.init_params(tiny_config(dropout=0.1), seed=4)
        ids = sample_batch()
        a = mm.encode(model, ids, training=False)
        b = mm.encode(model, ids, training=False)
        assert (a.final_hidden.data == b.final_hidden.data).all()

    def test_distribution_input_matches_id_lookup(self):
        model = mm.init_params(tiny_config(), seed=5)
        ids = sample_batch()
        onehot = np.zeros((*ids.shape, 12))
        rows, cols = np.indices(ids.shape)
        onehot[rows, cols, ids] = 1.0
        mask = (ids != PAD_ID).astype(float)
        via_ids = mm.encode(model, ids)
        via_dist = mm.encode(model, Tensor(onehot), mask)
        np.testing.assert_array_equal(via_ids.final_hidden.data, via_dist.final_hidden.data)


class TestHeads:
    def test_classify_shape_and_zero_head(self):
        model = mm.init_params(tiny_config(num_classes=3), seed=0)
        model.params["head.w"].data[:] = 0.0
        logits = mm.classify(model, sample_batch())
        assert logits.shape == (3, 3)
        assert (logits.data == 0.0).all()

    def test_classify_pad_invariant(self):
        model = mm.init_params(tiny_config(), seed=6)
        a = mm.classify(model, sample_batch())
        b = mm.classify(model, sample_batch(pad_tail=2))
        np.testing.assert_allclose(a.data, b.data, atol=1e-9)

    def test_single_row_matches_batch(self):
        model = mm.init_params(tiny_config(), seed=7)
        ids = sample_batch(k=4)
        full = mm.classify(model, ids)
        one = mm.classify(model, ids[2:3])
        np.testing.assert_allclose(full.data[2:3], one.data, atol=1e-9)

    def test_head_kind_enforced(self):
        clf = mm.init_params(tiny_config(), seed=0)
        gen = mm.init_params(tiny_config(head_kind=mm.MASKED_LM), seed=0)
        with pytest.raises(ValueError, match="classifier"):
            mm.lm_logits(clf, sample_batch())
        with pytest.raises(ValueError, match="masked_lm"):
            mm.classify(gen, sample_batch())

    def test_lm_logits_shape(self):
        cfg = tiny_config(head_kind=mm.MASKED_LM, vocab_size=64, d_model=16, num_heads=2)
        gen = mm.init_params(cfg, seed=0)
        ids = sample_batch(k=2, seq=8, vocab=64)
        logits = mm.lm_logits(gen, ids)
        assert logits.shape == (2, 8, 64)
        again = mm.lm_logits(gen, ids)
        assert (logits.data == again.data).all()

    def test_lm_grad_wrt_embedding_table(self):
        cfg = tiny_config(head_kind=mm.MASKED_LM, num_layers=1, d_model=8, num_heads=2, d_ff=16, vocab_size=9)
        gen = mm.init_params(cfg, seed=1)
        ids = sample_batch(k=2, seq=4, vocab=9)
        weights = np.random.default_rng(0).normal(size=(2, 4, 9))

        def f(t):
            gen.params["embed.tok"] = t
            out = mm.lm_logits(gen, ids)
            return ad.tsum(ad.mul(out, Tensor(weights)))

        table = Tensor(gen.params["embed.tok"].data.copy())
        try:
            assert ad.check_gradient(f, table) < 1e-5
        finally:
            gen.params["embed.tok"] = Tensor(table.data, requires_grad=True)


class TestAdam:
    def test_zero_grad_keeps_params(self):
        model = mm.init_params(tiny_config(), seed=0)
        before = model.param_bytes()
        for p in model.params.values():
            p.grad = np.zeros_like(p.data)
        state = mm.AdamState.for_params(model.params)
        mm.adam_step(model.params, state, lr=0.1)
        assert model.param_bytes() == before
        assert state.t == 1

    def test_first_step_hand_value(self):
        p = {"w": Tensor(np.array([0.5]), requires_grad=True)}
        p["w"].grad = np.array([1.0])
        state = mm.AdamState.for_params(p)
        mm.adam_step(p, state, lr=0.1)
        # bias-corrected first step moves by ~lr * sign(g)
        np.testing.assert_allclose(p["w"].data, [0.5 - 0.1], atol=1e-8)

    def test_determinism_across_models(self):
        grads = {n: np.random.default_rng(9).normal(size=s) for n, s in [("a", (3, 3)), ("b", (3,))]}

        def run():
            ps = {n: Tensor(np.ones(g.shape), requires_grad=True) for n, g in grads.items()}
            for n, p in ps.items():
                p.grad = grads[n].copy()
            st = mm.AdamState.for_params(ps)
            mm.adam_step(ps, st, lr=0.01)
            return b"".join(ps[n].data.tobytes() for n in sorted(ps))

        assert run() == run()

    def test_missing_grad_rejected(self):
        p = {"w": Tensor(np.ones(3), requires_grad=True)}
        with pytest.raises(ValueError, match="missing gradient"):
            mm.adam_step(p, mm.AdamState.for_params(p), lr=0.1)

    def test_clip_global_norm(self):
        p = {"w": Tensor(np.ones(4), requires_grad=True)}
        p["w"].grad = np.full(4, 3.0)
        norm = mm.clip_global_norm(p, 1.0)
        assert norm == pytest.approx(6.0)
        assert np.linalg.norm(p["w"].grad) == pytest.approx(1.0)


class TestEndToEndGradients:
    def test_classifier_ce_gradcheck_all_params(self):
        cfg = tiny_config(num_layers=2, d_model=16, num_heads=2, d_ff=24, vocab_size=10, max_len=8)
        model = mm.init_params(cfg, seed=11)
        ids = sample_batch(k=2, seq=5, vocab=10, seed=3)
        labels = np.array([0, 1])
        onehot = np.zeros((2, cfg.num_classes))
        onehot[np.arange(2), labels] = 1.0

        def ce_loss():
            logits = mm.classify(model, ids)
            logp = ad.log_softmax(logits, axis=1)
            return ad.mul(ad.tmean(ad.tsum(ad.mul(logp, Tensor(onehot)), axis=1)), Tensor(-1.0))

        worst = {}
        for name in model.params:
            original = model.params[name]

            def f(t, _name=name):
                model.params[_name] = t
                try:
                    return ce_loss()
                finally:
                    model.params[_name] = original

            worst[name] = ad.check_gradient(f, Tensor(original.data.copy()))
        bad = {n: e for n, e in worst.items() if e >= 1e-5}
        assert not bad, f"gradient check failures: {bad}"
