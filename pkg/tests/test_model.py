import dataclasses
import logging
import math

import numpy as np
import pytest

import oracles
from vila_mil.data import Bag, ConfigError
from vila_mil.gradcheck import check_model, tiny_setup
from vila_mil.model import (ModelConfig, ViLaMIL, baseline_aggregate, feature_summation_forward,
                            instance_similarity, normalize_and_loss, predict, single_scale_forward)
from vila_mil.tensor import Tensor

LUNG = ["lung adenocarcinoma", "lung squamous cell carcinoma"]

# fused P of tiny_setup(0), produced by oracles.reference_forward
GOLDEN_P = [0.9912217190919461, 1.0087782809080539]
GOLDEN_LOSS = -math.log(GOLDEN_P[1] / 2)


def _bag(rng, d, n_l=5, n_h=7, label=0):
    return Bag("r", label, rng.standard_normal((n_l, d)), rng.standard_normal((n_h, d)))


def _fs_oracle(model, bag):
    """Feature-summation forward composed from the module oracles."""
    S_sum, D_sum = 0.0, 0.0
    for s in ("low", "high"):
        H = bag.H_l if s == "low" else bag.H_h
        pool = model.pooling[s]
        upd, _ = oracles.prototype_attention(model.prototypes[s].data, H)
        S, _ = oracles.attention_pool(upd, pool.W_a.data, pool.W_v.data, pool.W_c.data, pool.W_b.data)
        S_sum = S_sum + S
        D_sum = D_sum + oracles.context_attention(oracles.class_text_features(model, s), upd, H)
    logits = [oracles.cosine(S_sum, D_sum[i]) / model.config.tau for i in range(model.n_classes)]
    return model.config.alpha_sum * oracles.softmax(logits)


class TestForward:
    def test_single_class(self):
        model = ViLaMIL(ModelConfig(d=8, n_prototypes=2, n_context=2, alpha_low=0.7, alpha_high=1.3), ["only"])
        np.testing.assert_allclose(model.forward(_bag(np.random.default_rng(0), 8)).probs, [2.0], atol=1e-12)

    def test_identical_text_uniform(self):
        desc = {n: {"low": ["same"], "high": ["same too"]} for n in ("a", "b", "c")}
        cfg = ModelConfig(d=8, n_prototypes=2, n_context=2, descriptions=desc)
        model = ViLaMIL(cfg, ["a", "b", "c"])
        np.testing.assert_allclose(model.forward(_bag(np.random.default_rng(1), 8)).probs, 2 / 3, atol=1e-12)

    def test_golden(self):
        model, bag = tiny_setup(0)
        np.testing.assert_allclose(model.forward(bag).probs, GOLDEN_P, atol=1e-12)
        np.testing.assert_allclose(oracles.reference_forward(model, bag), GOLDEN_P, atol=1e-15)

    def test_matches_oracle_50_seeds(self):
        for seed in range(50):
            rng = np.random.default_rng(seed)
            cfg = ModelConfig(d=6, n_prototypes=3, n_context=2, tau=0.3, seed=seed, context_init_std=1.0)
            model = ViLaMIL(cfg, ["x", "y", "z"])
            bag = _bag(rng, 6, int(rng.integers(1, 8)), int(rng.integers(1, 12)))
            np.testing.assert_allclose(model.forward(bag).probs, oracles.reference_forward(model, bag),
                                       atol=1e-10)

    def test_probability_conservation(self):
        rng = np.random.default_rng(0)
        for i in range(200):
            a_l, a_h = rng.uniform(0, 2, size=2)
            model, _ = tiny_setup(i, alpha_low=float(a_l), alpha_high=float(a_h))
            P = model.forward(_bag(rng, 8)).P
            assert abs(P.data.sum() - (a_l + a_h)) <= 1e-6
            assert np.all(P.data >= 0)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(3)
        model, _ = tiny_setup(3)
        for _ in range(20):
            bag = _bag(rng, 8, 6, 9)
            perm = Bag("p", 0, bag.H_l[rng.permutation(6)], bag.H_h[rng.permutation(9)])
            assert np.max(np.abs(model.forward(bag).probs - model.forward(perm).probs)) <= 1e-9

    def test_d_mismatch(self):
        model, _ = tiny_setup(0)
        with pytest.raises(ValueError, match="feature dim"):
            model.forward(_bag(np.random.default_rng(0), 5))

    def test_tau_monotone(self):
        model, bag = tiny_setup(2)
        prev = None
        for tau in (2.0, 1.0, 0.5, 0.1, 0.05):
            model.config = dataclasses.replace(model.config, tau=tau)
            top = [float(dg.probs.data.max()) for dg in model.forward(bag).scales.values()]
            if prev is not None:
                assert all(t > p for t, p in zip(top, prev))
            prev = top

    @pytest.mark.parametrize("bad", [dict(tau=0.0), dict(alpha_low=0.0, alpha_high=0.0), dict(aggregator="x"),
                                     dict(fusion="feature_summation", similarity="instance_max")])
    def test_invalid_config(self, bad):
        with pytest.raises(ConfigError):
            ModelConfig(**bad).validate()


class TestLossAndPredict:
    def test_uniform_loss(self):
        assert normalize_and_loss(Tensor([[2 / 3] * 3]), 0, 2.0).item() == pytest.approx(math.log(3))

    def test_golden_loss(self):
        model, bag = tiny_setup(0)
        assert model.loss(model.forward(bag).P, bag.label).item() == pytest.approx(GOLDEN_LOSS, abs=1e-12)

    def test_disabled_low_branch(self):
        model, bag = tiny_setup(0, alpha_low=0.0)
        high = single_scale_forward(tiny_setup(0)[0], bag, "high")
        assert model.loss(model.forward(bag).P, 1).item() == normalize_and_loss(high.P, 1, 1.0).item()

    def test_label_range(self):
        with pytest.raises(IndexError):
            normalize_and_loss(Tensor([[1.0, 1.0]]), 2, 2.0)

    def test_predict(self):
        assert predict([0.2, 1.8]) == 1
        assert predict([0.5, 0.5, 0.1]) == 0
        rng = np.random.default_rng(0)
        for _ in range(100):
            P = rng.uniform(0, 2, 4)
            assert predict(P) == predict(rng.uniform(0.01, 100) * P)


class TestVariants:
    def test_single_scale_bit_identical(self):
        model, bag = tiny_setup(1)
        for s, other in (("low", "alpha_high"), ("high", "alpha_low")):
            ref, _ = tiny_setup(1, **{other: 0.0})
            assert single_scale_forward(model, bag, s).probs.tobytes() == ref.forward(bag).probs.tobytes()

    def test_single_scale_golden(self):
        model, bag = tiny_setup(0)
        low = single_scale_forward(model, bag, "low").probs
        ref, _ = tiny_setup(0, alpha_high=0.0)
        np.testing.assert_allclose(low, oracles.reference_forward(ref, bag), atol=1e-12)
        np.testing.assert_allclose(low, [0.29523979536386896, 0.704760204636131], atol=1e-12)

    def test_low_never_reads_high(self):
        model, bag = tiny_setup(1)

        class Guard(Bag):
            armed = False

            def __getattribute__(self, name):
                if name == "H_h" and object.__getattribute__(self, "armed"):
                    raise AssertionError("high-scale features read")
                return object.__getattribute__(self, name)

        guarded = Guard(bag.id, bag.label, bag.H_l, bag.H_h)
        guarded.armed = True
        np.testing.assert_array_equal(single_scale_forward(model, guarded, "low").probs,
                                      single_scale_forward(model, bag, "low").probs)

    def test_feature_summation_golden(self):
        model, bag = tiny_setup(0)
        got = feature_summation_forward(model, bag).probs
        np.testing.assert_allclose(got, _fs_oracle(model, bag), atol=1e-12)
        np.testing.assert_allclose(got, [1.4486705195235072, 0.5513294804764926], atol=1e-12)

    def test_feature_summation_identical_scales(self):
        """Same inputs and weights on both scales: S and D' double, cosine is unchanged."""
        model, bag = tiny_setup(0)
        model.prototypes["high"].data[...] = model.prototypes["low"].data
        for k, t in model.pooling["high"].tensors().items():
            t.data[...] = model.pooling["low"].tensors()[k].data
        model.prompts.context["high"].data[...] = model.prompts.context["low"].data
        model.prompts.tokens["high"] = model.prompts.tokens["low"]
        model.prompts.__post_init__()
        twin = Bag("t", 0, bag.H_l, bag.H_l)
        fused = feature_summation_forward(model, twin).probs / 2
        single = single_scale_forward(model, twin, "low").probs
        np.testing.assert_allclose(fused, single, atol=1e-12)

    def test_feature_summation_zero_high(self):
        model, bag = tiny_setup(0, text_decoder=False, aggregator="attention_pool")
        model.pooling["high"].W_c.data[...] = 0.0
        fs = feature_summation_forward(model, bag).probs / 2
        # D_high still contributes, so compare against an oracle with S_high = 0
        S = oracles.attention_pool(bag.H_l, *(model.pooling["low"].tensors()[k].data
                                              for k in ("W_a", "W_v", "W_c", "W_b")))[0]
        D = oracles.class_text_features(model, "low") + oracles.class_text_features(model, "high")
        ref = oracles.softmax([oracles.cosine(S, D[i]) / 0.5 for i in range(2)])
        np.testing.assert_allclose(fs, ref, atol=1e-12)

    def test_instance_modes_agree_on_one_patch(self):
        model, _ = tiny_setup(2)
        bag = _bag(np.random.default_rng(0), 8, 1, 1)
        outs = [instance_similarity(model, bag, m, k=1).data for m in ("max", "mean", "topk")]
        np.testing.assert_allclose(outs[0], outs[1], atol=1e-12)
        np.testing.assert_allclose(outs[0], outs[2], atol=1e-12)

    def test_topk_fixture(self):
        model, _ = tiny_setup(0, text_decoder=False, alpha_low=0.0)
        rng = np.random.default_rng(4)
        bag = _bag(rng, 8, 2, 4)
        P = instance_similarity(model, bag, "topk", k=2).data[0]
        D = oracles.class_text_features(model, "high")
        pooled = []
        for i in range(2):
            sims = sorted((oracles.cosine(h, D[i]) for h in bag.H_h), reverse=True)
            pooled.append((sims[0] + sims[1]) / 2 / 0.5)
        np.testing.assert_allclose(P, oracles.softmax(pooled), atol=1e-12)

    def test_topk_clamps_with_warning(self, caplog):
        model, _ = tiny_setup(0)
        bag = _bag(np.random.default_rng(0), 8, 2, 3)
        with caplog.at_level(logging.WARNING):
            big = instance_similarity(model, bag, "topk", k=50).data
        assert "clamping" in caplog.text
        np.testing.assert_allclose(big, instance_similarity(model, bag, "mean").data, atol=1e-12)

    def test_instance_max_perfect_match(self):
        model, _ = tiny_setup(0, similarity="instance_max", text_decoder=False, alpha_low=0.0)
        D = oracles.class_text_features(model, "high")
        rng = np.random.default_rng(0)
        for label in range(2):
            for _ in range(10):
                H = np.vstack([D[label], rng.standard_normal((5, 8))])
                bag = Bag("m", label, H[:1], H[rng.permutation(6)])
                assert predict(model.forward(bag).P) == label

    def test_baselines(self):
        rng = np.random.default_rng(0)
        row = rng.standard_normal((1, 4))
        np.testing.assert_allclose(baseline_aggregate(Tensor(np.tile(row, (3, 1))), "mean_pool").data, row)
        model, _ = tiny_setup(0, d=4)
        p = model.pooling["low"]
        h = rng.standard_normal((1, 4))
        np.testing.assert_allclose(baseline_aggregate(Tensor(h), "abmil", p).data[0],
                                   p.W_c.data @ p.W_a.data @ h[0], atol=1e-12)
        H = np.array([[1.0, 0.0, -1.0, 2.0], [0.5, 0.5, 0.5, 0.5], [-2.0, 1.0, 0.0, 1.0]])
        np.testing.assert_allclose(baseline_aggregate(Tensor(H), "mean_pool").data[0], H.mean(axis=0))
        np.testing.assert_allclose(
            baseline_aggregate(Tensor(H), "attention_pool", p).data[0],
            oracles.attention_pool(H, p.W_a.data, p.W_v.data, p.W_c.data, p.W_b.data)[0], atol=1e-12)
        np.testing.assert_allclose(baseline_aggregate(Tensor(H), "self_attention_pool").data[0],
                                   oracles.cross_attention(H, H, H).mean(axis=0), atol=1e-12)


class TestExplain:
    def test_single_prototype(self):
        model, bag = tiny_setup(0, n_prototypes=1)
        doc = model.explain(bag)
        assert doc["representative_prototype"] == 0
        assert all(a["prototype"] == 0 and a["flagged"] for a in doc["assignments"])
        assert doc["scale"] == "high" and doc["bag_id"] == bag.id

    def test_permutation(self):
        model, bag = tiny_setup(0, n_prototypes=3)
        perm = np.random.default_rng(0).permutation(bag.H_h.shape[0])
        a = model.explain(bag)["assignments"]
        b = model.explain(Bag(bag.id, bag.label, bag.H_l, bag.H_h[perm]))["assignments"]
        for new, old in enumerate(perm):
            assert b[new]["prototype"] == a[old]["prototype"]

    def test_engineered_logits(self):
        model, _ = tiny_setup(0, n_prototypes=2, d=4)
        model.prototypes["high"].data[...] = [[5.0, 0, 0, 0], [0, 5.0, 0, 0]]
        H = np.array([[1.0, 0, 0, 0], [0, 1.0, 0, 0], [2.0, 1.0, 0, 0], [0, 0, 1.0, 0]])
        doc = model.explain(Bag("e", 0, H[:1], H))
        # column argmax of Pr H^T: ties go to the lowest prototype index
        assert [a["prototype"] for a in doc["assignments"]] == [0, 1, 0, 0]
        rep = doc["representative_prototype"]
        assert [a["flagged"] for a in doc["assignments"]] == [p == rep for p in (0, 1, 0, 0)]

    def test_unsupported(self):
        model, bag = tiny_setup(0, aggregator="mean_pool")
        with pytest.raises(ValueError):
            model.explain(bag)


class TestGradients:
    def test_all_groups(self):
        model, bag = tiny_setup(0)
        results = check_model(model, bag)
        names = {r.name for r in results}
        assert names == {f"{k}_{s}" for k in ("prototypes", "W_a", "W_v", "W_c", "W_b", "context")
                         for s in ("low", "high")}
        for r in results:
            assert r.max_rel_error <= 1e-4, r

    @pytest.mark.parametrize("overrides", [
        dict(fusion="feature_summation"), dict(similarity="instance_topk", topk=2),
        dict(aggregator="abmil"), dict(aggregator="self_attention_pool"), dict(text_layer_norm=True),
        dict(projected_qkv=True), dict(prototype_layers=2), dict(alpha_low=0.0)])
    def test_variants(self, overrides):
        model, bag = tiny_setup(1, **overrides)
        for r in check_model(model, bag):
            assert r.max_rel_error <= 1e-4, r


class TestPersistence:
    def test_save_load(self, tmp_path):
        model, bag = tiny_setup(5)
        model.save(tmp_path / "p.json")
        again = ViLaMIL.load(tmp_path / "p.json")
        assert again.checksum() == model.checksum()
        assert again.forward(bag).probs.tobytes() == model.forward(bag).probs.tobytes()
