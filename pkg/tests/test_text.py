import itertools

import numpy as np
import pytest

import oracles
from vila_mil import tensor as T
from vila_mil.data import ConfigError
from vila_mil.gradcheck import tiny_setup
from vila_mil.tensor import Tape, Tensor, backward
from vila_mil.text import (FrozenTextEncoder, PromptSet, assemble_prompt, descriptions_for, embed_description,
                           encode_class_prompts, encode_class_prompts_reference, load_descriptions, tokenize)

RENAL = ["clear cell renal cell carcinoma", "papillary renal cell carcinoma", "chromophobe renal cell carcinoma"]


class TestEmbedDescription:
    def test_deterministic(self):
        a = embed_description(["Nests of clear cells."], 3, 16)
        b = embed_description(["Nests of clear cells."], 3, 16)
        np.testing.assert_array_equal(a, b)

    def test_length_is_token_count(self):
        text = "Round nuclei, eosinophilic cytoplasm; papillae."
        assert embed_description(text, 0, 8).shape == (len(tokenize(text)), 8) == (5, 8)

    def test_repeated_token_same_row(self):
        E = embed_description("cell cell", 0, 8)
        np.testing.assert_array_equal(E[0], E[1])

    def test_seeds_differ(self):
        words = [f"tok{i}" for i in range(1000)]
        a = embed_description(" ".join(words), 0, 8)
        b = embed_description(" ".join(words), 1, 8)
        assert np.mean(a != b) >= 0.99

    def test_empty_text(self):
        with pytest.raises(ConfigError):
            embed_description(" ,.; ", 0, 8)


class TestAssemblePrompt:
    def test_no_context(self):
        E = Tensor(np.arange(6.0).reshape(2, 3))
        assert assemble_prompt(None, E) is E

    def test_paper_sizes(self):
        V = Tensor(np.zeros((16, 8)))
        E = Tensor(np.ones((40, 8)))
        out = assemble_prompt(V, E)
        assert out.shape == (56, 8)
        np.testing.assert_array_equal(out.data[:16], 0.0)
        np.testing.assert_array_equal(out.data[16:], 1.0)

    def test_dim_mismatch(self):
        with pytest.raises(ValueError):
            assemble_prompt(Tensor(np.zeros((2, 4))), Tensor(np.zeros((3, 5))))


class TestEncodeText:
    def test_identical_rows_independent_of_length(self):
        enc = FrozenTextEncoder(6, seed=2)
        t = np.random.default_rng(0).standard_normal(6)
        expected = oracles.layer_norm(t @ enc.projection)
        for n in (1, 3, 10):
            np.testing.assert_allclose(enc.encode_text(Tensor(np.tile(t, (n, 1)))).data[0], expected, atol=1e-12)

    def test_permutation_invariant(self):
        enc = FrozenTextEncoder(6, seed=2)
        X = np.random.default_rng(1).standard_normal((5, 6))
        a = enc.encode_text(Tensor(X)).data
        b = enc.encode_text(Tensor(X[[3, 1, 4, 0, 2]])).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_unit_variance(self):
        enc = FrozenTextEncoder(16, seed=0)
        y = enc.encode_text(Tensor(np.random.default_rng(2).standard_normal((4, 16)))).data[0]
        assert abs(y.mean()) < 1e-9
        assert y.var() == pytest.approx(1.0, abs=1e-3)

    def test_golden(self):
        enc = FrozenTextEncoder(8, seed=7)
        tokens = embed_description("clear cell nests", 7, 8)
        assert tokens.shape == (3, 8)
        golden = [1.1731801433990472, 0.852151622517048, -0.2748933969647408, -2.0848845325317096,
                  0.1355116823634871, -0.9142967592790008, 0.5347750965560357, 0.5784561439398328]
        np.testing.assert_allclose(enc.encode_text(Tensor(tokens)).data[0], golden, atol=1e-12)

    def test_empty(self):
        with pytest.raises(ValueError):
            FrozenTextEncoder(4).encode_text(Tensor(np.zeros((0, 4))))

    def test_projection_immutable(self):
        enc = FrozenTextEncoder(4, seed=1)
        with pytest.raises(ValueError):
            enc.projection[0, 0] = 1.0
        np.testing.assert_array_equal(enc.projection, FrozenTextEncoder(4, seed=1).projection)
        assert enc.checksum() != FrozenTextEncoder(4, seed=2).checksum()

    def test_encoder_gets_no_gradient(self):
        enc = FrozenTextEncoder(4, seed=1)
        V = Tensor(np.random.default_rng(0).standard_normal((3, 4)), requires_grad=True)
        with Tape():
            loss = T.sum_all(T.mul(enc.encode_text(V), enc.encode_text(V)))
        backward(loss)
        assert enc._proj.grad is None
        assert np.any(V.grad != 0)


class TestClassPrompts:
    def test_single_class(self):
        ps = PromptSet.build(["only"], 8, n_context=2)
        assert encode_class_prompts(ps, "low").shape == (1, 8)

    def test_identical_descriptions(self):
        desc = {n: {"low": ["same words"], "high": ["other words"]} for n in ("a", "b")}
        ps = PromptSet.build(["a", "b"], 8, n_context=3, descriptions=desc)
        D = encode_class_prompts(ps, "low").data
        np.testing.assert_array_equal(D[0], D[1])

    def test_renal_rows_distinct(self):
        ps = PromptSet.build(RENAL, 64, n_context=16, context_init_std=1.0)
        for s in ("low", "high"):
            D = encode_class_prompts(ps, s).data
            for i, j in itertools.combinations(range(3), 2):
                assert oracles.cosine(D[i], D[j]) < 0.999

    @pytest.mark.parametrize("M", [0, 1, 4])
    def test_batched_matches_reference(self, M):
        ps = PromptSet.build(RENAL, 8, n_context=M, context_init_std=1.0, context_seed=3)
        np.testing.assert_allclose(encode_class_prompts(ps, "high").data,
                                   encode_class_prompts_reference(ps, "high").data, atol=1e-12)

    def test_batched_gradient_matches_reference(self):
        ps = PromptSet.build(RENAL, 8, n_context=4, context_init_std=1.0)
        w = np.random.default_rng(0).standard_normal((3, 8))
        grads = []
        for fn in (encode_class_prompts, encode_class_prompts_reference):
            ps.context["low"].zero_grad()
            with Tape():
                loss = T.sum_all(T.mul(fn(ps, "low"), Tensor(w)))
            backward(loss)
            grads.append(ps.context["low"].grad.copy())
        np.testing.assert_allclose(grads[0], grads[1], atol=1e-12)

    def test_shared_context_per_scale(self):
        ps = PromptSet.build(RENAL, 8, n_context=2)
        assert ps.prompt("low", 0).data[:2].tobytes() == ps.prompt("low", 2).data[:2].tobytes()
        assert set(ps.parameters()) == {"context_low", "context_high"}


class TestDescriptions:
    def test_builtin_assets_cover_defaults(self):
        for name in ("renal", "lung"):
            doc = load_descriptions(name)
            for per_scale in doc.values():
                assert per_scale["low"] and per_scale["high"]
        assert set(load_descriptions("renal")) == set(RENAL)

    def test_template_fallback(self):
        desc = descriptions_for(["class 7"])
        assert "class 7" in desc["class 7"]["low"][0]

    def test_missing_scale_rejected(self):
        with pytest.raises(ConfigError):
            load_descriptions({"x": {"low": ["a"], "high": []}})


def test_context_gradient_matches_finite_difference():
    model, bag = tiny_setup(seed=4)
    V = model.prompts.context["high"]
    model.zero_grad()
    with Tape():
        loss = model.loss(model.forward(bag).P, bag.label)
    backward(loss)
    analytic = V.grad[0, 1]
    h = 1e-5
    old = V.data[0, 1]
    vals = []
    for step in (h, -h):
        V.data[0, 1] = old + step
        vals.append(model.loss(model.forward(bag).P, bag.label).item())
    V.data[0, 1] = old
    numeric = (vals[0] - vals[1]) / (2 * h)
    assert analytic != 0
    assert abs(analytic - numeric) <= 1e-4 * max(abs(numeric), 1e-8)
