"""Architecture forwards: hand-evaluated cases, structural invariants, and
full-loss gradient checks against finite differences."""

import math

import numpy as np
import pytest

from icllab import models as M
from icllab import tensor as T
from icllab.losses import cross_entropy_loss, mse_loss
from icllab.models import ModelSpec, Tensor
from icllab.tensor import ConfigurationError, grad_check


def small_spec(kind, **kw):
    base = dict(depth=2, width=6, input_length=4, token_depth=3, output_dim=2)
    base.update(kw)
    return ModelSpec(kind=kind, **base)


def zero_params(spec):
    params = M.init_params(spec, seed=0)
    for name, t in params.items():
        t.data[...] = 0.0
    return params


class TestMLP:
    def test_zero_network_outputs_bias(self):
        spec = small_spec("mlp")
        params = zero_params(spec)
        params["b_out"].data[...] = [1.5, -2.0]
        rng = np.random.default_rng(0)
        out = M.mlp_forward(params, Tensor(rng.normal(size=(5, 4, 3))))
        assert np.allclose(out.data, [1.5, -2.0])

    def test_hand_evaluated_single_unit(self):
        # l=1, H=1, input (1, -1): h = relu(2*1 + (-3)*(-1) + 0.5) = 5.5
        # out = -2 * 5.5 + 0.25 = -10.75
        spec = ModelSpec("mlp", depth=1, width=1, input_length=2, token_depth=1, output_dim=1)
        params = zero_params(spec)
        params["W_1"].data[...] = [[2.0], [-3.0]]
        params["b_1"].data[...] = [0.5]
        params["W_out"].data[...] = [[-2.0]]
        params["b_out"].data[...] = [0.25]
        out = M.mlp_forward(params, Tensor([[1.0], [-1.0]]))
        assert out.data[0] == pytest.approx(-10.75, abs=1e-15)

    def test_flattening_equivalence(self):
        spec = ModelSpec("mlp", depth=2, width=5, input_length=9, token_depth=1, output_dim=1)
        params = M.init_params(spec, seed=3)
        rng = np.random.default_rng(1)
        packed = rng.normal(size=(9, 1))
        a = M.mlp_forward(params, Tensor(packed)).data
        b = M.mlp_forward(params, Tensor(packed.reshape(9))).data
        assert np.array_equal(a, b)

    def test_reshape_preserving_flat_order_is_invariant(self):
        spec9 = ModelSpec("mlp", depth=1, width=4, input_length=9, token_depth=1, output_dim=1)
        spec33 = ModelSpec("mlp", depth=1, width=4, input_length=3, token_depth=3, output_dim=1)
        p9 = M.init_params(spec9, seed=7)
        p33 = M.unpack_params(spec33, M.pack_params(p9))
        rng = np.random.default_rng(2)
        flat = rng.normal(size=9)
        a = M.mlp_forward(p9, Tensor(flat.reshape(9, 1))).data
        b = M.mlp_forward(p33, Tensor(flat.reshape(3, 3))).data
        assert np.array_equal(a, b)


class TestMixer:
    def test_zero_network_outputs_bias(self):
        spec = small_spec("mixer", channel_width=5)
        params = zero_params(spec)
        params["b_out"].data[...] = [0.75, 3.0]
        out = M.mixer_forward(params, Tensor(np.random.default_rng(0).normal(size=(4, 3))))
        assert np.allclose(out.data, [0.75, 3.0])

    def test_no_token_permutation_symmetry(self):
        spec = small_spec("mixer", channel_width=5)
        params = M.init_params(spec, seed=1)
        rng = np.random.default_rng(3)
        x = rng.normal(size=(4, 3))
        base = M.mixer_forward(params, Tensor(x)).data
        perm = M.mixer_forward(params, Tensor(x[[1, 0, 3, 2]])).data
        assert not np.allclose(base, perm)

    def test_hand_evaluated_one_by_one(self):
        # l=1, input 2x1, W_1 = [[3]], b_1 = [0.5], Z_1 = [[2, -1]], c_1 = [[0.25]]
        # tok = [[3a+0.5], [3b+0.5]]; mix = 2(3a+0.5) - (3b+0.5) + 0.25
        # out = relu(mix) * w + b_out
        spec = ModelSpec("mixer", depth=1, width=1, channel_width=1,
                         input_length=2, token_depth=1, output_dim=1)
        params = zero_params(spec)
        params["W_1"].data[...] = [[3.0]]
        params["b_1"].data[...] = [0.5]
        params["Z_1"].data[...] = [[2.0, -1.0]]
        params["c_1"].data[...] = [[0.25]]
        params["W_out"].data[...] = [[1.5]]
        params["b_out"].data[...] = [-1.0]
        a, b = 1.0, -2.0
        mix = 2 * (3 * a + 0.5) - (3 * b + 0.5) + 0.25
        expect = 1.5 * max(mix, 0.0) - 1.0
        out = M.mixer_forward(params, Tensor([[a], [b]]))
        assert out.data[0] == pytest.approx(expect, abs=1e-15)


class TestTransformer:
    def test_attention_rows_causal_and_stochastic(self):
        spec = small_spec("transformer")
        params = M.init_params(spec, seed=2)
        x = Tensor(np.random.default_rng(4).normal(size=(2, 4, 3)))
        _, atts = M.transformer_forward(params, x, return_attention=True)
        for att in atts:
            a = att.data
            assert np.abs(a.sum(axis=-1) - 1.0).max() < 1e-12
            upper = np.triu(np.ones((4, 4), dtype=bool), k=1)
            assert np.all(a[:, upper] == 0.0)

    def test_causality_without_pe(self):
        spec = small_spec("transformer", use_positional_encoding=False)
        params = M.init_params(spec, seed=5)
        rng = np.random.default_rng(6)
        x1 = rng.normal(size=(4, 3))
        x2 = x1.copy()
        x2[3] += rng.normal(size=3)  # change only the last token
        spec_short = small_spec("transformer")
        # outputs read from earlier positions must agree: compare attention
        # inputs by truncating to the first 3 rows of each layer output
        _, atts1 = M.transformer_forward(params, Tensor(x1), return_attention=True)
        _, atts2 = M.transformer_forward(params, Tensor(x2), return_attention=True)
        for a1, a2 in zip(atts1, atts2):
            assert np.allclose(a1.data[:3, :3], a2.data[:3, :3], atol=1e-14)

    def test_pe_row_zero_interleave(self):
        pe = M.positional_encoding(3, 8)
        assert np.array_equal(pe[0], [0, 1, 0, 1, 0, 1, 0, 1])


class TestRB:
    def test_centered_rows_sum_to_zero(self):
        rng = np.random.default_rng(7)
        x = Tensor(rng.normal(size=(10, 6, 2)))
        r = M.rb_relations(x, centered=True).data.reshape(10, 6, 6)
        assert np.abs(r.sum(axis=-1)).max() < 1e-12

    def test_symmetry_bit_exact(self):
        rng = np.random.default_rng(8)
        x = Tensor(rng.normal(size=(6, 3)))
        r = M.rb_relations(x, centered=True).data.reshape(6, 6)
        assert np.array_equal(r, r.T)

    def test_translation_invariance_when_centered(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(6, 2))
        shift = x + np.array([13.0, -7.0])
        r1 = M.rb_relations(Tensor(x), centered=True).data
        r2 = M.rb_relations(Tensor(shift), centered=True).data
        assert np.abs(r1 - r2).max() < 1e-10

    def test_mts_self_match_argmax(self):
        angles = 2 * np.pi * np.arange(5) / 5
        context = np.stack([np.cos(angles), np.sin(angles)], axis=1)
        packed = np.vstack([context, context[3]])  # query == context point 3
        r = M.rb_relations(Tensor(packed), centered=False).data
        assert r.shape == (5,)
        assert int(np.argmax(r)) == 3

    def test_identity_readout_solves_mts(self):
        spec = ModelSpec("rb_mlp", depth=1, width=1, input_length=6, token_depth=2,
                         output_dim=5, rb_centered=False)
        params = zero_params(spec)
        params["W_out"].data[...] = np.eye(5)
        rng = np.random.default_rng(10)
        for _ in range(50):
            theta0 = rng.uniform(0, 2 * np.pi)
            angles = theta0 + 2 * np.pi * np.arange(5) / 5
            context = np.stack([np.cos(angles), np.sin(angles)], axis=1)
            q = rng.uniform(0, 2 * np.pi)
            query = np.array([np.cos(q), np.sin(q)])
            target = int(np.argmax(context @ query))
            packed = Tensor(np.vstack([context, query]))
            logits = M.forward(params, packed).data
            assert int(np.argmax(logits)) == target

    def test_zero_readout_gives_uniform_logits(self):
        spec = ModelSpec("rb_mlp", depth=1, width=1, input_length=6, token_depth=2,
                         output_dim=6)
        params = zero_params(spec)
        x = Tensor(np.random.default_rng(11).normal(size=(6, 2)))
        logits = M.forward(params, x).data
        assert np.allclose(logits, logits[0])

    def test_diagonal_readout_picks_furthest_point(self):
        L = 6
        spec = ModelSpec("rb_mlp", depth=1, width=1, input_length=L, token_depth=2,
                         output_dim=L)
        params = zero_params(spec)
        w = np.zeros((L * L, L))
        for i in range(L):
            w[i * L + i, i] = 1.0  # logit i reads R_ii
        params["W_out"].data[...] = w
        rng = np.random.default_rng(12)
        for _ in range(50):
            pts = rng.normal(size=(L, 2))
            center = pts.mean(axis=0)
            furthest = int(np.argmax(np.linalg.norm(pts - center, axis=1)))
            logits = M.forward(params, Tensor(pts)).data
            assert int(np.argmax(logits)) == furthest


class TestCountParams:
    def test_tiny_mlp_hand_count(self):
        spec = ModelSpec("mlp", depth=1, width=3, input_length=2, token_depth=1, output_dim=1)
        assert M.count_params(spec) == 13  # 2*3+3 + 3*1+1

    def test_doubling_width_roughly_quadruples_interior(self):
        def spec_of(h):
            return ModelSpec("mlp", depth=2, width=h, input_length=4, token_depth=1, output_dim=1)

        # hand counts: n=4, out=1: (4H + H) + (H^2 + H) + (H + 1)
        for h in (8, 16):
            assert M.count_params(spec_of(h)) == 4 * h + h + h * h + h + h + 1
        small = M.count_params(spec_of(8))
        big = M.count_params(spec_of(16))
        assert 3.0 < big / small < 4.0  # quadratic term dominates

    def test_rb_shallow_hand_count(self):
        spec = ModelSpec("rb_mlp", depth=1, width=1, input_length=6, token_depth=2,
                         output_dim=5, rb_centered=False)
        assert spec.relation_dim == 5
        assert M.count_params(spec) == 30  # 5*5 + 5

    def test_layout_matches_pack_size(self):
        for spec in [
            small_spec("mlp"),
            small_spec("mixer", channel_width=5),
            small_spec("transformer", use_positional_encoding=True),
            small_spec("rb_mlp", depth=1),
            small_spec("rb_mlp_deep", depth=1),
        ]:
            params = M.init_params(spec, seed=0)
            assert M.pack_params(params).size == M.count_params(spec)


class TestSpecValidation:
    def test_channel_width_only_for_mixer(self):
        with pytest.raises(ConfigurationError):
            small_spec("mlp", channel_width=4).validate()

    def test_mixer_needs_channel_width(self):
        with pytest.raises(ConfigurationError):
            small_spec("mixer").validate()

    def test_unknown_kind(self):
        with pytest.raises(ConfigurationError):
            small_spec("gru").validate()

    def test_input_shape_mismatch_names_shapes(self):
        spec = small_spec("mlp")
        params = M.init_params(spec, seed=0)
        with pytest.raises(ConfigurationError, match="mlp"):
            M.mlp_forward(params, Tensor(np.zeros((5, 5))))


def _loss_fn_for(spec, x, rng):
    """Full forward + loss as a function of the flat parameter vector."""
    if spec.output_dim == 1:
        target = Tensor(rng.normal(size=(1, 1)))

        def f(w):
            params = M.params_from_flat_tensor(spec, w)
            out = M.forward(params, x)
            return mse_loss(out, target)

    else:
        idx = rng.integers(0, spec.output_dim, size=1)

        def f(w):
            params = M.params_from_flat_tensor(spec, w)
            out = M.forward(params, x)
            return cross_entropy_loss(out, idx)

    return f


GRAD_SPECS = [
    ("mlp-reg", small_spec("mlp", depth=2, width=5, output_dim=1)),
    ("mlp-embed", small_spec("mlp", depth=1, width=4, token_depth=6, embed_width=3, output_dim=2)),
    ("mixer", small_spec("mixer", channel_width=5, output_dim=1)),
    ("transformer", small_spec("transformer", output_dim=1)),
    ("transformer-pe", small_spec("transformer", use_positional_encoding=True, output_dim=4)),
    ("rb_mlp", small_spec("rb_mlp", depth=1, output_dim=4)),
    ("rb_mlp-mts", small_spec("rb_mlp", depth=1, rb_centered=False, output_dim=3)),
    ("rb_mlp_deep", small_spec("rb_mlp_deep", depth=1, output_dim=4)),
]


@pytest.mark.parametrize("label,spec", GRAD_SPECS, ids=[s[0] for s in GRAD_SPECS])
def test_full_loss_gradients_match_finite_differences(label, spec):
    rng = np.random.default_rng(hash(label) % 2**32)
    x = Tensor(rng.normal(size=(1, spec.input_length, spec.token_depth)))
    f = _loss_fn_for(spec, x, rng)
    flat = M.pack_params(M.init_params(spec, seed=17))
    err = grad_check(f, Tensor(flat), step=1e-5)
    assert err < 1e-4, f"{label}: max relative error {err:.2e}"
