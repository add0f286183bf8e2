import math

import numpy as np
import pytest

from dvsa.alignment import AlignmentParams, align, atv_forward, class_prototypes, vta_forward
from dvsa.diff_core import DegenerateInputError, ShapeError, cosine_matrix, grad_check


def make_params(K=4, d_w2v=5, d_v=6, d=8, seed=0, share=True):
    return AlignmentParams.init(d_w2v, d_v, d, K, np.random.default_rng(seed), share_output_projection=share)


def P(params, name):
    return params.store[name].data


def reference_attention(queries, keys, values, d):
    """Loop-by-loop scaled dot-product attention with a max-shifted softmax."""
    n_q, n_k = len(queries), len(keys)
    out = np.zeros((n_q, values.shape[1]))
    weights = np.zeros((n_q, n_k))
    for i in range(n_q):
        logits = [sum(queries[i][t] * keys[j][t] for t in range(len(keys[j]))) / math.sqrt(d) for j in range(n_k)]
        m = max(logits)
        ex = [math.exp(z - m) for z in logits]
        tot = sum(ex)
        for j in range(n_k):
            weights[i, j] = ex[j] / tot
            out[i] += weights[i, j] * values[j]
    return out, weights


def reference_vta(a, f, params):
    q, k, v = a @ P(params, "W_Q1"), f @ P(params, "W_K1"), f @ P(params, "W_V1")
    ctx, w = reference_attention(q, k, v, params.d)
    return (ctx + q) @ P(params, "W_O"), w


def reference_atv(f, a_hat, params, out_name="W_O"):
    q, k, v = f @ P(params, "W_Q2"), a_hat @ P(params, "W_K2"), a_hat @ P(params, "W_V2")
    ctx, w = reference_attention(q, k, v, params.d)
    return (ctx + q) @ P(params, out_name), w


class TestVTA:
    def test_single_region(self):
        params = make_params()
        rng = np.random.default_rng(1)
        a, f = rng.standard_normal((4, 5)), rng.standard_normal((1, 6))
        a_hat, attn = vta_forward(a, f, params)
        np.testing.assert_array_equal(attn, np.ones((4, 1)))
        expect = (f @ P(params, "W_V1") + a @ P(params, "W_Q1")) @ P(params, "W_O")
        np.testing.assert_allclose(a_hat.data, expect, atol=1e-12)

    def test_zero_query_gives_uniform_attention(self):
        params = make_params()
        f = np.random.default_rng(2).standard_normal((6, 6))
        a_hat, attn = vta_forward(np.zeros((4, 5)), f, params)
        np.testing.assert_allclose(attn, np.full((4, 6), 1 / 6), atol=1e-15)
        expect = (attn @ (f @ P(params, "W_V1"))) @ P(params, "W_O")
        np.testing.assert_allclose(a_hat.data, expect, atol=1e-12)

    def test_matches_reference(self):
        params = make_params(K=4, d=8)
        rng = np.random.default_rng(3)
        a, f = rng.standard_normal((4, 5)), rng.standard_normal((6, 6))
        a_hat, attn = vta_forward(a, f, params)
        ref, ref_w = reference_vta(a, f, params)
        np.testing.assert_allclose(a_hat.data, ref, atol=1e-10)
        np.testing.assert_allclose(attn, ref_w, atol=1e-10)

    def test_batched_equals_per_instance(self):
        params = make_params()
        rng = np.random.default_rng(4)
        a, F = rng.standard_normal((4, 5)), rng.standard_normal((3, 6, 6))
        batched, _ = vta_forward(a, F, params)
        for i in range(3):
            np.testing.assert_allclose(batched.data[i], vta_forward(a, F[i], params)[0].data, atol=1e-13)

    def test_shape_error(self):
        with pytest.raises(ShapeError):
            vta_forward(np.ones((4, 3)), np.ones((6, 6)), make_params())


class TestATV:
    def test_single_attribute(self):
        params = make_params(K=1)
        rng = np.random.default_rng(5)
        f, a_hat = rng.standard_normal((6, 6)), rng.standard_normal((1, 6))
        v_hat, attn = atv_forward(f, a_hat, params)
        np.testing.assert_array_equal(attn, np.ones((6, 1)))
        expect = (a_hat @ P(params, "W_V2") + f @ P(params, "W_Q2")) @ P(params, "W_O")
        np.testing.assert_allclose(v_hat.data, expect, atol=1e-12)

    def test_zero_query(self):
        params = make_params()
        a_hat = np.random.default_rng(6).standard_normal((4, 6))
        v_hat, attn = atv_forward(np.zeros((5, 6)), a_hat, params)
        np.testing.assert_allclose(attn, np.full((5, 4), 0.25), atol=1e-15)
        expect = (attn @ (a_hat @ P(params, "W_V2"))) @ P(params, "W_O")
        np.testing.assert_allclose(v_hat.data, expect, atol=1e-12)

    @pytest.mark.parametrize("share", [True, False])
    def test_matches_reference(self, share):
        params = make_params(K=4, d=8, share=share)
        rng = np.random.default_rng(7)
        f, a_hat = rng.standard_normal((6, 6)), rng.standard_normal((4, 6))
        v_hat, attn = atv_forward(f, a_hat, params)
        ref, ref_w = reference_atv(f, a_hat, params, "W_O" if share else "W_O2")
        np.testing.assert_allclose(v_hat.data, ref, atol=1e-10)
        np.testing.assert_allclose(attn, ref_w, atol=1e-10)


class TestProperties:
    @pytest.mark.parametrize("scale", [1e-3, 1.0, 1e3])
    def test_row_stochastic_under_feature_scaling(self, scale):
        params = make_params()
        rng = np.random.default_rng(8)
        res = align(rng.standard_normal((4, 5)), scale * rng.standard_normal((2, 7, 6)), params)
        np.testing.assert_allclose(res.vta_attn.sum(-1), 1.0, atol=1e-9)
        np.testing.assert_allclose(res.atv_attn.sum(-1), 1.0, atol=1e-9)

    def test_region_permutation_equivariance(self):
        params = make_params()
        rng = np.random.default_rng(9)
        a, f = rng.standard_normal((4, 5)), rng.standard_normal((7, 6))
        perm = rng.permutation(7)
        base = align(a, f, params)
        moved = align(a, f[perm], params)
        # attribute outputs do not depend on region order; region outputs follow it
        np.testing.assert_allclose(moved.a_hat.data, base.a_hat.data, atol=1e-12)
        np.testing.assert_allclose(moved.v_hat.data, base.v_hat.data[perm], atol=1e-12)
        np.testing.assert_allclose(moved.vta_attn, base.vta_attn[:, perm], atol=1e-12)

    def test_attribute_permutation_equivariance(self):
        params = make_params()
        rng = np.random.default_rng(10)
        a, f = rng.standard_normal((4, 5)), rng.standard_normal((7, 6))
        perm = rng.permutation(4)
        base = align(a, f, params)
        moved = align(a[perm], f, params)
        np.testing.assert_allclose(moved.a_hat.data, base.a_hat.data[perm], atol=1e-12)
        np.testing.assert_allclose(moved.v_hat.data, base.v_hat.data, atol=1e-12)
        np.testing.assert_allclose(moved.atv_attn, base.atv_attn[:, perm], atol=1e-12)

    @pytest.mark.parametrize("share", [True, False])
    def test_end_to_end_gradients(self, share):
        params = AlignmentParams.init(4, 5, 5, 3, np.random.default_rng(11), share_output_projection=share)
        rng = np.random.default_rng(12)
        a, f = rng.standard_normal((3, 4)), rng.standard_normal((4, 5))
        Wa, Wv = rng.standard_normal((3, 5)), rng.standard_normal((4, 5))
        S = rng.uniform(0.1, 1, (2, 3))

        def loss(_):
            res = align(a, f, params)
            protos = class_prototypes(S, params)
            return (res.a_hat * Wa).sum() + (res.v_hat * res.v_hat * Wv).sum() * 0.1 + protos.sum()

        report = grad_check(loss, params.store, tol=1e-5)
        assert report.ok, report.offenders
        assert report.checked == sum(params.store[n].data.size for n in params.names())


class TestPrototypes:
    def test_zero_map_then_cosine_fails(self):
        params = make_params(K=3)
        params.store["W_p"].data[:] = 0.0
        protos = class_prototypes(np.ones((2, 3)), params)
        np.testing.assert_array_equal(protos.data, 0.0)
        with pytest.raises(DegenerateInputError):
            cosine_matrix(np.ones((1, 6)), protos)

    def test_one_hot_selects_rows(self):
        params = make_params(K=3)
        np.testing.assert_array_equal(class_prototypes(np.eye(3), params).data, P(params, "W_p"))

    def test_gradient_wrt_embedding(self):
        params = make_params(K=3)
        S = np.random.default_rng(13).uniform(0, 1, (4, 3))
        report = grad_check(lambda _: class_prototypes(S, params)[2, 1] * 1.0, params.store, tol=1e-6)
        assert report.ok
        g = np.zeros((3, 6))
        g[:, 1] = S[2]
        params.store.zero_grad()
        class_prototypes(S, params)[2, 1].backward()
        np.testing.assert_allclose(params.store["W_p"].grad, g)
