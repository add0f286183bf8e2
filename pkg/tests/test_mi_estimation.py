import math

import numpy as np
import pytest

from dvsa.alignment import AlignmentParams, vta_forward
from dvsa.diff_core import DegenerateInputError, ParamStore, Tensor, grad_check
from dvsa.mi_estimation import (
    CriticParams,
    PairBatch,
    build_pairs,
    critic_value,
    fit_critic,
    js_critic_loss,
    nwj_mi_value,
    shuffled_pairs,
)
from dvsa.semantic_space import AttributeSelection


def selection(*idx):
    return AttributeSelection(entropies=np.zeros(1), threshold=0.0, selected=tuple(idx))


def zero_critic(d_v=3, hidden=4):
    params = CriticParams.init(d_v, hidden, np.random.default_rng(0))
    for n in params.names():
        params.store[n].data[:] = 0.0
    return params


def gaussian_pairs(rho, n, rng):
    x = rng.standard_normal(n)
    y = rho * x + math.sqrt(1 - rho**2) * rng.standard_normal(n)
    return x, y


class TestBuildPairs:
    def test_two_instances_one_attribute(self):
        a_hat = np.random.default_rng(0).standard_normal((2, 3, 4))
        _, idx = build_pairs(a_hat, selection(1), np.random.default_rng(1), neg_per_pos=1)
        assert sorted(map(tuple, np.concatenate([idx.pos_anchor, idx.pos_other], 1).tolist())) == [
            (0, 1, 1, 1),
            (1, 1, 0, 1),
        ]

    def test_counts(self):
        a_hat = np.zeros((2, 4, 5)) + 1.0
        pairs, idx = build_pairs(a_hat, selection(0, 2), np.random.default_rng(2), neg_per_pos=3)
        assert pairs.pos_x.shape == (4, 5)
        assert pairs.neg_x.shape == (12, 5)

    def test_sampling_properties(self):
        a_hat = np.random.default_rng(3).standard_normal((5, 6, 2))
        rng = np.random.default_rng(4)
        n_neg = 0
        while n_neg < 1000:
            _, idx = build_pairs(a_hat, selection(0, 3, 5), rng, neg_per_pos=4)
            assert np.all(idx.neg_anchor[:, 1] != idx.neg_other[:, 1])
            assert np.all(idx.pos_anchor[:, 1] == idx.pos_other[:, 1])
            assert np.all(idx.pos_anchor[:, 0] != idx.pos_other[:, 0])
            n_neg += len(idx.neg_other)

    def test_materialised_vectors_match_index(self):
        a_hat = np.random.default_rng(5).standard_normal((3, 4, 2))
        pairs, idx = build_pairs(a_hat, selection(1, 2), np.random.default_rng(6), neg_per_pos=2)
        for row, (i, k) in enumerate(idx.neg_other):
            np.testing.assert_array_equal(pairs.neg_y.data[row], a_hat[i, k])

    def test_single_instance_rejected(self):
        with pytest.raises(DegenerateInputError):
            build_pairs(np.ones((1, 3, 2)), selection(0), np.random.default_rng(0))


class TestCritic:
    def test_zero_network(self):
        params = zero_critic()
        assert critic_value(np.ones(3), -np.ones(3), params).item() == 0.0

    def test_constant_bias(self):
        params = zero_critic()
        params.store["V_b2"].data[:] = 1.75
        assert critic_value(np.arange(3.0), np.ones(3), params).item() == 1.75

    def test_forward_formula(self):
        params = CriticParams.init(3, 5, np.random.default_rng(7))
        rng = np.random.default_rng(8)
        x, y = rng.standard_normal(3), rng.standard_normal(3)
        s = {n: params.store[n].data for n in params.names()}
        h = np.maximum(0, np.concatenate([x, y]) @ s["V_W1"] + s["V_b1"])
        assert critic_value(x, y, params).item() == pytest.approx(float(h @ s["V_W2"][:, 0] + s["V_b2"][0]), abs=1e-12)

    def test_gradients(self):
        params = CriticParams.init(3, 6, np.random.default_rng(9))
        rng = np.random.default_rng(10)
        X, Y = rng.standard_normal((5, 3)), rng.standard_normal((5, 3))
        report = grad_check(lambda _: critic_value(X, Y, params).sum(), params.store, tol=1e-6)
        assert report.ok


def _pairs(rng, n=6, d=3):
    return PairBatch(*(Tensor(rng.standard_normal((n, d))) for _ in range(4)))


class TestObjectives:
    def test_js_zero_critic(self):
        assert js_critic_loss(_pairs(np.random.default_rng(0)), zero_critic()).item() == pytest.approx(2 * math.log(2))

    def test_js_separating_critic(self):
        # 1-D inputs; the critic reads y: positives have y = +1, negatives y = -1
        params = zero_critic(d_v=1, hidden=1)
        params.store["V_W1"].data[:] = [[0.0], [1000.0]]
        params.store["V_b1"].data[:] = 1000.0
        params.store["V_W2"].data[:] = 1.0
        params.store["V_b2"].data[:] = -1000.0  # V = 1000 y
        ones = Tensor(np.ones((4, 1)))
        pairs = PairBatch(ones, ones, ones, Tensor(-np.ones((4, 1))))
        assert js_critic_loss(pairs, params).item() < 1e-12

    def test_js_is_order_invariant(self):
        rng = np.random.default_rng(1)
        params = CriticParams.init(3, 4, rng)
        p = _pairs(rng)
        perm_p, perm_n = rng.permutation(6), rng.permutation(6)
        q = PairBatch(Tensor(p.pos_x.data[perm_p]), Tensor(p.pos_y.data[perm_p]),
                      Tensor(p.neg_x.data[perm_n]), Tensor(p.neg_y.data[perm_n]))
        assert js_critic_loss(p, params).item() == pytest.approx(js_critic_loss(q, params).item(), abs=1e-14)

    def test_nwj_zero_critic_is_exactly_zero(self):
        assert nwj_mi_value(_pairs(np.random.default_rng(2)), zero_critic()).item() == 0.0

    def test_nwj_limit(self):
        params = zero_critic(d_v=1, hidden=1)
        c = 0.8
        params.store["V_W1"].data[:] = [[0.0], [1.0]]
        params.store["V_W2"].data[:] = 60.0
        params.store["V_b2"].data[:] = c - 60.0  # V = c on y = 1, c - 60 on y = 0
        pos = Tensor(np.ones((3, 1)))
        pairs = PairBatch(pos, pos, pos, Tensor(np.zeros((3, 1))))
        assert nwj_mi_value(pairs, params).item() == pytest.approx(c + 1.0, abs=1e-12)

    def test_nwj_clamp_keeps_value_finite(self, caplog):
        params = zero_critic()
        params.store["V_b2"].data[:] = 500.0
        with caplog.at_level("WARNING"):
            val = nwj_mi_value(_pairs(np.random.default_rng(3)), params, exp_clamp=20.0).item()
        assert val == pytest.approx(500.0 - math.exp(20.0) * (1 + 480.0) + 1.0)
        assert "clamped" in caplog.text

    def test_nwj_tail_keeps_penalising(self):
        params = zero_critic()
        params.store["V_b2"].data[:] = 30.0
        pairs = _pairs(np.random.default_rng(3))
        nwj_mi_value(pairs, params).backward()
        # d/db of (b - e^20 (1 + b - 20) + 1) is 1 - e^20
        assert params.store["V_b2"].grad[0] == pytest.approx(1 - math.exp(20.0))

    def test_trained_critic_beats_chance_on_correlated_gaussians(self):
        rng = np.random.default_rng(4)
        x, y = gaussian_pairs(0.8, 4000, rng)
        params = CriticParams.init(1, 32, np.random.default_rng(5))
        fit_critic(x, y, params, np.random.default_rng(6), steps=800)
        xe, ye = gaussian_pairs(0.8, 4000, rng)
        loss = js_critic_loss(shuffled_pairs(xe, ye, np.random.default_rng(7)), params).item()
        assert loss < 2 * math.log(2) - 0.05

    def test_independent_pairs_give_near_zero_mi(self):
        rng = np.random.default_rng(8)
        x, y = rng.standard_normal(4000), rng.standard_normal(4000)
        params = CriticParams.init(1, 32, np.random.default_rng(9))
        fit_critic(x, y, params, np.random.default_rng(10), steps=800)
        xe, ye = rng.standard_normal(4000), rng.standard_normal(4000)
        assert abs(nwj_mi_value(shuffled_pairs(xe, ye, np.random.default_rng(11)), params).item()) < 0.1


def test_negative_ami_gradient_reaches_critic_and_encoder():
    rng = np.random.default_rng(12)
    store = ParamStore()
    align = AlignmentParams.init(4, 5, 3, 6, rng, store=store)
    critic = CriticParams.init(5, 8, rng, store=store)
    a, F = rng.standard_normal((6, 4)), rng.standard_normal((3, 4, 5))
    a_hat, _ = vta_forward(a, F, align)
    _, idx = build_pairs(a_hat.detach(), selection(0, 2, 4), rng, neg_per_pos=3)

    def loss(_):
        a_hat, _ = vta_forward(a, F, align)
        return -nwj_mi_value(idx.materialize(a_hat), critic)

    report = grad_check(loss, store, tol=1e-4)
    assert report.ok, report.offenders[:3]
    store.zero_grad()
    loss(store).backward()
    for name in ("W_Q1", "W_K1", "W_V1", "W_O", "V_W1", "V_W2", "V_b2"):
        assert np.abs(store[name].grad).max() > 0, name
