import itertools
import math

import numpy as np
import pytest

from app.ops import autodiff as ad
from app.ops.sampler import (
    anneal_tau,
    draw_gumbels,
    gumbel,
    gumbel_softmax,
    make_rng,
    select_patch,
    topk_sample,
    uniform_choice,
)

EULER_GAMMA = 0.5772156649


def _plackett_luce_pairs(pi):
    return {(i, j): pi[i] * pi[j] / (1.0 - pi[i]) for i, j in itertools.permutations(range(len(pi)), 2)}


def _pair_frequencies(pi, draws, seed):
    # shared noise: round two takes the runner-up of the same perturbed scores
    g = draw_gumbels(make_rng(seed), draws * len(pi)).reshape(draws, len(pi))
    order = np.argsort(-(np.log(pi) + g), axis=1)[:, :2]
    pairs, counts = np.unique(order, axis=0, return_counts=True)
    return {tuple(int(i) for i in pair): n / draws for pair, n in zip(pairs, counts)}


class TestGumbel:
    def test_closed_form_points(self):
        assert float(gumbel(math.exp(-1.0))) == pytest.approx(0.0, abs=1e-12)
        assert float(gumbel(math.exp(-math.e))) == pytest.approx(-1.0)

    @pytest.mark.parametrize("u", [0.0, 1.0, -0.1])
    def test_rejects_closed_interval(self, u):
        with pytest.raises(ValueError):
            gumbel(u)

    def test_sample_mean_is_euler_gamma(self):
        g = draw_gumbels(make_rng(7), 200_000)
        assert np.all(np.isfinite(g))
        assert g.mean() == pytest.approx(EULER_GAMMA, abs=0.01)

    def test_gumbel_max_matches_categorical(self):
        pi = np.array([0.4, 0.3, 0.2, 0.1])
        draws = 100_000
        g = draw_gumbels(make_rng(11), draws * 4).reshape(draws, 4)
        winners = np.argmax(np.log(pi) + g, axis=1)
        freq = np.bincount(winners, minlength=4) / draws
        assert 0.5 * np.abs(freq - pi).sum() < 0.01


class TestGumbelSoftmax:
    def test_zero_noise_returns_probs(self):
        pi = np.array([0.1, 0.2, 0.7])
        out = gumbel_softmax(ad.log(pi), np.zeros(3), 1.0)
        np.testing.assert_allclose(out.values, pi, rtol=1e-5)

    def test_masked_entries_are_exactly_zero(self):
        log_pi = ad.log(np.array([0.5, 0.0, 0.5]))
        out = gumbel_softmax(log_pi, np.array([0.3, 2.0, -0.1]), 0.5)
        assert out.values[1] == 0.0
        assert out.values.sum() == pytest.approx(1.0, abs=1e-6)

    def test_noise_shape_mismatch(self):
        with pytest.raises(ValueError):
            gumbel_softmax(np.zeros(3), np.zeros(4), 1.0)


class TestTopKSample:
    def test_degenerate_distribution(self):
        draw = topk_sample(np.array([1.0, 0.0, 0.0, 0.0]), 1, 0.5, make_rng(0))
        assert draw.indices == [0]
        np.testing.assert_allclose(draw.z[0].values, [1.0, 0.0, 0.0, 0.0])

    def test_k_equal_n_is_a_permutation(self):
        draw = topk_sample(np.full(6, 1 / 6), 6, 1.0, make_rng(3))
        assert sorted(draw.indices) == list(range(6))

    def test_scaled_z_is_onehot_times_soft_max(self, rng):
        pi = rng.random(10) + 0.05
        pi /= pi.sum()
        draw = topk_sample(pi, 3, 0.7, make_rng(5))
        assert len(set(draw.indices)) == 3
        for z, soft, idx in zip(draw.z, draw.softhots, draw.indices):
            assert np.count_nonzero(z.values) == 1
            assert z.values[idx] == pytest.approx(soft.values.max())
            assert 0.0 < z.values[idx] <= 1.0
            assert soft.values.sum() == pytest.approx(1.0, abs=1e-6)
        assert draw.weights() == pytest.approx([float(s.values.max()) for s in draw.softhots])

    def test_previously_drawn_indices_are_masked(self):
        draw = topk_sample(np.full(5, 0.2), 3, 1.0, make_rng(9))
        for round_idx, soft in enumerate(draw.softhots):
            for earlier in draw.indices[:round_idx]:
                assert soft.values[earlier] == 0.0

    def test_plain_mode_is_unit_onehot(self):
        draw = topk_sample(np.full(4, 0.25), 2, 1.0, make_rng(1), st_mode="plain")
        for z, idx in zip(draw.z, draw.indices):
            assert z.values[idx] == 1.0
            assert z.values.sum() == 1.0

    def test_frozen_noise_replays(self):
        pi = np.array([0.1, 0.2, 0.3, 0.4])
        first = topk_sample(pi, 2, 0.5, make_rng(4))
        replay = topk_sample(pi, 2, 0.5, make_rng(99), gumbels=first.gumbels[0])
        assert replay.indices == first.indices

    def test_redraw_noise_uses_fresh_gumbels(self):
        draw = topk_sample(np.full(8, 1 / 8), 3, 1.0, make_rng(2), redraw_noise=True)
        assert not np.array_equal(draw.gumbels[0], draw.gumbels[1])

    def test_k_above_support(self):
        with pytest.raises(ValueError, match="without replacement"):
            topk_sample(np.array([0.5, 0.5, 0.0]), 3, 1.0, make_rng(0))

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            topk_sample(np.full(4, 0.25), 1, 1.0, make_rng(0), st_mode="hard")

    def test_scaled_gradient_reaches_probs(self):
        probs = ad.DTensor(np.array([0.1, 0.2, 0.3, 0.4]), requires_grad=True)
        draw = topk_sample(probs, 2, 0.5, make_rng(6))
        stack = np.arange(4.0).reshape(4, 1, 1, 1) + 1.0
        out = ad.sum(ad.add(select_patch(draw.z[0], stack), select_patch(draw.z[1], stack)))
        ad.backward(out)
        assert probs.grad is not None
        assert np.all(np.isfinite(probs.grad))
        assert np.abs(probs.grad).sum() > 0

    @pytest.mark.parametrize("seed", range(3))
    @pytest.mark.parametrize("k", [2, 3])
    def test_soft_mode_gradient(self, float64, seed, k):
        rng = np.random.default_rng(seed)
        noise = rng.gumbel(size=6)
        weights = rng.normal(size=(6, 2, 2, 2))
        base = rng.random(6) + 0.2

        def f(p):
            draw = topk_sample(p, k, 0.8, None, st_mode="soft", gumbels=noise)
            total = select_patch(draw.z[0], weights)
            for z in draw.z[1:]:
                total = ad.add(total, select_patch(z, weights))
            return ad.sum(total)

        assert ad.finite_diff_check(f, base, eps=1e-6) <= 1e-3

    def test_sampler_follows_perturbed_order(self):
        pi = np.array([0.4, 0.3, 0.2, 0.1])
        rng = make_rng(5)
        for _ in range(200):
            g = draw_gumbels(rng, 4)
            draw = topk_sample(pi, 3, 0.5, None, gumbels=g)
            log_pi = np.log(pi.astype(np.float32)).astype(np.float64)
            assert draw.indices == [int(i) for i in np.argsort(-(log_pi + g))[:3]]

    def test_plackett_luce_pair_frequencies(self):
        pi = np.array([0.4, 0.3, 0.2, 0.1])
        observed = _pair_frequencies(pi, 200_000, seed=22)
        for pair, expected in _plackett_luce_pairs(pi).items():
            assert observed.get(pair, 0.0) == pytest.approx(expected, abs=0.01)


class TestSelectPatch:
    def test_onehot_selects_exact_patch(self, rng):
        stack = rng.normal(size=(4, 3, 3, 3)).astype(np.float32)
        z = np.zeros(4)
        z[2] = 1.0
        np.testing.assert_allclose(select_patch(z, stack).values, stack[2], rtol=1e-6)

    def test_scaled_onehot_has_no_contamination(self, rng):
        stack = rng.normal(size=(4, 3, 3, 3)).astype(np.float32)
        z = np.zeros(4)
        z[2] = 0.9
        np.testing.assert_allclose(select_patch(z, stack).values, 0.9 * stack[2], rtol=1e-5)


class TestSchedulesAndStreams:
    def test_anneal_endpoints_and_midpoint(self):
        assert anneal_tau(0.0) == pytest.approx(2.0)
        assert anneal_tau(1.0) == pytest.approx(0.33)
        assert anneal_tau(0.5) == pytest.approx(math.sqrt(2.0 * 0.33), abs=1e-4)

    def test_anneal_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            anneal_tau(1.5)

    def test_streams_are_reproducible_and_independent(self):
        a = make_rng(5, 1).random(4)
        b = make_rng(5, 1).random(4)
        c = make_rng(5, 2).random(4)
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_uniform_choice(self):
        picked = uniform_choice(make_rng(0), [3, 5, 7, 9], 3)
        assert len(set(picked)) == 3
        assert set(picked) <= {3, 5, 7, 9}
        assert sorted(uniform_choice(make_rng(0), [1, 2], 5)) == [1, 2]
        assert uniform_choice(make_rng(0), [], 2) == []
