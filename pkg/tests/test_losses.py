import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from marginssl import autodiff as ad
from marginssl.autodiff import Tensor
from marginssl.losses import (
    ContractViolation,
    LossConfig,
    nt_xent,
    nt_xent_queue,
    nt_xent_symmetric,
    pair_similarities,
    sim_neg,
    sim_pos,
)

from oracles import (
    brute_nt_xent,
    brute_nt_xent_queue,
    brute_nt_xent_symmetric,
    random_rotation,
    unit_rows,
)

TAU = 1 / 30
E2 = np.eye(2)


def batch(seed, n=None, d=None, k=None):
    rng = np.random.default_rng(seed)
    n = n or int(rng.integers(2, 17))
    d = d or int(rng.integers(2, 33))
    k = int(rng.integers(1, 40)) if k is None else k
    return unit_rows(rng, n, d), unit_rows(rng, n, d), unit_rows(rng, k, d)


def value(loss_fn, *args):
    return loss_fn(*args).item()


class TestConfig:
    def test_defaults(self):
        c = LossConfig()
        assert c.tau == pytest.approx(1 / 30) and c.margin == 0.0

    @pytest.mark.parametrize("kw", [{"tau": 0.0}, {"tau": -1.0}, {"margin": -0.1}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            LossConfig(**kw)


class TestSimilarities:
    def test_examples(self):
        u = np.array([1.0, 0.0])
        assert sim_pos(u, u, LossConfig(tau=1.0)) == pytest.approx(2.718281828, abs=1e-9)
        assert sim_pos(u, u, LossConfig(tau=1.0, margin=0.1)) == pytest.approx(2.459603111, abs=1e-9)
        for m in (0.0, 0.3):
            assert sim_neg(u, np.array([0.0, 1.0]), LossConfig(tau=1.0, margin=m)) == 1.0

    def test_non_unit_inputs_rejected(self):
        with pytest.raises(ContractViolation):
            sim_pos(np.array([1.0, 1e-2]), np.array([1.0, 0.0]), LossConfig())
        with pytest.raises(ContractViolation):
            nt_xent(np.array([[2.0, 0.0]]), np.array([[1.0, 0.0]]), LossConfig())

    def test_pair_similarities_in_range(self):
        Z, Zp, _ = batch(0)
        s = pair_similarities(Z, Zp)
        assert s.pos.shape == (Z.shape[0],) and s.neg.shape == (Z.shape[0], Z.shape[0] - 1)
        assert np.all(np.abs(s.pos) <= 1 + 1e-9) and np.all(np.abs(s.neg) <= 1 + 1e-9)


class TestHandValues:
    def test_single_pair_has_no_negatives(self):
        Z, Zp, _ = batch(1, n=1, d=4)
        for m in (0.0, 0.2):
            cfg = LossConfig(TAU, m)
            assert value(nt_xent, Z, Zp, cfg) == 0.0
            assert value(nt_xent_symmetric, Z, Zp, cfg) == 0.0

    def test_two_orthogonal_pairs(self):
        assert value(nt_xent, E2, E2, LossConfig(1.0)) == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-12)
        assert value(nt_xent, E2, E2, LossConfig(1.0)) == pytest.approx(0.313261688, abs=1e-9)

    def test_two_orthogonal_pairs_with_margin(self):
        # closed form log(1 + e^-0.9) = 0.3411538747...
        assert value(nt_xent, E2, E2, LossConfig(1.0, 0.1)) == pytest.approx(math.log1p(math.exp(-0.9)), abs=1e-12)

    def test_symmetric_two_orthogonal_pairs(self):
        assert value(nt_xent_symmetric, E2, E2, LossConfig(1.0)) == pytest.approx(0.551444713, abs=1e-9)
        assert value(nt_xent_symmetric, E2, E2, LossConfig(1.0)) == pytest.approx(
            math.log(1 + 2 * math.exp(-1)), abs=1e-12
        )

    def test_queue_single_negative(self):
        z = np.array([[1.0, 0.0]])
        got = value(nt_xent_queue, z, z, np.array([[0.0, 1.0]]), LossConfig(1.0))
        assert got == pytest.approx(0.313261688, abs=1e-9)

    def test_empty_queue_is_zero(self):
        Z, Zp, _ = batch(2)
        assert value(nt_xent_queue, Z, Zp, np.zeros((0, Z.shape[1])), LossConfig(TAU, 0.1)) == 0.0

    def test_empty_batch_rejected(self):
        for fn in (nt_xent, nt_xent_symmetric):
            with pytest.raises(ContractViolation):
                fn(np.zeros((0, 3)), np.zeros((0, 3)), LossConfig())
        with pytest.raises(ContractViolation):
            nt_xent_queue(np.zeros((0, 3)), np.zeros((0, 3)), np.eye(3), LossConfig())

    def test_stable_at_small_temperature(self):
        Z, Zp, Q = batch(3)
        for fn, args in ((nt_xent, (Z, Zp)), (nt_xent_symmetric, (Z, Zp)), (nt_xent_queue, (Z, Zp, Q))):
            v = value(fn, *args, LossConfig(1e-3, 0.1))
            assert math.isfinite(v) and v >= 0


@pytest.mark.parametrize("seed", range(50))
def test_brute_force_oracles(seed):
    Z, Zp, Q = batch(seed, n=int(np.random.default_rng(seed).integers(1, 9)), d=int(1 + seed % 16) + 1)
    for m in (0.0, 0.1):
        cfg = LossConfig(TAU, m)
        assert value(nt_xent, Z, Zp, cfg) == pytest.approx(brute_nt_xent(Z, Zp, TAU, m), abs=1e-12)
        assert value(nt_xent_symmetric, Z, Zp, cfg) == pytest.approx(brute_nt_xent_symmetric(Z, Zp, TAU, m), abs=1e-12)
        assert value(nt_xent_queue, Z, Zp, Q, cfg) == pytest.approx(brute_nt_xent_queue(Z, Zp, Q, TAU, m), abs=1e-12)


def test_queue_as_second_view_collision_free():
    # queue rows = the other utterances' second views: each anchor sees exactly
    # the negatives of the one-directional loss, so the two agree
    rng = np.random.default_rng(4)
    Z, Zp = unit_rows(rng, 5, 6), unit_rows(rng, 5, 6)
    cfg = LossConfig(TAU, 0.1)
    per_anchor = [
        nt_xent_queue(Z[i : i + 1], Zp[i : i + 1], np.delete(Zp, i, axis=0), cfg).item() for i in range(5)
    ]
    assert math.fsum(per_anchor) / 5 == pytest.approx(value(nt_xent, Z, Zp, cfg), abs=1e-12)


# ---------------------------------------------------------------- properties

unit_batch = st.tuples(st.integers(2, 16), st.integers(2, 32), st.integers(0, 2**32 - 1))


@given(unit_batch, st.floats(0.0, 0.5))
@settings(max_examples=200, deadline=None)
def test_non_negative(shape, m):
    n, d, seed = shape
    Z, Zp, Q = batch(seed, n, d)
    cfg = LossConfig(TAU, m)
    assert value(nt_xent, Z, Zp, cfg) >= 0
    assert value(nt_xent_symmetric, Z, Zp, cfg) >= 0
    assert value(nt_xent_queue, Z, Zp, Q, cfg) >= 0


@given(unit_batch)
@settings(max_examples=200, deadline=None)
def test_zero_margin_reduces_to_plain(shape):
    n, d, seed = shape
    Z, Zp, Q = batch(seed, n, d)
    plain, am0 = LossConfig(TAU), LossConfig(TAU, margin=0.0)
    assert value(nt_xent, Z, Zp, am0) == pytest.approx(brute_nt_xent(Z, Zp, TAU, 0.0), abs=1e-12)
    assert abs(value(nt_xent, Z, Zp, am0) - value(nt_xent, Z, Zp, plain)) <= 1e-12
    assert abs(value(nt_xent_symmetric, Z, Zp, am0) - value(nt_xent_symmetric, Z, Zp, plain)) <= 1e-12
    assert abs(value(nt_xent_queue, Z, Zp, Q, am0) - value(nt_xent_queue, Z, Zp, Q, plain)) <= 1e-12


@given(unit_batch)
@settings(max_examples=100, deadline=None)
def test_margin_monotone(shape):
    n, d, seed = shape
    Z, Zp, Q = batch(seed, n, d)
    for fn, args in ((nt_xent, (Z, Zp)), (nt_xent_symmetric, (Z, Zp)), (nt_xent_queue, (Z, Zp, Q))):
        vals = [value(fn, *args, LossConfig(TAU, m)) for m in (0.0, 0.05, 0.1, 0.2)]
        assert all(a < b for a, b in zip(vals, vals[1:])), vals


@given(unit_batch)
@settings(max_examples=100, deadline=None)
def test_rotation_invariance(shape):
    n, d, seed = shape
    Z, Zp, Q = batch(seed, n, d)
    R = random_rotation(np.random.default_rng(seed + 7), d)
    cfg = LossConfig(TAU, 0.1)
    assert abs(value(nt_xent, Z @ R, Zp @ R, cfg) - value(nt_xent, Z, Zp, cfg)) < 1e-9
    assert abs(value(nt_xent_symmetric, Z @ R, Zp @ R, cfg) - value(nt_xent_symmetric, Z, Zp, cfg)) < 1e-9
    assert abs(value(nt_xent_queue, Z @ R, Zp @ R, Q @ R, cfg) - value(nt_xent_queue, Z, Zp, Q, cfg)) < 1e-9


@given(unit_batch, st.floats(0.0, 0.3))
@settings(max_examples=200, deadline=None)
def test_symmetric_swap_is_exact(shape, m):
    n, d, seed = shape
    Z, Zp, _ = batch(seed, n, d)
    cfg = LossConfig(TAU, m)
    assert value(nt_xent_symmetric, Z, Zp, cfg) == value(nt_xent_symmetric, Zp, Z, cfg)


@given(st.integers(2, 10), st.integers(2, 10), st.floats(0.01, 100.0), st.integers(0, 2**32 - 1))
@settings(max_examples=100, deadline=None)
def test_normalization_removes_scale(n, d, c, seed):
    X = np.random.default_rng(seed).standard_normal((n, d))
    np.testing.assert_allclose(ad.l2_normalize_rows(c * X).data, ad.l2_normalize_rows(X).data, atol=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_temperature_equals_scaled_cosines(seed):
    # tau = 1/30 on cosines == tau = 1 on 30 * cosines (margin scales with them)
    Z, Zp, Q = batch(seed)
    m, s = 0.1, 30.0
    ref = value(nt_xent, Z, Zp, LossConfig(1 / s, m))
    S = s * (Z @ Zp.T) - s * m * np.eye(Z.shape[0])
    direct = float(np.mean([np.log(np.exp(S[i] - S[i].max()).sum()) + S[i].max() - S[i, i] for i in range(len(S))]))
    assert ref == pytest.approx(direct, abs=1e-10)
    assert ref == pytest.approx(brute_nt_xent(s * Z, Zp, 1.0, s * m), abs=1e-9)


def _triple(cos_pos, cos_neg):
    """Unit anchor, positive and negative in 3-D with the requested cosines to the anchor."""
    a = np.array([1.0, 0.0, 0.0])
    p = np.array([cos_pos, math.sqrt(1 - cos_pos**2), 0.0])
    n = np.array([cos_neg, 0.0, math.sqrt(1 - cos_neg**2)])
    return a[None], p[None], n[None]


@given(st.floats(-0.9, 0.9), st.floats(0.0, 0.3), st.floats(0.1, 0.5))
@settings(max_examples=200, deadline=None)
def test_margin_constraint_direction(cos_neg, m, delta):
    cfg = LossConfig(0.01, m)
    cos_pos = cos_neg + m + delta
    assume(cos_pos <= 1.0)
    a, p, n = _triple(cos_pos, cos_neg)
    assert nt_xent_queue(a, p, n, cfg).item() < 1e-3
    cos_pos = cos_neg + m - delta
    assume(cos_pos >= -1.0)
    a, p, n = _triple(cos_pos, cos_neg)
    assert nt_xent_queue(a, p, n, cfg).item() > 1


class TestGradients:
    def test_queue_never_receives_gradient(self):
        Z, Zp, Q = batch(5)
        z, zp, q = (Tensor(x, requires_grad=True) for x in (Z, Zp, Q))
        nt_xent_queue(ad.l2_normalize_rows(z), ad.l2_normalize_rows(zp), q, LossConfig(TAU, 0.1)).backward()
        assert q.grad is None
        assert np.abs(z.grad).max() > 0 and np.abs(zp.grad).max() > 0

    @pytest.mark.parametrize("which", ["plain", "symmetric", "queue"])
    def test_embedding_gradients_match_finite_differences(self, which):
        from oracles import central_difference, max_rel_error

        for seed in range(10):
            rng = np.random.default_rng(seed)
            n, d = 4, 5
            X, Xp, Q = rng.standard_normal((n, d)), rng.standard_normal((n, d)), unit_rows(rng, 6, d)
            cfg = LossConfig(0.2, 0.1)

            def loss(x, xp):
                z, zp = ad.l2_normalize_rows(x), ad.l2_normalize_rows(xp)
                if which == "plain":
                    return nt_xent(z, zp, cfg)
                if which == "symmetric":
                    return nt_xent_symmetric(z, zp, cfg)
                return nt_xent_queue(z, zp, Q, cfg)

            x, xp = Tensor(X, requires_grad=True), Tensor(Xp, requires_grad=True)
            loss(x, xp).backward()
            num = central_difference(lambda a: loss(Tensor(a["x"]), Tensor(a["xp"])).item(), {"x": X, "xp": Xp})
            assert max_rel_error({"x": x.grad, "xp": xp.grad}, num) < 1e-6
