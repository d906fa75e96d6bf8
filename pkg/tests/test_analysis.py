import math

import numpy as np
import pytest

from helpers import TINY_SPECS
from robustgen.analysis import (
    LemmaBoundInputs,
    Theorem2Inputs,
    build_Q,
    complexity_constant,
    empirical_rademacher,
    filter_normalized_directions,
    group_sparsity,
    landscape_grid,
    lemma1_bounds,
    mean_cross_entropy,
    model_bound_inputs,
    rademacher_draws,
    sdp_certificate,
    sign_vector_lower_bound,
    sparsity_ratio,
    spectral_norm,
    theorem2_bound,
    theorem2_terms,
)
from robustgen.autodiff import Tensor
from robustgen.models import Model, ModelSpec, build_model

# ------------------------------------------------------------------ sparsity


class TestSparsity:
    def test_three_values(self):
        assert sparsity_ratio([0.0, 0.5, 1.0]).ratio == pytest.approx(1 / 3, abs=0)

    def test_constant_is_dense(self):
        assert sparsity_ratio(np.full(50, -0.3)).ratio == 0.0

    def test_all_zero(self):
        # threshold is 0 and nothing is strictly below it
        assert sparsity_ratio(np.zeros(4)).ratio == 0.0

    def test_matches_counting_loop(self, rng):
        v = rng.standard_cauchy(10_000)
        top = max(abs(t) for t in v)
        count = sum(1 for t in v if abs(t) < 0.01 * top)
        assert sparsity_ratio(v).ratio == count / 10_000

    def test_scale_invariant(self, rng):
        v = rng.normal(size=1000)
        for k in (-3, 0, 5):
            assert sparsity_ratio(v * 2.0**k).ratio == sparsity_ratio(v).ratio
        assert sparsity_ratio(-v).ratio == sparsity_ratio(v).ratio

    def test_histogram_covers_everything(self, rng):
        rep = sparsity_ratio(rng.normal(size=333))
        assert rep.counts.sum() == 333 and len(rep.bin_edges) == len(rep.counts) + 1

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            sparsity_ratio([])

    def test_groups_for_each_family(self):
        cnn = group_sparsity(build_model(ModelSpec(**TINY_SPECS["CNN"]), 0))
        assert cnn["qkv"].ratio is None and cnn["feedforward"].ratio is None
        assert cnn["conv"].ratio is not None
        hyb = group_sparsity(build_model(ModelSpec(**TINY_SPECS["Hybrid"]), 0))
        assert all(r.ratio is not None for r in hyb.values())


# ----------------------------------------------------------------- landscape


class Quadratic(Model):
    """Loss is ||W||^2, so any slice through the weights is an exact parabola."""

    def __init__(self, w):
        super().__init__({"q.weight": Tensor(w), "q.bias": Tensor(np.ones(w.shape[1]))})


def squared_norm(model, x, y):
    return float((model.params["q.weight"].data ** 2).sum())


class TestFilterNormalization:
    def test_per_filter_norms_match(self):
        model = build_model(ModelSpec(**TINY_SPECS["Hybrid"]), 0)
        d1, d2 = filter_normalized_directions(model, seed=3)
        for name, p in model.params.items():
            if not name.endswith(".weight"):
                assert not d1[name].any() and not d2[name].any()
                continue
            axis = 0 if p.data.ndim == 4 else p.data.ndim - 1
            ref = np.linalg.norm(np.moveaxis(p.data, axis, 0).reshape(p.shape[axis], -1), axis=1)
            got = np.linalg.norm(np.moveaxis(d1[name], axis, 0).reshape(p.shape[axis], -1), axis=1)
            np.testing.assert_allclose(got, ref, rtol=1e-12, atol=0)

    def test_zero_filter_gives_zero_direction(self):
        w = np.ones((3, 4))
        w[:, 2] = 0.0
        d1, _ = filter_normalized_directions(Quadratic(w), seed=0)
        assert not d1["q.weight"][:, 2].any() and d1["q.weight"][:, 0].any()

    def test_seeded(self):
        model = build_model(ModelSpec(**TINY_SPECS["CNN"]), 0)
        a = filter_normalized_directions(model, seed=5)
        b = filter_normalized_directions(model, seed=5)
        c = filter_normalized_directions(model, seed=6)
        flat = lambda d: np.concatenate([v.ravel() for v in d.values()])  # noqa: E731
        assert flat(a[0]).tobytes() == flat(b[0]).tobytes()
        assert flat(a[0]).tobytes() != flat(c[0]).tobytes()
        u, v = flat(a[0]), flat(a[1])
        assert abs(u @ v) / (np.linalg.norm(u) * np.linalg.norm(v)) < 0.5


def test_independent_seeds_give_near_orthogonal_filters():
    from conftest import DESK_MODELS

    model = build_model(DESK_MODELS["CNN"], 0)
    a, _ = filter_normalized_directions(model, seed=1)
    b, _ = filter_normalized_directions(model, seed=2)
    cosines = []
    for name, p in model.params.items():
        if not name.endswith(".weight"):
            continue
        axis = 0 if p.data.ndim == 4 else p.data.ndim - 1
        u = np.moveaxis(a[name], axis, 0).reshape(p.shape[axis], -1)
        v = np.moveaxis(b[name], axis, 0).reshape(p.shape[axis], -1)
        cosines += list(np.abs((u * v).sum(1)) / (np.linalg.norm(u, axis=1) * np.linalg.norm(v, axis=1)))
    assert np.mean(np.array(cosines) < 0.2) >= 0.95


class TestLandscape:
    def test_origin_is_the_model_loss(self, rng):
        model = build_model(ModelSpec(**TINY_SPECS["CNN"]), 0)
        x, y = rng.random((6, 3, 8, 8)), rng.integers(0, 3, size=6)
        base = mean_cross_entropy(model.eval(), x, y)
        grid = landscape_grid(model, x, y, filter_normalized_directions(model, 1), [-0.5, 0.0, 0.5], [0.0, 1.0])
        assert grid.loss[1, 0] == base and grid.baseline_loss == base

    def test_weights_restored_bit_exact(self, rng):
        model = build_model(ModelSpec(**TINY_SPECS["Hybrid"]), 0)
        before = {k: p.data.tobytes() for k, p in model.params.items()}
        x, y = rng.random((2, 3, 16, 16)), rng.integers(0, 3, size=2)
        landscape_grid(model, x, y, filter_normalized_directions(model, 1), [-1.0, 0.0, 1.0], [-1.0, 0.0, 1.0])
        assert {k: p.data.tobytes() for k, p in model.params.items()} == before

    def test_weights_restored_after_failure(self):
        model = Quadratic(np.ones((2, 2)))
        before = model.params["q.weight"].data.tobytes()
        calls = []

        def flaky(m, x, y):
            calls.append(1)
            if len(calls) == 3:
                raise RuntimeError("boom")
            return 0.0

        with pytest.raises(RuntimeError):
            landscape_grid(model, None, None, filter_normalized_directions(model, 0), [0.0, 1.0, 2.0], [0.0], loss_fn=flaky)
        assert model.params["q.weight"].data.tobytes() == before

    def test_quadratic_slice_is_parabola(self, rng):
        w = rng.normal(size=(3, 4))
        model = Quadratic(w)
        d1, d2 = filter_normalized_directions(model, seed=2)
        axis = list(np.linspace(-2, 2, 9))
        grid = landscape_grid(model, None, None, (d1, d2), axis, [0.0, 0.5], loss_fn=squared_norm)
        u, v = d1["q.weight"], d2["q.weight"]
        for i, a in enumerate(axis):
            for j, b in enumerate([0.0, 0.5]):
                expected = float(((w + a * u + b * v) ** 2).sum())
                assert abs(grid.loss[i, j] - expected) <= 1e-8
        # along beta = 0 the curve is ||w||^2 + 2a<w,u> + a^2||u||^2
        a = np.array(axis)
        parabola = (w**2).sum() + 2 * a * (w * u).sum() + a**2 * (u**2).sum()
        np.testing.assert_allclose(grid.loss[:, 0], parabola, rtol=0, atol=1e-8)

    def test_non_finite_becomes_inf(self):
        model = Quadratic(np.ones((2, 2)))
        grid = landscape_grid(
            model, None, None, filter_normalized_directions(model, 0), [0.0, 1.0], [0.0],
            loss_fn=lambda m, x, y: float("nan") if m.params["q.weight"].data[0, 0] != 1.0 else 0.0,
        )
        assert grid.loss[1, 0] == np.inf

    def test_axis_without_zero_rejected(self):
        model = Quadratic(np.ones((2, 2)))
        with pytest.raises(ValueError):
            landscape_grid(model, None, None, filter_normalized_directions(model, 0), [1.0], [0.0], loss_fn=squared_norm)


# ------------------------------------------------------------------- lemma 1


class TestLemma1:
    def test_hand_example(self):
        lo, hi = lemma1_bounds(LemmaBoundInputs(R_S=0.0, epsilon=0.1, Theta=1.0, d=100, n=25, p=2.0))
        assert abs(hi - 0.2) <= 1e-12 and abs(lo - 0.05) <= 1e-12

    def test_l1_is_dimension_free(self):
        outs = {lemma1_bounds(LemmaBoundInputs(R_S=0.3, epsilon=0.1, Theta=2.0, d=d, n=50, p=1.0)) for d in (10, 100, 10000)}
        assert len(outs) == 1

    def test_linf_scales_linearly_in_d(self):
        a = lemma1_bounds(LemmaBoundInputs(0.0, 0.1, 1.0, 10, 4, math.inf))[1]
        b = lemma1_bounds(LemmaBoundInputs(0.0, 0.1, 1.0, 1000, 4, math.inf))[1]
        assert b / a == pytest.approx(100.0, rel=1e-12)

    def test_dual_exponent(self):
        assert LemmaBoundInputs(0, 0, 1, 1, 1, 1.0).q == math.inf
        assert LemmaBoundInputs(0, 0, 1, 1, 1, 2.0).q == 2.0
        assert LemmaBoundInputs(0, 0, 1, 1, 1, math.inf).q == 1.0

    def test_lower_never_exceeds_upper(self, rng):
        for _ in range(1000):
            inp = LemmaBoundInputs(
                R_S=rng.uniform(0, 2), epsilon=rng.uniform(0, 1), Theta=rng.uniform(0, 5),
                d=int(rng.integers(1, 5000)), n=int(rng.integers(1, 5000)),
                p=float(rng.choice([1.0, 1.5, 2.0, 3.0, math.inf])), c=rng.uniform(0.01, 0.99),
            )
            lo, hi = lemma1_bounds(inp)
            assert 0 <= lo <= hi

    @pytest.mark.parametrize("kw", [dict(d=0), dict(n=0), dict(c=1.0), dict(p=0.5)])
    def test_invalid(self, kw):
        base = dict(R_S=0.0, epsilon=0.1, Theta=1.0, d=10, n=10, p=2.0)
        with pytest.raises(ValueError):
            lemma1_bounds(LemmaBoundInputs(**{**base, **kw}))


class TestRademacher:
    def test_l2_closed_form(self, rng):
        x = rng.normal(size=(12, 5))
        values, sigmas = rademacher_draws(x, theta=1.5, trials=20, norm="L2", seed=4)
        exact = 1.5 * np.linalg.norm(sigmas @ x, axis=1) / 12
        np.testing.assert_allclose(values, exact, rtol=1e-9, atol=0)

    def test_linf_closed_form(self, rng):
        x = rng.normal(size=(8, 3))
        values, sigmas = rademacher_draws(x, theta=0.7, trials=10, norm="Linf", seed=0)
        exact = 0.7 * np.abs(sigmas @ x).sum(axis=1) / 8
        # subgradient ascent approaches the vertex sup from inside the box
        assert np.all(values <= exact * (1 + 1e-12))
        assert np.all(values >= 0.99 * exact)

    def test_single_sample(self):
        x = np.array([[3.0, 4.0]])
        assert empirical_rademacher(x, theta=2.0, trials=7, seed=1) == pytest.approx(10.0, rel=1e-12)

    def test_theta_doubles(self, rng):
        x = rng.normal(size=(10, 4))
        a = empirical_rademacher(x, theta=1.0, trials=15, seed=2)
        b = empirical_rademacher(x, theta=2.0, trials=15, seed=2)
        assert b == pytest.approx(2 * a, rel=1e-9)

    def test_adversarial_draws_reuse_signs(self, rng):
        x = rng.normal(size=(10, 4))
        plain = rademacher_draws(x, 1.0, 10, seed=3)
        adv = rademacher_draws(x, 1.0, 10, seed=3, epsilon=0.2)
        assert np.array_equal(plain[1], adv[1]) and np.all(np.isfinite(adv[0]))


# ------------------------------------------------------------- Q and the SDP


class TestBuildQ:
    def test_zero_inputs(self, rng):
        assert not build_Q(np.zeros(3), rng.normal(size=(3, 2))).any()
        assert not build_Q(rng.normal(size=3), np.zeros((3, 2))).any()

    def test_hand_assembly(self):
        w = np.array([2.0, -1.0])
        A1 = np.array([[1.0, 3.0], [0.5, 4.0]])
        # A1^T diag(w) = [[2, -0.5], [6, -4]]; column sums [8, -4.5]
        expected = np.array(
            [
                [0, 0, 0, 8.0, -4.5],
                [0, 0, 0, 2.0, -0.5],
                [0, 0, 0, 6.0, -4.0],
                [8.0, 2.0, 6.0, 0, 0],
                [-4.5, -0.5, -4.0, 0, 0],
            ]
        )
        np.testing.assert_array_equal(build_Q(w, A1), expected)

    def test_symmetric_and_sized(self, rng):
        Q = build_Q(rng.normal(size=4), rng.normal(size=(4, 3)))
        assert Q.shape == (8, 8) and np.array_equal(Q, Q.T)

    def test_shape_mismatch(self, rng):
        with pytest.raises(ValueError):
            build_Q(rng.normal(size=3), rng.normal(size=(4, 3)))


class TestSDPCertificate:
    def test_zero_matrix(self):
        assert sdp_certificate(np.zeros((4, 4))) == (0.0, 0.0)

    def test_off_diagonal_pair(self):
        upper, witness = sdp_certificate(np.array([[0.0, 1.0], [1.0, 0.0]]))
        assert upper == 2.0 and witness == pytest.approx(2.0, abs=1e-9)

    def test_sandwich_on_random_matrices(self, rng):
        for k in range(100):
            n = int(rng.integers(1, 9))
            M = rng.normal(size=(n, n))
            Q = (M + M.T) / 2
            upper, witness = sdp_certificate(Q, seed=k)
            lower = sign_vector_lower_bound(Q)
            assert lower - 1e-9 * max(1.0, abs(lower)) <= witness <= upper

    def test_asymmetric_rejected(self):
        with pytest.raises(ValueError):
            sdp_certificate(np.array([[0.0, 1.0], [0.0, 0.0]]))


# ---------------------------------------------------------------- theorem 2


def t2(**kw):
    base = dict(s1=1.0, s2=1.0, b1=1.0, b2=1.0, gamma=1.0, n=100, d_max=16, X_fro=3.0, E_mean=0.1, epsilon=0.05)
    return Theorem2Inputs(**{**base, **kw})


class TestTheorem2:
    def test_unit_ratio_constant(self):
        for x_fro in (0.0, 1.0, 7.25):
            inp = t2(s1=2.0, b1=2.0, s2=0.5, b2=0.5, X_fro=x_fro)
            assert abs(complexity_constant(inp) - 2**1.5 * x_fro) <= 1e-12 * max(1.0, x_fro)

    def test_epsilon_zero_isolates_adversarial_term(self):
        with_eps, without = theorem2_terms(t2()), theorem2_terms(t2(epsilon=0.0))
        assert without["adversarial"] == 0.0
        assert with_eps["adversarial"] == pytest.approx(2 * 0.05 / 10, rel=1e-15)
        for k in ("empirical", "complexity", "confidence"):
            assert with_eps[k] == without[k]

    def test_sum_of_terms(self):
        t = theorem2_terms(t2())
        assert theorem2_bound(t2()) == t["empirical"] + t["complexity"] + t["adversarial"] + t["confidence"]

    def test_increasing_in_epsilon(self):
        values = [theorem2_bound(t2(epsilon=e)) for e in np.linspace(0, 1, 50)]
        assert all(a < b for a, b in zip(values, values[1:]))

    def test_decreasing_in_n(self):
        # log(n)/n peaks at n = e, so the sweep starts at 3
        values = [theorem2_bound(t2(n=n)) for n in range(3, 5000, 7)]
        assert all(a > b for a, b in zip(values, values[1:]))

    def test_zero_spectral_with_l1_mass_rejected(self):
        with pytest.raises(ValueError):
            complexity_constant(t2(s1=0.0, b1=1.0))
        assert complexity_constant(t2(s1=0.0, b1=0.0)) == pytest.approx(3.0, rel=1e-15)

    @pytest.mark.parametrize("kw", [dict(delta_prob=0.0), dict(E_mean=1.5), dict(n=0), dict(b1=-1.0)])
    def test_invalid_inputs(self, kw):
        with pytest.raises(ValueError):
            t2(**kw)

    def test_gamma_must_be_positive(self):
        with pytest.raises(ValueError):
            theorem2_terms(t2(gamma=0.0))


class TestSpectralNorm:
    def test_diagonal(self):
        assert abs(spectral_norm(np.diag([3.0, 1.0])) - 3.0) <= 1e-6

    def test_against_eigendecomposition(self, rng):
        for _ in range(20):
            M = rng.normal(size=(8, 8))
            exact = math.sqrt(np.linalg.eigvalsh(M.T @ M).max())
            assert spectral_norm(M, iters=500, tol=1e-14) == pytest.approx(exact, rel=1e-6)

    def test_zero(self):
        assert spectral_norm(np.zeros((3, 2))) == 0.0


def test_identity_value_path_gives_unit_budgets(rng):
    model = build_model(ModelSpec(**TINY_SPECS["ViT"]), 0)
    prefix = next(k for k in model.params if k.endswith(".attn.v.weight"))[: -len(".attn.v.weight")]
    d = model.params[f"{prefix}.attn.v.weight"].shape[0]
    model.params[f"{prefix}.attn.v.weight"].data = np.eye(d)
    model.params[f"{prefix}.attn.out.weight"].data = np.eye(d)
    x, y = rng.random((4, 3, 8, 8)), rng.integers(0, 3, size=4)
    inp = model_bound_inputs(model, x, y, gamma=1.0)
    assert inp.s1 == pytest.approx(1.0, rel=1e-12) and inp.b1 == d
    assert inp.n == 4 and 0.0 <= inp.E_mean <= 1.0


@pytest.mark.slow
def test_l1_training_raises_sparsity_on_same_seed(desk):
    dense = group_sparsity(desk.model("CNN", "sat", 0, l1_lambda=0.0))["all"].ratio
    sparse = group_sparsity(desk.model("CNN", "sat", 0, l1_lambda=1e-3))["all"].ratio
    assert sparse > dense
