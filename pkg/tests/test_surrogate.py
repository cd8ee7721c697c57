import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from formation_forge.costs import World, basis_gradient
from formation_forge.surrogate import (
    ALPHA_MIN,
    AdaptiveConfig,
    AdaptiveState,
    BasisSample,
    SurrogateModel,
    adaptive_step,
    dependence_diagnostic,
    dependence_from_jacobian,
    kkt_residual,
    solve_simplex_qp,
    solve_weights,
    surrogate_value,
    tangent_sigma_min,
    update_statistics,
    validation_update,
)


def model_from(F, c, w=1.0):
    m = SurrogateModel.empty()
    for f, ci in zip(F, c):
        m = update_statistics(m, BasisSample(f, float(ci)), w)
    return m


def simplex_grid_2(R, p, alpha_min=ALPHA_MIN, step=1e-3):
    """Brute force over alpha = (a, 1 - a)."""
    best, best_obj = None, math.inf
    for a in np.arange(alpha_min, 1 - alpha_min + 1e-12, step):
        al = np.array([a, 1 - a])
        obj = al @ R @ al - 2 * al @ p
        if obj < best_obj:
            best, best_obj = al, obj
    return best


def test_surrogate_value_examples():
    a = np.full(5, ALPHA_MIN)
    a[0] = 1 - 4 * ALPHA_MIN
    assert surrogate_value(SurrogateModel(alpha=a), [3, 1, 1, 1, 1]) == pytest.approx(3, abs=2e-3)
    assert surrogate_value(SurrogateModel(), np.ones(5)) == pytest.approx(1.0)
    rng = np.random.default_rng(0)
    al, f = rng.dirichlet(np.ones(5)), rng.normal(size=5)
    assert surrogate_value(SurrogateModel(alpha=al), f) == pytest.approx(sum(x * y for x, y in zip(al, f)))


def test_first_update():
    f = np.array([1.0, 2, 3, 4, 5])
    m = update_statistics(SurrogateModel.empty(), BasisSample(f, 2.0))
    np.testing.assert_array_equal(m.R, np.outer(f, f))
    np.testing.assert_array_equal(m.p, 2 * f)
    assert m.y == 4.0 and m.sample_count == 1


def test_unrolled_forgetting():
    rng = np.random.default_rng(1)
    F, c = rng.normal(size=(3, 5)), rng.normal(size=3)
    w = 0.9
    m = model_from(F, c, w)
    f1, f2, f3 = (np.outer(f, f) for f in F)
    R = w * (w * (w * f1 + f2) + f3)
    np.testing.assert_allclose(m.R, R, rtol=1e-14)
    np.testing.assert_allclose(m.p, w * (w * (w * F[0] * c[0] + F[1] * c[1]) + F[2] * c[2]), rtol=1e-14)
    assert m.y == pytest.approx(w * (w * (w * c[0] ** 2 + c[1] ** 2) + c[2] ** 2), rel=1e-14)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 50), st.integers(0, 2**32 - 1))
def test_batch_gram_oracle(k, seed):
    rng = np.random.default_rng(seed)
    F, c = rng.normal(size=(k, 5)) * rng.uniform(0.1, 10), rng.normal(size=k)
    m = model_from(F, c)
    R, p, y = F.T @ F, F.T @ c, c @ c
    assert np.abs(m.R - R).max() <= 1e-10 * np.abs(R).max()
    assert np.abs(m.p - p).max() <= 1e-10 * max(np.abs(p).max(), 1e-300)
    assert abs(m.y - y) <= 1e-10 * y


def test_forgetting_weights_recent_samples():
    # sample i carries prod_{k>i} w_k times the trailing w; verbatim form scales everything by w
    rng = np.random.default_rng(2)
    F, c = rng.normal(size=(4, 5)), rng.normal(size=4)
    w = 0.8
    m = model_from(F, c, w)
    weights = w ** np.arange(4, 0, -1)
    np.testing.assert_allclose(m.R, (F.T * weights) @ F, rtol=1e-13)


def test_update_rejects_bad_w():
    with pytest.raises(ValueError):
        update_statistics(SurrogateModel.empty(), BasisSample(np.ones(5), 1.0), 1.5)
    with pytest.raises(ValueError):
        BasisSample(np.array([1, np.nan, 0, 0, 0]), 1.0)


def test_solver_identity_e1():
    alpha = solve_simplex_qp(np.eye(5), np.eye(5)[0])
    expected = np.full(5, ALPHA_MIN)
    expected[0] = 1 - 4 * ALPHA_MIN
    np.testing.assert_allclose(alpha, expected, atol=1e-12)


def test_solver_identity_zero_p():
    np.testing.assert_allclose(solve_simplex_qp(np.eye(5), np.zeros(5)), np.full(5, 0.2), atol=1e-12)


def test_solver_grid_oracle_n2():
    rng = np.random.default_rng(3)
    for _ in range(30):
        G = rng.normal(size=(6, 2))
        R, p = G.T @ G, rng.normal(size=2) * 2
        a = solve_simplex_qp(R, p)
        g = simplex_grid_2(R, p)
        assert np.abs(a - g).max() <= 1e-3
        assert a @ R @ a - 2 * a @ p <= g @ R @ g - 2 * g @ p + 1e-12


def test_solver_e1_reduction_matches_grid():
    R, p = np.eye(2), np.array([1.0, 0.0])
    a, g = solve_simplex_qp(R, p), simplex_grid_2(R, p)
    assert np.abs(a - g).max() <= 1e-3
    assert a[0] == pytest.approx(1 - ALPHA_MIN, abs=1e-12)


def test_solver_recovers_noiseless():
    rng = np.random.default_rng(4)
    for _ in range(20):
        alpha_star = rng.dirichlet(np.ones(5)) * (1 - 5 * 0.01) + 0.01
        F = rng.normal(size=(30, 5))
        m = model_from(F, F @ alpha_star)
        a = solve_weights(m)
        assert np.abs(a - alpha_star).max() < 1e-6
        assert abs(a.sum() - 1) < 1e-8 and a.min() >= ALPHA_MIN - 1e-12


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 40))
def test_solver_always_feasible_and_kkt(seed, k):
    rng = np.random.default_rng(seed)
    F = rng.normal(size=(k, 5))
    m = model_from(F, rng.normal(size=k))
    a = solve_weights(m)
    assert abs(a.sum() - 1) <= 1e-8 and a.min() >= ALPHA_MIN - 1e-12
    assert kkt_residual(0.5 * (m.R + m.R.T), m.p, a) < 1e-8


def test_solver_rejects_impossible_alpha_min():
    with pytest.raises(ValueError):
        solve_simplex_qp(np.eye(5), np.zeros(5), alpha_min=0.3)


def test_fit_residual_from_statistics():
    rng = np.random.default_rng(5)
    F, c = rng.normal(size=(12, 5)), rng.normal(size=12)
    m = model_from(F, c)
    a = rng.dirichlet(np.ones(5))
    assert m.fit_residual(a) == pytest.approx(np.sum((F @ a - c) ** 2), rel=1e-10)


# -- gating ---------------------------------------------------------------


def moving_positions(k):
    return np.array([[0.2 * k, 0.0], [0.0, 0.2 * k]])


def test_stationary_agents_not_admitted():
    st_, m = AdaptiveState.initial(), SurrogateModel.empty()
    x = np.zeros((2, 2))
    st_, m, _ = adaptive_step(st_, m, np.ones(5), x, 1.0)
    st2, m2, out = adaptive_step(st_, m, np.ones(5) * 2, x, 5.0)
    assert not out.admitted and m2.sample_count == 0
    np.testing.assert_array_equal(m2.R, m.R)


def test_unchanged_true_cost_not_admitted():
    st_, m = AdaptiveState.initial(), SurrogateModel.empty()
    st_, m, _ = adaptive_step(st_, m, np.ones(5), moving_positions(0), 1.0)
    _, m, out = adaptive_step(st_, m, np.ones(5), moving_positions(1), 1.0 + 1e-4)
    assert not out.admitted


def test_closed_gate_blocks():
    st_ = AdaptiveState.initial()
    st_, m, _ = adaptive_step(st_, SurrogateModel.empty(), np.ones(5), moving_positions(0), 1.0)
    _, m, out = adaptive_step(replace(st_, accept=False), m, np.ones(5), moving_positions(1), 3.0)
    assert not out.admitted and m.sample_count == 0


def test_six_linear_samples_adopted():
    rng = np.random.default_rng(7)
    alpha_star = rng.dirichlet(np.ones(5))
    st_ = AdaptiveState.initial(AdaptiveConfig(w0=1.0))
    m = SurrogateModel.empty()
    outs = []
    for k in range(7):
        f = rng.normal(size=5)
        st_, m, out = adaptive_step(st_, m, f, moving_positions(k), float(f @ alpha_star), k)
        outs.append(out)
    assert [o.admitted for o in outs] == [False] + [True] * 6
    assert m.sample_count == 6
    assert outs[-1].adopted and outs[-1].residual < st_.tau_e(6)
    np.testing.assert_allclose(m.alpha, alpha_star, atol=1e-6)
    assert not any(o.adopted for o in outs[:-1])


def test_under_determined_never_adopted():
    rng = np.random.default_rng(8)
    st_, m = AdaptiveState.initial(), SurrogateModel.empty()
    for k in range(4):
        f = rng.normal(size=5)
        st_, m, out = adaptive_step(st_, m, f, moving_positions(k), float(f.sum()) + k, k)
    assert m.sample_count == 3
    assert out.candidate is not None and not out.adopted
    np.testing.assert_array_equal(m.alpha, np.full(5, 0.2))


def test_residual_monotone_without_gating():
    rng = np.random.default_rng(9)
    alpha_star = rng.dirichlet(np.ones(5))
    m, prev = SurrogateModel.empty(), 0.0
    for _ in range(25):
        f = rng.normal(size=5)
        m = update_statistics(m, BasisSample(f, float(f @ alpha_star)))
        r = math.sqrt(m.fit_residual(solve_weights(m)))
        assert r <= prev + 1e-6
        prev = r


def test_validation_branches():
    st_ = AdaptiveState.initial()
    rng = np.random.default_rng(0)
    down = validation_update(st_, 1.0, 2.0, 1.0, 2.0, rng)
    assert not down.accept and down.w == st_.w and down.tau_x == st_.tau_x
    up = validation_update(st_, 3.0, 2.0, 1.0, 2.0, rng)
    assert up.accept
    assert 0.5 <= up.w <= 0.99 and 0.01 <= up.tau_x <= 0.1


def test_validation_reproducible():
    a = validation_update(AdaptiveState.initial(), 3, 2, 1, 2, np.random.default_rng(42))
    b = validation_update(AdaptiveState.initial(), 3, 2, 1, 2, np.random.default_rng(42))
    assert (a.w, a.tau_x) == (b.w, b.tau_x)


def test_adaptive_config_validation():
    with pytest.raises(ValueError):
        AdaptiveConfig(l_w=0.9, u_w=0.5)
    with pytest.raises(ValueError):
        AdaptiveConfig(tau_c=0)


# -- dependence diagnostic ------------------------------------------------


def test_generic_configuration_independent():
    rng = np.random.default_rng(10)
    independent = 0
    for _ in range(20):
        w = World.of(rng.uniform(0.5, 1.5, (4, 2)), (1.0, 1.0), rng.uniform(0.5, 1.5, (2, 2)),
                     rng.uniform(0.5, 1.5, (2, 2)))
        independent += dependence_diagnostic(w).independent
    assert independent == 20


def test_far_cluster_dependent():
    # agents far from everything and from each other: f3, f4, f5 columns vanish
    w = World.of([(10, 10), (13, 10), (10, 13), (13, 13)], (0, 0), [(0.5, 0)], [(0, 0.5)])
    rep = dependence_diagnostic(w)
    assert rep.sigma_min < 1e-6 and not rep.independent


def test_duplicated_basis_dependent():
    rng = np.random.default_rng(11)
    g = rng.normal(size=(8, 4))
    A = np.column_stack([g, 2 * g[:, 0]])
    rep = dependence_from_jacobian(A)
    assert rep.sigma_min < 1e-12 and not rep.independent


def test_too_few_agents_always_dependent():
    w = World.of([(0.2, 0.3), (1.0, 0.4)], (0.5, 0.5), [(1, 1)], [(0.3, 0.9)])
    rep = dependence_diagnostic(w)
    assert basis_gradient(w).shape == (4, 5)
    assert not rep.independent and "always dependent" in rep.status


def test_tangent_sigma_min():
    rng = np.random.default_rng(12)
    G = rng.normal(size=(8, 5))
    alpha = rng.dirichlet(np.ones(5))
    # make alpha a null vector, as at an interior stationary point
    A = G - np.outer(G @ alpha, alpha) / (alpha @ alpha)
    assert dependence_from_jacobian(A).sigma_min < 1e-12
    assert tangent_sigma_min(A) > 0.1
    assert tangent_sigma_min(np.zeros((8, 5))) == 0.0
    assert tangent_sigma_min(A, rows=[0, 1]) == 0.0
