"""Shedding decision layer: QP solutions against grid and analytic oracles,
feeder quantization, margin bounds, and the end-to-end planning pipeline."""

import numpy as np
import pytest

from koopshed.control import (ControlProblem, InfeasiblePlan, SafetyMargin,
                              ShedPlan, empirical_min_zeta, kls_pipeline,
                              quantization_gap_bound, quantize, quantize_ceil,
                              solve_qp, zeta_margin, _prediction_rows)
from koopshed.encoders import PassthroughEncoder
from koopshed.koopman import KoopmanModel


def scalar_problem(zeta=0.0, T=10):
    return ControlProblem(A=np.array([[0.9]]), B=np.array([[0.05]]),
                          g1=np.array([-0.03]), zeta=zeta, T=T)


def toy_model(horizon=6):
    """Three-dimensional passthrough model for pipeline tests."""
    enc = PassthroughEncoder(3, 2)
    model = KoopmanModel(0.5 * np.eye(3), 0.05 * np.ones((3, 2)), enc,
                         tau=0.0, dt_embed=1.0,
                         meta={"horizon": horizon, "max_pred_error": 0.0})
    model.enc_params = np.zeros(0)
    return model


# ------------------------------------------------------------------ solve_qp

def test_scalar_qp_matches_dense_grid_search():
    prob = scalar_problem()
    u, info = solve_qp(prob)
    grid = np.arange(0.0, 1.0 + 1e-4, 1e-4)
    rows, frees, _ = _prediction_rows(prob)
    nadir_ok = (frees[:, None] + rows @ grid[None, :]
                >= prob.omega_min - 1e-15).all(axis=0)
    ss_ok = frees[-1] + rows[-1] * grid >= prob.omega_inf_min - 1e-15
    best_grid = grid[nadir_ok & ss_ok][0]
    assert abs(u[0] - best_grid) <= 2e-4
    assert info["kkt_residual"] <= 1e-8


def test_shed_magnitude_grows_with_margin():
    prev = -1.0
    for zeta in (0.0, 0.002, 0.004, 0.006):
        u, info = solve_qp(scalar_problem(zeta=zeta))
        assert info["kkt_residual"] <= 1e-8
        assert u[0] >= prev - 1e-12
        prev = u[0]
    assert prev > 0.14          # the margin forces extra shedding


def test_two_bus_qp_matches_analytic_kkt_solution():
    # one binding steady-state row; stationarity gives u = R^-1 m' b / mR^-1m'
    A = np.array([[0.9, 0.0], [0.0, 0.5]])
    B = np.array([[0.05, 0.02], [0.0, 0.0]])
    prob = ControlProblem(A=A, B=B, g1=np.array([-0.03, 0.01]), T=2,
                          R=np.diag([1.0, 2.0]))
    u, info = solve_qp(prob)
    m = np.array([0.05, 0.02])
    r_inv = np.diag([1.0, 0.5])
    b_ss = prob.omega_inf_min - (-0.027)
    expected = r_inv @ m * (b_ss / (m @ r_inv @ m))
    np.testing.assert_allclose(u, expected, rtol=0, atol=1e-8)
    assert info["kkt_residual"] <= 1e-8


def test_benign_state_requires_no_shedding():
    prob = ControlProblem(A=np.array([[0.9]]), B=np.array([[0.05]]),
                          g1=np.array([0.001]), T=10)
    u, info = solve_qp(prob)
    assert abs(u[0]) <= 1e-10
    assert info["objective"] <= 1e-16


def test_infeasible_problem_reports_worst_constraint():
    prob = ControlProblem(A=np.array([[0.9]]), B=np.array([[0.001]]),
                          g1=np.array([-0.5]), T=10)
    with pytest.raises(InfeasiblePlan) as err:
        solve_qp(prob)
    assert err.value.step == 2
    assert err.value.kind == "nadir"
    assert abs(err.value.violation - 0.429) <= 1e-12


def test_solution_respects_box_for_random_problems():
    rng = np.random.default_rng(5)
    solved = 0
    for _ in range(40):
        p = int(rng.integers(1, 5))
        q = int(rng.integers(1, 4))
        A = rng.standard_normal((p, p))
        A *= rng.uniform(0.3, 0.95) / max(abs(np.linalg.eigvals(A)))
        B = 0.1 * rng.standard_normal((p, q))
        g1 = 0.02 * rng.standard_normal(p)
        try:
            prob = ControlProblem(A=A, B=B, g1=g1, T=int(rng.integers(2, 12)))
            u, info = solve_qp(prob)
        except InfeasiblePlan:
            continue
        solved += 1
        assert (u >= -1e-12).all() and (u <= 1 + 1e-12).all()
        assert info["kkt_residual"] <= 1e-8
        rows, frees, _ = _prediction_rows(prob)
        assert (frees + rows @ u >= prob.omega_min - 1e-9).all()
    assert solved >= 12


def test_problem_validation_errors():
    A1, B1 = np.array([[0.9]]), np.array([[0.05]])
    with pytest.raises(ValueError, match="dimensions"):
        ControlProblem(A=np.eye(2), B=B1, g1=np.zeros(1))
    with pytest.raises(ValueError, match="length"):
        ControlProblem(A=A1, B=B1, g1=np.zeros(2))
    with pytest.raises(ValueError, match="symmetric"):
        ControlProblem(A=np.eye(2), B=np.ones((2, 2)), g1=np.zeros(2),
                       R=np.array([[1.0, 0.5], [0.0, 1.0]]))
    with pytest.raises(ValueError, match="positive definite"):
        ControlProblem(A=A1, B=B1, g1=np.zeros(1), R=np.array([[0.0]]))
    with pytest.raises(ValueError, match="floors"):
        ControlProblem(A=A1, B=B1, g1=np.zeros(1),
                       omega_min=-0.01, omega_inf_min=-0.02)
    with pytest.raises(ValueError, match="zeta"):
        ControlProblem(A=A1, B=B1, g1=np.zeros(1), zeta=-0.1)
    with pytest.raises(ValueError, match="horizon"):
        ControlProblem(A=A1, B=B1, g1=np.zeros(1), T=0)


def test_prediction_rows_reproduce_linear_rollout():
    rng = np.random.default_rng(11)
    for _ in range(50):
        p = int(rng.integers(1, 6))
        q = int(rng.integers(1, 4))
        A = 0.4 * rng.standard_normal((p, p))
        B = rng.standard_normal((p, q))
        g1 = rng.standard_normal(p)
        u = rng.uniform(0.0, 1.0, q)
        prob = ControlProblem(A=A, B=B, g1=g1, T=int(rng.integers(2, 9)),
                              omega_min=-100.0, omega_inf_min=-50.0)
        rows, frees, steps = _prediction_rows(prob)
        x = g1.copy()
        for i, t in enumerate(steps):
            x = A @ x + B @ u
            assert abs(frees[i] + rows[i] @ u - x[0]) <= 1e-10
        assert steps == list(range(2, prob.T + 1))


# -------------------------------------------------------------- quantization

def test_quantize_hand_cases():
    assert quantize(np.array([0.37]), 0.25)[0] == pytest.approx(0.25)
    assert quantize(np.array([0.45]), 0.10)[0] == pytest.approx(0.50)
    assert quantize_ceil(np.array([0.37]), 0.25)[0] == pytest.approx(0.50)
    assert quantize_ceil(np.array([0.50]), 0.25)[0] == pytest.approx(0.50)
    np.testing.assert_allclose(
        quantize(np.array([0.1, 0.6]), np.array([0.25, 0.5])), [0.0, 0.5])


def test_quantization_error_and_dominance_invariants():
    rng = np.random.default_rng(3)
    for _ in range(500):
        q = int(rng.integers(1, 6))
        u = rng.uniform(0.0, 1.0, q)
        d = rng.choice([0.05, 0.1, 0.2, 0.25], size=q)
        near = quantize(u, d)
        up = quantize_ceil(u, d)
        assert (np.abs(near - u) <= d / 2 + 1e-9).all()
        assert (up - u >= -1e-9).all() and (up - u < d).all()
        assert (up >= near - 1e-12).all()
        assert (np.abs(near / d - np.round(near / d)) <= 1e-9).all()


def test_quantize_rejects_bad_interval():
    with pytest.raises(ValueError, match="positive"):
        quantize(np.array([0.5]), 0.0)
    with pytest.raises(ValueError, match="positive"):
        quantize_ceil(np.array([0.5]), -0.1)


# ------------------------------------------------------------- safety margin

def test_margin_terms_follow_hand_computed_series():
    # A = 0.5, B = 0.1, d = 1: step terms 0.5*0.1 and 0.5*(1 + 0.5)*0.1
    margin = zeta_margin(np.array([[0.5]]), np.array([[0.1]]), 1.0, 0.02, 2)
    np.testing.assert_allclose(margin.terms, [0.05, 0.075], atol=1e-15)
    assert margin.zeta == pytest.approx(0.095)
    assert margin.max_pred_err == 0.02
    assert quantization_gap_bound(np.array([[0.5]]), np.array([[0.1]]),
                                  2, 1.0) == pytest.approx(0.075)


def test_gap_bound_covers_rounding_for_random_systems():
    rng = np.random.default_rng(0)
    for _ in range(300):
        p = int(rng.integers(1, 5))
        q = int(rng.integers(1, 4))
        A = rng.standard_normal((p, p))
        A *= rng.uniform(0.3, 0.95) / max(abs(np.linalg.eigvals(A)))
        B = 0.1 * rng.standard_normal((p, q))
        d = rng.choice([0.05, 0.1, 0.25], size=q)
        T = int(rng.integers(2, 12))
        u = rng.uniform(0.0, 1.0, q)
        u_q = quantize(u, d)
        margin = zeta_margin(A, B, d, 0.0, T)
        g = np.zeros(p)
        g_q = np.zeros(p)
        for t in range(1, T):
            g = A @ g + B @ u
            g_q = A @ g_q + B @ u_q
            assert abs(g[0] - g_q[0]) <= margin.terms[t - 1] + 1e-9


def test_margin_makes_quantized_commands_safe_on_exact_models():
    rng = np.random.default_rng(7)
    checked = 0
    for _ in range(120):
        p = int(rng.integers(1, 5))
        q = int(rng.integers(1, 4))
        A = rng.standard_normal((p, p))
        A *= rng.uniform(0.3, 0.95) / max(abs(np.linalg.eigvals(A)))
        B = 0.1 * rng.standard_normal((p, q))
        d = rng.choice([0.05, 0.1, 0.25], size=q)
        T = int(rng.integers(2, 12))
        g1 = rng.uniform(-0.04, 0.0) * np.eye(p)[0] \
            + 0.01 * rng.standard_normal(p)
        margin = zeta_margin(A, B, d, 0.0, T)
        try:
            prob = ControlProblem(A=A, B=B, g1=g1, zeta=margin.zeta, T=T)
            u, _ = solve_qp(prob)
        except InfeasiblePlan:
            continue
        checked += 1
        u_q = np.clip(quantize(u, d), 0.0, 1.0)
        x = g1.copy()
        for t in range(2, T + 1):
            x = A @ x + B @ u_q
            assert x[0] >= -0.02 - 1e-9
            if t == T:
                assert x[0] >= -0.01 - 1e-9
    assert checked >= 40


def test_margin_input_validation_and_instability_warning():
    A, B = np.array([[0.5]]), np.array([[0.1]])
    with pytest.raises(ValueError, match="positive"):
        zeta_margin(A, B, 0.0, 0.0, 5)
    with pytest.raises(ValueError, match="non-negative"):
        zeta_margin(A, B, 0.1, -1.0, 5)
    with pytest.raises(ValueError, match="horizon"):
        zeta_margin(A, B, 0.1, 0.0, 0)
    with pytest.warns(RuntimeWarning, match="spectral radius"):
        zeta_margin(np.array([[1.2]]), B, 0.1, 0.0, 5)


# ------------------------------------------------------------------ pipeline

def test_pipeline_sheds_nothing_at_nominal_frequency():
    plan = kls_pipeline(toy_model(), np.zeros(3), 0.0, 0.25,
                        zeta=0.0, max_pred_err=0.0)
    np.testing.assert_allclose(plan.u_star, 0.0, atol=1e-10)
    np.testing.assert_array_equal(plan.u_quantized, 0.0)
    np.testing.assert_allclose(plan.omega_pred_quantized, 0.0, atol=1e-12)
    assert len(plan.omega_pred_star) == 6       # horizon from model meta
    assert not plan.infeasible


def test_pipeline_commands_are_feeder_multiples():
    model = toy_model(horizon=12)
    rng = np.random.default_rng(9)
    for _ in range(20):
        window = np.array([0.0, *rng.uniform(-0.05, 0.0, 2)])
        omega = rng.uniform(-0.03, -0.005)
        window[0] = omega
        plan = kls_pipeline(model, window, omega, 0.25, zeta=0.0)
        ratio = plan.u_quantized / 0.25
        np.testing.assert_allclose(ratio, np.round(ratio), atol=1e-9)
        assert (plan.u_quantized >= 0.0).all()
        assert (plan.u_quantized <= 1.0).all()


def test_pipeline_upward_mode_never_sheds_less():
    model = toy_model(horizon=12)
    rng = np.random.default_rng(13)
    for _ in range(20):
        omega = rng.uniform(-0.03, -0.005)
        window = np.array([omega, *rng.uniform(-0.05, 0.0, 2)])
        near = kls_pipeline(model, window, omega, 0.25, zeta=0.0)
        up = kls_pipeline(model, window, omega, 0.25, zeta=0.0, mode="kls-c")
        assert near.mode == "kls" and up.mode == "kls-c"
        assert (up.u_quantized >= near.u_quantized - 1e-12).all()
        np.testing.assert_allclose(up.u_star, near.u_star, atol=1e-12)


def test_pipeline_default_margin_comes_from_model():
    model = toy_model()
    model.meta["max_pred_error"] = 0.003
    expected = zeta_margin(model.A, model.B, np.full(2, 0.25), 0.003, 6).zeta
    plan = kls_pipeline(model, np.zeros(3), 0.0, 0.25)
    assert plan.zeta == pytest.approx(expected)


def test_pipeline_flags_hopeless_cases_and_sheds_everything():
    model = toy_model()
    window = np.array([-0.5, -0.5, -0.5])
    plan = kls_pipeline(model, window, -0.5, 0.25, zeta=0.0)
    assert plan.infeasible
    np.testing.assert_array_equal(plan.u_quantized, 1.0)
    with pytest.raises(ValueError, match="mode"):
        kls_pipeline(model, window, -0.5, 0.25, mode="round-robin")


def test_plan_reports_megawatts_and_serializes():
    plan = ShedPlan(u_star=np.array([0.3, 0.1]),
                    u_quantized=np.array([0.25, 0.0]),
                    d=np.array([0.25, 0.25]), zeta=0.01,
                    omega_pred_star=np.zeros(3),
                    omega_pred_quantized=np.zeros(3),
                    bus_mw=np.array([600.0, 550.0]))
    np.testing.assert_allclose(plan.shed_mw(), [150.0, 0.0])
    d = plan.to_dict()
    assert d["shed_mw"] == [150.0, 0.0]
    assert d["mode"] == "kls" and d["zeta"] == 0.01
    bare = ShedPlan(u_star=np.zeros(1), u_quantized=np.zeros(1),
                    d=np.ones(1), zeta=0.0, omega_pred_star=np.zeros(2),
                    omega_pred_quantized=np.zeros(2))
    assert bare.shed_mw() is None
    assert "shed_mw" not in bare.to_dict()


# ----------------------------------------------------------------- bisection

def test_bisection_brackets_threshold_predicate():
    threshold = 0.0123
    z = empirical_min_zeta(lambda v: v >= threshold, 0.0, 0.5, tol=1e-4)
    assert threshold <= z <= threshold + 1e-4


def test_bisection_short_circuits_and_validates():
    assert empirical_min_zeta(lambda v: True, 0.0, 0.5) == 0.0
    with pytest.raises(ValueError, match="fails even"):
        empirical_min_zeta(lambda v: False, 0.0, 0.5)
