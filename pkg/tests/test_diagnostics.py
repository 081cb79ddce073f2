import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from popgrad.diagnostics import (
    CHECKERS,
    FAIL,
    PASS,
    REPORT,
    CheckResult,
    DiagnosticsReport,
    PhaseThresholds,
    check_balance,
    check_descent_projection,
    check_grad_lower_bound,
    check_h_update_decomposition,
    check_h_updates,
    check_implicit_regularization,
    check_init,
    check_kappa_separation,
    check_loss_monotone,
    check_residual_bound,
    check_theta_bound,
    descent_projection,
    estimate_rate,
    fit_lower_bound,
    h_update_terms,
    phase_detect,
    run_checkers,
)
from popgrad.dynamics import InitSpec, RunConfig, Trajectory, gd_step, init_random, make_toycase, run_flow, run_gd
from popgrad.errors import BadParam, BadProjection, InsufficientData
from popgrad.geometry import Teacher, geometry_view
from popgrad.objective import loss
from popgrad.validation import near_parallel_config, run_suite

T20 = Teacher.canonical(20)


def synthetic(times, teacher=T20, snapshots=None, mode="discrete_gd", **cols):
    times = np.asarray(times, dtype=float)
    if snapshots is None:
        snapshots = np.tile(0.5 * teacher.v, (len(times), 2, 1))
    columns = {k: np.asarray(v, dtype=float) for k, v in cols.items()}
    return Trajectory(times, np.asarray(snapshots), columns, teacher, mode, eta=0.05)


@pytest.fixture(scope="module")
def fig1_n2():
    return run_gd(init_random(InitSpec(2, 20, seed=0)), T20,
                  RunConfig(t_end=20000, record_every=200, log_records=20))


@pytest.fixture(scope="module")
def small_init_n2():
    spec = InitSpec(2, 20, sigma=1e-3, seed=0)
    return spec, run_gd(init_random(spec), T20, RunConfig(t_end=3000, record_every=1))


class TestThresholds:
    def test_defaults(self):
        th = PhaseThresholds()
        assert (th.eps1, th.eps2, th.balance_factor) == (0.02, 0.05, 2.5)

    @pytest.mark.parametrize("kw", [{"eps1": 0.1, "eps2": 0.05}, {"eps1": 0.0}, {"eps2": 1.0},
                                    {"balance_factor": 0.5}, {"h_cap_factor": 0.0}])
    def test_invalid(self, kw):
        with pytest.raises(BadParam):
            PhaseThresholds(**kw)


class TestInitCheck:
    def test_orthogonal_basis_rows(self):
        spec = InitSpec(3, 20, sigma=0.1)
        W = np.zeros((3, 20))
        for i in range(3):
            W[i, 0] = 0.1
            W[i, i + 1] = 1.0
        W *= spec.sigma * np.sqrt(20) / np.linalg.norm(W, axis=1)[:, None]
        res = check_init(W, spec, T20)
        assert all(res.values["norm_ok"]) and res.verdict == PASS

    def test_parallel_init_is_degenerate(self):
        spec = InitSpec(2, 20)
        W = np.outer([0.3, 0.4], T20.v)
        res = check_init(W, spec, T20)
        assert res.verdict == FAIL
        assert res.values["kappa_max"] is None and not res.values["non_degenerate"]

    def test_coverage_at_large_d(self):
        t = Teacher.canonical(400)
        passed = sum(check_init(init_random(InitSpec(4, 400, seed=s)), InitSpec(4, 400, seed=s), t).verdict == PASS
                     for s in range(100))
        assert passed >= 99


class TestPhases:
    def test_starting_in_final_phase(self):
        tr = synthetic(range(5), max_theta=[0.01] * 5, H=[0.0] * 5)
        m = phase_detect(tr)
        assert (m.t1_index, m.t2_index) == (0, 0)

    def test_constructed_crossing(self):
        theta = np.linspace(1.0, 0.0, 12)
        theta[7] = 0.08
        theta[:7] = np.maximum(theta[:7], 0.2)
        tr = synthetic(range(12), max_theta=theta, H=np.linspace(1, 0, 12))
        m = phase_detect(tr)
        assert m.t1_index == 7
        assert m.t2_index == 11

    def test_missing_markers(self):
        tr = synthetic(range(4), max_theta=[1.0] * 4, H=[1.0] * 4)
        assert phase_detect(tr).t1_index is None

    def test_too_short(self):
        with pytest.raises(InsufficientData):
            phase_detect(synthetic(range(2), max_theta=[1, 1], H=[1, 1]))

    def test_small_init_separates_phases(self, small_init_n2):
        _, tr = small_init_n2
        m = phase_detect(tr)
        assert m.t1_index is not None and m.t2_index is not None
        assert m.t1_time < m.t2_time

    def test_figure1_scale_markers_exist(self, fig1_n2):
        m = phase_detect(fig1_n2)
        assert m.t1_index is not None and m.t2_index is not None
        assert m.t1_time <= m.t2_time


class TestPhaseTwo:
    def test_balance_and_h_decay(self, small_init_n2):
        spec, tr = small_init_n2
        rep = run_checkers(tr, ["balance", "h_decay", "phase2_bounds", "phase1_norm_growth", "phase1_envelope"],
                           spec=spec)
        assert rep["balance"].verdict == PASS
        assert rep["h_decay"].verdict == PASS
        assert rep["h_decay"].values["factor"] == pytest.approx(1 - 2 * 0.05 / 2, rel=1e-3)
        assert rep["phase1_norm_growth"].verdict == PASS
        assert rep["phase2_bounds"].verdict == REPORT
        assert rep["phase2_bounds"].values["max_h_over_cap"] <= 1.0

    def test_q_smallness_is_reported(self, small_init_n2):
        _, tr = small_init_n2
        m = phase_detect(tr)
        res = check_h_updates(tr, eps2=0.05, segment=(m.t1_index, m.t2_index))
        assert res.verdict == PASS
        assert "max_Q_over_3eps2_eta_v" in res.values


class TestThetaBound:
    def test_global_minimum(self):
        res = check_theta_bound(np.outer([0.5, 0.5], T20.v), T20)
        assert res.verdict == PASS and res.values["max_ratio"] == 0.0

    def test_near_parallel_configs(self):
        for seed in range(50):
            W, t = near_parallel_config(np.random.default_rng(seed), 5, 10)
            assert check_theta_bound(W, t).verdict == PASS

    def test_random_configs(self):
        res = run_suite("theta_bound", 200, 6, 30)
        assert res.n_failed == 0


class TestBalance:
    def test_equal(self):
        view = geometry_view(np.outer([0.3, 0.3, 0.3], T20.v), T20)
        assert check_balance(view, 1.0).verdict == PASS

    def test_unbalanced(self):
        view = geometry_view(np.outer([1.0, 3.0], T20.v), T20)
        assert check_balance(view, 2.0).verdict == FAIL

    def test_nonpositive_projection(self):
        W = np.outer([1.0, -3.0], T20.v)
        assert check_balance(geometry_view(W, T20), 2.0).verdict == REPORT


class TestDescentProjection:
    def test_minimum(self):
        assert descent_projection(np.outer([0.2, 0.8], T20.v), T20) == pytest.approx(0.0, abs=1e-16)

    def test_negative_projection_sum(self):
        with pytest.raises(BadProjection):
            descent_projection(np.outer([-0.2, 0.1], T20.v) + 0.01, T20)

    def test_single_aligned_neuron(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            u = rng.standard_normal(20)
            W = (T20.v + 0.01 * u)[None, :]
            assert descent_projection(W, T20) / loss(W, T20) == pytest.approx(2.0, rel=0.2)

    def test_figure1_tail(self, fig1_n2):
        res = check_descent_projection(fig1_n2)
        assert res.verdict == PASS and res.values["n_records"] > 10


class TestResidualBound:
    def test_minimum(self):
        view = geometry_view(np.outer([0.5, 0.5], T20.v), T20)
        assert check_residual_bound(view, 0.0).verdict == REPORT

    def test_aligned_fuzz(self):
        assert run_suite("residual_aligned", 500).n_failed == 0

    def test_spread_config(self):
        W = np.zeros((2, 20))
        W[0, 1] = W[1, 2] = 1.0
        view = geometry_view(W, T20)
        res = check_residual_bound(view, loss(W, T20))
        assert res.verdict == REPORT and res.values["ratio"] > 0


class TestRates:
    def test_power_law(self):
        t = np.linspace(10, 1000, 400)
        fit = estimate_rate(t, 5 * t**-3.0)
        assert fit.slope == pytest.approx(-3.0, abs=1e-9)
        assert fit.r_squared == pytest.approx(1.0, abs=1e-12)
        assert fit.window[1] - fit.window[0] >= 10

    def test_exponential(self):
        t = np.linspace(0, 30, 301)
        fit = estimate_rate(t, np.exp(-t), "exponential")
        assert fit.slope == pytest.approx(-1.0, abs=1e-9)

    def test_insufficient(self):
        with pytest.raises(InsufficientData):
            estimate_rate(np.arange(1, 12.0), np.ones(11))

    def test_bad_kind(self):
        with pytest.raises(BadParam):
            estimate_rate([1, 2], [1, 2], "linear")

    @settings(max_examples=30, deadline=None)
    @given(st.floats(-4, -0.5), st.floats(1e-3, 1e3), st.floats(0.1, 10))
    def test_invariances(self, p, scale, c):
        t = np.geomspace(10, 1e4, 200)
        rng = np.random.default_rng(0)
        L = t**p * np.exp(0.01 * rng.standard_normal(t.size))
        base = estimate_rate(t, L, window=(100, 1e4))
        assert estimate_rate(t, scale * L, window=(100, 1e4)).slope == pytest.approx(base.slope, abs=1e-9)
        assert estimate_rate(c * t, L, window=(100 * c, 1e4 * c)).slope == pytest.approx(base.slope, abs=1e-9)

    def test_lower_bound_exact(self):
        t = np.linspace(0, 100, 200)
        tr = synthetic(t, loss=(0.3 * t + 2.0) ** -3.0)
        res = fit_lower_bound(tr)
        assert res.verdict == PASS
        assert res.values["r_squared"] == pytest.approx(1.0, abs=1e-12)
        assert res.values["slope"] == pytest.approx(0.3, rel=1e-9)

    def test_lower_bound_rejects_single_neuron(self):
        tr = run_flow(init_random(InitSpec(1, 20)), T20,
                      RunConfig(mode="gradient_flow", t_end=200, record_every=2))
        assert fit_lower_bound(tr).verdict == FAIL

    def test_rate_and_lower_bound_agree(self, fig1_n2):
        assert estimate_rate(fig1_n2.times, fig1_n2.loss).slope == pytest.approx(-3, abs=0.4)
        assert fit_lower_bound(fig1_n2).values["slope"] > 0


class TestKappa:
    def test_equal_neurons_degenerate_branch(self):
        w = 0.2 * T20.v + 0.3 * np.eye(20)[1]
        W0 = make_toycase("equal", T20, w=w, n=3)
        tr = run_flow(W0, T20, RunConfig(mode="gradient_flow", t_end=20, record_every=1, keep_dense=True))
        res = check_kappa_separation(tr)
        assert res.verdict == REPORT and res.values["kappa_max0"] == 0.0

    def test_mirrored_pair(self):
        W0 = make_toycase("symmetric_pair", T20, lambda1=0.4, lambda2=0.2)
        tr = run_flow(W0, T20, RunConfig(mode="gradient_flow", t_end=50, record_every=1, keep_dense=True))
        res = check_kappa_separation(tr)
        assert res.verdict == PASS
        assert res.values["min_kappa_max"] == pytest.approx(np.pi)

    def test_random_n3(self):
        tr = run_flow(init_random(InitSpec(3, 20, seed=4)), T20,
                      RunConfig(mode="gradient_flow", t_end=300, record_every=3, keep_dense=True))
        assert check_kappa_separation(tr).verdict == PASS

    def test_differential_inequality_near_parallel(self):
        t = Teacher.canonical(6)
        rng = np.random.default_rng(1)
        W0 = np.tile([0.1, 0.3, 0, 0, 0, 0], (3, 1)) + 0.05 * rng.standard_normal((3, 6))
        tr = run_flow(W0, t, RunConfig(mode="gradient_flow", t_end=20, record_every=0.1, keep_dense=True))
        res = check_kappa_separation(tr)
        assert res.verdict == PASS
        assert res.values["fd_checked"] >= 5

    def test_single_neuron(self):
        tr = run_gd(init_random(InitSpec(1, 20)), T20, RunConfig(t_end=3))
        assert check_kappa_separation(tr).verdict == REPORT


class TestHUpdate:
    def test_minimum(self):
        W = np.outer([0.5, 0.5], T20.v)
        drift, Q = h_update_terms(W, T20, 0.05)
        assert drift == 0.0 and np.allclose(Q, 0.0)
        assert check_h_update_decomposition(W, gd_step(W, T20, 0.05), T20, 0.05).verdict == PASS

    @pytest.mark.parametrize("seed", range(10))
    def test_random_step(self, seed):
        W = init_random(InitSpec(4, 20, sigma=0.3, seed=seed))
        res = check_h_update_decomposition(W, gd_step(W, T20, 0.07), T20, 0.07)
        assert res.verdict == PASS and res.values["max_abs_error"] <= 1e-10


class TestImplicitRegularization:
    def test_balanced_minimum(self):
        tr = synthetic(range(4))
        assert check_implicit_regularization(tr, 0).verdict == PASS

    def test_shrunk_neuron(self):
        snaps = np.tile(0.5 * T20.v, (5, 2, 1))
        snaps[3, 1] *= 0.1
        tr = synthetic(range(5), snapshots=snaps)
        res = check_implicit_regularization(tr, 1)
        assert res.verdict == FAIL and res.values["offending"] == [(3.0, 1)]

    def test_no_marker(self):
        assert check_implicit_regularization(synthetic(range(3)), None).verdict == REPORT

    def test_figure1(self, fig1_n2):
        m = phase_detect(fig1_n2)
        assert check_implicit_regularization(fig1_n2, m.t2_index).verdict == PASS


class TestGradLowerBound:
    def test_preconditions_never_hold(self):
        tr = run_gd(init_random(InitSpec(2, 20)), T20, RunConfig(t_end=5))
        res = check_grad_lower_bound(tr)
        assert res.verdict == REPORT and res.values["n_records"] == 0

    def test_overparameterized_tail(self, fig1_n2):
        res = check_grad_lower_bound(fig1_n2)
        assert res.verdict == REPORT
        assert res.values["min_c"] > 0.01 and res.values["trend"] >= 0.5

    def test_single_neuron_ratio_grows(self):
        tr = run_gd(init_random(InitSpec(1, 20)), T20, RunConfig(t_end=400, record_every=10))
        res = check_grad_lower_bound(tr)
        assert res.values["last_c"] > 5 * res.values["min_c"]

    def test_hard_mode(self, fig1_n2):
        assert check_grad_lower_bound(fig1_n2, hard=True).verdict == PASS


class TestReport:
    def test_each_checker_once(self, fig1_n2):
        rep = run_checkers(fig1_n2)
        names = [r.name for r in rep]
        assert names == list(CHECKERS)
        assert rep.ok, [r.name for r in rep.failures]

    def test_theta_bound_always_included(self, fig1_n2):
        rep = run_checkers(fig1_n2, ["rate"])
        assert [r.name for r in rep] == ["theta_bound", "rate"]

    def test_unknown_checker(self, fig1_n2):
        with pytest.raises(BadParam):
            run_checkers(fig1_n2, ["nope"])

    def test_duplicate_rejected(self):
        rep = DiagnosticsReport([CheckResult("a", "x", PASS)])
        with pytest.raises(ValueError):
            rep.add(CheckResult("a", "x", PASS))

    def test_json_shape(self, fig1_n2):
        payload = json.loads(run_checkers(fig1_n2, ["rate", "phases"]).to_json())
        assert all(set(item) == {"name", "anchor", "values", "threshold", "verdict"} for item in payload)

    def test_nan_serialized_as_null(self):
        rep = DiagnosticsReport([CheckResult("a", "x", REPORT, {"v": float("nan")})])
        assert json.loads(rep.to_json())[0]["values"]["v"] is None

    def test_loss_monotone_flags_gd(self):
        tr = synthetic(range(3), loss=[1.0, 2.0, 0.5])
        assert check_loss_monotone(tr).verdict == REPORT
        tr.mode = "gradient_flow"
        assert check_loss_monotone(tr).verdict == FAIL
