import numpy as np
import pytest

import microgrid_fdi as mg
from microgrid_fdi.errors import ConfigError, SingularK, SingularPsi, ZeroZbar
from microgrid_fdi.linediag import (DiagnosisState, LineCurrentEstimator,
                                    ParityKit, Prefilter1, Prefilter2,
                                    build_parity, diagnose_step, diagnose_trace,
                                    error_bound, lemma1_bracket,
                                    regularized_estimate, residual_model,
                                    residual_step, thresholds, update_status,
                                    wls_load)

rng = np.random.default_rng(21)


@pytest.fixture(scope="module")
def model_kit(grid_mh, scen_suite):
    model = residual_model(scen_suite.line_designs[0], grid_mh, 0, ts=1e-5)
    return model, scen_suite.kits[0]


def drive_discrete(model, u, varpi=None, x0=None):
    """Roll the discrete residual model; returns the r~ samples."""
    ns = len(u)
    x = np.zeros(model.Ad.shape[0]) if x0 is None else np.asarray(x0, float).copy()
    r = np.zeros(ns)
    for k in range(ns):
        r[k] = model.Cr @ x
        w = varpi[k] if varpi is not None else np.zeros(7)
        x = model.Ad @ x + model.Bdg * u[k] + model.Bdw @ w
    return r


class TestParityKit:
    def test_dimensions(self, model_kit):
        model, kit = model_kit
        assert kit.T == 20
        assert kit.n_upsilon == 20 - 3
        assert kit.O.shape == (20, 3)
        assert kit.Z1.shape == (20, 19)
        assert kit.Z2.shape == (20, 7 * 19)

    def test_projection_identities(self, model_kit):
        _, kit = model_kit
        assert np.linalg.norm(kit.W @ kit.O) < 1e-10 * max(1.0, np.linalg.norm(kit.O))
        assert np.allclose(kit.W @ kit.W.T, np.eye(kit.n_upsilon), atol=1e-10)

    def test_toeplitz_entries(self, model_kit):
        model, kit = model_kit
        # first block row of both Toeplitz matrices is zero
        assert np.all(kit.Z1[0] == 0)
        assert np.all(kit.Z2[0] == 0)
        # third block row, first column: C Ad Bd of the scalar channel
        assert kit.Z1[2, 0] == pytest.approx(
            float(model.Cr @ model.Ad @ model.Bdg), rel=1e-12)
        assert kit.Z1[1, 0] == pytest.approx(float(model.Cr @ model.Bdg), rel=1e-12)
        assert np.allclose(kit.Z2[2, :7], model.Cr @ model.Ad @ model.Bdw)

    def test_sigma_omega_spd(self, model_kit):
        _, kit = model_kit
        lam = np.linalg.eigvalsh(kit.sigma_omega)
        assert lam.min() > 0
        assert kit.lam_min == pytest.approx(lam.min(), rel=1e-9)
        assert kit.lam_max == pytest.approx(lam.max(), rel=1e-9)

    def test_odd_T_rejected(self, model_kit):
        model, _ = model_kit
        with pytest.raises(ConfigError):
            build_parity(model, 19)

    def test_discretization_consistent_with_zoh(self, model_kit, scen_suite):
        from microgrid_fdi.numerics import zoh_discretize
        model, _ = model_kit
        Ad, Bd = zoh_discretize(model.Ar, np.column_stack([model.Bg, model.Bw]),
                                model.ts)
        assert np.allclose(Ad, model.Ad, rtol=1e-12, atol=0)
        assert np.allclose(Bd[:, 0], model.Bdg, rtol=1e-12, atol=0)

    def test_projection_exactness_invariant(self, model_kit):
        # Upsilon is independent of the window-initial filter state
        model, kit = model_kit
        u = 2.0 + 0.1 * rng.normal(size=40)
        r0 = drive_discrete(model, u, x0=np.zeros(3))
        r1 = drive_discrete(model, u, x0=rng.normal(size=3) * 5.0)
        U0 = kit.W @ r0[-kit.T:]
        U1 = kit.W @ r1[-kit.T:]
        # identical inputs, different initial states: projections agree
        scale = max(1.0, np.abs(U0).max())
        assert np.abs(U0 - U1).max() < 1e-8 * scale


class TestWls:
    def test_exact_fit(self, model_kit):
        _, kit = model_kit
        psi = rng.normal(size=kit.n_upsilon)
        assert wls_load(psi * 5.0, psi, kit.sigma_omega) == pytest.approx(5.0)

    def test_orthogonal_gives_zero(self, model_kit):
        _, kit = model_kit
        psi = rng.normal(size=kit.n_upsilon)
        w = kit.sigma_omega_inv @ psi
        ups = rng.normal(size=kit.n_upsilon)
        ups -= psi * (w @ ups) / (psi @ w)  # orthogonal in the S^-1 inner product
        assert abs(wls_load(ups, psi, kit.sigma_omega)) < 1e-9

    def test_singular_psi(self, model_kit):
        _, kit = model_kit
        with pytest.raises(SingularPsi):
            wls_load(np.ones(kit.n_upsilon), np.zeros(kit.n_upsilon),
                     kit.sigma_omega)

    def test_unbiased_under_noise(self, model_kit):
        model, kit = model_kit
        # Monte-Carlo over synthetic noise at the assumed covariance
        L = np.linalg.cholesky(model.varpi_cov)
        vwin = np.full(kit.T - 1, 1 / 48.0)
        psi = kit.WZ1 @ vwin
        P_true = 100.0
        est = []
        for _ in range(500):
            varpi = rng.normal(size=(60, 7)) @ L.T
            r = drive_discrete(model, np.full(60, P_true / 48.0), varpi)
            ups = kit.W @ r[-kit.T:]
            est.append(wls_load(ups, psi, kit.sigma_omega))
        se = np.std(est) / np.sqrt(len(est))
        assert abs(np.mean(est) - P_true) <= 2.5 * se + 1e-6 * P_true


class TestThresholds:
    def test_linear_in_alpha(self, model_kit):
        _, kit = model_kit
        psi = kit.WZ1 @ np.full(kit.T - 1, 1 / 48.0)
        assert np.allclose(thresholds(kit, psi, 6.0),
                           2.0 * thresholds(kit, psi, 3.0))

    def test_psi_direction_annihilated(self, model_kit):
        _, kit = model_kit
        psi = kit.WZ1 @ np.full(kit.T - 1, 1 / 48.0)
        w = kit.sigma_omega_inv @ psi
        resid = psi - psi * (psi @ w) / (psi @ w)
        assert np.abs(resid).max() < 1e-15


class TestStatusRules:
    @pytest.mark.parametrize("gap,expected", [(5, 0), (12, 1), (25, 2)])
    def test_rule_branches(self, gap, expected):
        state = DiagnosisState(T=20, alpha=3.0, eta=1e6)
        k = 100
        state.Tcal = k - gap
        n = 3
        sig = update_status(np.ones(n) * 10.0, np.ones(n), state, k)  # crossing
        assert sig == expected

    def test_inside_resets_recorder(self):
        state = DiagnosisState(T=20, alpha=3.0, eta=1e6)
        state.Tcal = 0
        sig = update_status(np.zeros(3), np.ones(3), state, 50)
        assert state.Tcal == 50
        assert sig == 0


class TestRegularizedEstimate:
    def _instance(self, nY=6, T=8, seed=0):
        r = np.random.default_rng(seed)
        G = r.normal(size=(nY, 2))
        A = r.normal(size=(nY, nY))
        S = A @ A.T + nY * np.eye(nY)
        ups = r.normal(size=nY) * 3.0
        th_prev = r.normal(size=2)
        return G, np.linalg.inv(S), ups, th_prev

    def test_eta_zero_is_wls(self):
        G, Si, ups, th_prev = self._instance()
        th = regularized_estimate(ups, G, Si, 0.0, th_prev)
        wls = np.linalg.solve(G.T @ Si @ G, G.T @ Si @ ups)
        assert np.allclose(th, wls, atol=1e-10)

    def test_large_eta_freezes_load(self):
        G, Si, ups, th_prev = self._instance(seed=3)
        th = regularized_estimate(ups, G, Si, 1e12, th_prev)
        assert abs(th[0] - th_prev[0]) < 1e-6

    def test_matches_numerical_minimizer(self):
        for seed in range(20):
            G, Si, ups, th_prev = self._instance(seed=seed)
            eta = float(np.random.default_rng(seed).uniform(0, 100))
            th = regularized_estimate(ups, G, Si, eta, th_prev)
            th_num = gradient_descent_minimizer(ups, G, Si, eta, th_prev)
            assert np.abs(th - th_num).max() < 1e-8

    def test_singular_k(self):
        G = np.zeros((4, 2))
        G[:, 0] = [1.0, 0, 0, 0]
        G[:, 1] = [1.0, 0, 0, 0]  # perfectly collinear
        with pytest.raises(SingularK):
            regularized_estimate(np.ones(4), G, np.eye(4), 0.0, np.zeros(2))


def gradient_descent_minimizer(ups, G, Si, eta, th_prev, tol=1e-12):
    """Independent oracle: steepest descent with exact line search."""
    nu1 = np.array([1.0, 0.0])
    th = np.zeros(2)
    H = 2.0 * (G.T @ Si @ G + eta * np.outer(nu1, nu1))
    for _ in range(20000):
        grad = H @ th - 2.0 * (G.T @ Si @ ups + eta * nu1 * (nu1 @ th_prev))
        gn = np.linalg.norm(grad)
        if gn < tol:
            break
        step = gn ** 2 / (grad @ H @ grad)
        th = th - step * grad
    return th


class TestErrorBound:
    def test_zero_when_no_deviation(self, model_kit):
        _, kit = model_kit
        psi = kit.WZ1 @ np.full(kit.T - 1, 1 / 48.0)
        assert error_bound(kit, psi, kit.Zbar, 1e6, 0.0, 0.0, 0.0) == 0.0

    def test_lemma1_analytic_case(self):
        lo, hi = lemma1_bracket(np.array([1.0, 0.0]), np.array([0.0, 1.0]))
        assert lo == pytest.approx(0.5)
        assert hi == pytest.approx(2.0)

    def test_lemma1_brackets_eigenvalues(self):
        for _ in range(1000):
            n = rng.integers(2, 20)
            psi = rng.normal(size=n)
            zbar = rng.normal(size=n)
            M = np.array([[psi @ psi, psi @ zbar], [zbar @ psi, zbar @ zbar]])
            lam = np.linalg.eigvalsh(M)
            lo, hi = lemma1_bracket(psi, zbar)
            assert lam.min() >= lo - 1e-9 * max(1.0, hi)
            assert lam.max() <= hi + 1e-9 * max(1.0, hi)

    def test_zero_zbar_raises(self, model_kit):
        _, kit = model_kit
        with pytest.raises(ZeroZbar):
            error_bound(kit, np.ones(kit.n_upsilon), np.zeros(kit.n_upsilon),
                        1e6, 1.0, 0.0, 0.0)


class TestDiscreteModelProperties:
    def test_prop2_load_step_recovers(self, model_kit):
        # noise-free step load change: residual leaves, then returns for good
        model, kit = model_kit
        ns = 120
        k0 = 60
        P = np.where(np.arange(ns) < k0, 100.0, 120.0)
        r = drive_discrete(model, P / 48.0)
        vwin = np.full(kit.T - 1, 1 / 48.0)
        psi = kit.WZ1 @ vwin
        eps = thresholds(kit, psi, 3.0)
        crossing = []
        for k in range(kit.T, ns):
            ups = kit.W @ r[k - kit.T + 1:k + 1]
            phat = wls_load(ups, psi, kit.sigma_omega)
            upt = ups - psi * phat
            crossing.append(bool(np.any(np.abs(upt) > eps)))
        crossing = np.array(crossing)
        ks = np.arange(kit.T, ns)
        assert crossing[(ks > k0) & (ks < k0 + kit.T - 2)].any()
        assert not crossing[ks >= k0 + kit.T - 1].any()

    def test_prop2_fault_expectation_formula(self, model_kit):
        # noise-free sustained fault: residual equals the displayed formula
        model, kit = model_kit
        ns = 80
        k0 = 40
        fI = np.where(np.arange(ns) < k0, 0.0, 0.15 * (np.arange(ns) - k0))
        P = 100.0
        r = drive_discrete(model, fI + P / 48.0)
        vwin = np.full(kit.T - 1, 1 / 48.0)
        psi = kit.WZ1 @ vwin
        w = kit.sigma_omega_inv @ psi
        den = psi @ w
        for k in (k0 + 5, k0 + 15, ns - 1):
            ups = kit.W @ r[k - kit.T + 1:k + 1]
            upt = ups - psi * ((w @ ups) / den)
            fstack = fI[k - kit.T + 1:k]
            pred = kit.WZ1 @ fstack
            pred = pred - psi * ((w @ pred) / den)
            assert np.abs(upt - pred).max() < 1e-8 * max(1.0, np.abs(pred).max())


class TestRuntimeFilters:
    def test_line_estimator_zero_drive(self):
        est = LineCurrentEstimator(R=0.05, L=2.1e-3, i0=3.0)
        for _ in range(2000):
            est.step(48.0, 48.0, 1e-4)
        assert abs(est.I) < 3.0 * np.exp(-0.05 / 2.1e-3 * 0.2) + 1e-12

    def test_line_estimator_decay_rate(self):
        R, L = 0.05, 2.1e-3
        est = LineCurrentEstimator(R=R, L=L, i0=1.0)
        h = 1e-5
        est.step(0.0, 0.0, h)
        assert est.I == pytest.approx(np.exp(-R / L * h), rel=1e-12)

    def test_estimator_tracks_shadow(self, grid_mh, scen_suite, loads_case1):
        faults = mg.FaultSchedule(line=(mg.LineFault(
            line=0, onset=0.005, profile=mg.StepProfile(1000.0)),))
        tr = mg.simulate(grid_mh, loads_case1, faults, t_end=0.02, ts=1e-5,
                         h=1e-6, seed=0, noise_scale=0.0,
                         filter_bank=scen_suite.bank)
        assert np.abs(tr.Ihat - tr.I_shadow).max() < 1e-6

    def test_prefilter1_steady_state(self, grid_mh, scen_suite, loads_case1):
        tr = mg.simulate(grid_mh, loads_case1, mg.FaultSchedule(), t_end=0.01,
                         ts=1e-5, h=1e-6, seed=0, noise_scale=0.0)
        # r1 converges to d = P/V + sum_k B_ik I_k (unity DC gain)
        tr = mg.simulate(grid_mh, loads_case1, mg.FaultSchedule(), t_end=0.01,
                         ts=1e-5, h=1e-6, seed=0, noise_scale=0.0,
                         filter_bank=scen_suite.bank)
        Binc = grid_mh.incidence
        for i in range(3):
            d = (tr.P[-1, i] / tr.x[-1, i, 0]
                 + Binc[i] @ tr.I_pos[-1])
            assert tr.r1[-1, i] == pytest.approx(d, rel=1e-6)

    def test_prefilter1_decoupled_from_actuator_fault(self, grid_mh, scen_suite):
        # synthetic DAE-consistent drive: d frozen, actuator fault swings
        from microgrid_fdi.grid import build_closed_loop
        from tests.test_actuator import integrate_dae_consistent
        dg = grid_mh.dgs[0]
        A, B, D, E, _ = build_closed_loop(dg)
        h = 1e-6
        fa = lambda t: 2.0 * np.sin(4000.0 * t) + (1.0 if t > 0.002 else 0.0)
        x = integrate_dae_consistent(A, B, D, E, dg.Vref, lambda t: 2.0, fa,
                                     0.006, h)
        pf = Prefilter1(scen_suite.line_designs[0], vref=dg.Vref)
        pf.warm_start_input(np.array([x[0, 0], x[0, 1], x[0, 2], dg.Vref]))
        out = np.zeros(len(x))
        out[0] = pf.output
        for k in range(len(x) - 1):
            out[k + 1] = pf.step(x[k], h, x[k + 1])
        # output stays at the DC image of the frozen d
        assert np.abs(out - 2.0).max() < 1e-4

    def test_residual_dc_values(self, grid_mh, scen_suite, loads_case1):
        # r~ -> P/V without faults; a line fault adds f_I at DC
        faults = mg.FaultSchedule(line=(mg.LineFault(
            line=0, onset=0.002, profile=mg.StepProfile(500.0)),))
        tr = mg.simulate(grid_mh, loads_case1, faults, t_end=0.06, ts=1e-5,
                         h=1e-6, seed=0, noise_scale=0.0,
                         filter_bank=scen_suite.bank)
        from microgrid_fdi.grid import aggregate_fault_current
        fI = aggregate_fault_current(tr, 0, grid_mh.incidence)
        k = 500  # before much fault develops, r~ ~ P/V
        assert tr.rtilde[150, 0] == pytest.approx(100.0 / 48.0, rel=1e-4)
        # late: r~ tracks P/V + f_I (fault time constant L/R = 42 ms)
        expect = tr.P[-1, 0] / tr.x[-1, 0, 0] + fI[-1]
        assert tr.rtilde[-1, 0] == pytest.approx(expect, rel=0.02)

    def test_residual_step_function(self):
        assert residual_step(5.0, 3.0) == 2.0


class TestEstimatorConsistency:
    def test_noise_free_constant_fault_accuracy(self, grid_uh):
        # a step fault on the fast (uH) line settles to a constant fault
        # current within one window, so the pre-detection load estimate stays
        # clean and the fault estimate converges to <1% within 5T of sigma=2
        suite = mg.build_suite(grid_uh, np.array([-0.5, -0.1, -1.0]) * 2e5,
                               ts=1e-5, T=20)
        loads = mg.LoadSchedule.constant([100.0, 110.0, 140.0])
        faults = mg.FaultSchedule(line=(mg.LineFault(
            line=0, onset=0.01, profile=mg.StepProfile(1e6)),))
        trace, diag = mg.run_scenario(suite, loads, faults, t_end=0.05,
                                      h=1e-6, seed=0, noise_scale=0.0,
                                      with_bound=False)
        d = diag.dgs[0]
        T = suite.kits[0].T
        assert d.k_detect > 0
        ks = np.arange(d.k_detect + 5 * T, trace.nsamp)
        rel = np.abs(d.fhat[ks] - diag.fbar_true[ks, 0]) \
            / np.abs(diag.fbar_true[ks, 0])
        assert rel.max() < 0.01


class TestStepVsTrace:
    def test_equivalence(self, grid_mh, scen_suite, loads_case1, faults_case1):
        trace, diag = mg.run_scenario(scen_suite, loads_case1, faults_case1,
                                      t_end=0.1, h=1e-6, seed=4, with_bound=False)
        i = 0
        kit = scen_suite.kits[i]
        state = DiagnosisState(T=kit.T, alpha=3.0, eta=1e6)
        ref = diag.dgs[i]
        for k in range(trace.nsamp):
            sig, phat, fhat = diagnose_step(state, kit, trace.rtilde[k, i],
                                            trace.y[k, i, 0], k)
            assert sig == ref.sigma[k], f"sigma mismatch at k={k}"
            if k >= kit.T:
                if np.isfinite(ref.phat[k]) or np.isfinite(phat):
                    assert phat == pytest.approx(ref.phat[k], rel=1e-9, abs=1e-9)
                if np.isfinite(ref.fhat[k]) or np.isfinite(fhat):
                    assert fhat == pytest.approx(ref.fhat[k], rel=1e-9, abs=1e-9)
        assert state.k_detect == ref.k_detect
