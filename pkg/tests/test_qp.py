import numpy as np
import pytest

from combinecast.discount import make_schedule
from combinecast.errors import ContractError, ConvergenceError
from combinecast.panel import SynthConfig, WindowView, synthesize_panel, to_log, window_view
from combinecast.qp import QuadraticProgram, build_qp, predict, repair_pd, solve_qp


def complete_window(y, X):
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float)
    L, m = X.shape
    return WindowView(
        start=0, end=L - 1, target=L,
        y=y, X=X, mask=np.ones((L, m), dtype=bool),
        analyst_ids=tuple(f"a{j}" for j in range(m)),
        x_target=np.zeros(m),
        consensus=X.mean(axis=1), consensus_target=0.0,
    )


def synth_window(seed, L, sigmas, biases=None, phi=0.0):
    m = len(sigmas)
    cfg = SynthConfig(
        n_quarters=L + 1, n_analysts=m,
        biases=biases or tuple(0.0 for _ in sigmas), sigmas=tuple(sigmas),
        phi=phi, growth=0.0, base_level=1.0, sigma_actual=0.5,
    )
    panel = to_log(synthesize_panel(cfg, seed))
    return window_view(panel, anchor=L - 1, L=L, columns=list(range(m)))


class TestBuildQp:
    def test_uniform_weights_give_gram_over_L(self):
        w = synth_window(0, L=6, sigmas=(0.1, 0.2))
        qp = build_qp(w, make_schedule(0.0, 6))
        X = np.column_stack([np.ones(6), w.X])
        np.testing.assert_allclose(qp.D, X.T @ X / 6.0, atol=1e-12)
        np.testing.assert_allclose(qp.c, X.T @ w.y / 6.0, atol=1e-12)

    def test_hand_computed_small_instance(self):
        y = [1.0, 2.0, 3.0]
        X = [[0.5], [1.5], [2.5]]
        qp = build_qp(complete_window(y, X), make_schedule(0.0, 3))
        np.testing.assert_allclose(qp.D, [[1.0, 1.5], [1.5, 8.75 / 3]], atol=1e-12)
        np.testing.assert_allclose(qp.c, [2.0, 11.0 / 3], atol=1e-12)
        assert qp.constant == pytest.approx(14.0 / 3)

    def test_discounted_moments_match_explicit_loop(self):
        w = synth_window(3, L=12, sigmas=(0.1, 0.3))
        sched = make_schedule(1.0, 12)
        qp = build_qp(w, sched)
        rows = np.column_stack([np.ones(12), w.X])
        D = sum(p * np.outer(r, r) for p, r in zip(sched.weights, rows))
        c = sum(p * r * yt for p, r, yt in zip(sched.weights, rows, w.y))
        np.testing.assert_allclose(qp.D, D, atol=1e-10)
        np.testing.assert_allclose(qp.c, c, atol=1e-10)
        # the newest row carries weight 0.63212, by far the largest share
        assert sched.weights[-1] == pytest.approx(0.63212, abs=5e-6)

    def test_rejects_mismatched_schedule_or_missing_values(self):
        w = synth_window(1, L=6, sigmas=(0.1, 0.2))
        with pytest.raises(ContractError):
            build_qp(w, make_schedule(0.0, 7))
        holed = w.X.copy()
        holed[2, 0] = np.nan
        from dataclasses import replace
        w2 = replace(w, X=holed, mask=~np.isnan(holed))
        with pytest.raises(ContractError):
            build_qp(w2, make_schedule(0.0, 6))


class TestRepairPd:
    def test_identity_unchanged(self):
        I = np.eye(3)
        assert repair_pd(I) is I

    def test_zero_eigenvalue_clipped(self):
        D = np.diag([1.0, 0.0])
        out = repair_pd(D)
        np.testing.assert_allclose(out, np.diag([1.0, 1e-8]), atol=1e-15)

    def test_duplicate_columns_become_solvable(self):
        w = synth_window(5, L=10, sigmas=(0.1,))
        X = np.column_stack([w.X[:, 0], w.X[:, 0]])
        dup = complete_window(w.y, X)
        qp = build_qp(dup, make_schedule(0.0, 10))
        vals = np.linalg.eigvalsh(qp.D)
        # floor up to eigendecomposition reconstruction noise
        assert vals[0] >= 1e-8 * vals[-1] - 1e-13 * vals[-1]
        sol = solve_qp(qp)
        assert sol.converged

    def test_non_symmetric_rejected(self):
        with pytest.raises(ContractError):
            repair_pd(np.array([[1.0, 2.0], [0.0, 1.0]]))


def kkt_residuals(qp, sol):
    x = qp.point(sol.omega0, sol.omega)
    g = qp.D @ x - qp.c
    coords = qp.weight_coords()
    scale = max(1.0, np.abs(qp.c).max())
    free = sol.omega > 1e-9
    mu = g[coords[free]].mean()
    stationarity = np.abs(g[coords[free]] - mu).max() if free.any() else 0.0
    if qp.has_intercept:
        stationarity = max(stationarity, abs(g[0]))
    dual_feas = max(0.0, (mu - g[coords[~free]]).max()) if (~free).any() else 0.0
    return stationarity / scale, dual_feas / scale


class TestSolveQp:
    def test_inverse_variance_weights_recovered(self):
        for seed in range(5):
            w = synth_window(seed, L=2000, sigmas=(1.0, 2.0))
            qp = build_qp(w, make_schedule(0.0, 2000), intercept=False)
            sol = solve_qp(qp)
            np.testing.assert_allclose(sol.omega, [0.8, 0.2], atol=0.05)

    def test_inverse_variance_three_analysts(self):
        for seed in range(5):
            w = synth_window(100 + seed, L=2000, sigmas=(1.0, np.sqrt(2.0), 2.0))
            qp = build_qp(w, make_schedule(0.0, 2000), intercept=False)
            sol = solve_qp(qp)
            np.testing.assert_allclose(sol.omega, [4 / 7, 2 / 7, 1 / 7], atol=0.05)

    def test_identical_columns_match_single_analyst_objective(self):
        w1 = synth_window(9, L=10, sigmas=(0.2,))
        dup = complete_window(w1.y, np.column_stack([w1.X[:, 0]] * 2))
        sched = make_schedule(0.3, 10)
        obj2 = solve_qp(build_qp(dup, sched)).objective
        obj1 = solve_qp(build_qp(w1, sched)).objective
        assert obj2 == pytest.approx(obj1, abs=1e-8)

    def test_grid_oracle_dominance_m2(self):
        rng = np.random.default_rng(11)
        grid = np.linspace(0.0, 1.0, 1001)
        for trial in range(20):
            L = int(rng.integers(4, 13))
            y = rng.normal(0, 1, L)
            X = rng.normal(0, 1, (L, 2))
            lam = float(rng.choice([0.0, 0.25, 0.5, 1.0]))
            sched = make_schedule(lam, L)
            qp = build_qp(complete_window(y, X), sched)
            sol = solve_qp(qp)
            p = sched.weights
            best = np.inf
            for w1 in grid:
                om = np.array([w1, 1.0 - w1])
                resid = y - X @ om
                w0 = p @ resid
                best = min(best, p @ (resid - w0) ** 2)
            assert sol.objective <= best + 1e-6

    def test_kkt_conditions(self):
        rng = np.random.default_rng(23)
        for trial in range(30):
            L = int(rng.integers(5, 20))
            m = int(rng.integers(1, 6))
            y = rng.normal(0, 1, L)
            X = rng.normal(0, 1, (L, m))
            qp = build_qp(complete_window(y, X), make_schedule(0.25, L))
            sol = solve_qp(qp)
            assert sol.converged
            stat, dual = kkt_residuals(qp, sol)
            assert stat <= 1e-6
            assert dual <= 1e-6
            assert np.all(sol.omega >= 0)
            assert sol.omega.sum() == pytest.approx(1.0, abs=1e-8)

    def test_row_permutation_with_matching_schedule(self):
        w = synth_window(13, L=8, sigmas=(0.1, 0.4))
        sched = make_schedule(0.5, 8)
        qp = build_qp(w, sched)
        sol = solve_qp(qp)
        perm = np.random.default_rng(0).permutation(8)
        Xp, yp = w.X[perm], w.y[perm]
        Dp = sum(
            p * np.outer(r, r)
            for p, r in zip(sched.weights[perm], np.column_stack([np.ones(8), Xp]))
        )
        cp = sum(
            p * np.append(1.0, x) * yt
            for p, x, yt in zip(sched.weights[perm], Xp, yp)
        )
        np.testing.assert_allclose(Dp, qp.D, atol=1e-12)
        np.testing.assert_allclose(cp, qp.c, atol=1e-12)
        sol_p = solve_qp(QuadraticProgram(
            D=0.5 * (Dp + Dp.T), c=cp, m=2, has_intercept=True,
            constant=qp.constant, lam=qp.lam,
        ))
        np.testing.assert_allclose(sol_p.omega, sol.omega, atol=1e-9)
        assert sol_p.omega0 == pytest.approx(sol.omega0, abs=1e-9)

    def test_constant_columns_reproduce_discounted_mean(self):
        # rank-deficient by construction; the PD-repair ridge perturbs the
        # fitted mean by O(pd_floor * lambda_max), so keep the data O(1)
        L = 10
        sched = make_schedule(0.0, L)
        rng = np.random.default_rng(4)
        y = rng.normal(0.3, 0.05, L)
        X = np.tile([0.2, 0.3], (L, 1))
        qp = build_qp(complete_window(y, X), sched)
        sol = solve_qp(qp)
        fitted = sol.omega0 + sol.omega @ np.array([0.2, 0.3])
        assert fitted == pytest.approx(float(sched.weights @ y), abs=1e-8)

    def test_never_worse_than_equal_weights(self):
        rng = np.random.default_rng(31)
        for trial in range(25):
            L = int(rng.integers(4, 16))
            m = int(rng.integers(1, 5))
            y = rng.normal(0, 1, L)
            X = rng.normal(0, 1, (L, m))
            qp = build_qp(complete_window(y, X), make_schedule(0.5, L))
            sol = solve_qp(qp)
            eq = qp.loss_at(qp.point(0.0, np.full(m, 1.0 / m)))
            assert sol.objective <= eq + 1e-10

    def test_iteration_cap_raises_with_best_iterate(self):
        qp = QuadraticProgram(
            D=np.diag([1.0, 100.0]), c=np.array([2.0, 0.0]),
            m=2, has_intercept=False, constant=0.0, lam=0.0,
        )
        sol = solve_qp(qp)
        np.testing.assert_allclose(sol.omega, [1.0, 0.0], atol=1e-10)
        with pytest.raises(ConvergenceError) as err:
            solve_qp(qp, max_iter=0)
        best = err.value.best
        assert not best.converged
        assert best.omega.sum() == pytest.approx(1.0, abs=1e-8)


class TestPredict:
    def setup_method(self):
        self.w = synth_window(17, L=6, sigmas=(0.1, 0.2))
        from dataclasses import replace
        self.w = replace(self.w, x_target=np.array([1.5, 2.5]))

    def make_sol(self, omega0, omega):
        from combinecast.qp import WeightSolution
        return WeightSolution(
            omega0=omega0, omega=np.asarray(omega, dtype=float), lam=0.0,
            objective=0.0, iterations=0, converged=True, active_set=(),
        )

    def test_equal_weights_give_eligible_consensus(self):
        sol = self.make_sol(0.0, [0.5, 0.5])
        assert predict(self.w, sol) == pytest.approx(2.0)

    def test_one_hot_selects_single_analyst(self):
        sol = self.make_sol(0.0, [1.0, 0.0])
        assert predict(self.w, sol) == pytest.approx(1.5)

    def test_intercept_shifts_linearly(self):
        base = predict(self.w, self.make_sol(0.0, [0.5, 0.5]))
        shifted = predict(self.w, self.make_sol(0.1, [0.5, 0.5]))
        assert shifted - base == pytest.approx(0.1)

    def test_dimension_mismatch(self):
        with pytest.raises(ContractError):
            predict(self.w, self.make_sol(0.0, [1.0]))
