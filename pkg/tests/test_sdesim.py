import math

import numpy as np
import pytest
from scipy import stats as sps

from covsde import coeffs, parallel, sdesim, stats, symmat
from covsde.coeffs import CoeffParams, DriftDiffusion
from covsde.sdesim import SdeConfig

V_RHO = np.array([[1.0, 0.2], [0.2, 1.0]])


class TestConfig:
    def test_grid(self):
        c = SdeConfig(step=0.01, horizon=0.75)
        assert c.n_steps == 75
        t = c.times()
        assert t[0] == 0 and t[-1] == 0.75 and len(t) == 76
        odd = SdeConfig(step=0.4, horizon=1.0)
        np.testing.assert_allclose(odd.times(), [0, 0.4, 0.8, 1.0])

    @pytest.mark.parametrize(
        "kw", [dict(step=0.0), dict(step=2.0, horizon=1.0), dict(eig_lower=1.0, eig_upper=0.5), dict(kind="mlp")]
    )
    def test_validation(self, kw):
        with pytest.raises(ValueError):
            SdeConfig(**kw)


class TestEmStep:
    def test_zero_coefficients(self, rng):
        zero = DriftDiffusion(np.zeros(3), np.zeros((3, 3)))
        np.testing.assert_array_equal(sdesim.em_step(V_RHO, zero, 0.1, rng.normal(size=3)), V_RHO)

    def test_pure_drift(self, rng):
        b = np.array([1.0, -2.0, 0.5])
        out = sdesim.em_step(V_RHO, DriftDiffusion(b, np.zeros((3, 3))), 0.1, rng.normal(size=3))
        np.testing.assert_allclose(symmat.flatten(out), symmat.flatten(V_RHO) + 0.1 * b)

    def test_attention_identity(self):
        dd = coeffs.attention_coeffs(np.eye(2), CoeffParams(gamma=1.0, tau0=1.0))
        out = sdesim.em_step(np.eye(2), dd, 0.01, np.zeros(3))
        np.testing.assert_allclose(out, np.eye(2) * 1.0025, rtol=0, atol=1e-15)

    def test_errors(self):
        dd = DriftDiffusion(np.zeros(3), np.array([[1.0, 2, 0], [2, 1, 0], [0, 0, 1]]))
        with pytest.raises(symmat.IndefiniteMatrixError):
            sdesim.em_step(V_RHO, dd, 0.1, np.zeros(3))
        with pytest.raises(ValueError):
            sdesim.em_step(V_RHO, dd, 0.0, np.zeros(3))


def test_richardson_order_one():
    """Deterministic Euler on the resnet drift converges at order 1."""
    V0 = np.array([[1.0, -0.3], [-0.3, 0.6]])

    def solve(h, T=1.0):
        V = V0
        zero = np.zeros((3, 3))
        for _ in range(round(T / h)):
            V = sdesim.em_step(V, DriftDiffusion(coeffs.b_relu(V, 0.0, -1.0), zero), h, np.zeros(3))
        return symmat.flatten(V)

    a, b, c = solve(0.04), solve(0.02), solve(0.01)
    ratio = np.linalg.norm(a - b) / np.linalg.norm(b - c)
    assert ratio == pytest.approx(2.0, rel=0.1)


class TestSimulate:
    @pytest.mark.parametrize("kind", sdesim.KINDS)
    def test_gamma_zero_exact(self, kind):
        ens = sdesim.simulate_ensemble(SdeConfig(kind=kind), CoeffParams(gamma=0.0), V_RHO, 50, seed=1, record=True)
        assert np.all(ens.terminal == symmat.flatten(V_RHO))
        assert np.all(ens.paths == symmat.flatten(V_RHO))
        assert not ens.stopped.any()
        traj = sdesim.simulate_sde(SdeConfig(kind=kind), CoeffParams(gamma=0.0), V_RHO, seed=1)
        assert np.all(traj.states[-1] == symmat.flatten(V_RHO))
        assert sdesim.stopping_time(traj) == 0.75

    def test_trajectory_fields(self):
        traj = sdesim.simulate_sde(SdeConfig(horizon=0.5), CoeffParams(gamma=0.5), V_RHO, seed=2)
        assert traj.states.shape == (51, 3)
        assert len(traj.max_eig) == len(traj.times) == 51
        assert np.all(traj.max_eig >= traj.min_eig)
        assert 0 < traj.t_stop <= 0.5

    def test_immediate_stop(self):
        c = SdeConfig(eig_lower=0.99999, eig_upper=1.00001, horizon=0.5)
        ens = sdesim.simulate_ensemble(c, CoeffParams(), np.eye(2), 64, seed=0)
        assert ens.stopped.all()
        np.testing.assert_array_equal(ens.t_stop, 0.01)

    def test_stopped_samples_freeze(self):
        c = SdeConfig(eig_upper=1.5, horizon=1.0)
        ens = sdesim.simulate_ensemble(c, CoeffParams(gamma=1.0), np.eye(2), 200, seed=3, record=True)
        assert ens.stopped.any()
        times = c.times()
        for i in np.flatnonzero(ens.stopped)[:20]:
            k = int(np.searchsorted(times, ens.t_stop[i] - 1e-12))
            assert np.all(ens.paths[i, k:] == ens.paths[i, k])
        # t_stop agrees with the first exit read off the stored paths
        np.testing.assert_allclose(sdesim.first_exit_times(ens.paths, times, 1e-4, 1.5), ens.t_stop)

    def test_deterministic_across_workers(self):
        c = SdeConfig(kind="transformer")
        p = CoeffParams(gamma=0.5)
        a = sdesim.simulate_ensemble(c, p, V_RHO, 1100, seed=4, workers=1)
        b = sdesim.simulate_ensemble(c, p, V_RHO, 1100, seed=4, workers=2)
        assert a.terminal.tobytes() == b.terminal.tobytes()
        assert a.t_stop.tobytes() == b.t_stop.tobytes()

    def test_states_symmetric_and_finite(self):
        traj = sdesim.simulate_sde(SdeConfig(kind="transformer"), CoeffParams(gamma=0.7), V_RHO, seed=5)
        assert np.all(np.isfinite(traj.states))
        V = symmat.unflatten(traj.states)
        np.testing.assert_array_equal(V, np.swapaxes(V, -1, -2))

    def test_time_change_small(self):
        # resnet SDE: (gamma, T) and (1, gamma^2 T) have the same law
        p = CoeffParams(gamma=0.5)
        a = sdesim.simulate_ensemble(SdeConfig(kind="resnet", horizon=1.0), p, V_RHO, 2048, seed=6)
        b = sdesim.simulate_ensemble(SdeConfig(kind="resnet", horizon=0.25), CoeffParams(gamma=1.0), V_RHO, 2048, seed=7)
        ra, rb = stats.terminal_correlations(a.terminal), stats.terminal_correlations(b.terminal)
        assert sps.ks_2samp(ra, rb).pvalue > 1e-3


class TestFirstExit:
    def test_cases(self):
        times = np.array([0.0, 0.1, 0.2, 0.3])
        inside = symmat.flatten(np.eye(2))
        big = symmat.flatten(2e4 * np.eye(2))
        tiny = symmat.flatten(np.diag([1.0, 1e-6]))
        states = np.array(
            [
                [inside] * 4,
                [inside, big, big, big],
                [inside, inside, tiny, inside],
                [inside, inside, inside, np.full(3, np.nan)],
                [big, inside, inside, inside],  # the initial state never counts
            ]
        )
        t = sdesim.first_exit_times(states, times)
        np.testing.assert_array_equal(t, [0.3, 0.1, 0.2, 0.3, 0.3])
        np.testing.assert_array_equal(sdesim.first_exit_times(states, times, cap=0.15), [0.15, 0.1, 0.15, 0.15, 0.15])


class TestOutput:
    def test_identity(self):
        X = sdesim.sample_output(np.eye(3), 4, 25_000, seed=0)
        assert X.shape == (25_000, 3, 4)
        self._check_cov(X, np.eye(3))

    def test_generic(self):
        V = np.array([[1.0, 0.3, -0.2], [0.3, 0.8, 0.1], [-0.2, 0.1, 1.2]])
        self._check_cov(sdesim.sample_output(V, 2, 50_000, seed=1), V)

    def test_rank_one(self):
        X = sdesim.sample_output(np.ones((2, 2)), 3, 100, seed=2)
        np.testing.assert_allclose(X[:, 0], X[:, 1], atol=1e-7)

    def test_indefinite(self):
        with pytest.raises(symmat.IndefiniteMatrixError):
            sdesim.sample_output(np.array([[1.0, 2.0], [2.0, 1.0]]), 1, 1)

    @staticmethod
    def _check_cov(X, V):
        cols = np.moveaxis(X, -1, 1).reshape(-1, V.shape[0])
        prod = cols[:, :, None] * cols[:, None, :]
        se = prod.std(axis=0, ddof=1) / math.sqrt(len(cols))
        assert np.all(np.abs(prod.mean(axis=0) - V) <= 4 * se)


def test_block_rng_streams_differ():
    a = parallel.block_rng(0, 0, parallel.STREAM_NET).standard_normal(4)
    b = parallel.block_rng(0, 0, parallel.STREAM_SDE).standard_normal(4)
    c = parallel.block_rng(0, 1, parallel.STREAM_NET).standard_normal(4)
    assert not np.array_equal(a, b) and not np.array_equal(a, c)
    assert parallel.block_sizes(1100) == [512, 512, 76]


def test_worker_count_env(monkeypatch):
    monkeypatch.setenv("COVSDE_THREADS", "3")
    assert parallel.worker_count() == 3
    monkeypatch.setenv("COVSDE_THREADS", "x")
    with pytest.raises(ValueError):
        parallel.worker_count()
