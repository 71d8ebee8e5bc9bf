import math
import os
import unittest
from pathlib import Path

import numpy as np
from pydantic import ValidationError

# Add project root to path
import sys
sys.path.append(str(Path(__file__).parent.parent))

from core.dynamics import (EnsembleStats, LocalTimeGrid, NoiseStream, SimConfig, TracerState,
                           build_batch, environment_probe, log_output_times, run_batch, run_ensemble,
                           simulate, srbp_drift, step_dcgf, step_srbp, trajectory_seeds)
from core.env_sampler import GaussianMollifier, TracerModel, zero_field
from core.errors import ConfigurationError, InstabilityError
from core.scaling import MsdSeries, fit_exponents, laplace_msd, superdiffusive_trend

SLOW = os.getenv("SUPERDIFF_SLOW") == "1"


def small_config(model: TracerModel, **overrides) -> SimConfig:
    values = dict(model=model, dt=0.01, t_max=1.0, box=32.0, grid=64, seed=3, ensemble_size=4,
                  batch_size=4, noise_block=64, output_times=(0.5, 1.0))
    values.update(overrides)
    return SimConfig(**values)


class TestSimConfig(unittest.TestCase):
    """Run configuration validation"""

    def test_defaults_and_steps(self):
        config = small_config(TracerModel.DCGF)
        self.assertEqual(config.n_steps, 100)
        self.assertEqual(config.output_steps.tolist(), [50, 100])
        self.assertEqual(SimConfig(model="dcgf", t_max=2.0).times, (2.0,))

    def test_invalid_values(self):
        with self.assertRaises(ValidationError):
            small_config(TracerModel.DCGF, dt=0.5)
        with self.assertRaises(ValidationError):
            small_config(TracerModel.DCGF, output_times=(0.5, 2.0))
        with self.assertRaises(ValidationError):
            small_config(TracerModel.DCGF, t_max=0.001)

    def test_output_times_are_sorted(self):
        self.assertEqual(small_config(TracerModel.DCGF, output_times=(1.0, 0.25)).times, (0.25, 1.0))

    def test_log_output_times(self):
        times = log_output_times(0.01, 100.0, 20)
        self.assertEqual(times[-1], 100.0)
        self.assertTrue(all(b > a for a, b in zip(times, times[1:])))
        steps = np.asarray(times) / 0.01
        np.testing.assert_allclose(steps, np.rint(steps), atol=1e-9)
        SimConfig(model="dcgf", dt=0.01, t_max=100.0, output_times=times)


class TestSeeding(unittest.TestCase):
    """Per-trajectory seed derivation and noise streams"""

    def test_trajectory_seeds_are_deterministic_and_distinct(self):
        env_a, noise_a = trajectory_seeds(5, 0)
        env_b, noise_b = trajectory_seeds(5, 0)
        env_c, _ = trajectory_seeds(5, 1)
        env_d, _ = trajectory_seeds(6, 0)
        self.assertEqual(env_a, env_b)
        self.assertEqual(noise_a.generate_state(4).tolist(), noise_b.generate_state(4).tolist())
        self.assertEqual(len({env_a, env_c, env_d}), 3)

    def test_noise_does_not_depend_on_block_size(self):
        seqs = [trajectory_seeds(1, i)[1] for i in range(3)]
        small = NoiseStream(seqs, block=3)
        seqs = [trajectory_seeds(1, i)[1] for i in range(3)]
        large = NoiseStream(seqs, block=512)
        for _ in range(10):
            np.testing.assert_array_equal(small.next(), large.next())

    def test_substeps_keep_unit_variance(self):
        seqs = [trajectory_seeds(2, i)[1] for i in range(200)]
        noise = NoiseStream(seqs, substeps=4, block=50)
        draws = np.stack([noise.next() for _ in range(50)])
        self.assertEqual(draws.shape, (50, 200, 2))
        self.assertAlmostEqual(float(draws.var()), 1.0, delta=0.05)


class TestLocalTime(unittest.TestCase):
    """Occupation-time grid and its drift"""

    def test_deposits_conserve_mass(self):
        grid = LocalTimeGrid(32.0, 64, batch=3)
        rng = np.random.default_rng(0)
        for _ in range(500):
            grid.deposit(rng.uniform(-50, 50, size=(3, 2)), 0.01)
        np.testing.assert_allclose(grid.total(), 5.0, rtol=1e-12)
        np.testing.assert_allclose(grid.deposited_mass, 5.0, rtol=1e-12)

    def test_spectral_force_matches_kernel_gradient(self):
        """A unit mass at the origin pushes with -grad V"""
        mollifier = GaussianMollifier()
        grid = LocalTimeGrid(32.0, 128, mollifier, batch=1, refresh_every=1)
        grid.deposit(np.zeros((1, 2)), 1.0)
        grid.refresh()
        x = np.array([[1.0, 0.0]])
        expected = -np.array(mollifier.grad_v(1.0, 0.0))
        np.testing.assert_allclose(grid.force(x)[0], expected, atol=1e-6)

    def test_pending_deposits_enter_analytically(self):
        mollifier = GaussianMollifier()
        grid = LocalTimeGrid(32.0, 128, mollifier, batch=1, refresh_every=10)
        grid.deposit(np.zeros((1, 2)), 1.0)
        self.assertTrue(grid.dirty)
        x = np.array([[0.7, -0.3]])
        expected = -np.array(mollifier.grad_v(0.7, -0.3))
        np.testing.assert_allclose(grid.force(x)[0], expected, atol=1e-12)

    def test_minimal_image(self):
        mollifier = GaussianMollifier()
        grid = LocalTimeGrid(32.0, 128, mollifier, batch=1, refresh_every=10)
        grid.deposit(np.zeros((1, 2)), 1.0)
        near = grid.force(np.array([[0.5, 0.0]]))
        wrapped = grid.force(np.array([[32.5, -32.0]]))
        np.testing.assert_allclose(near, wrapped, atol=1e-12)

    def test_local_time_conservation_along_path(self):
        config = small_config(TracerModel.SRBP, t_max=20.0, output_times=(), ensemble_size=2, batch_size=2)
        trajectories = run_batch(config, [0, 1])
        for trajectory in trajectories:
            self.assertAlmostEqual(trajectory.local_time.sum() / 20.0, 1.0, places=9)
            self.assertAlmostEqual(trajectory.deposited_mass, 20.0, places=9)

    @unittest.skipUnless(SLOW, "set SUPERDIFF_SLOW=1 for Monte Carlo acceptance runs")
    def test_local_time_conservation_million_steps(self):
        config = SimConfig(model=TracerModel.SRBP, dt=0.01, t_max=10000.0, box=64.0, grid=128, seed=1,
                           ensemble_size=1, batch_size=1)
        trajectory = simulate(config)
        self.assertEqual(config.n_steps, 1000000)
        self.assertLess(abs(trajectory.local_time.sum() - 10000.0) / 10000.0, 1e-9)


class TestSteps(unittest.TestCase):
    """Single Euler-Maruyama steps"""

    def setUp(self):
        """Set up test fixtures"""
        self.dt = 0.01

    def _state(self, model: TracerModel, batch: int = 2) -> TracerState:
        samples = [zero_field(model.environment, 32.0, 64) for _ in range(batch)]
        return TracerState.from_samples(model, samples)

    def test_dcgf_step_is_pure_noise_without_field(self):
        state = self._state(TracerModel.DCGF)
        noise = np.array([[0.5, -1.0], [2.0, 0.1]])
        step_dcgf(state, self.dt, noise)
        np.testing.assert_allclose(state.positions, math.sqrt(2 * self.dt) * noise)
        self.assertEqual(state.steps, 1)

    def test_srbp_deposits_at_pre_step_position(self):
        state = self._state(TracerModel.SRBP, batch=1)
        state.positions = np.array([[1.0, 2.0]])
        step_srbp(state, self.dt, np.array([[0.3, 0.3]]))
        spacing = 32.0 / 64
        self.assertAlmostEqual(state.local_time.values[0, int(1.0 / spacing), int(2.0 / spacing)], self.dt)

    def test_aniso_second_coordinate_is_brownian(self):
        state = self._state(TracerModel.SRBP_ANISO, batch=1)
        state.local_time.deposit(np.array([[0.3, 0.2]]), 5.0)
        noise = np.array([[0.4, -0.7]])
        step_srbp(state, self.dt, noise)
        self.assertEqual(state.positions[0, 1], math.sqrt(2 * self.dt) * -0.7)
        self.assertNotEqual(state.positions[0, 0], math.sqrt(2 * self.dt) * 0.4)

    def test_repulsion_pushes_away_from_occupied_region(self):
        state = self._state(TracerModel.SRBP, batch=1)
        state.local_time.deposit(np.zeros((1, 2)), 1.0)
        state.positions = np.array([[1.0, 0.0]])
        drift = srbp_drift(state)
        self.assertGreater(drift[0, 0], 0.0)
        self.assertAlmostEqual(drift[0, 1], 0.0, places=12)

    def test_instability_guard(self):
        state = self._state(TracerModel.DCGF, batch=3)
        state.environment = np.full_like(state.environment, 1e4)
        state.first_index = 7
        with self.assertRaises(InstabilityError) as caught:
            step_dcgf(state, self.dt, np.zeros((3, 2)))
        self.assertEqual(caught.exception.trajectory, 7)
        self.assertEqual(caught.exception.code, 3)

    def test_environment_probe(self):
        config = small_config(TracerModel.DCGF)
        state, _ = build_batch(config, [0, 1])
        state.positions = np.array([[0.3, 0.4], [5.0, -2.0]])
        probe = environment_probe(state, [[0.0, 0.0], [1.0, 0.5]])
        self.assertEqual(probe.shape, (2, 2, 2))
        np.testing.assert_allclose(probe[:, 0], state.field_at())
        np.testing.assert_allclose(probe[:, 1], state.field_at(state.positions + [1.0, 0.5]))


class TestEnsemble(unittest.TestCase):
    """Trajectory batches and ensemble statistics"""

    def test_statistics_from_positions(self):
        positions = np.array([[[1.0, 0.0]], [[0.0, 2.0]], [[1.0, 1.0]]])
        stats = EnsembleStats.from_positions([1.0], positions)
        self.assertAlmostEqual(stats.E1[0], 2.0 / 3.0)
        self.assertAlmostEqual(stats.E2[0], 5.0 / 3.0)
        self.assertAlmostEqual(stats.E[0], 7.0 / 3.0)
        self.assertAlmostEqual(stats.stderr[0], np.std([1.0, 4.0, 2.0], ddof=1) / math.sqrt(3))

    def test_same_seed_same_ensemble(self):
        config = small_config(TracerModel.SRBP)
        first = run_ensemble(config, workers=1)
        second = run_ensemble(config, workers=1)
        self.assertEqual(first.E, second.E)
        self.assertEqual(first.stderr, second.stderr)

    def test_trajectory_independent_of_batching(self):
        config = small_config(TracerModel.DCGF)
        together = run_batch(config, [0, 1, 2, 3])
        alone = run_batch(config, [2])
        np.testing.assert_allclose(together[2].positions, alone[0].positions, rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(simulate(config, 2).positions, alone[0].positions, rtol=0, atol=0)

    def test_ensemble_needs_two_members(self):
        with self.assertRaises(ConfigurationError):
            run_ensemble(small_config(TracerModel.DCGF, ensemble_size=1))

    def test_wrap_warnings_are_counted(self):
        config = SimConfig(model=TracerModel.DCGF, dt=0.1, t_max=30.0, box=16.0, grid=32, seed=2,
                           ensemble_size=20, batch_size=20, environment_off=True)
        stats = run_ensemble(config, workers=1)
        self.assertGreater(stats.wrap_warnings, 0)

    def test_max_distance_is_euclidean(self):
        config = small_config(TracerModel.DCGF, dt=0.1, environment_off=True,
                              output_times=tuple(0.1 * k for k in range(1, 11)))
        for trajectory in run_batch(config, [0, 1, 2, 3]):
            distance = np.hypot(trajectory.positions[:, 0], trajectory.positions[:, 1])
            self.assertAlmostEqual(trajectory.max_abs, float(distance.max()), places=12)

    def test_brownian_reduction(self):
        """Forces off: E(t) = 4t within 4 standard errors"""
        for model in TracerModel:
            config = SimConfig(model=model, dt=0.01, t_max=1.0, box=32.0, grid=32, seed=17,
                               ensemble_size=2000, batch_size=500, output_times=(0.1, 1.0),
                               environment_off=True, repulsion_off=True)
            stats = run_ensemble(config, workers=1)
            for t, e, se in zip(stats.times, stats.E, stats.stderr):
                self.assertLess(abs(e - 4.0 * t), 4.0 * se, msg=f"{model.value} t={t}")

    @unittest.skipUnless(SLOW, "set SUPERDIFF_SLOW=1 for Monte Carlo acceptance runs")
    def test_brownian_reduction_acceptance(self):
        for model in TracerModel:
            config = SimConfig(model=model, dt=0.01, t_max=100.0, box=256.0, grid=64, seed=23,
                               ensemble_size=10000, batch_size=1000, output_times=(1.0, 10.0, 100.0),
                               environment_off=True, repulsion_off=True)
            stats = run_ensemble(config)
            for t, e, se in zip(stats.times, stats.E, stats.stderr):
                self.assertLess(abs(e - 4.0 * t), 3.0 * se, msg=f"{model.value} t={t}")

    @unittest.skipUnless(SLOW, "set SUPERDIFF_SLOW=1 for Monte Carlo acceptance runs")
    def test_dcgf_is_superdiffusive(self):
        """E(t)/t grows between t = 10 and t = 1000 and the log exponent is positive"""
        config = SimConfig(model=TracerModel.DCGF, dt=0.05, t_max=1000.0, box=256.0, grid=512, seed=7,
                           ensemble_size=2000, batch_size=100, output_times=log_output_times(0.05, 1000.0, 30))
        series = MsdSeries.from_stats(run_ensemble(config))
        trend = superdiffusive_trend(series, 10.0, 1000.0)
        self.assertTrue(trend.significant, msg=f"z={trend.z:.2f}")
        self.assertTrue(fit_exponents(series).significantly_positive())
        estimate = laplace_msd(series, 0.01)
        self.assertGreater(estimate.value * 0.01 ** 2, 4.0)

    @unittest.skipUnless(SLOW, "set SUPERDIFF_SLOW=1 for Monte Carlo acceptance runs")
    def test_environment_seen_from_particle_has_zero_mean(self):
        config = SimConfig(model=TracerModel.DCGF, dt=0.01, t_max=10.0, box=64.0, grid=128, seed=5,
                           ensemble_size=400, batch_size=400)
        state, noise = build_batch(config, list(range(config.ensemble_size)))
        for step in range(config.n_steps):
            step_dcgf(state, config.dt, noise.next(config.n_steps - step))
        drift = state.field_at()
        stderr = drift.std(axis=0, ddof=1) / math.sqrt(len(drift))
        self.assertTrue(np.all(np.abs(drift.mean(axis=0)) < 4.0 * stderr))

    @unittest.skipUnless(SLOW, "set SUPERDIFF_SLOW=1 for Monte Carlo acceptance runs")
    def test_self_convergence_in_dt(self):
        """Coupled runs at dt and dt/4 share their Brownian path and stay close"""
        coarse = SimConfig(model=TracerModel.DCGF, dt=0.04, t_max=4.0, box=32.0, grid=128, seed=9,
                           ensemble_size=2, noise_substeps=4)
        fine = coarse.model_copy(update={"dt": 0.01, "noise_substeps": 1})
        a = run_batch(coarse, [0])[0].positions[-1]
        b = run_batch(fine, [0])[0].positions[-1]
        self.assertLess(float(np.hypot(*(a - b))), 0.5)

    @unittest.skipUnless(SLOW, "set SUPERDIFF_SLOW=1 for Monte Carlo acceptance runs")
    def test_dcgf_environment_is_stationary(self):
        """Second moments of eta(t, x) at three displacements match t = 0 for t in {1, 5}"""
        config = SimConfig(model=TracerModel.DCGF, dt=0.01, t_max=5.0, box=32.0, grid=64, seed=31,
                           ensemble_size=1000, batch_size=1000)
        displacements = [[0.0, 0.0], [1.0, 0.0], [0.5, -1.5]]
        state, noise = build_batch(config, list(range(config.ensemble_size)))
        initial = environment_probe(state, displacements)
        checkpoints = {int(round(1.0 / config.dt)): 1.0, config.n_steps: 5.0}
        for step in range(1, config.n_steps + 1):
            step_dcgf(state, config.dt, noise.next(config.n_steps - step + 1))
            if step not in checkpoints:
                continue
            current = environment_probe(state, displacements)
            for k, l in ((0, 0), (0, 1), (1, 1)):
                diff = current[..., k] * current[..., l] - initial[..., k] * initial[..., l]
                stderr = diff.std(axis=0, ddof=1) / math.sqrt(len(diff))
                self.assertTrue(np.all(np.abs(diff.mean(axis=0)) < 4.0 * stderr),
                                msg=f"t={checkpoints[step]} component=({k}, {l})")

    @unittest.skipUnless(SLOW, "set SUPERDIFF_SLOW=1 for Monte Carlo acceptance runs")
    def test_srbp_self_convergence_in_dt(self):
        """Coupled SRBP ensembles at dt, dt/2 and dt/4 share their Brownian paths"""
        base = dict(model=TracerModel.SRBP, t_max=2.0, box=32.0, grid=64, seed=13, ensemble_size=200,
                    batch_size=200, output_times=(1.0, 2.0))
        ends = {}
        for substeps, dt in ((1, 0.005), (2, 0.01), (4, 0.02)):
            config = SimConfig(dt=dt, noise_substeps=substeps, **base)
            trajectories = run_batch(config, list(range(config.ensemble_size)), keep_local_time=False)
            ends[substeps] = np.array([t.positions[-1] for t in trajectories])

        def rms_gap(substeps: int) -> float:
            return float(np.sqrt(np.mean(np.sum((ends[substeps] - ends[1]) ** 2, axis=1))))

        self.assertLess(rms_gap(2), rms_gap(4))
        e_fine = float(np.mean(np.sum(ends[1] ** 2, axis=1)))
        e_half = float(np.mean(np.sum(ends[2] ** 2, axis=1)))
        self.assertLess(abs(e_half - e_fine) / e_fine, 0.05)


if __name__ == "__main__":
    unittest.main()
