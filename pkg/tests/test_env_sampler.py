import os
import unittest
import tempfile
from pathlib import Path

import numpy as np
import pandas as pd
from pydantic import ValidationError
from scipy import integrate

# Add project root to path
import sys
sys.path.append(str(Path(__file__).parent.parent))

from core.env_sampler import (CovarianceSpec, EnvironmentModel, FlatMollifier, GaussianMollifier,
                              TracerModel, evaluate_field, node_positions, read_field_binary,
                              real_space_covariance, retained_mask, sample_field, spectral_covariance,
                              spectral_divergence, spectral_rotation, torus_covariance,
                              write_field_binary, write_field_csv, zero_field)
from core.errors import ConfigurationError, DomainError

SLOW = os.getenv("SUPERDIFF_SLOW") == "1"


class TestMollifier(unittest.TestCase):
    """Mollifier kernels in both representations"""

    def test_gaussian_spectral_density(self):
        mollifier = GaussianMollifier(sigma=1.0)
        self.assertAlmostEqual(float(mollifier.v_hat(0.0)), 1.0)
        self.assertAlmostEqual(float(mollifier.v_hat(2.0)), np.exp(-2.0), places=14)
        self.assertAlmostEqual(float(mollifier.u_hat(2.0)) ** 2, float(mollifier.v_hat(2.0)), places=14)
        self.assertLess(float(mollifier.v_hat(8.0)), 1e-13)

    def test_gaussian_real_space_mass(self):
        """V integrates to V_hat(0) = 1 over the plane"""
        mollifier = GaussianMollifier(sigma=1.5)
        r = np.linspace(0.0, 20.0, 20001)
        mass = integrate.trapezoid(2.0 * np.pi * r * mollifier.v(r), r)
        self.assertAlmostEqual(mass, 1.0, places=6)

    def test_grad_v_matches_finite_difference(self):
        mollifier = GaussianMollifier(sigma=1.0)
        y1, y2, step = 0.7, -0.4, 1e-6
        g1, g2 = mollifier.grad_v(y1, y2)
        fd1 = (mollifier.v(np.hypot(y1 + step, y2)) - mollifier.v(np.hypot(y1 - step, y2))) / (2 * step)
        fd2 = (mollifier.v(np.hypot(y1, y2 + step)) - mollifier.v(np.hypot(y1, y2 - step))) / (2 * step)
        self.assertAlmostEqual(float(g1), float(fd1), places=8)
        self.assertAlmostEqual(float(g2), float(fd2), places=8)

    def test_gaussian_ring_integral(self):
        mollifier = GaussianMollifier(sigma=1.0)
        theta = 2.0 * np.pi * np.arange(4096) / 4096
        center, radius = 0.7, 0.4
        points = np.hypot(center + radius * np.cos(theta), radius * np.sin(theta))
        expected = np.mean(mollifier.v_hat(points)) * 2.0 * np.pi
        self.assertAlmostEqual(float(mollifier.ring_integral(center, radius)), expected, places=10)

    def test_flat_ring_integral(self):
        mollifier = FlatMollifier(cutoff=1.0)
        theta = 2.0 * np.pi * (np.arange(200000) + 0.5) / 200000
        center, radius = 0.5, 0.8
        points = np.hypot(center + radius * np.cos(theta), radius * np.sin(theta))
        expected = np.mean(points <= 1.0) * 2.0 * np.pi
        self.assertAlmostEqual(float(mollifier.ring_integral(center, radius)), expected, places=3)
        self.assertAlmostEqual(float(mollifier.ring_integral(0.2, 0.3)), 2.0 * np.pi)
        self.assertEqual(float(mollifier.ring_integral(0.2, 3.0)), 0.0)


class TestCovarianceSpec(unittest.TestCase):
    """Spectral covariances of the three environment laws"""

    def setUp(self):
        """Set up test fixtures"""
        rng = np.random.default_rng(3)
        self.p = rng.normal(size=(50, 2))

    def test_curl_covariance_is_transverse(self):
        k_hat = spectral_covariance(CovarianceSpec(model=EnvironmentModel.CURL), self.p)
        np.testing.assert_allclose(np.einsum("mkl,ml->mk", k_hat, self.p), 0.0, atol=1e-14)

    def test_gradient_covariance_is_longitudinal(self):
        k_hat = spectral_covariance(CovarianceSpec(model=EnvironmentModel.GRADIENT), self.p)
        rotated = np.stack([self.p[:, 1], -self.p[:, 0]], axis=1)
        np.testing.assert_allclose(np.einsum("mkl,ml->mk", k_hat, rotated), 0.0, atol=1e-14)

    def test_rank_one_trace_and_symmetry(self):
        for model in (EnvironmentModel.CURL, EnvironmentModel.GRADIENT):
            k_hat = spectral_covariance(CovarianceSpec(model=model), self.p)
            v_hat = GaussianMollifier().v_hat(np.hypot(self.p[:, 0], self.p[:, 1]))
            np.testing.assert_allclose(np.trace(k_hat, axis1=1, axis2=2), v_hat, rtol=1e-13)
            np.testing.assert_allclose(k_hat, np.swapaxes(k_hat, 1, 2))
            np.testing.assert_allclose(np.linalg.det(k_hat), 0.0, atol=1e-14)

    def test_scalar_covariance(self):
        k_hat = spectral_covariance(CovarianceSpec(model=EnvironmentModel.SCALAR), self.p)
        v_hat = GaussianMollifier().v_hat(np.hypot(self.p[:, 0], self.p[:, 1]))
        np.testing.assert_allclose(k_hat[:, 0, 0], v_hat)
        self.assertTrue(np.all(k_hat[:, 1, :] == 0))
        self.assertTrue(np.all(k_hat[:, :, 1] == 0))

    def test_covariance_is_positive_semidefinite(self):
        p = np.random.default_rng(11).normal(scale=3.0, size=(1000, 2))
        for model in EnvironmentModel:
            for mollifier in (GaussianMollifier(), FlatMollifier(cutoff=2.0)):
                k_hat = spectral_covariance(CovarianceSpec(model=model, mollifier=mollifier), p)
                eigenvalues = np.linalg.eigvalsh(k_hat)
                self.assertTrue(np.all(eigenvalues >= -1e-14), msg=f"{model.value}, {mollifier.kind}")

    def test_zero_wavevector_rejected(self):
        with self.assertRaises(DomainError):
            spectral_covariance(CovarianceSpec(model=EnvironmentModel.CURL), np.zeros((1, 2)))

    def test_tracer_models_map_to_environments(self):
        self.assertEqual(TracerModel.DCGF.environment, EnvironmentModel.CURL)
        self.assertEqual(TracerModel.SRBP.environment, EnvironmentModel.GRADIENT)
        self.assertEqual(TracerModel.SRBP_ANISO.environment, EnvironmentModel.SCALAR)
        self.assertFalse(TracerModel.DCGF.self_repelling)


class TestRealSpaceCovariance(unittest.TestCase):
    """Plane covariance by quadrature and the exact torus covariance"""

    def test_values_at_origin(self):
        curl = real_space_covariance(CovarianceSpec(model=EnvironmentModel.CURL), [0.0, 0.0])
        gradient = real_space_covariance(CovarianceSpec(model=EnvironmentModel.GRADIENT), [0.0, 0.0])
        scalar = real_space_covariance(CovarianceSpec(model=EnvironmentModel.SCALAR), [0.0, 0.0])
        np.testing.assert_allclose(curl, np.eye(2) / (4.0 * np.pi), atol=1e-12)
        np.testing.assert_allclose(gradient, np.eye(2) / (4.0 * np.pi), atol=1e-12)
        np.testing.assert_allclose(scalar, [[1.0 / (2.0 * np.pi), 0.0], [0.0, 0.0]], atol=1e-12)

    def test_curl_plus_gradient_is_isotropic(self):
        x = [0.8, -1.1]
        curl = real_space_covariance(CovarianceSpec(model=EnvironmentModel.CURL), x)
        gradient = real_space_covariance(CovarianceSpec(model=EnvironmentModel.GRADIENT), x)
        scalar = real_space_covariance(CovarianceSpec(model=EnvironmentModel.SCALAR), x)
        np.testing.assert_allclose(curl + gradient, scalar[0, 0] * np.eye(2), atol=1e-12)

    def test_torus_converges_to_plane(self):
        for model in EnvironmentModel:
            spec = CovarianceSpec(model=model)
            for x in ([0.0, 0.0], [1.0, 0.0], [0.5, 1.5]):
                plane = real_space_covariance(spec, x)
                torus = torus_covariance(spec, 64.0, 128, x)
                np.testing.assert_allclose(torus, plane, atol=1e-3)


class TestSampler(unittest.TestCase):
    """Spectral field synthesis on the periodic grid"""

    def setUp(self):
        """Set up test fixtures"""
        self.temp_dir = tempfile.mkdtemp()
        self.curl = CovarianceSpec(model=EnvironmentModel.CURL)

    def tearDown(self):
        """Clean up test fixtures"""
        import shutil
        shutil.rmtree(self.temp_dir)

    def test_constraint_exactness(self):
        """Curl samples are divergence-free and gradient samples curl-free on a 256^2 grid"""
        curl = sample_field(self.curl, 64.0, 256, seed=5)
        gradient = sample_field(CovarianceSpec(model=EnvironmentModel.GRADIENT), 64.0, 256, seed=5)
        self.assertLess(spectral_divergence(curl), 1e-12)
        self.assertLess(spectral_rotation(gradient), 1e-12)

    def test_same_seed_same_field(self):
        first = sample_field(self.curl, 32.0, 64, seed=11)
        second = sample_field(self.curl, 32.0, 64, seed=11)
        other = sample_field(self.curl, 32.0, 64, seed=12)
        self.assertTrue(np.array_equal(first.values, second.values))
        self.assertFalse(np.array_equal(first.values, other.values))

    def test_modes_are_hermitian(self):
        sample = sample_field(self.curl, 32.0, 64, seed=2)
        flip = (-np.arange(64)) % 64
        mirrored = sample.fourier_modes[:, flip][:, :, flip]
        np.testing.assert_allclose(mirrored, np.conj(sample.fourier_modes), atol=1e-15)
        self.assertTrue(np.all(sample.fourier_modes[:, ~retained_mask(64)] == 0))

    def test_scalar_field_has_one_component(self):
        sample = sample_field(CovarianceSpec(model=EnvironmentModel.SCALAR), 32.0, 64, seed=4)
        self.assertTrue(np.all(sample.values[1] == 0))
        self.assertGreater(np.abs(sample.values[0]).max(), 0)

    def test_sample_is_read_only(self):
        sample = sample_field(self.curl, 32.0, 64, seed=1)
        with self.assertRaises(ValueError):
            sample.values[0, 0, 0] = 1.0
        with self.assertRaises(ValidationError):
            sample.box = 10.0

    def test_empirical_covariance_matches_torus(self):
        """Sample covariance over 200 fields within 4 standard errors of the exact torus covariance"""
        box, grid, count = 16.0, 32, 200
        spacing = box / grid
        for model in EnvironmentModel:
            spec = CovarianceSpec(model=model)
            samples = [sample_field(spec, box, grid, seed).values for seed in range(count)]
            for shift in (0, 1, 3):
                oracle = torus_covariance(spec, box, grid, [shift * spacing, 0.0])
                for k, l in ((0, 0), (1, 1), (0, 1)):
                    per_sample = np.array([np.mean(v[k] * np.roll(v[l], -shift, axis=0)) for v in samples])
                    mean = per_sample.mean()
                    stderr = per_sample.std(ddof=1) / np.sqrt(count)
                    self.assertLessEqual(abs(mean - oracle[k, l]), 4.0 * stderr + 1e-12,
                                         msg=f"{model.value} shift={shift} component=({k},{l})")

    @unittest.skipUnless(SLOW, "set SUPERDIFF_SLOW=1 for Monte Carlo acceptance runs")
    def test_single_point_covariance_matches_plane(self):
        box, grid, count = 64.0, 128, 10000
        spacing = box / grid
        shifts = [(0, 0), (1, 0), (2, 0), (0, 3), (4, 4)]
        for model in EnvironmentModel:
            spec = CovarianceSpec(model=model)
            products = {shift: [] for shift in shifts}
            for seed in range(count):
                values = sample_field(spec, box, grid, seed).values
                for i, j in shifts:
                    products[(i, j)].append(np.outer(values[:, 0, 0], values[:, i, j]))
            for (i, j), items in products.items():
                items = np.array(items)
                oracle = real_space_covariance(spec, [i * spacing, j * spacing])
                mean = items.mean(axis=0)
                stderr = items.std(axis=0, ddof=1) / np.sqrt(count)
                self.assertTrue(np.all(np.abs(mean - oracle) <= 4.0 * stderr + 1e-12), msg=f"{model.value} {i},{j}")

    def test_interpolation_exact_at_nodes(self):
        sample = sample_field(self.curl, 32.0, 64, seed=9)
        x, y = node_positions(sample)
        points = np.stack([x[5:9, 10], y[5:9, 10]], axis=-1)
        np.testing.assert_allclose(evaluate_field(sample, points), sample.values[:, 5:9, 10].T, atol=1e-14)
        shifted = points + np.array([32.0, -64.0])
        np.testing.assert_allclose(evaluate_field(sample, shifted), sample.values[:, 5:9, 10].T, atol=1e-12)

    def test_grid_validation(self):
        with self.assertRaises(ConfigurationError):
            sample_field(self.curl, 32.0, 63, seed=0)
        with self.assertRaises(ConfigurationError):
            sample_field(self.curl, 8.0, 64, seed=0)
        with self.assertRaises(ConfigurationError):
            sample_field(self.curl, -1.0, 64, seed=0)

    def test_zero_field(self):
        sample = zero_field(EnvironmentModel.CURL, 32.0, 64)
        self.assertEqual(spectral_divergence(sample), 0.0)
        self.assertTrue(np.all(evaluate_field(sample, [[1.3, 2.7]]) == 0))

    def test_field_export(self):
        sample = sample_field(self.curl, 32.0, 32, seed=21)
        csv_path = write_field_csv(sample, os.path.join(self.temp_dir, "field.csv"))
        frame = pd.read_csv(csv_path, float_precision="round_trip")
        self.assertEqual(list(frame.columns), ["x", "y", "omega1", "omega2"])
        self.assertEqual(len(frame), 32 * 32)
        np.testing.assert_array_equal(frame["omega1"].to_numpy(), sample.values[0].ravel())

        binary_path = write_field_binary(sample, os.path.join(self.temp_dir, "field.bin"))
        loaded = read_field_binary(binary_path)
        self.assertEqual((loaded.box, loaded.grid, loaded.model, loaded.seed),
                         (sample.box, sample.grid, sample.model, sample.seed))
        self.assertTrue(np.array_equal(loaded.values, sample.values))

    def test_binary_dump_rejects_other_files(self):
        path = os.path.join(self.temp_dir, "junk.bin")
        Path(path).write_bytes(b"JUNK" + bytes(64))
        with self.assertRaises(ConfigurationError):
            read_field_binary(path)


if __name__ == "__main__":
    unittest.main()
