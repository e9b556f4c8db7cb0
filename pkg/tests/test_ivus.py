"""
Unit tests for the IVUS kernel, the Volterra model and its solvers.
"""
import numpy as np
import pytest
from scipy.integrate import quad
from scipy.special import ellipk

from modalities.ivus import (
    C_JUMP,
    MeasurementW,
    VolterraSystem,
    build_kernel_table,
    circular_averages,
    ivus_reconstruct,
    kernel_K,
    kernel_K1,
    kernel_K1_ds,
    resample_measurements,
    solve_volterra_iter,
    solve_volterra_triangular,
    synthesize_measurements,
    volterra_forward,
    volterra_grids,
)
from phantoms.phantom import compare, make_phantom, preset
from tomography.cmt import AcquisitionGeometry, forward_cmt
from utils.errors import ConfigError, DomainError, NumericError


def closed_form_K(r: float, s: float) -> float:
    """K(r, s) through the complete elliptic integral, s > 2r."""
    b = 0.5 * s - r
    c = 0.5 * s + r
    return 2.0 / c * ellipk((b / c) ** 2) / (4.0 * np.pi ** 2)


def uniform_grids(n: int, r_max: float = 2.0):
    step = r_max / n
    r_grid = step * np.arange(1, n + 1)
    return r_grid, 2.0 * r_grid


class TestKernel:
    """Test cases for the kernel K and its continuous part."""

    def test_zero_before_arrival(self):
        assert kernel_K(0.5, 0.9) == 0.0
        assert kernel_K(0.5, 1.0) == 0.0
        assert kernel_K1(0.5, 0.9) == 0.0
        assert kernel_K1_ds(0.5, 0.9) == 0.0

    def test_matches_elliptic_closed_form(self):
        for r, s in [(0.3, 1.0), (0.1, 0.25), (0.8, 3.5), (0.5, 1.02)]:
            assert kernel_K(r, s) == pytest.approx(closed_form_K(r, s), rel=1e-10)

    def test_matches_adaptive_quadrature(self):
        """4 pi^2 K = int_r^{s - r} dt / sqrt((t + r)(s - t + r) (t - r)(s - t - r))."""
        r, s = 0.3, 1.0
        reference = quad(
            lambda t: 1.0 / np.sqrt((t + r) * (s - t + r)),
            r, s - r, weight="alg", wvar=(-0.5, -0.5),
        )[0]
        assert 4.0 * np.pi ** 2 * kernel_K(r, s) == pytest.approx(reference, rel=1e-5)

    def test_jump_height(self):
        r = 0.3
        value = 4.0 * np.pi ** 2 * kernel_K(r, 2.0 * r * (1.0 + 1e-8))
        assert value == pytest.approx(np.pi / (2.0 * r), rel=1e-4)

    def test_jump_remainder_is_quadratic(self):
        """pi / sqrt(2 r s) - 4 pi^2 K vanishes like (s/2 - r)^2."""
        r = 0.3
        offsets = np.array([1e-2, 5e-3, 2.5e-3])
        s = 2.0 * (r + offsets)
        remainder = np.pi / np.sqrt(2.0 * r * s) - 4.0 * np.pi ** 2 * kernel_K(r, s)
        slopes = np.diff(np.log(np.abs(remainder))) / np.diff(np.log(offsets))
        assert np.all(slopes > 1.9)

    def test_k1_removes_the_jump(self):
        r = 0.4
        assert abs(kernel_K1(r, 2.0 * r * (1.0 + 1e-9))) < 1e-6

    def test_derivative_at_arrival(self):
        r = 0.25
        assert kernel_K1_ds(r, 2.0 * r) == pytest.approx(-np.pi / (8.0 * r ** 2), rel=1e-10)

    def test_derivative_matches_central_differences(self):
        r, s = 0.3, 1.0
        exact = kernel_K1_ds(r, s)
        errors = []
        for h in (1e-3, 5e-4):
            estimate = (kernel_K1(r, s + h) - kernel_K1(r, s - h)) / (2.0 * h)
            errors.append(abs(estimate - exact))
        assert errors[1] < 1e-6
        assert 3.0 < errors[0] / errors[1] < 5.0

    def test_bounded_on_the_active_set(self):
        r = np.linspace(0.1, 1.0, 19)[:, None]
        s = np.linspace(0.2, 4.0, 77)[None, :]
        table = kernel_K1_ds(r, s)
        assert np.all(np.isfinite(table))
        assert np.max(np.abs(table)) < 100.0

    def test_array_shapes(self):
        values = kernel_K(np.array([0.2, 0.3]), np.array([[1.0], [2.0], [3.0]]))
        assert values.shape == (3, 2)

    def test_rejects_nonpositive_radius(self):
        with pytest.raises(DomainError):
            kernel_K(0.0, 1.0)


class TestKernelTable:
    """Test cases for build_kernel_table."""

    def setup_method(self):
        self.r_grid, self.s_grid = uniform_grids(40)

    def test_entries_match_pointwise_kernel(self):
        table = build_kernel_table(self.r_grid, self.s_grid)
        assert table.K1.shape == (40, 40)
        i, j = 5, 30
        assert table.K1[i, j] == pytest.approx(kernel_K1(self.r_grid[i], self.s_grid[j]), rel=1e-13)
        assert table.dK1_ds[i, j] == pytest.approx(kernel_K1_ds(self.r_grid[i], self.s_grid[j]), rel=1e-13)

    def test_zero_before_arrival(self):
        table = build_kernel_table(self.r_grid, self.s_grid)
        early = self.s_grid[None, :] < 2.0 * self.r_grid[:, None] * (1.0 - 1e-12)
        assert np.all(table.K1[early] == 0.0)
        assert np.all(table.dK1_ds[early] == 0.0)

    def test_deterministic(self):
        first = build_kernel_table(self.r_grid, self.s_grid)
        second = build_kernel_table(self.r_grid, self.s_grid)
        assert np.array_equal(first.dK1_ds, second.dK1_ds)

    def test_parallel_matches_serial(self):
        serial = build_kernel_table(self.r_grid, self.s_grid, n_jobs=1)
        threaded = build_kernel_table(self.r_grid, self.s_grid, n_jobs=2)
        assert np.allclose(serial.dK1_ds, threaded.dK1_ds, rtol=1e-13, atol=0.0)

    def test_cache_round_trip(self, tmp_path):
        built = build_kernel_table(self.r_grid, self.s_grid, cache_dir=str(tmp_path))
        loaded = build_kernel_table(self.r_grid, self.s_grid, cache_dir=str(tmp_path))
        assert not built.meta["cached"]
        assert loaded.meta["cached"]
        assert np.array_equal(built.K1, loaded.K1)
        assert np.array_equal(built.dK1_ds, loaded.dK1_ds)

    def test_cache_key_depends_on_quadrature(self, tmp_path):
        first = build_kernel_table(self.r_grid, self.s_grid, cache_dir=str(tmp_path), n_quad=64)
        second = build_kernel_table(self.r_grid, self.s_grid, cache_dir=str(tmp_path), n_quad=128)
        assert first.meta["cache_key"] != second.meta["cache_key"]
        assert not second.meta["cached"]

    def test_nonuniform_grid(self):
        with pytest.raises(ConfigError):
            build_kernel_table(self.r_grid ** 2, self.s_grid)


class TestVolterraForward:
    """Test cases for the Born forward map."""

    def setup_method(self):
        self.r_grid, self.s_grid = uniform_grids(160)
        self.table = build_kernel_table(self.r_grid, self.s_grid)

    def test_zero_profile(self):
        W = volterra_forward(np.zeros(160), self.table)
        assert np.all(W.values == 0.0)
        assert W.meta["c_jump"] == C_JUMP

    def test_causality(self):
        """A profile supported in [r0 - d, r0 + d] leaves W zero for s < 2 (r0 - d)."""
        profile = np.where(np.abs(self.r_grid - 1.0) <= 0.1, 1.0, 0.0)
        W = volterra_forward(profile, self.table)
        first = np.min(self.r_grid[profile > 0])
        assert np.all(W.values[0, self.s_grid < 2.0 * first] == 0.0)
        assert np.any(W.values[0] != 0.0)

    def test_operator_is_lower_triangular(self):
        system = VolterraSystem.from_table(self.table)
        assert np.all(np.triu(system.kernel, k=1) == 0.0)
        assert np.all(np.diag(system.matrix) > 0.0)

    def test_matches_brute_force_derivative(self):
        """W agrees with differentiating int_0^{s/2} r M(r) K(r, s) dr numerically."""
        profile = np.exp(-((self.r_grid - 0.9) / 0.25) ** 2)
        W = volterra_forward(profile, self.table).values[0]

        def smooth(r):
            return np.exp(-((r - 0.9) / 0.25) ** 2)

        def accumulated(s):
            integrand = lambda r: r * smooth(r) * closed_form_K(r, s) if r < 0.5 * s else 0.0
            return quad(integrand, 0.0, 0.5 * s, limit=200, epsabs=1e-13, epsrel=1e-12)[0]

        chosen = np.arange(20, 160, 10)
        h = 1e-3
        reference = np.array([
            (accumulated(self.s_grid[j] + h) - accumulated(self.s_grid[j] - h)) / (2.0 * h) for j in chosen
        ])
        error = np.linalg.norm(W[chosen] - reference) / np.linalg.norm(reference)
        assert error < 1e-2

    def test_grid_mismatch(self):
        with pytest.raises(ConfigError):
            volterra_forward(np.zeros(10), self.table)


class TestVolterraSolvers:
    """Test cases for the successive approximation and triangular solvers."""

    def setup_method(self):
        self.r_grid, self.s_grid = uniform_grids(120)
        self.table = build_kernel_table(self.r_grid, self.s_grid)
        self.profile = np.vstack([
            np.exp(-((self.r_grid - 0.9) / 0.2) ** 2),
            0.5 * np.exp(-((self.r_grid - 1.4) / 0.15) ** 2),
        ])
        self.W = volterra_forward(self.profile, self.table)

    def test_zero_data(self):
        W = MeasurementW(self.s_grid, np.zeros((1, 120)))
        assert np.all(solve_volterra_iter(W, self.table) == 0.0)
        assert np.all(solve_volterra_triangular(W, self.table) == 0.0)

    def test_iterative_inverts_forward(self):
        recovered = solve_volterra_iter(self.W, self.table)
        error = np.linalg.norm(recovered - self.profile) / np.linalg.norm(self.profile)
        assert error < 1e-8

    def test_triangular_inverts_forward(self):
        recovered = solve_volterra_triangular(self.W, self.table)
        assert np.allclose(recovered, self.profile, atol=1e-10)

    def test_solvers_agree(self):
        noisy = self.W.with_values(self.W.values + 1e-4 * np.sin(7.0 * self.s_grid))
        iterative = solve_volterra_iter(noisy, self.table)
        triangular = solve_volterra_triangular(noisy, self.table)
        scale = np.max(np.abs(triangular))
        assert np.max(np.abs(iterative - triangular)) < 1e-3 * scale

    def test_divergence_is_detected(self):
        r_grid = self.r_grid[:10]
        system = VolterraSystem(r_grid, 2.0 * r_grid, 2.0 * C_JUMP * np.eye(10))
        W = MeasurementW(system.s_grid, np.ones((1, 10)))
        with pytest.raises(NumericError) as excinfo:
            solve_volterra_iter(W, system)
        assert excinfo.value.stage == "volterra"

    def test_measurements_on_wrong_grid(self):
        W = MeasurementW(self.s_grid + 0.01, np.zeros((1, 120)))
        with pytest.raises(ConfigError):
            solve_volterra_triangular(W, self.table)

    def test_conditioning_grows_slowly(self):
        """The discrete operator stays well conditioned under refinement."""
        conditions = []
        for n in (40, 80, 160):
            system = VolterraSystem.from_table(build_kernel_table(*uniform_grids(n)))
            conditions.append(np.linalg.cond(system.matrix))
        assert max(conditions) < 100.0
        assert conditions[2] < 10.0 * conditions[0]


class TestMeasurements:
    """Test cases for measurement containers and resampling."""

    def test_shape_check(self):
        with pytest.raises(ConfigError):
            MeasurementW(np.linspace(0.0, 1.0, 5), np.zeros((2, 4)))

    def test_resample_linear_profile(self):
        s = np.linspace(0.0, 4.0, 81)
        W = MeasurementW(s, 3.0 * s)
        target = np.linspace(-0.5, 4.5, 11)
        resampled = resample_measurements(W, target).values[0]
        inside = (target >= 0.0) & (target <= 4.0)
        assert np.allclose(resampled[inside], 3.0 * target[inside])
        assert resampled[0] == 0.0
        assert resampled[-1] == pytest.approx(12.0)

    def test_save_and_load(self, tmp_path):
        s = np.linspace(0.0, 1.0, 6)
        W = MeasurementW(s, np.arange(12.0).reshape(2, 6), {"source": "born"})
        stem = str(tmp_path / "measurements")
        W.save(stem)
        loaded = MeasurementW.load(stem)
        assert np.array_equal(loaded.s_grid, s)
        assert np.array_equal(loaded.values, W.values)
        assert loaded.meta["source"] == "born"


class TestIVUSReconstruction:
    """Born measurements through the Volterra solve and circular means inversion."""

    def setup_method(self):
        self.geom = AcquisitionGeometry(0.5, 1.5, 64, 101)
        self.phantom = make_phantom(preset("vessel", contrast=0.01), n=96)
        self.sino = forward_cmt(self.phantom, self.geom)
        self.table = build_kernel_table(*volterra_grids(self.geom))

    def test_circular_averages(self):
        averages = circular_averages(self.sino)
        assert averages.shape == (64, 100)
        assert np.allclose(averages * self.geom.radii[1:], self.sino.values[:, 1:])

    def test_zero_measurements(self):
        W = MeasurementW(volterra_grids(self.geom)[1], np.zeros((64, 100)))
        image = ivus_reconstruct(W, self.geom, table=self.table, n=32)
        assert np.all(image.values == 0.0)

    def test_closed_loop(self):
        W = synthesize_measurements(self.sino, self.table)
        assert W.meta["source"] == "born"
        image = ivus_reconstruct(W, self.geom, table=self.table, n=96)
        assert image.meta["c_jump"] == C_JUMP
        assert compare(image, self.phantom).ncc > 0.9

    def test_iterative_solver_matches_triangular(self):
        W = synthesize_measurements(self.sino, self.table)
        triangular = ivus_reconstruct(W, self.geom, table=self.table, n=48)
        iterative = ivus_reconstruct(W, self.geom, table=self.table, solver="iterative", n=48)
        assert compare(iterative, triangular).rel_l2 < 1e-6

    def test_unknown_solver(self):
        W = MeasurementW(volterra_grids(self.geom)[1], np.zeros((64, 100)))
        with pytest.raises(ConfigError):
            ivus_reconstruct(W, self.geom, table=self.table, solver="lu", n=16)

    def test_row_count(self):
        W = MeasurementW(volterra_grids(self.geom)[1], np.zeros((3, 100)))
        with pytest.raises(ConfigError):
            ivus_reconstruct(W, self.geom, table=self.table, n=16)
