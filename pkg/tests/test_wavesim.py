"""
Unit tests for the finite-difference IVUS simulator.
"""
import numpy as np
import pytest
from scipy.integrate import quad

from modalities.ivus import (
    build_kernel_table,
    ivus_reconstruct,
    resample_measurements,
    synthesize_measurements,
    volterra_grids,
)
from phantoms.phantom import Feature, ImageGrid, PhantomSpec, compare, make_phantom, ncc, preset
from simulation.wavesim import (
    FDGrid,
    SimConfig,
    SpeedField,
    acquire_all,
    green_response,
    integrate_trace,
    pulse_centroid,
    simulate_difference,
    source_pulse,
)
from tomography.cmt import AcquisitionGeometry, forward_cmt
from utils.errors import ConfigError


def blackman(tau: np.ndarray, width: float) -> np.ndarray:
    """Continuous Blackman pulse on [0, width] with unit integral."""
    phase = 2.0 * np.pi * tau / width
    values = (0.42 - 0.5 * np.cos(phase) + 0.08 * np.cos(2.0 * phase)) / (0.42 * width)
    return np.where((tau >= 0.0) & (tau <= width), values, 0.0)


def free_space_field(t: float, distance: float, width: float) -> float:
    """(1 / 2 pi) int_0^inf pulse(t - distance cosh v) dv, the 2D response to a pulsed point source."""
    if t <= distance:
        return 0.0
    lower = np.arccosh(max(1.0, (t - width) / distance))
    upper = np.arccosh(t / distance)
    value = quad(lambda v: blackman(t - distance * np.cosh(v), width), lower, upper, limit=200)[0]
    return value / (2.0 * np.pi)


def green_mismatch(dx: float, dt: float, width: float = 0.2, distance: float = 0.3, t_end: float = 1.0) -> float:
    cfg = SimConfig(dx, dt, int(round(t_end / dt)), 0.8, source_width=width)
    trace = green_response(cfg, distance)
    reference = np.array([free_space_field(t, distance, width) for t in trace.t])
    return float(np.linalg.norm(trace.values - reference) / np.linalg.norm(reference))


class TestSimConfig:
    """Test cases for simulator settings."""

    def test_defaults(self):
        cfg = SimConfig(0.02, 0.005, 100, 1.0)
        assert cfg.source_width == pytest.approx(0.03)
        assert cfg.sponge_strength == pytest.approx(14.0 / (20 * 0.02))
        assert cfg.duration == pytest.approx(0.5)

    def test_thin_sponge_is_rejected(self):
        with pytest.raises(ConfigError):
            SimConfig(0.02, 0.005, 100, 1.0, sponge_width=10)

    def test_short_pulse_is_rejected(self):
        with pytest.raises(ConfigError):
            SimConfig(0.02, 0.005, 100, 1.0, source_width=0.01)

    def test_cfl_violation(self):
        cfg = SimConfig(0.02, 0.02, 10, 0.5)
        with pytest.raises(ConfigError):
            green_response(cfg, 0.1)

    def test_for_geometry_covers_all_circles(self):
        geom = AcquisitionGeometry(0.5, 1.5, 8, 101)
        cfg = SimConfig.for_geometry(geom, 0.02)
        assert cfg.duration >= 2.0 * geom.r_max
        assert cfg.half_width > geom.R1
        cfg.check_cfl(np.sqrt(1.2))

    def test_for_geometry_keeps_sponge_echoes_out_of_the_record(self):
        """A wave reaching the sponge and returning needs longer than the recording."""
        geom = AcquisitionGeometry(0.5, 1.5, 8, 101)
        cfg = SimConfig.for_geometry(geom, 0.02)
        assert cfg.source_width == pytest.approx(0.16)
        nearest_sponge = cfg.half_width - geom.R0
        assert 2.0 * nearest_sponge > 2.0 * geom.r_max + cfg.source_width
        assert cfg.duration < 2.0 * nearest_sponge

    def test_pulse_normalization(self):
        cfg = SimConfig(0.01, 0.004, 10, 0.5, source_width=0.2)
        times, values = source_pulse(cfg)
        assert values.size == 51
        assert np.sum(values) * cfg.dt == pytest.approx(1.0)
        assert np.allclose(values, blackman(times, 0.2))
        assert pulse_centroid(cfg) == pytest.approx(0.1)


class TestFDGrid:
    """Test cases for the simulation grid."""

    def setup_method(self):
        self.grid = FDGrid(0.1, 10, 16)

    def test_symmetric_nodes(self):
        assert self.grid.size == 53
        assert self.grid.coords[self.grid.center] == 0.0
        assert np.allclose(self.grid.coords, -self.grid.coords[::-1])

    def test_sponge_profile(self):
        sponge = self.grid.sponge(5.0)
        interior = slice(self.grid.center - 10, self.grid.center + 11)
        assert np.all(sponge[interior, interior] == 0.0)
        assert sponge[0, 0] == pytest.approx(5.0 * (26 - 10) ** 2 / 16 ** 2)
        assert np.all(np.diff(sponge[self.grid.center, self.grid.center + 10:]) > 0)

    def test_bilinear_weights(self):
        rows, cols, weights = self.grid.bilinear((0.025, -0.05))
        assert weights.sum() == pytest.approx(1.0)
        x = self.grid.coords[cols] @ weights
        y = self.grid.coords[rows] @ weights
        assert x == pytest.approx(0.025)
        assert y == pytest.approx(-0.05)

    def test_point_outside(self):
        with pytest.raises(ConfigError):
            self.grid.bilinear((5.0, 0.0))


class TestSpeedField:
    """Test cases for the sound-speed model."""

    def test_contrast_limit(self):
        grid = ImageGrid.zeros(16, 1.0)
        with pytest.raises(ConfigError):
            SpeedField(grid.with_values(np.full((16, 16), 0.2)))

    def test_squared_speed_outside_image(self):
        phantom = make_phantom(PhantomSpec([Feature("disk", (0.0, 0.0), 0.3, 0.05, 0.1)], 0.5), n=32)
        grid = FDGrid(0.05, 14, 16)
        c2 = SpeedField(phantom).squared_speed(grid)
        assert c2[grid.center, grid.center] == pytest.approx(1.05)
        assert c2[0, 0] == 1.0


class TestGreenFunction:
    """Homogeneous medium against the free-space response."""

    def test_matches_free_space_response(self):
        assert green_mismatch(0.01, 0.004) < 0.05

    @pytest.mark.slow
    def test_second_order_refinement(self):
        coarse = green_mismatch(0.02, 0.008)
        fine = green_mismatch(0.01, 0.004)
        assert coarse / fine > 3.0

    def test_energy_non_increasing_after_source(self):
        cfg = SimConfig(0.02, 0.008, 150, 0.6, source_width=0.16)
        trace = green_response(cfg, 0.2, record_energy=True)
        energy = trace.meta["energy"]
        _, pulse = source_pulse(cfg)
        assert energy.size == cfg.n_steps
        assert np.max(energy) > 0
        assert np.all(np.diff(energy[pulse.size - 1:]) <= 1e-10 * np.max(energy))
        # the sponge has absorbed most of the pulse by the end of the run
        assert energy[-1] < 0.5 * np.max(energy)


class TestDifferenceTraces:
    """Test cases for the two-medium difference traces."""

    def setup_method(self):
        self.geom = AcquisitionGeometry(0.5, 0.8, 4, 16)
        self.cfg = SimConfig.for_geometry(self.geom, 0.02)

    def _field(self, amplitude: float) -> SpeedField:
        spec = PhantomSpec([Feature("annulus", (0.0, 0.0), 0.6, amplitude, 0.03, thickness=0.1)], 0.8)
        return SpeedField(make_phantom(spec, n=128))

    def test_homogeneous_medium_gives_zero(self):
        trace = simulate_difference(SpeedField(ImageGrid.zeros(32, 0.8)), (0.5, 0.0), self.cfg)
        assert np.all(trace.values == 0.0)

    def test_times_are_shifted_by_the_centroid(self):
        trace = simulate_difference(SpeedField(ImageGrid.zeros(32, 0.8)), (0.5, 0.0), self.cfg)
        assert trace.t[0] == pytest.approx(-pulse_centroid(self.cfg))

    def test_rotational_symmetry(self):
        W = acquire_all(self._field(0.01), self.geom, self.cfg)
        scale = np.max(np.abs(W.values))
        assert scale > 0
        for row in W.values[1:]:
            assert np.max(np.abs(row - W.values[0])) < 1e-6 * scale

    def test_linear_in_small_contrast(self):
        weak = simulate_difference(self._field(0.01), (0.5, 0.0), self.cfg).values
        strong = simulate_difference(self._field(0.02), (0.5, 0.0), self.cfg).values
        ratio = np.linalg.norm(strong) / np.linalg.norm(weak)
        assert 1.9 < ratio < 2.1

    def test_first_arrival(self):
        """The echo of a centred disk appears after the round trip to its edge."""
        width = 0.1
        cfg = SimConfig(0.01, 0.004, 300, 0.8, source_width=width)
        spec = PhantomSpec([Feature("disk", (0.0, 0.0), 0.15, 0.01, 0.02)], 0.8)
        trace = simulate_difference(SpeedField(make_phantom(spec, n=160)), (0.5, 0.0), cfg)
        onset = trace.t[np.argmax(np.abs(trace.values) > 0.01 * np.max(np.abs(trace.values)))]
        round_trip = 2.0 * (0.5 - 0.15)
        assert round_trip - 0.5 * width - 0.05 <= onset <= round_trip + width

    def test_zero_field_measurements(self):
        cfg = SimConfig.for_geometry(self.geom, 0.04)
        W = acquire_all(SpeedField(ImageGrid.zeros(32, 0.8)), self.geom, cfg)
        assert W.values.shape == (4, cfg.n_steps + 1)
        assert np.all(W.values == 0.0)
        assert W.meta["source"] == "wave"


class TestIntegrateTrace:
    """Test cases for the trace antiderivative."""

    def test_constant_trace(self):
        assert np.allclose(integrate_trace(np.ones(11), 0.1), 0.1 * np.arange(11))

    def test_second_order_accuracy(self):
        errors = []
        for dt in (0.01, 0.005):
            t = dt * np.arange(int(round(2.0 / dt)) + 1)
            errors.append(np.max(np.abs(integrate_trace(np.sin(t), dt) - (1.0 - np.cos(t)))))
        assert 3.5 < errors[0] / errors[1] < 4.5


class TestBornConsistency:
    """Simulated measurements against the Volterra forward model."""

    @pytest.mark.slow
    def test_simulated_measurements_match_born_model(self):
        geom = AcquisitionGeometry(0.5, 1.5, 4, 101)
        phantom = make_phantom(preset("vessel", contrast=0.01), n=200)

        cfg = SimConfig.for_geometry(geom, 0.02)
        simulated = resample_measurements(acquire_all(SpeedField(phantom), geom, cfg), volterra_grids(geom)[1])
        table = build_kernel_table(*volterra_grids(geom))
        born = synthesize_measurements(forward_cmt(phantom, geom, n_arc=512), table)

        for wave_row, born_row in zip(simulated.values, born.values):
            assert ncc(wave_row, born_row) > 0.9
            assert 0.8 < np.linalg.norm(wave_row) / np.linalg.norm(born_row) < 1.25


class TestEndToEnd:
    """Simulated data through the Volterra solve and the circular means inversion."""

    @pytest.mark.slow
    def test_reconstruction_degrades_with_contrast(self):
        geom = AcquisitionGeometry(0.5, 1.5, 64, 101)
        cfg = SimConfig.for_geometry(geom, 0.02)
        table = build_kernel_table(*volterra_grids(geom))

        scores = {}
        for contrast in (0.01, 0.05):
            phantom = make_phantom(preset("vessel", contrast=contrast), n=96)
            raw = acquire_all(SpeedField(phantom), geom, cfg, n_jobs=-1)
            W = resample_measurements(raw, volterra_grids(geom)[1])
            image = ivus_reconstruct(W, geom, table=table, n=96)
            scores[contrast] = compare(image, phantom).ncc

        assert scores[0.01] >= 0.8
        assert 0.6 <= scores[0.05] < scores[0.01]
