"""
Finite-difference simulator producing synthetic IVUS data.

Each transducer fires a short pulse into two media, one with c^2 = 1 + m and
one homogeneous, and records the difference of the two pressure fields at
its own position. The time antiderivative of the difference trace is the
Born measurement W(s) used by the Volterra solvers.

Scheme:
- Damped leapfrog for u_tt + sigma u_t = c^2 (laplacian(u) + source) with the
  5-point Laplacian on a node-centred grid symmetric about the origin
- Zero values outside the grid; a quadratic sponge sigma absorbs outgoing waves
- Blackman source pulse, injected and recorded with bilinear weights
"""
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger
from scipy.integrate import cumulative_trapezoid
from scipy.ndimage import map_coordinates

from modalities.ivus import MeasurementW
from phantoms.phantom import ImageGrid
from tomography.cmt import AcquisitionGeometry
from utils.config import Config
from utils.errors import ConfigError, StabilityError
from utils.parallel import parallel_map

MIN_SPONGE_WIDTH = 16
NAN_CHECK_INTERVAL = 64

# Largest contrast the default time step is sized for
_DESIGN_CONTRAST = Config.BORN_CONTRAST_LIMIT


@dataclass
class SpeedField:
    """Speed perturbation m on an image grid, c^2 = 1 + m."""
    grid: ImageGrid

    def __post_init__(self):
        peak = float(np.max(np.abs(self.grid.values))) if self.grid.values.size else 0.0
        if peak >= Config.BORN_CONTRAST_LIMIT:
            raise ConfigError(
                f"|m| = {peak:.3f} leaves the Born regime (limit {Config.BORN_CONTRAST_LIMIT})",
                stage="wavesim",
            )

    def squared_speed(self, grid: "FDGrid") -> np.ndarray:
        """c^2 at the simulation nodes, bilinear in m and 1 outside the image."""
        coords = grid.coords
        scale = 1.0 / self.grid.pixel_size
        index = (coords + self.grid.half_width) * scale - 0.5
        iy, ix = np.meshgrid(index, index, indexing="ij")
        m = map_coordinates(self.grid.values, [iy, ix], order=1, mode="constant", cval=0.0)
        return 1.0 + m


@dataclass
class SimConfig:
    """
    Time stepping and grid settings.

    Attributes:
        dx (float): Grid spacing
        dt (float): Time step, dt <= dx / (sqrt(2) c_max)
        n_steps (int): Number of time steps
        half_width (float): Half width of the physical region (sponge lies outside)
        source_width (float): Duration of the source pulse, default 6 dt
        sponge_width (int): Sponge thickness in cells (>= 16)
        sponge_strength (float): Peak damping, default 14 / (sponge_width dx)
    """
    dx: float
    dt: float
    n_steps: int
    half_width: float
    source_width: Optional[float] = None
    sponge_width: int = 20
    sponge_strength: Optional[float] = None

    def __post_init__(self):
        if not (self.dx > 0 and self.dt > 0 and self.half_width > 0):
            raise ConfigError("dx, dt and half_width must be positive", stage="wavesim")
        if self.n_steps < 1:
            raise ConfigError(f"n_steps must be positive, got {self.n_steps}", stage="wavesim")
        if self.sponge_width < MIN_SPONGE_WIDTH:
            raise ConfigError(
                f"Sponge needs at least {MIN_SPONGE_WIDTH} cells, got {self.sponge_width}", stage="wavesim"
            )
        if self.source_width is None:
            self.source_width = 6.0 * self.dt
        if self.source_width < 3.0 * self.dt:
            raise ConfigError("Source pulse must span at least three time steps", stage="wavesim")
        if self.sponge_strength is None:
            self.sponge_strength = 14.0 / (self.sponge_width * self.dx)

    @property
    def duration(self) -> float:
        return self.n_steps * self.dt

    def check_cfl(self, c_max: float):
        limit = self.dx / (np.sqrt(2.0) * c_max)
        if self.dt > limit * (1.0 + 1e-12):
            raise ConfigError(f"dt={self.dt:g} violates the CFL limit {limit:g}", stage="wavesim")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "dx": self.dx,
            "dt": self.dt,
            "n_steps": self.n_steps,
            "half_width": self.half_width,
            "source_width": self.source_width,
            "sponge_width": self.sponge_width,
            "sponge_strength": self.sponge_strength,
        }

    @classmethod
    def for_geometry(cls, geom: AcquisitionGeometry, dx: float, cfl: float = 0.5,
                     source_width: Optional[float] = None, sponge_width: int = 20,
                     margin: float = 0.1) -> "SimConfig":
        """
        Settings for recording every transducer up to s = 2 r_max.

        The pulse lasts 8 dx by default. The sponge starts R0 + r_max + width
        + margin from the centre, so no echo from it reaches a transducer
        before the recording ends.
        """
        dt = cfl * dx / np.sqrt(2.0 * (1.0 + _DESIGN_CONTRAST))
        width = 8.0 * dx if source_width is None else source_width
        n_steps = int(np.ceil((2.0 * geom.r_max + width) / dt)) + 2
        half_width = geom.R0 + geom.r_max + width + margin
        return cls(dx, dt, n_steps, half_width, width, sponge_width)


@dataclass(frozen=True)
class FDGrid:
    """Node-centred grid x_k = (k - K) dx, K = n_interior + sponge_width."""
    dx: float
    n_interior: int
    sponge_width: int

    @classmethod
    def from_config(cls, cfg: SimConfig) -> "FDGrid":
        return cls(cfg.dx, int(np.ceil(cfg.half_width / cfg.dx - 1e-9)), cfg.sponge_width)

    @property
    def center(self) -> int:
        return self.n_interior + self.sponge_width

    @property
    def size(self) -> int:
        return 2 * self.center + 1

    @property
    def coords(self) -> np.ndarray:
        return self.dx * (np.arange(self.size) - self.center)

    def sponge(self, strength: float) -> np.ndarray:
        depth = np.maximum(np.abs(np.arange(self.size) - self.center) - self.n_interior, 0)
        cells = np.maximum(depth[:, None], depth[None, :])
        return strength * (cells / self.sponge_width) ** 2

    def bilinear(self, position: Sequence[float]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Row indices, column indices and weights of the four nodes around a point."""
        fx = position[0] / self.dx + self.center
        fy = position[1] / self.dx + self.center
        ix, iy = int(np.floor(fx)), int(np.floor(fy))
        if not (0 <= ix < self.size - 1 and 0 <= iy < self.size - 1):
            raise ConfigError(f"Point {tuple(position)} lies outside the simulation grid", stage="wavesim")
        tx, ty = fx - ix, fy - iy
        rows = np.array([iy, iy, iy + 1, iy + 1])
        cols = np.array([ix, ix + 1, ix, ix + 1])
        weights = np.array([(1 - ty) * (1 - tx), (1 - ty) * tx, ty * (1 - tx), ty * tx])
        return rows, cols, weights


@dataclass
class Trace:
    """Samples of a recorded signal at times ``t``."""
    t: np.ndarray
    values: np.ndarray
    meta: Dict[str, Any] = field(default_factory=dict)


def source_pulse(cfg: SimConfig) -> Tuple[np.ndarray, np.ndarray]:
    """Blackman pulse samples (times k dt, values) with sum(values) dt = 1."""
    count = int(round(cfg.source_width / cfg.dt)) + 1
    values = np.blackman(count)
    values /= values.sum() * cfg.dt
    return cfg.dt * np.arange(count), values


def pulse_centroid(cfg: SimConfig) -> float:
    times, values = source_pulse(cfg)
    return float(np.sum(times * values) * cfg.dt)


def _laplacian(u: np.ndarray, dx: float) -> np.ndarray:
    lap = -4.0 * u
    lap[..., 1:, :] += u[..., :-1, :]
    lap[..., :-1, :] += u[..., 1:, :]
    lap[..., :, 1:] += u[..., :, :-1]
    lap[..., :, :-1] += u[..., :, 1:]
    return lap / dx ** 2


def _run(c2: np.ndarray, grid: FDGrid, cfg: SimConfig, source_pos: Sequence[float],
         receiver_pos: Sequence[float], record_energy: bool = False):
    """
    Step a stack of media in lockstep from rest.

    Returns the receiver samples, shape (n_media, n_steps + 1), and the
    energy history of every medium (empty unless requested).
    """
    cfg.check_cfl(float(np.sqrt(np.max(c2))))
    dt, dx = cfg.dt, cfg.dx

    sigma = grid.sponge(cfg.sponge_strength)
    damping = 0.5 * sigma * dt
    gain = 1.0 / (1.0 + damping)
    decay = 1.0 - damping

    rows, cols, weights = grid.bilinear(source_pos)
    injection = np.zeros((grid.size, grid.size))
    np.add.at(injection, (rows, cols), weights / dx ** 2)
    rec_rows, rec_cols, rec_weights = grid.bilinear(receiver_pos)

    _, pulse = source_pulse(cfg)
    scaled_c2 = dt ** 2 * c2
    inverse_c2 = 1.0 / c2

    previous = np.zeros(c2.shape)
    current = np.zeros(c2.shape)
    samples = np.zeros((c2.shape[0], cfg.n_steps + 1))
    energy: List[np.ndarray] = []

    for step in range(cfg.n_steps):
        lap = _laplacian(current, dx)
        forcing = lap + pulse[step] * injection if step < pulse.size else lap
        following = (2.0 * current - decay * previous + scaled_c2 * forcing) * gain

        if record_energy:
            kinetic = np.sum(inverse_c2 * (following - current) ** 2, axis=(-2, -1)) / dt ** 2
            potential = -np.sum(following * lap, axis=(-2, -1))
            energy.append((kinetic + potential) * dx ** 2)

        previous, current = current, following
        samples[:, step + 1] = current[:, rec_rows, rec_cols] @ rec_weights

        if step % NAN_CHECK_INTERVAL == 0 and not np.all(np.isfinite(current)):
            raise StabilityError(f"Non-finite field at step {step}", stage="wavesim")

    if not np.all(np.isfinite(samples)):
        raise StabilityError("Non-finite receiver samples", stage="wavesim")
    history = np.array(energy).T if record_energy else np.empty((c2.shape[0], 0))
    return samples, history


def simulate_difference(field: SpeedField, source_pos: Sequence[float], cfg: SimConfig,
                        record_energy: bool = False) -> Trace:
    """
    Difference trace w = u_exc - u_0 recorded at the source position.

    The two media share the source and are stepped together, so m = 0
    gives w = 0 exactly. Times are shifted by the pulse centroid.
    """
    grid = FDGrid.from_config(cfg)
    c2 = np.stack([field.squared_speed(grid), np.ones((grid.size, grid.size))])
    samples, history = _run(c2, grid, cfg, source_pos, source_pos, record_energy)

    times = cfg.dt * np.arange(cfg.n_steps + 1) - pulse_centroid(cfg)
    meta = {"source": [float(source_pos[0]), float(source_pos[1])], "config": cfg.to_dict()}
    if record_energy:
        meta["energy"] = history
    return Trace(times, samples[0] - samples[1], meta)


def green_response(cfg: SimConfig, distance: float, record_energy: bool = False) -> Trace:
    """Homogeneous field from a source at the origin, recorded at (distance, 0); unshifted times."""
    grid = FDGrid.from_config(cfg)
    c2 = np.ones((1, grid.size, grid.size))
    samples, history = _run(c2, grid, cfg, (0.0, 0.0), (distance, 0.0), record_energy)
    meta = {"distance": distance, "config": cfg.to_dict()}
    if record_energy:
        meta["energy"] = history[0]
    return Trace(cfg.dt * np.arange(cfg.n_steps + 1), samples[0], meta)


def integrate_trace(w, dt: float) -> np.ndarray:
    """Cumulative trapezoid antiderivative with W = 0 at the first sample."""
    values = w.values if isinstance(w, Trace) else np.asarray(w, dtype=float)
    return cumulative_trapezoid(values, dx=dt, axis=-1, initial=0.0)


def acquire_all(field: SpeedField, geom: AcquisitionGeometry, cfg: SimConfig,
                n_jobs: Optional[int] = None) -> MeasurementW:
    """
    Simulate every transducer independently and integrate the traces.

    Returns:
        MeasurementW: One row per transducer on the shifted simulator time grid
    """
    logger.info(
        f"Simulating {geom.n_phi} transducers on a {FDGrid.from_config(cfg).size}^2 grid, "
        f"{cfg.n_steps} steps"
    )
    traces = parallel_map(lambda position: simulate_difference(field, position, cfg), list(geom.transducers), n_jobs)
    values = np.vstack([integrate_trace(trace, cfg.dt) for trace in traces])
    meta = {"source": "wave", "centroid": pulse_centroid(cfg), "config": cfg.to_dict()}
    return MeasurementW(traces[0].t, values, meta)
