"""
Intravascular photoacoustic measurement model.

The pressure trace recorded by a transducer is the time derivative of an
Abel-type transform of the circular integrals:

    A(t) = int_0^t g(z, r) / sqrt(t^2 - r^2) dr
    u(t) = (1 / 2 pi) (1 / 2 pi) dA/dt

and the circular integrals are recovered from the traces by

    g(z, r) = c * 4 r / (2 pi) * int_0^r u(t) / sqrt(r^2 - t^2) dt

where c is a calibration constant fixed once against the forward map (the
closed-form pair differs by 4 pi^2; see ``abel_calibration``).
"""
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Any, Dict, Optional

import numpy as np
from loguru import logger

from numerics.specfun import abel_weighted_integral
from phantoms.phantom import ImageGrid
from tomography.cmt import AcquisitionGeometry, CircularMeansSinogram, InversionParams, invert
from utils.config import Config
from utils.errors import ConfigError, NumericError
from utils.storage import load_array, save_array

# Reference problem used to fix the inverse's constant
_CALIBRATION_POINTS = 2001
_CALIBRATION_EXTENT = 2.0


@dataclass
class TransducerTraces:
    """Pressure traces ``values[i, k] = u(z_i, k * dt)``; u[:, 0] = 0."""
    geom: AcquisitionGeometry
    dt: float
    values: np.ndarray
    meta: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2 or self.values.shape[0] != self.geom.n_phi:
            raise ConfigError(f"Traces shape {self.values.shape} does not match {self.geom.n_phi} transducers", stage="ivpa")
        if self.times[-1] < self.geom.r_max * (1.0 - 1e-12):
            raise ConfigError(f"Traces end at t={self.times[-1]:.4f}, before r_max={self.geom.r_max}", stage="ivpa")
        if not np.all(np.isfinite(self.values)):
            raise NumericError("Traces hold non-finite values", stage="ivpa")

    @property
    def n_t(self) -> int:
        return self.values.shape[1]

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.n_t)

    def with_values(self, values: np.ndarray, **meta) -> "TransducerTraces":
        merged = dict(self.meta)
        merged.update(meta)
        return TransducerTraces(self.geom, self.dt, values, merged)

    def save(self, stem: str) -> str:
        meta = {"geometry": self.geom.to_dict(), "dt": self.dt, "n_t": self.n_t, **self.meta}
        return save_array(stem, self.values, meta)

    @classmethod
    def load(cls, stem: str) -> "TransducerTraces":
        values, meta = load_array(stem)
        geom = AcquisitionGeometry.from_dict(meta.pop("geometry"))
        dt = float(meta.pop("dt"))
        meta.pop("n_t", None)
        return cls(geom, dt, values, meta)


def _time_grid(r_max: float, dt: float) -> np.ndarray:
    n_t = int(np.ceil(r_max / dt - 1e-9)) + 1
    return dt * np.arange(n_t)


def _forward_values(g: np.ndarray, radii: np.ndarray, times: np.ndarray) -> np.ndarray:
    """u(t_k) for circular integrals g[..., j] on the uniform grid ``radii``."""
    dr = radii[1] - radii[0]
    count = max(int(np.ceil(times[-1] / dr - 1e-9)) + 1, radii.size)
    padded = np.zeros(g.shape[:-1] + (count,))
    padded[..., :radii.size] = g
    grid = dr * np.arange(count)

    A = np.zeros(g.shape[:-1] + (times.size,))
    for k in range(1, times.size):
        A[..., k] = abel_weighted_integral(padded, times[k], t=grid)

    dt = times[1] - times[0]
    u = np.gradient(A, dt, axis=-1, edge_order=2) / (4.0 * np.pi ** 2)
    u[..., 0] = 0.0
    return u


def _printed_inverse(u: np.ndarray, times: np.ndarray, radii: np.ndarray) -> np.ndarray:
    """4 r / (2 pi) * int_0^r u(t) / sqrt(r^2 - t^2) dt at every radius (no calibration)."""
    g = np.zeros(u.shape[:-1] + (radii.size,))
    for j, r in enumerate(radii):
        if r > 0:
            g[..., j] = 4.0 * r / (2.0 * np.pi) * abel_weighted_integral(u, r, t=times)
    return g


@lru_cache(maxsize=1)
def abel_calibration() -> float:
    """
    Constant c making the inverse consistent with the forward map.

    Least-squares fit of c * inverse(forward(g)) = g for a smooth reference
    g on a fine grid; the closed-form pair gives c = 4 pi^2.
    """
    radii = np.linspace(0.0, _CALIBRATION_EXTENT, _CALIBRATION_POINTS)
    reference = radii * np.exp(-((radii - 0.8) / 0.2) ** 2)
    traces = _forward_values(reference, radii, radii)
    recovered = _printed_inverse(traces, radii, radii)

    constant = float(np.dot(recovered, reference) / np.dot(recovered, recovered))
    logger.warning(
        f"Abel inverse rescaled by calibration constant {constant:.6f} "
        f"(4 pi^2 = {4.0 * np.pi ** 2:.6f})"
    )
    return constant


def abel_forward(sino: CircularMeansSinogram, dt: Optional[float] = None) -> TransducerTraces:
    """
    Pressure traces at every transducer from circular integrals.

    Args:
        sino (CircularMeansSinogram): Circular integrals g(z_i, r_j)
        dt (float): Time step (defaults to the radial step; must not exceed it)

    Returns:
        TransducerTraces: u on t_k = k dt covering [0, r_max]

    Raises:
        ConfigError: If dt exceeds the radial step
    """
    geom = sino.geom
    dt = geom.dr if dt is None else dt
    if not 0 < dt <= geom.dr * (1.0 + 1e-12):
        raise ConfigError(f"Time step {dt:g} undersamples the radial step {geom.dr:g}", stage="ivpa")

    times = _time_grid(geom.r_max, dt)
    values = _forward_values(sino.values, geom.radii, times)
    logger.debug(f"Abel forward: {geom.n_phi} traces x {times.size} samples, dt={dt:g}")
    return TransducerTraces(geom, dt, values)


def abel_inverse(traces: TransducerTraces) -> CircularMeansSinogram:
    """Circular integrals on the geometry radii recovered from the traces."""
    geom = traces.geom
    constant = abel_calibration()
    g = constant * _printed_inverse(traces.values, traces.times, geom.radii)
    return CircularMeansSinogram(geom, g, {"abel_calibration": constant})


def ivpa_reconstruct(traces: TransducerTraces, params: Optional[InversionParams] = None,
                     n: int = Config.DEFAULT_IMAGE_N, half_width: Optional[float] = None) -> ImageGrid:
    """Abel inversion of the traces followed by the circular means inversion."""
    sino = abel_inverse(traces)
    image = invert(sino, params, n, half_width)
    return image.with_values(image.values, abel_calibration=sino.meta["abel_calibration"])
