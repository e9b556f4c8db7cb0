"""
Intravascular ultrasound measurement model in the Born approximation.

A transducer fires a pulse and records the scattered field. The time
antiderivative W(s) of the recorded difference trace relates to the
circular averages M(r) of the speed perturbation m about that transducer
through

    W(s) = int_0^inf r M(r) dK/ds(r, s) dr

with the kernel

    4 pi^2 K(r, s) = pi / sqrt(2 r s) - 2 b^2 I(b, c),   s > 2r
    I(b, c) = int_0^{pi/2} phi sin(phi) cos(phi) / (c^2 - b^2 sin^2(phi))^{3/2} dphi
    b = s/2 - r,  c = s/2 + r

and K = 0 for s <= 2r. Splitting off the jump, 4 pi^2 K = pi / (2r) H(s - 2r)
+ K1(r, s), turns the relation into a Volterra equation of the second kind

    W(s) = c_jump M(s/2) + 1 / (4 pi^2) int_0^{s/2} r M(r) dK1/ds(r, s) dr

with c_jump = 1 / (16 pi) obtained by integrating the delta term against
r M(r) dr.
"""
import os
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Any, Dict, Optional, Union

import numpy as np
from loguru import logger
from scipy.linalg import solve_triangular
from scipy.special import roots_legendre

from phantoms.phantom import ImageGrid
from tomography.cmt import AcquisitionGeometry, CircularMeansSinogram, InversionParams, invert
from utils.config import Config
from utils.errors import ConfigError, DomainError, NumericError
from utils.parallel import parallel_map
from utils.storage import grid_hash, load_array, save_array

C_JUMP = 1.0 / (16.0 * np.pi)

# Consecutive growing updates tolerated before the iteration is declared divergent
DIVERGENCE_STREAK = 5


@lru_cache(maxsize=8)
def _angular_quadrature(n_quad: int):
    nodes, weights = roots_legendre(n_quad)
    return 0.25 * np.pi * (nodes + 1.0), 0.25 * np.pi * weights


def _kernel_parts(r: np.ndarray, s: np.ndarray, n_quad: int):
    """4 pi^2 K, K1 and dK1/ds for broadcast arrays r > 0, s."""
    r, s = np.broadcast_arrays(np.asarray(r, dtype=float), np.asarray(s, dtype=float))
    if np.any(r <= 0):
        raise DomainError("Kernel radius must be positive", stage="kernel")

    full = np.zeros(r.shape)
    K1 = np.zeros(r.shape)
    dK1 = np.zeros(r.shape)

    active = s >= 2.0 * r
    if not np.any(active):
        return full, K1, dK1

    ra, sa = r[active], s[active]
    b = 0.5 * sa - ra
    c = 0.5 * sa + ra

    phi, weights = _angular_quadrature(n_quad)
    sin_sq = np.sin(phi) ** 2
    base = phi * np.sin(phi) * np.cos(phi)
    denominator = c[:, None] ** 2 - b[:, None] ** 2 * sin_sq[None, :]
    I = (base / denominator ** 1.5) @ weights
    dI = -1.5 * ((base * (c[:, None] - b[:, None] * sin_sq[None, :])) / denominator ** 2.5) @ weights

    root = np.sqrt(2.0 * ra * sa)
    value = np.pi / root - 2.0 * b ** 2 * I
    jump_open = sa > 2.0 * ra

    full[active] = np.where(jump_open, value, 0.0)
    K1[active] = np.where(jump_open, value - np.pi / (2.0 * ra), 0.0)
    dK1[active] = -np.pi / (2.0 * sa * root) - 2.0 * b * I - 2.0 * b ** 2 * dI
    return full, K1, dK1


def _scalar_or_array(values: np.ndarray):
    if np.ndim(values) == 0:
        return float(values)
    return values


def kernel_K(r, s, n_quad: Optional[int] = None):
    """Kernel K(r, s) (including the 1 / 4 pi^2 factor); 0 for s <= 2r."""
    full, _, _ = _kernel_parts(r, s, n_quad or Config.KERNEL_QUAD_NODES)
    return _scalar_or_array(full / (4.0 * np.pi ** 2))


def kernel_K1(r, s, n_quad: Optional[int] = None):
    """Continuous part K1 = 4 pi^2 K - pi / (2r) for s > 2r, else 0."""
    _, K1, _ = _kernel_parts(r, s, n_quad or Config.KERNEL_QUAD_NODES)
    return _scalar_or_array(K1)


def kernel_K1_ds(r, s, n_quad: Optional[int] = None):
    """
    Derivative of K1 in s, differentiated under the integral sign.

    Continuous at s = 2r with value -pi / (8 r^2); 0 for s < 2r.
    """
    _, _, dK1 = _kernel_parts(r, s, n_quad or Config.KERNEL_QUAD_NODES)
    return _scalar_or_array(dK1)


@dataclass
class KernelTable:
    """Tabulated ``K1[i, j] = K1(r_i, s_j)`` and ``dK1_ds[i, j]``; zero for s_j < 2 r_i."""
    r_grid: np.ndarray
    s_grid: np.ndarray
    K1: np.ndarray
    dK1_ds: np.ndarray
    n_quad: int
    meta: Dict[str, Any] = field(default_factory=dict)


@dataclass
class MeasurementW:
    """Antiderivative of the difference traces, ``values[i, j] = W_i(s_j)``."""
    s_grid: np.ndarray
    values: np.ndarray
    meta: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.s_grid = np.asarray(self.s_grid, dtype=float)
        self.values = np.atleast_2d(np.asarray(self.values, dtype=float))
        if self.values.shape[1] != self.s_grid.size:
            raise ConfigError(
                f"Measurements have {self.values.shape[1]} samples, s grid has {self.s_grid.size}",
                stage="ivus",
            )

    def with_values(self, values: np.ndarray, **meta) -> "MeasurementW":
        merged = dict(self.meta)
        merged.update(meta)
        return MeasurementW(self.s_grid, values, merged)

    def save(self, stem: str) -> str:
        return save_array(stem, self.values, {"s_grid": self.s_grid, **self.meta})

    @classmethod
    def load(cls, stem: str) -> "MeasurementW":
        values, meta = load_array(stem)
        s_grid = np.asarray(meta.pop("s_grid"), dtype=float)
        return cls(s_grid, values, meta)


def _check_uniform(grid: np.ndarray, name: str):
    steps = np.diff(grid)
    if grid.size < 2 or not np.allclose(steps, steps[0], rtol=1e-9, atol=0.0) or steps[0] <= 0:
        raise ConfigError(f"{name} must be uniform and increasing", stage="kernel")


def build_kernel_table(r_grid: np.ndarray, s_grid: np.ndarray, cache_dir: Optional[str] = None,
                       n_quad: Optional[int] = None, n_jobs: Optional[int] = None) -> KernelTable:
    """
    Tabulate K1 and dK1/ds on the given grids.

    Only entries with s_j >= 2 r_i are evaluated; the rest are exact zeros.
    Tables are cached under ``cache_dir`` keyed by a hash of the grids and
    the quadrature order.

    Args:
        r_grid (np.ndarray): Positive uniform radii
        s_grid (np.ndarray): Uniform times
        cache_dir (str): Cache directory (None disables caching)
        n_quad (int): Gauss-Legendre nodes, default Config.KERNEL_QUAD_NODES
        n_jobs (int): Workers over s columns

    Returns:
        KernelTable: Tables of shape (len(r_grid), len(s_grid))
    """
    r_grid = np.asarray(r_grid, dtype=float)
    s_grid = np.asarray(s_grid, dtype=float)
    n_quad = n_quad or Config.KERNEL_QUAD_NODES
    if np.any(r_grid <= 0):
        raise DomainError("Kernel radii must be positive", stage="kernel")
    _check_uniform(r_grid, "r_grid")
    _check_uniform(s_grid, "s_grid")

    key = grid_hash(r_grid, s_grid, extra=f"n_quad={n_quad}")
    stem = os.path.join(cache_dir, f"kernel_{key}") if cache_dir else None
    if stem and os.path.exists(f"{stem}_K1.json") and os.path.exists(f"{stem}_dK1.json"):
        K1, _ = load_array(f"{stem}_K1")
        dK1, _ = load_array(f"{stem}_dK1")
        logger.debug(f"Loaded kernel table {key} from cache")
        return KernelTable(r_grid, s_grid, K1, dK1, n_quad, {"cache_key": key, "cached": True})

    def column(s: float):
        rows = np.nonzero(2.0 * r_grid <= s)[0]
        K1_col = np.zeros(r_grid.size)
        dK1_col = np.zeros(r_grid.size)
        if rows.size:
            _, K1_col[rows], dK1_col[rows] = _kernel_parts(r_grid[rows], np.full(rows.size, s), n_quad)
        return K1_col, dK1_col

    columns = parallel_map(column, s_grid, n_jobs)
    K1 = np.column_stack([col[0] for col in columns])
    dK1 = np.column_stack([col[1] for col in columns])
    if not (np.all(np.isfinite(K1)) and np.all(np.isfinite(dK1))):
        raise NumericError("Kernel table holds non-finite entries", stage="kernel")

    if stem:
        meta = {"r_grid": r_grid, "s_grid": s_grid, "n_quad": n_quad}
        save_array(f"{stem}_K1", K1, meta)
        save_array(f"{stem}_dK1", dK1, meta)
        logger.debug(f"Cached kernel table {key} in {cache_dir}")

    logger.info(f"Built kernel table {r_grid.size}x{s_grid.size} (n_quad={n_quad})")
    return KernelTable(r_grid, s_grid, K1, dK1, n_quad, {"cache_key": key, "cached": False})


@dataclass
class VolterraSystem:
    """
    Discrete Volterra operator on matching grids s_j = 2 r_j.

    ``kernel[j, i] = w_ji r_i dK1/ds(r_i, s_j) / (4 pi^2)`` with trapezoid
    weights on [0, r_j]; the full operator is c_jump * I + kernel, lower
    triangular.
    """
    r_grid: np.ndarray
    s_grid: np.ndarray
    kernel: np.ndarray
    c_jump: float = C_JUMP

    @property
    def matrix(self) -> np.ndarray:
        return self.kernel + self.c_jump * np.eye(self.r_grid.size)

    @classmethod
    def from_table(cls, table: KernelTable) -> "VolterraSystem":
        r_grid, s_grid = table.r_grid, table.s_grid
        if r_grid.size != s_grid.size or not np.allclose(s_grid, 2.0 * r_grid, rtol=1e-12, atol=0.0):
            raise ConfigError("Volterra system needs s_grid = 2 r_grid", stage="volterra")
        step = r_grid[1] - r_grid[0]
        if not np.isclose(r_grid[0], step, rtol=1e-9):
            raise ConfigError("Volterra radii must start at the first step away from 0", stage="volterra")

        n = r_grid.size
        weights = np.tril(np.full((n, n), step))
        np.fill_diagonal(weights, 0.5 * step)
        kernel = weights * r_grid[None, :] * table.dK1_ds.T / (4.0 * np.pi ** 2)
        return cls(r_grid, s_grid, kernel)


def _as_system(operator: Union[KernelTable, VolterraSystem]) -> VolterraSystem:
    if isinstance(operator, VolterraSystem):
        return operator
    return VolterraSystem.from_table(operator)


def volterra_forward(M: np.ndarray, table: Union[KernelTable, VolterraSystem]) -> MeasurementW:
    """
    Born measurements W(s_j) for circular averages M(r_i).

    Args:
        M (np.ndarray): Averages on r_grid, one row per transducer
        table (KernelTable or VolterraSystem): Operator on matching grids

    Returns:
        MeasurementW: W on s_grid with c_jump in the metadata
    """
    system = _as_system(table)
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.shape[1] != system.r_grid.size:
        raise ConfigError(f"Profile has {M.shape[1]} samples, table has {system.r_grid.size}", stage="volterra")
    values = system.c_jump * M + M @ system.kernel.T
    return MeasurementW(system.s_grid, values, {"c_jump": system.c_jump})


def _check_measurements(W: MeasurementW, system: VolterraSystem):
    if W.s_grid.size != system.s_grid.size or not np.allclose(W.s_grid, system.s_grid, rtol=1e-9, atol=0.0):
        raise ConfigError("Measurements are not on the table's s grid; resample first", stage="volterra")


def solve_volterra_iter(W: MeasurementW, table: Union[KernelTable, VolterraSystem],
                        max_iter: int = 200, tol: float = 1e-10) -> np.ndarray:
    """
    Successive approximations M_{k+1} = (W - kernel M_k) / c_jump from M_0 = 0.

    Raises:
        NumericError: If the update grows for DIVERGENCE_STREAK consecutive steps
    """
    system = _as_system(table)
    _check_measurements(W, system)

    data = W.values
    current = np.zeros_like(data)
    previous_step = np.inf
    streak = 0
    tiny = np.finfo(float).tiny

    for iteration in range(1, max_iter + 1):
        update = (data - current @ system.kernel.T) / system.c_jump
        step = np.linalg.norm(update - current)
        change = step / max(np.linalg.norm(update), tiny)
        current = update
        if change < tol:
            logger.debug(f"Successive approximations converged after {iteration} iterations")
            return current
        # growth is judged on the absolute step; the relative change saturates under divergence
        streak = streak + 1 if step > previous_step else 0
        if streak >= DIVERGENCE_STREAK:
            raise NumericError(
                f"Successive approximations diverge (step {step:.3e} at iteration {iteration})",
                stage="volterra",
            )
        previous_step = step

    logger.warning(f"Successive approximations stopped at max_iter={max_iter}, last change {change:.3e}")
    return current


def solve_volterra_triangular(W: MeasurementW, table: Union[KernelTable, VolterraSystem]) -> np.ndarray:
    """Forward substitution with the discrete lower-triangular operator."""
    system = _as_system(table)
    _check_measurements(W, system)
    return solve_triangular(system.matrix, W.values.T, lower=True).T


def volterra_grids(geom: AcquisitionGeometry):
    """Radii without r = 0 and the matching times s = 2 r."""
    r_grid = geom.radii[1:]
    return r_grid, 2.0 * r_grid


def circular_averages(sino: CircularMeansSinogram) -> np.ndarray:
    """M(r) = g(z, r) / r on the radii without r = 0."""
    return sino.values[:, 1:] / sino.geom.radii[1:]


def synthesize_measurements(sino: CircularMeansSinogram, table: Optional[KernelTable] = None,
                            cache_dir: Optional[str] = None) -> MeasurementW:
    """Born measurements at every transducer from circular integrals of m."""
    if table is None:
        table = build_kernel_table(*volterra_grids(sino.geom), cache_dir=cache_dir)
    W = volterra_forward(circular_averages(sino), table)
    return W.with_values(W.values, source="born")


def resample_measurements(W: MeasurementW, s_grid: np.ndarray) -> MeasurementW:
    """Linear resampling onto a new s grid; 0 before the first sample, held after the last."""
    s_grid = np.asarray(s_grid, dtype=float)
    values = np.vstack([
        np.interp(s_grid, W.s_grid, row, left=0.0, right=row[-1]) for row in W.values
    ])
    return MeasurementW(s_grid, values, dict(W.meta))


def ivus_reconstruct(W: MeasurementW, geom: AcquisitionGeometry, params: Optional[InversionParams] = None,
                     table: Optional[KernelTable] = None, solver: str = "triangular",
                     n: int = Config.DEFAULT_IMAGE_N, half_width: Optional[float] = None,
                     cache_dir: Optional[str] = None) -> ImageGrid:
    """
    Reconstruct the speed perturbation m from per-transducer measurements.

    Each transducer's Volterra equation is solved for M(r); the circular
    integrals g = r M feed the circular means inversion.

    Args:
        W (MeasurementW): One row per transducer on s = 2 r_grid
        geom (AcquisitionGeometry): Acquisition geometry
        params (InversionParams): Contour settings
        table (KernelTable): Precomputed kernels (built if None)
        solver (str): "triangular" or "iterative"
        n (int): Output pixels per side
        half_width (float): Output half width
        cache_dir (str): Kernel cache directory

    Returns:
        ImageGrid: Reconstructed m
    """
    r_grid, s_grid = volterra_grids(geom)
    if W.values.shape[0] != geom.n_phi:
        raise ConfigError(f"Got {W.values.shape[0]} measurement rows for {geom.n_phi} transducers", stage="ivus")
    if table is None:
        table = build_kernel_table(r_grid, s_grid, cache_dir=cache_dir)

    system = VolterraSystem.from_table(table)
    if solver == "triangular":
        M = solve_volterra_triangular(W, system)
    elif solver == "iterative":
        M = solve_volterra_iter(W, system)
    else:
        raise ConfigError(f"Unknown Volterra solver {solver!r}", stage="ivus")

    g = np.zeros((geom.n_phi, geom.n_r))
    g[:, 1:] = r_grid * M
    sino = CircularMeansSinogram(geom, g, {"c_jump": system.c_jump, "solver": solver})
    image = invert(sino, params, n, half_width)
    return image.with_values(image.values, c_jump=system.c_jump, solver=solver)
