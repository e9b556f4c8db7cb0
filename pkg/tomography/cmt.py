"""
Circular means transform and its inversion on a deformed Hankel contour.

Transducers sit on the circle of radius R0 about the origin; the image is
supported in the disk of radius R1 > R0. For every transducer z the data
are the circular integrals g(z, r) = r * integral of f(z + r y) over the
unit circle, r in [0, R0 + R1].

Inversion pipeline:
1. Hankel transform in r:   g_hat(z, lam) = int J0(lam r) g(z, r) dr
2. Angular Fourier series:  g_hat(z(phi), lam) = sum_l g_l(lam) exp(i l phi)
3. Spectral division:       F_l(lam) = g_l(lam) / (2 pi J_|l|(lam R0))
   restricted to the cone |l| < R0 Re(lam); F_l is zero outside
4. Contour inversion:       f_l(r) = int F_l(lam) w(lam) J_|l|(lam r) lam dlam
5. Image assembly:          f(r, theta) = sum_l f_l(r) exp(i l theta)

The contour C = [0, ia] U [ia, ia + M] avoids the real zeros of J_|l|.
Order l leaves the real axis at the point x_l where it enters the cone,
runs up to x_l + ia and continues along the horizontal segment; w is an
entire Gaussian taper. Both choices keep the result independent of a.
"""
import time
from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Sequence

import numpy as np
from loguru import logger
from scipy.ndimage import map_coordinates

from numerics.specfun import ContourC, bessel_j, bessel_zeros, build_contour, contour_integrate, gaussian_taper
from phantoms.phantom import ImageGrid
from utils.config import Config
from utils.errors import ConfigError, NumericError
from utils.parallel import parallel_map
from utils.storage import load_array, save_array

IMAG_WARNING_RATIO = 0.1


@dataclass(frozen=True)
class AcquisitionGeometry:
    """
    Transducer circle and sampling of the circular means.

    Attributes:
        R0 (float): Radius of the transducer circle
        R1 (float): Radius of the support disk (R1 > R0)
        n_phi (int): Number of transducers (power of two)
        n_r (int): Number of circle radii, uniform on [0, R0 + R1]
    """
    R0: float = Config.DEFAULT_R0
    R1: float = Config.DEFAULT_R1
    n_phi: int = Config.DEFAULT_N_PHI
    n_r: int = Config.DEFAULT_N_R

    def __post_init__(self):
        if not 0 < self.R0 < self.R1:
            raise ConfigError(f"Geometry needs 0 < R0 < R1, got R0={self.R0}, R1={self.R1}", stage="geometry")
        if self.n_phi < 2 or self.n_phi & (self.n_phi - 1):
            raise ConfigError(f"n_phi must be a power of two, got {self.n_phi}", stage="geometry")
        if self.n_r < 8:
            raise ConfigError(f"n_r must be at least 8, got {self.n_r}", stage="geometry")

    @property
    def r_max(self) -> float:
        return self.R0 + self.R1

    @property
    def radii(self) -> np.ndarray:
        return np.linspace(0.0, self.r_max, self.n_r)

    @property
    def dr(self) -> float:
        return self.r_max / (self.n_r - 1)

    @property
    def angles(self) -> np.ndarray:
        return 2.0 * np.pi * np.arange(self.n_phi) / self.n_phi

    @property
    def transducers(self) -> np.ndarray:
        """Transducer positions, shape (n_phi, 2)."""
        return self.R0 * np.column_stack([np.cos(self.angles), np.sin(self.angles)])

    def to_dict(self) -> Dict[str, Any]:
        return {"R0": self.R0, "R1": self.R1, "n_phi": self.n_phi, "n_r": self.n_r}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "AcquisitionGeometry":
        return cls(float(data["R0"]), float(data["R1"]), int(data["n_phi"]), int(data["n_r"]))

    @classmethod
    def from_preset(cls, name: str) -> "AcquisitionGeometry":
        preset = Config.get_geometry_preset(name)
        if preset is None:
            raise ConfigError(
                f"Unknown geometry preset {name!r}; available: {sorted(Config.GEOMETRY_PRESETS)}",
                stage="geometry",
            )
        return cls(preset["R0"], preset["R1"], preset["n_phi"], preset["n_r"])


@dataclass
class CircularMeansSinogram:
    """Circular integrals ``values[i, j] = g(z_i, r_j)``."""
    geom: AcquisitionGeometry
    values: np.ndarray
    meta: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        expected = (self.geom.n_phi, self.geom.n_r)
        if self.values.shape != expected:
            raise ConfigError(f"Sinogram shape {self.values.shape} does not match geometry {expected}", stage="sinogram")
        if not np.all(np.isfinite(self.values)):
            raise NumericError("Sinogram holds non-finite values", stage="sinogram")

    def with_values(self, values: np.ndarray, **meta) -> "CircularMeansSinogram":
        merged = dict(self.meta)
        merged.update(meta)
        return CircularMeansSinogram(self.geom, values, merged)

    def save(self, stem: str) -> str:
        return save_array(stem, self.values, {"geometry": self.geom.to_dict(), **self.meta})

    @classmethod
    def load(cls, stem: str) -> "CircularMeansSinogram":
        values, meta = load_array(stem)
        if "geometry" not in meta:
            raise ConfigError(f"Sidecar of {stem} lacks the acquisition geometry", stage="storage")
        geom = AcquisitionGeometry.from_dict(meta.pop("geometry"))
        return cls(geom, values, meta)


@dataclass
class ConeEntries:
    """
    Coefficients on the vertical pieces [x_l, x_l + ia].

    x_l is the real part of the first horizontal node inside the cone for
    order |l|; the piece shares the heights and weights of [0, ia].

    Attributes:
        start (np.ndarray): Horizontal node index of x_l for |l| = 0..l_max,
            n_seg2 when the order never enters the cone
        coeffs (np.ndarray): ``coeffs[l + l_max, k]`` at x_l + i y_k
    """
    start: np.ndarray
    coeffs: np.ndarray

    def enters(self, order: int, contour: ContourC) -> bool:
        return int(self.start[abs(order)]) <= contour.n_seg2 - 2


@dataclass
class SpectralCoefficients:
    """Angular Fourier coefficients on the contour, ``coeffs[l + l_max, j]``."""
    contour: ContourC
    l_max: int
    coeffs: np.ndarray
    meta: Dict[str, Any] = field(default_factory=dict)
    entries: Optional[ConeEntries] = None

    @property
    def orders(self) -> np.ndarray:
        return np.arange(-self.l_max, self.l_max + 1)

    def mode(self, l: int) -> np.ndarray:
        if abs(l) > self.l_max:
            raise ConfigError(f"Mode {l} outside [-{self.l_max}, {self.l_max}]", stage="spectral")
        return self.coeffs[l + self.l_max]

    def save(self, stem: str) -> str:
        meta = {"l_max": self.l_max, "contour": self.contour.params(), **self.meta}
        return save_array(stem, self.coeffs, meta)

    @classmethod
    def load(cls, stem: str) -> "SpectralCoefficients":
        coeffs, meta = load_array(stem)
        params = meta.pop("contour")
        contour = build_contour(params["a"], params["M"], params["n_seg1"], params["n_seg2"])
        return cls(contour, int(meta.pop("l_max")), coeffs, meta)


@dataclass
class RadialModes:
    """Angular modes f_l(r) of the image, ``values[l + l_max, i]`` on ``radii``."""
    radii: np.ndarray
    l_max: int
    values: np.ndarray
    meta: Dict[str, Any] = field(default_factory=dict)

    def mode(self, l: int) -> np.ndarray:
        return self.values[l + self.l_max]


@dataclass
class InversionParams:
    """
    Contour and regularization settings for ``invert``.

    Attributes:
        a (float): Imaginary shift of the contour
        M (float): Real extent of the contour
        n_lambda (int): Nodes on the horizontal segment
        n_vertical (int): Nodes on the vertical segment
        margin (float): Cone margin; modes kept when |l| < R0 Re(lam) (1 - margin)
        n_jobs (int): Workers for the per-mode inversion (None uses Config.N_JOBS)
        bandwidth (float): Width of the Gaussian spectral taper, None for no taper
    """
    a: float
    M: float
    n_lambda: int
    n_vertical: int = 8
    margin: float = 0.0
    n_jobs: Optional[int] = None
    bandwidth: Optional[float] = None

    def __post_init__(self):
        if not 0.0 <= self.margin < 1.0:
            raise ConfigError(f"Cone margin must lie in [0, 1), got {self.margin}", stage="params")
        if self.bandwidth is not None and not self.bandwidth > 0:
            raise ConfigError(f"Taper bandwidth must be positive, got {self.bandwidth}", stage="params")

    @classmethod
    def defaults_for(cls, geom: AcquisitionGeometry, **overrides) -> "InversionParams":
        """
        a = 1/R1, M = pi n_r / r_max, n_lambda = 2 n_r, 8 vertical nodes, no
        margin and the taper width of ``default_bandwidth``. Overrides set to
        None keep the default.
        """
        values = {
            "a": 1.0 / geom.R1,
            "M": np.pi * geom.n_r / geom.r_max,
            "n_lambda": 2 * geom.n_r,
            "n_vertical": 8,
            "margin": 0.0,
            "n_jobs": None,
            "bandwidth": default_bandwidth(geom),
        }
        values.update({key: value for key, value in overrides.items() if value is not None})
        return cls(**values)

    def build_contour(self) -> ContourC:
        return build_contour(self.a, self.M, self.n_vertical, self.n_lambda)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "a": self.a,
            "M": self.M,
            "n_lambda": self.n_lambda,
            "n_vertical": self.n_vertical,
            "margin": self.margin,
            "bandwidth": self.bandwidth,
        }


def default_bandwidth(geom: AcquisitionGeometry) -> float:
    """Taper width TAPER_SCALE (n_phi / dr)^(1/3), at most pi / (2 dr)."""
    scaled = Config.TAPER_SCALE * (geom.n_phi / geom.dr) ** (1.0 / 3.0)
    return float(min(scaled, 0.5 * np.pi / geom.dr))


def forward_cmt(f: ImageGrid, geom: AcquisitionGeometry, n_arc: Optional[int] = None,
                matched: bool = False, n_jobs: Optional[int] = None) -> CircularMeansSinogram:
    """
    Compute circular integrals of an image.

    Each circle integral uses an n_arc-point trapezoid rule in the arc angle
    with bilinear sampling of f (zero outside the image).

    Args:
        f (ImageGrid): Image supported in the disk of radius R1
        geom (AcquisitionGeometry): Transducers and radii
        n_arc (int): Points per circle, default 4 * n_phi
        matched (bool): Use n_arc = n_phi (same angular density as the data)
        n_jobs (int): Workers over transducers

    Returns:
        CircularMeansSinogram: g[i, j] = r_j * sum_k f(z_i + r_j y_k) * 2 pi / n_arc
    """
    if n_arc is None:
        n_arc = geom.n_phi if matched else 4 * geom.n_phi
    if n_arc < 16:
        raise ConfigError(f"n_arc must be at least 16, got {n_arc}", stage="forward")

    psi = 2.0 * np.pi * np.arange(n_arc) / n_arc
    radii = geom.radii
    circle_x = radii[:, None] * np.cos(psi)[None, :]
    circle_y = radii[:, None] * np.sin(psi)[None, :]
    scale = 1.0 / f.pixel_size

    def transducer_row(position: np.ndarray) -> np.ndarray:
        ix = (position[0] + circle_x + f.half_width) * scale - 0.5
        iy = (position[1] + circle_y + f.half_width) * scale - 0.5
        samples = map_coordinates(f.values, [iy, ix], order=1, mode="constant", cval=0.0)
        return radii * samples.sum(axis=1) * (2.0 * np.pi / n_arc)

    rows = parallel_map(transducer_row, list(geom.transducers), n_jobs)
    logger.debug(f"Forward CMT: {geom.n_phi} transducers x {geom.n_r} radii, n_arc={n_arc}")
    return CircularMeansSinogram(geom, np.vstack(rows), {"n_arc": n_arc})


def _radial_weights(geom: AcquisitionGeometry) -> np.ndarray:
    weights = np.full(geom.n_r, geom.dr)
    weights[0] = weights[-1] = 0.5 * geom.dr
    return weights


def hankel_transform(sino: CircularMeansSinogram, lambdas: np.ndarray) -> np.ndarray:
    """Trapezoid quadrature of J0(lam r) g(z_i, r) dr at arbitrary lam; shape (n_phi, len(lambdas))."""
    lambdas = np.atleast_1d(np.asarray(lambdas, dtype=complex))
    geom = sino.geom
    basis = bessel_j(0, np.outer(lambdas, geom.radii)) * _radial_weights(geom)[None, :]
    return sino.values @ basis.T


def hankel_data(sino: CircularMeansSinogram, contour: ContourC) -> np.ndarray:
    """Hankel transform of the data at the contour nodes."""
    return hankel_transform(sino, contour.nodes)


def cone_entry(contour: ContourC, l_max: int, R0: float, margin: float = 0.0) -> np.ndarray:
    """
    Index of the first horizontal node inside the cone for |l| = 0..l_max.

    Order 0 enters at node 0. Orders the horizontal segment never admits
    get ``contour.n_seg2``.
    """
    real_part = contour.nodes[contour.n_seg1:].real
    inside = np.arange(l_max + 1)[:, None] < R0 * real_part[None, :] * (1.0 - margin)
    inside[0] = True
    return np.where(inside.any(axis=1), inside.argmax(axis=1), contour.n_seg2)


def cone_entry_data(sino: CircularMeansSinogram, contour: ContourC,
                    margin: float = 0.0) -> ConeEntries:
    """Angular Fourier coefficients of the Hankel data on every order's entry piece."""
    geom = sino.geom
    n_phi = geom.n_phi
    l_max = n_phi // 2 - 1
    start = cone_entry(contour, l_max, geom.R0, margin)
    coeffs = np.zeros((2 * l_max + 1, contour.n_seg1), dtype=complex)

    entering = np.unique(start[start <= contour.n_seg2 - 2])
    if entering.size == 0:
        return ConeEntries(start, coeffs)

    offsets = contour.nodes[contour.n_seg1 + entering].real
    nodes = (offsets[:, None] + contour.nodes[None, :contour.n_seg1]).ravel()
    spectrum = np.fft.fft(hankel_transform(sino, nodes), axis=0) / n_phi
    spectrum = spectrum.reshape(n_phi, entering.size, contour.n_seg1)

    block = np.searchsorted(entering, start)
    for order in range(l_max + 1):
        if start[order] > contour.n_seg2 - 2:
            continue
        coeffs[l_max + order] = spectrum[order % n_phi, block[order]]
        coeffs[l_max - order] = spectrum[-order % n_phi, block[order]]

    logger.debug(f"Cone entry pieces: {entering.size} distinct starts, {nodes.size} extra nodes")
    return ConeEntries(start, coeffs)


def angular_fourier(ghat: np.ndarray, contour: ContourC,
                    entries: Optional[ConeEntries] = None) -> SpectralCoefficients:
    """
    Angular Fourier coefficients of g_hat over the transducer angle.

    Modes l = -l_max..l_max with l_max = n_phi / 2 - 1, normalized so that
    g_hat(phi_i) = sum_l coeffs[l] exp(i l phi_i). Entry-piece coefficients
    from ``cone_entry_data`` travel along unchanged.
    """
    ghat = np.asarray(ghat, dtype=complex)
    n_phi = ghat.shape[0]
    if ghat.shape[1] != contour.size:
        raise ConfigError(
            f"Data has {ghat.shape[1]} contour samples, contour has {contour.size}", stage="fourier"
        )
    l_max = n_phi // 2 - 1
    spectrum = np.fft.fft(ghat, axis=0) / n_phi
    orders = np.arange(-l_max, l_max + 1)
    return SpectralCoefficients(contour, l_max, spectrum[orders % n_phi], entries=entries)


def cone_mask(spec: SpectralCoefficients, R0: float, margin: float = 0.0) -> np.ndarray:
    """Entries (l, j) kept by the cone: l = 0, or |l| < R0 Re(lam_j) (1 - margin)."""
    orders = np.abs(spec.orders)[:, None]
    real_part = spec.contour.nodes.real[None, :]
    return (orders == 0) | (orders < R0 * real_part * (1.0 - margin))


def spectral_divide_regularize(spec: SpectralCoefficients, geom: AcquisitionGeometry,
                               margin: float = 0.0) -> SpectralCoefficients:
    """
    F_l(lam) = g_l(lam) / (2 pi J_|l|(lam R0)) inside the cone, exactly 0 outside.

    Entry pieces, when present, are divided the same way.

    Raises:
        NumericError: If |J_|l|(lam R0)| falls below Config.BESSEL_FLOOR on a kept entry
    """
    contour = spec.contour
    keep = cone_mask(spec, geom.R0, margin)
    rows, cols = np.nonzero(keep)
    orders = np.abs(spec.orders[rows])
    denominators = bessel_j(orders, contour.nodes[cols] * geom.R0)
    smallest = np.min(np.abs(denominators)) if denominators.size else np.inf

    entries = None
    if spec.entries is not None:
        divided = np.zeros_like(spec.entries.coeffs, dtype=complex)
        vertical = contour.nodes[:contour.n_seg1]
        for order in range(spec.l_max + 1):
            if not spec.entries.enters(order, contour):
                continue
            offset = contour.nodes[contour.n_seg1 + spec.entries.start[order]].real
            piece = 2.0 * np.pi * bessel_j(order, (offset + vertical) * geom.R0)
            smallest = min(smallest, float(np.min(np.abs(piece))) / (2.0 * np.pi))
            for row in {spec.l_max + order, spec.l_max - order}:
                divided[row] = spec.entries.coeffs[row] / piece
        entries = ConeEntries(spec.entries.start, divided)

    if smallest < Config.BESSEL_FLOOR:
        raise NumericError(
            f"|J_l(lam R0)| = {smallest:.3e} below floor {Config.BESSEL_FLOOR:g} inside the cone; "
            "check the contour shift a",
            stage="divide",
        )

    ratio = np.zeros_like(spec.coeffs, dtype=complex)
    ratio[rows, cols] = spec.coeffs[rows, cols] / (2.0 * np.pi * denominators)
    logger.debug(f"Cone keeps {keep.sum()} of {keep.size} spectral entries (margin={margin})")
    return SpectralCoefficients(
        contour, spec.l_max, ratio, {"margin": margin, "kept": int(keep.sum())}, entries=entries
    )


def cone_energy(spec: SpectralCoefficients, R0: float, margin: float = 0.0) -> float:
    """Energy of the coefficients outside the cone (0 after regularization)."""
    outside = ~cone_mask(spec, R0, margin)
    return float(np.sum(np.abs(spec.coeffs[outside]) ** 2))


def inverse_contour(F: SpectralCoefficients, geom: AcquisitionGeometry,
                    n_jobs: Optional[int] = None, bandwidth: Optional[float] = None) -> RadialModes:
    """
    f_l(r) = int F_l(lam) w(lam) J_|l|(lam r) lam dlam on radii uniform in [0, R1].

    Without entry pieces the path is the contour C. With them, order l runs
    along ``F.contour.entering_at(start_l)``; orders that never enter the
    cone are 0. w is the Gaussian taper of width ``bandwidth`` (1 for None).
    Modes l and -l share one Bessel matrix.
    """
    contour = F.contour
    entries = F.entries
    n_out = int(np.floor(geom.R1 / geom.dr + 1e-9)) + 1
    radii = geom.dr * np.arange(n_out)

    def invert_order(order: int):
        rows = [order + F.l_max] if order == 0 else [order + F.l_max, -order + F.l_max]
        empty = np.zeros((len(rows), n_out), dtype=complex)
        if entries is None:
            path, values = contour, F.coeffs[rows]
        elif entries.enters(order, contour):
            start = int(entries.start[order])
            path = contour.entering_at(start)
            values = np.concatenate([entries.coeffs[rows], F.coeffs[rows][:, contour.n_seg1 + start:]], axis=1)
        else:
            return order, empty

        active = np.any(values != 0, axis=0)
        if not np.any(active):
            return order, empty
        lam = path.nodes[active]
        kernel = np.zeros((n_out, path.size), dtype=complex)
        kernel[:, active] = bessel_j(order, np.outer(radii, lam)) * (lam * gaussian_taper(lam, bandwidth))[None, :]
        return order, contour_integrate(path, values[:, None, :] * kernel[None, :, :])

    values = np.zeros((2 * F.l_max + 1, n_out), dtype=complex)
    for order, result in parallel_map(invert_order, range(F.l_max + 1), n_jobs):
        values[order + F.l_max] = result[0]
        if order:
            values[-order + F.l_max] = result[1]

    logger.debug(f"Contour inversion: {2 * F.l_max + 1} modes on {n_out} radii")
    return RadialModes(radii, F.l_max, values, {"contour": contour.params(), "bandwidth": bandwidth})


def assemble_image(modes: RadialModes, n: int, half_width: float) -> ImageGrid:
    """
    Sum f_l(r) exp(i l theta) at every pixel.

    Radial values are linearly interpolated; pixels beyond the last radius
    are 0. The ratio ||Im|| / ||Re|| is reported in ``meta["imag_ratio"]``
    and flagged when it exceeds 10%.
    """
    grid = ImageGrid.zeros(n, half_width)
    X, Y = grid.mesh()
    radius = np.hypot(X, Y)
    angle = np.arctan2(Y, X)
    inside = radius <= modes.radii[-1]

    r_in = radius[inside]
    phase = np.exp(1j * angle[inside])
    total = np.zeros(r_in.shape, dtype=complex)
    rotation = np.exp(-1j * modes.l_max * angle[inside])
    for index in range(modes.values.shape[0]):
        profile = modes.values[index]
        sampled = np.interp(r_in, modes.radii, profile.real) + 1j * np.interp(r_in, modes.radii, profile.imag)
        total += sampled * rotation
        rotation = rotation * phase

    real = np.zeros((n, n))
    imag = np.zeros((n, n))
    real[inside] = total.real
    imag[inside] = total.imag

    real_norm = np.linalg.norm(real)
    ratio = float(np.linalg.norm(imag) / real_norm) if real_norm > 0 else 0.0
    warning = ratio > IMAG_WARNING_RATIO
    if warning:
        logger.warning(f"Imaginary residue {ratio:.1%} of the real part exceeds {IMAG_WARNING_RATIO:.0%}")
    return grid.with_values(real, imag_ratio=ratio, imag_warning=bool(warning))


def zero_consistency(sino: CircularMeansSinogram, orders: Sequence[int] = (0, 1, 2, 3),
                     count: int = 4) -> float:
    """
    Range check on the data: g_l vanishes at lam = j_{l,k} / R0 for exact data.

    Returns the largest |g_l| at the first ``count`` zeros of J_l divided by
    the largest |g_l| at the midpoints between consecutive zeros, over all
    ``orders``. Values near 0 indicate consistent circular means.
    """
    geom = sino.geom
    at_zeros, between = [], []
    for order in orders:
        zeros = bessel_zeros(order, count + 1) / geom.R0
        midpoints = 0.5 * (zeros[:-1] + zeros[1:])
        lambdas = np.concatenate([zeros[:count], midpoints])
        spectrum = np.fft.fft(hankel_transform(sino, lambdas), axis=0) / geom.n_phi
        row = np.abs(spectrum[order % geom.n_phi])
        at_zeros.append(row[:count].max())
        between.append(row[count:].max())

    scale = max(between)
    residual = float(max(at_zeros) / scale) if scale > 0 else 0.0
    logger.debug(f"Zero consistency residual {residual:.2e} over orders {list(orders)}")
    return residual


def invert(sino: CircularMeansSinogram, params: Optional[InversionParams] = None,
           n: int = Config.DEFAULT_IMAGE_N, half_width: Optional[float] = None) -> ImageGrid:
    """
    Reconstruct an image from circular integrals.

    Args:
        sino (CircularMeansSinogram): Data on the geometry's transducers and radii
        params (InversionParams): Contour, cone and taper settings, defaults for the geometry
        n (int): Output pixels per side
        half_width (float): Output half width, defaults to R1

    Returns:
        ImageGrid: Reconstruction with contour, cone, residue and data
            consistency metadata
    """
    geom = sino.geom
    params = params or InversionParams.defaults_for(geom)
    half_width = geom.R1 if half_width is None else half_width
    timings: Dict[str, float] = {}

    start = time.perf_counter()
    contour = params.build_contour()
    ghat = hankel_data(sino, contour)
    entries = cone_entry_data(sino, contour, params.margin)
    timings["hankel"] = 1000.0 * (time.perf_counter() - start)

    start = time.perf_counter()
    spectrum = angular_fourier(ghat, contour, entries)
    ratio = spectral_divide_regularize(spectrum, geom, params.margin)
    timings["divide"] = 1000.0 * (time.perf_counter() - start)

    start = time.perf_counter()
    modes = inverse_contour(ratio, geom, params.n_jobs, params.bandwidth)
    timings["contour"] = 1000.0 * (time.perf_counter() - start)

    start = time.perf_counter()
    image = assemble_image(modes, n, half_width)
    timings["assemble"] = 1000.0 * (time.perf_counter() - start)

    residual = zero_consistency(sino)
    logger.debug("Inversion stages: " + ", ".join(f"{key} {value:.0f} ms" for key, value in timings.items()))
    logger.info(
        f"Inverted {geom.n_phi}x{geom.n_r} sinogram onto {n}x{n} grid "
        f"({sum(timings.values()):.0f} ms, imag ratio {image.meta['imag_ratio']:.2e}, "
        f"zero residual {residual:.2e})"
    )
    return image.with_values(
        image.values,
        params=params.to_dict(),
        kept_entries=ratio.meta["kept"],
        zero_residual=residual,
    )
