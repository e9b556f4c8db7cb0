"""
Phantom generation, polar resampling, noise and image comparison.

Phantoms are sums of smooth disks and annuli on a square pixel grid. Each
feature edge is a cosine ramp sigma(t) = (1 - cos(pi t)) / 2 on [0, 1], so
phantoms are continuously differentiable and vanish outside the support
radius R1.
"""
import json
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger
from scipy.ndimage import map_coordinates

from utils.config import Config
from utils.errors import ConfigError, MetricError, PhantomError

PRESETS_PATH = os.path.join(os.path.dirname(__file__), "presets.json")

FEATURE_KINDS = ("disk", "annulus")


@dataclass
class ImageGrid:
    """
    Square image on [-half_width, half_width]^2.

    ``values[iy, ix]`` is the pixel centred at
    (x_ix, y_iy) with x_i = -half_width + (i + 1/2) * 2 * half_width / n.
    """
    n: int
    half_width: float
    values: np.ndarray
    meta: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.n, self.n):
            raise ConfigError(
                f"Image values have shape {self.values.shape}, expected ({self.n}, {self.n})",
                stage="phantom",
            )

    @property
    def pixel_size(self) -> float:
        return 2.0 * self.half_width / self.n

    @property
    def coords(self) -> np.ndarray:
        """Pixel-centre coordinates along either axis."""
        return -self.half_width + (np.arange(self.n) + 0.5) * self.pixel_size

    def mesh(self) -> Tuple[np.ndarray, np.ndarray]:
        """Coordinate arrays X, Y with X[iy, ix] = x_ix and Y[iy, ix] = y_iy."""
        return np.meshgrid(self.coords, self.coords)

    def with_values(self, values: np.ndarray, **meta) -> "ImageGrid":
        merged = dict(self.meta)
        merged.update(meta)
        return ImageGrid(self.n, self.half_width, values, merged)

    @classmethod
    def zeros(cls, n: int, half_width: float) -> "ImageGrid":
        return cls(n, half_width, np.zeros((n, n)))


@dataclass(frozen=True)
class Feature:
    """One smooth phantom feature (disk or annulus)."""
    kind: str
    center: Tuple[float, float]
    radius: float
    amplitude: float
    smoothing_width: float
    thickness: float = 0.0

    @property
    def extent(self) -> float:
        """Largest distance from the origin reached by the feature."""
        outer = self.radius + (self.thickness if self.kind == "annulus" else 0.0)
        return float(np.hypot(*self.center)) + outer

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Feature":
        return cls(
            kind=data["kind"],
            center=tuple(data.get("center", (0.0, 0.0))),
            radius=float(data["radius"]),
            amplitude=float(data.get("amplitude", 1.0)),
            smoothing_width=float(data.get("smoothing_width", 0.05)),
            thickness=float(data.get("thickness", 0.0)),
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "kind": self.kind,
            "center": list(self.center),
            "radius": self.radius,
            "amplitude": self.amplitude,
            "smoothing_width": self.smoothing_width,
            "thickness": self.thickness,
        }


@dataclass
class PhantomSpec:
    """Feature list plus the support radius R1 every feature must stay inside."""
    features: List[Feature] = field(default_factory=list)
    support_radius: float = Config.DEFAULT_R1

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "PhantomSpec":
        return cls(
            features=[Feature.from_dict(item) for item in data.get("features", [])],
            support_radius=float(data.get("support_radius", Config.DEFAULT_R1)),
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "support_radius": self.support_radius,
            "features": [feature.to_dict() for feature in self.features],
        }


@dataclass(frozen=True)
class Metrics:
    """Comparison of a reconstruction against its phantom."""
    rel_l2: float
    linf: float
    ncc: float

    def to_dict(self) -> Dict[str, float]:
        return {"rel_l2": self.rel_l2, "linf": self.linf, "ncc": self.ncc}


@dataclass
class PolarSamples:
    """Samples ``values[i_r, j_theta]`` of an image on a polar grid."""
    radii: np.ndarray
    thetas: np.ndarray
    values: np.ndarray


def smooth_ramp(t: np.ndarray) -> np.ndarray:
    """Cosine ramp: 0 for t <= 0, 1 for t >= 1, (1 - cos(pi t)) / 2 between."""
    return 0.5 * (1.0 - np.cos(np.pi * np.clip(t, 0.0, 1.0)))


def _validate_feature(feature: Feature, support_radius: float):
    if feature.kind not in FEATURE_KINDS:
        raise PhantomError(f"Unknown feature kind {feature.kind!r}", stage="phantom")
    if not feature.smoothing_width > 0:
        raise PhantomError(
            f"Smoothing width must be positive, got {feature.smoothing_width}", stage="phantom"
        )
    if feature.radius < 0 or feature.thickness < 0:
        raise PhantomError("Feature radius and thickness must be nonnegative", stage="phantom")
    if feature.kind == "annulus" and not feature.thickness > 0:
        raise PhantomError("Annulus needs a positive thickness", stage="phantom")
    if feature.extent >= support_radius:
        raise PhantomError(
            f"{feature.kind} reaching radius {feature.extent:.4f} leaves the support disk "
            f"R1={support_radius}",
            stage="phantom",
        )


def render_feature(feature: Feature, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Evaluate one feature at the given coordinates."""
    distance = np.hypot(X - feature.center[0], Y - feature.center[1])
    width = feature.smoothing_width
    if feature.kind == "disk":
        return feature.amplitude * smooth_ramp((feature.radius - distance) / width)
    outer = smooth_ramp((feature.radius + feature.thickness - distance) / width)
    inner = smooth_ramp((feature.radius - distance) / width)
    return feature.amplitude * (outer - inner)


def make_phantom(spec: PhantomSpec, n: int = Config.DEFAULT_IMAGE_N,
                 half_width: Optional[float] = None) -> ImageGrid:
    """
    Render a phantom on an n x n grid.

    Args:
        spec (PhantomSpec): Features and support radius
        n (int): Pixels per side
        half_width (float): Grid half width, defaults to the support radius

    Returns:
        ImageGrid: Sum of all features; exactly 0 outside the support radius

    Raises:
        PhantomError: If a feature leaves the support or has nonpositive smoothing
    """
    half_width = spec.support_radius if half_width is None else half_width
    if n < 2 or not half_width > 0:
        raise ConfigError(f"Invalid image grid n={n}, half_width={half_width}", stage="phantom")

    grid = ImageGrid.zeros(n, half_width)
    X, Y = grid.mesh()
    values = np.zeros((n, n))
    for feature in spec.features:
        _validate_feature(feature, spec.support_radius)
        values += render_feature(feature, X, Y)

    values[np.hypot(X, Y) >= spec.support_radius] = 0.0
    logger.debug(f"Rendered phantom with {len(spec.features)} features on {n}x{n} grid")
    return grid.with_values(values, support_radius=spec.support_radius)


def scaled(spec: PhantomSpec, max_value: float) -> PhantomSpec:
    """Rescale amplitudes so the largest feature amplitude equals ``max_value``."""
    peak = max((abs(feature.amplitude) for feature in spec.features), default=0.0)
    if peak == 0.0:
        return PhantomSpec(list(spec.features), spec.support_radius)
    factor = max_value / peak
    features = [
        Feature(f.kind, f.center, f.radius, f.amplitude * factor, f.smoothing_width, f.thickness)
        for f in spec.features
    ]
    return PhantomSpec(features, spec.support_radius)


def load_presets(path: str = PRESETS_PATH) -> Dict[str, Dict[str, Any]]:
    """Read the phantom preset file."""
    if not os.path.exists(path):
        raise ConfigError(f"Phantom preset file {path} not found", stage="phantom")
    with open(path) as handle:
        return json.load(handle)


def preset(name: str, contrast: Optional[float] = None, path: str = PRESETS_PATH) -> PhantomSpec:
    """
    Build a named preset phantom.

    Args:
        name (str): Preset name (see presets.json)
        contrast (float): If given, peak amplitude after rescaling
        path (str): Preset file

    Returns:
        PhantomSpec: The preset features
    """
    presets = load_presets(path)
    if name not in presets:
        raise ConfigError(
            f"Unknown phantom preset {name!r}; available: {sorted(presets)}", stage="phantom"
        )
    spec = PhantomSpec.from_dict(presets[name])
    if contrast is not None:
        spec = scaled(spec, contrast)
    return spec


def support_mask(grid: ImageGrid, inner: float = 0.0, outer: float = np.inf) -> np.ndarray:
    """Boolean mask of pixels whose centre radius lies in [inner, outer)."""
    X, Y = grid.mesh()
    radius = np.hypot(X, Y)
    return (radius >= inner) & (radius < outer)


def cartesian_to_polar(grid: ImageGrid, radii: np.ndarray, thetas: np.ndarray) -> PolarSamples:
    """Bilinear samples of the image at (r cos theta, r sin theta); 0 outside the grid."""
    radii = np.asarray(radii, dtype=float)
    thetas = np.asarray(thetas, dtype=float)
    R, T = np.meshgrid(radii, thetas, indexing="ij")
    ix = (R * np.cos(T) + grid.half_width) / grid.pixel_size - 0.5
    iy = (R * np.sin(T) + grid.half_width) / grid.pixel_size - 0.5
    values = map_coordinates(grid.values, [iy, ix], order=1, mode="constant", cval=0.0)
    return PolarSamples(radii, thetas, values)


def polar_to_cartesian(polar: PolarSamples, n: int, half_width: float) -> ImageGrid:
    """
    Resample polar samples onto an n x n grid.

    The angular grid must be uniform and start at 0; interpolation is
    periodic in theta and zero beyond the largest radius.
    """
    radii = polar.radii
    thetas = polar.thetas
    dr = radii[1] - radii[0]
    dtheta = thetas[1] - thetas[0]

    grid = ImageGrid.zeros(n, half_width)
    X, Y = grid.mesh()
    radius = np.hypot(X, Y)
    angle = np.mod(np.arctan2(Y, X) - thetas[0], 2.0 * np.pi)

    wrapped = np.concatenate([polar.values, polar.values[:, :1]], axis=1)
    ir = (radius - radii[0]) / dr
    it = angle / dtheta
    values = map_coordinates(wrapped, [ir, it], order=1, mode="nearest")
    values[(ir < 0) | (ir > len(radii) - 1)] = 0.0
    return grid.with_values(values)


def add_noise(values: np.ndarray, level: float, seed: Optional[int] = None) -> np.ndarray:
    """
    Add Gaussian white noise with ||noise|| = level * ||values||.

    Args:
        values (np.ndarray): Clean data (any shape)
        level (float): Relative noise level (0.05 for 5%)
        seed (int): Seed for numpy.random.default_rng

    Returns:
        np.ndarray: Noisy copy of the data
    """
    if level < 0:
        raise ConfigError(f"Noise level must be nonnegative, got {level}", stage="noise")
    clean = np.asarray(values, dtype=float)
    signal_norm = np.linalg.norm(clean)
    if level == 0 or signal_norm == 0:
        return clean.copy()

    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(clean.shape)
    noise *= level * signal_norm / np.linalg.norm(noise)
    logger.debug(f"Added {level:.1%} noise (seed={seed})")
    return clean + noise


def _as_array(image: Union[ImageGrid, np.ndarray]) -> np.ndarray:
    if isinstance(image, ImageGrid):
        return image.values
    return np.asarray(image, dtype=float)


def ncc(a: np.ndarray, b: np.ndarray) -> float:
    """Normalized cross-correlation of mean-removed arrays; 0 if either is constant."""
    da = np.ravel(a) - np.mean(a)
    db = np.ravel(b) - np.mean(b)
    denominator = np.linalg.norm(da) * np.linalg.norm(db)
    if denominator == 0:
        return 0.0
    return float(np.dot(da, db) / denominator)


def compare(rec: Union[ImageGrid, np.ndarray], truth: Union[ImageGrid, np.ndarray],
            mask: Optional[np.ndarray] = None) -> Metrics:
    """
    Relative L2 error, max error and normalized cross-correlation.

    Raises:
        ConfigError: If the shapes differ
        MetricError: If the truth has zero norm
    """
    rec_values = _as_array(rec)
    truth_values = _as_array(truth)
    if rec_values.shape != truth_values.shape:
        raise ConfigError(
            f"Cannot compare shapes {rec_values.shape} and {truth_values.shape}", stage="metrics"
        )
    if mask is not None:
        rec_values = rec_values[mask]
        truth_values = truth_values[mask]

    truth_norm = np.linalg.norm(truth_values)
    if truth_norm == 0:
        raise MetricError("Relative error undefined for an all-zero truth", stage="metrics")

    difference = rec_values - truth_values
    return Metrics(
        rel_l2=float(np.linalg.norm(difference) / truth_norm),
        linf=float(np.max(np.abs(difference))),
        ncc=ncc(rec_values, truth_values),
    )


def radial_profile(grid: ImageGrid, radii: Sequence[float], n_theta: int = 256) -> np.ndarray:
    """Angular mean of the image along circles about the origin."""
    thetas = np.linspace(0.0, 2.0 * np.pi, n_theta, endpoint=False)
    return cartesian_to_polar(grid, np.asarray(radii), thetas).values.mean(axis=1)
