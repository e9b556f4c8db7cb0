"""
Special functions and quadrature primitives for the reconstruction pipeline.

This module provides the numerical building blocks shared by the circular
means inversion and the measurement models:

Key Features:
- Integer-order Bessel functions J_n(z) on the strip 0 <= Im z <= a
- Discretization of the deformed Hankel contour [0, ia] U [ia, ia + M]
  and of its copies entering from a point x on the real axis
- Gaussian spectral taper, entire in lam
- Weakly singular Abel-type integrals with the weight 1/sqrt(r^2 - t^2)

Mathematical Notes:
- J_n(z) is evaluated with scipy.special.jv (AMOS: power series, Miller
  recurrence and large-argument expansions chosen internally). The bound
  |J_n(z)| <= exp(|Im z|) holds for integer n.
- Contour weights are composite trapezoid weights with Gregory end
  corrections (3/8, 7/6, 23/24), exact for polynomials of degree <= 3 on
  segments with at least six nodes.
- The Abel weight is removed by the substitution t = r sin(theta).
"""
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
from loguru import logger
from scipy.integrate import trapezoid
from scipy.special import jn_zeros, jv

from utils.config import Config
from utils.errors import ConfigError, DomainError

ArrayLike = Union[float, complex, np.ndarray]

# Im z may dip below zero by rounding when nodes are built from products
_IMAG_TOLERANCE = 1e-12

_GREGORY_END_WEIGHTS = np.array([3.0 / 8.0, 7.0 / 6.0, 23.0 / 24.0])


@dataclass(frozen=True)
class ContourC:
    """
    Quadrature nodes and weights on the deformed contour C.

    The contour runs from 0 up to ia and then along the horizontal line
    from ia to ia + M. The corner node ia appears once per segment.

    Attributes:
        a (float): Imaginary shift of the horizontal segment
        M (float): Real extent of the horizontal segment
        nodes (np.ndarray): Complex nodes, vertical segment first
        weights (np.ndarray): Complex line-element quadrature weights
        n_seg1 (int): Number of nodes on [0, ia]
        n_seg2 (int): Number of nodes on [ia, ia + M]
    """
    a: float
    M: float
    nodes: np.ndarray
    weights: np.ndarray
    n_seg1: int
    n_seg2: int

    @property
    def size(self) -> int:
        return self.nodes.size

    def params(self) -> dict:
        """Contour parameters for metadata sidecars."""
        return {"a": self.a, "M": self.M, "n_seg1": self.n_seg1, "n_seg2": self.n_seg2}

    def entering_at(self, index: int) -> "ContourC":
        """
        Path [x, x + ia] U [x + ia, ia + M] where x is the real part of
        horizontal node ``index``.

        The vertical piece reuses the heights and weights of [0, ia]; the
        horizontal piece keeps the nodes from ``index`` on, re-weighted as
        a segment of its own. ``entering_at(0)`` reproduces the contour.
        """
        if not 0 <= index <= self.n_seg2 - 2:
            raise ConfigError(f"Entry node {index} outside [0, {self.n_seg2 - 2}]", stage="contour")
        horizontal = self.nodes[self.n_seg1 + index:]
        step = self.M / (self.n_seg2 - 1)
        return ContourC(
            a=self.a,
            M=self.M,
            nodes=np.concatenate([self.nodes[:self.n_seg1] + horizontal[0].real, horizontal]),
            weights=np.concatenate([
                self.weights[:self.n_seg1],
                _segment_weights(horizontal.size, step).astype(complex),
            ]),
            n_seg1=self.n_seg1,
            n_seg2=int(horizontal.size),
        )


def bessel_j(n: Union[int, np.ndarray], z: ArrayLike) -> ArrayLike:
    """
    Bessel function of the first kind J_n(z) for integer n >= 0.

    Args:
        n (int or np.ndarray): Nonnegative integer order(s), broadcast with z
        z (complex or np.ndarray): Argument(s) with 0 <= Im z

    Returns:
        complex or np.ndarray: J_n(z), complex valued

    Raises:
        DomainError: If the order is negative or fractional, Im z < 0,
            |z| exceeds Config.BESSEL_MAX_ARGUMENT, or the value is not finite
    """
    order = np.asarray(n, dtype=float)
    if np.any(order < 0) or np.any(order != np.floor(order)):
        raise DomainError(f"Bessel order must be a nonnegative integer, got {n}", stage="specfun")

    argument = np.asarray(z, dtype=complex)
    if np.any(argument.imag < -_IMAG_TOLERANCE):
        raise DomainError("Bessel argument must satisfy Im z >= 0", stage="specfun")
    if np.any(np.abs(argument) > Config.BESSEL_MAX_ARGUMENT):
        raise DomainError(
            f"|z| exceeds the supported maximum {Config.BESSEL_MAX_ARGUMENT:g}", stage="specfun"
        )

    values = jv(order, argument)
    if not np.all(np.isfinite(values)):
        raise DomainError("Bessel evaluation produced non-finite values", stage="specfun")

    if np.ndim(values) == 0:
        return complex(values)
    return values


def bessel_zeros(n: int, count: int) -> np.ndarray:
    """First ``count`` positive real zeros of J_n."""
    if n < 0 or count < 1:
        raise DomainError(f"Invalid zero request n={n}, count={count}", stage="specfun")
    return jn_zeros(n, count)


def _segment_weights(count: int, step: float) -> np.ndarray:
    """Trapezoid weights, Gregory-corrected when the segment is long enough."""
    weights = np.full(count, step, dtype=float)
    if count >= 6:
        weights[:3] = step * _GREGORY_END_WEIGHTS
        weights[-3:] = step * _GREGORY_END_WEIGHTS[::-1]
    else:
        weights[0] = weights[-1] = 0.5 * step
    return weights


def build_contour(a: float, M: float, n_seg1: int, n_seg2: int) -> ContourC:
    """
    Discretize the contour C = [0, ia] U [ia, ia + M].

    Args:
        a (float): Imaginary shift (> 0)
        M (float): Real extent (> 0)
        n_seg1 (int): Nodes on the vertical segment (>= 2)
        n_seg2 (int): Nodes on the horizontal segment (>= 2), uniformly spaced

    Returns:
        ContourC: Nodes and complex weights; sum(weights) == ia + M

    Raises:
        ConfigError: If a or M is nonpositive or a node count is below 2
    """
    if not a > 0 or not M > 0:
        raise ConfigError(f"Contour needs a > 0 and M > 0, got a={a}, M={M}", stage="contour")
    if n_seg1 < 2 or n_seg2 < 2:
        raise ConfigError(
            f"Contour segments need at least 2 nodes, got {n_seg1} and {n_seg2}", stage="contour"
        )

    vertical = 1j * a * np.linspace(0.0, 1.0, n_seg1)
    horizontal = 1j * a + M * np.linspace(0.0, 1.0, n_seg2)

    vertical_weights = 1j * _segment_weights(n_seg1, a / (n_seg1 - 1))
    horizontal_weights = _segment_weights(n_seg2, M / (n_seg2 - 1)).astype(complex)

    contour = ContourC(
        a=float(a),
        M=float(M),
        nodes=np.concatenate([vertical, horizontal]),
        weights=np.concatenate([vertical_weights, horizontal_weights]),
        n_seg1=int(n_seg1),
        n_seg2=int(n_seg2),
    )
    logger.debug(f"Built contour a={a:.4g}, M={M:.4g} with {contour.size} nodes")
    return contour


def contour_integrate(contour: ContourC, values: np.ndarray) -> np.ndarray:
    """Integrate samples given at the contour nodes (last axis) along C."""
    return np.asarray(values) @ contour.weights


def gaussian_taper(lam: ArrayLike, width: Optional[float]) -> ArrayLike:
    """
    Entire spectral window exp(-(lam / width)^2); all ones when width is None.

    Being analytic, the window leaves contour integrals path independent.
    """
    lam = np.asarray(lam, dtype=complex)
    if width is None:
        return np.ones(lam.shape, dtype=complex)
    if not width > 0:
        raise ConfigError(f"Taper width must be positive, got {width}", stage="contour")
    return np.exp(-(lam / width) ** 2)


def abel_weighted_integral(h: np.ndarray, r: float, t: Optional[np.ndarray] = None,
                           n_theta: Optional[int] = None) -> Union[float, np.ndarray]:
    """
    Integrate h(t) / sqrt(r^2 - t^2) over [0, r].

    The substitution t = r sin(theta) turns the integral into the smooth
    integral of h(r sin(theta)) over [0, pi/2], evaluated by the trapezoid
    rule. Samples are linearly interpolated, so the error is O(step^2).

    Args:
        h (np.ndarray): Samples on a uniform grid starting at 0 (last axis);
            leading axes are integrated independently
        r (float): Upper limit (> 0)
        t (np.ndarray): Sample grid; defaults to linspace(0, r, h.shape[-1])
        n_theta (int): Angular quadrature points; defaults to twice the
            number of samples covering [0, r], plus one

    Returns:
        float or np.ndarray: Integral value(s) over the leading axes

    Raises:
        DomainError: If r <= 0 or the grid does not cover [0, r]
    """
    if not r > 0:
        raise DomainError(f"Abel integral needs r > 0, got {r}", stage="abel")

    samples = np.asarray(h, dtype=float)
    count = samples.shape[-1]
    if count < 2:
        raise DomainError("Abel integral needs at least two samples", stage="abel")

    if t is None:
        step = r / (count - 1)
    else:
        grid = np.asarray(t, dtype=float)
        step = grid[1] - grid[0]
        if abs(grid[0]) > 1e-12 * max(1.0, r) or grid[-1] < r * (1.0 - 1e-12):
            raise DomainError(f"Sample grid [{grid[0]}, {grid[-1]}] does not cover [0, {r}]", stage="abel")

    if n_theta is None:
        covering = int(np.ceil(r / step - 1e-9)) + 1
        n_theta = 2 * covering + 1

    theta = np.linspace(0.0, 0.5 * np.pi, n_theta)
    position = np.clip(r * np.sin(theta) / step, 0.0, count - 1)
    lower = np.minimum(np.floor(position).astype(int), count - 2)
    frac = position - lower

    integrand = samples[..., lower] * (1.0 - frac) + samples[..., lower + 1] * frac
    result = trapezoid(integrand, theta, axis=-1)
    if np.ndim(result) == 0:
        return float(result)
    return result
