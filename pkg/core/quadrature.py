import warnings
from typing import Callable, Iterable, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy import integrate

from .errors import NumericalError
from .utils import setup_logging, settings_section

logger = setup_logging(__name__)


class QuadratureConfig(BaseModel):
    """Radial cutoff, tolerances and refinement depth shared by every integral"""
    model_config = ConfigDict(frozen=True)

    p_max: float = Field(8.0, gt=0, description="Radial cutoff; V-hat(p_max) must be negligible")
    rel_tol: float = Field(1e-10, gt=0, description="Target relative tolerance")
    abs_tol: float = Field(0.0, ge=0, description="Target absolute tolerance")
    limit: int = Field(400, ge=10, description="Maximum adaptive subintervals (refinement depth)")
    n_angle: int = Field(64, ge=8, description="Uniform angular panels")
    fail_rel_error: float = Field(1e-4, gt=0, description="Error estimate that counts as non-convergence")

    @classmethod
    def from_settings(cls, **overrides) -> "QuadratureConfig":
        values = settings_section("quadrature")
        values.update({key: value for key, value in overrides.items() if value is not None})
        return cls(**values)

    def refined(self, factor: float = 0.5) -> "QuadratureConfig":
        """Same config with the target tolerance tightened by `factor`"""
        return self.model_copy(update={"rel_tol": max(self.rel_tol * factor, 1e-13)})


def quad_checked(func: Callable[[float], float], a: float, b: float, quad: QuadratureConfig,
                 points: Optional[Iterable[float]] = None, label: str = "integral",
                 **kwargs) -> Tuple[float, float]:
    """scipy quad (adaptive Gauss-Kronrod) with a hard non-convergence check"""
    inner_points = None
    if points is not None and np.isfinite(a) and np.isfinite(b):
        inner_points = sorted(p for p in points if a < p < b) or None

    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", integrate.IntegrationWarning)
        value, error = integrate.quad(
            func, a, b,
            epsabs=quad.abs_tol,
            epsrel=quad.rel_tol,
            limit=quad.limit,
            points=inner_points,
            **kwargs
        )

    threshold = max(quad.fail_rel_error * abs(value), quad.abs_tol, 1e-300)
    if not np.isfinite(value) or error > threshold:
        raise NumericalError(f"{label} did not converge", value=value, error=error)
    if caught:
        logger.debug(f"{label}: {caught[-1].message} (estimate {value:.6g} +/- {error:.2g})")
    return value, error


def log_radial_quad(func: Callable[[float], float], r_min: float, r_max: float,
                    quad: QuadratureConfig, points: Optional[Iterable[float]] = None,
                    label: str = "radial integral") -> Tuple[float, float]:
    """Integrate func(r) dr over [r_min, r_max] in the variable u = log r"""
    if r_max <= r_min:
        return 0.0, 0.0
    log_points = None
    if points is not None:
        log_points = [np.log(p) for p in points if r_min < p < r_max]

    def integrand(u: float) -> float:
        r = np.exp(u)
        return func(r) * r

    return quad_checked(integrand, np.log(r_min), np.log(r_max), quad, points=log_points, label=label)


def angle_nodes(n_angle: int) -> np.ndarray:
    return 2.0 * np.pi * np.arange(n_angle) / n_angle


def angular_sum(func2d: Callable[[np.ndarray, np.ndarray], np.ndarray], r: float,
                n_angle: int, center: Tuple[float, float] = (0.0, 0.0)) -> float:
    """Periodic trapezoid rule for the full-circle integral of func2d on the ring |q - center| = r"""
    theta = angle_nodes(n_angle)
    p1 = center[0] + r * np.cos(theta)
    p2 = center[1] + r * np.sin(theta)
    return float(np.sum(func2d(p1, p2)) * (2.0 * np.pi / n_angle))


def polar_integral(func2d: Callable[[np.ndarray, np.ndarray], np.ndarray], quad: QuadratureConfig,
                   r_min: float, r_max: Optional[float] = None,
                   points: Optional[Iterable[float]] = None,
                   center: Tuple[float, float] = (0.0, 0.0),
                   label: str = "polar integral") -> Tuple[float, float]:
    """Plane integral of func2d: adaptive in log-radius, uniform panels in angle"""
    r_max = quad.p_max if r_max is None else r_max

    def radial(r: float) -> float:
        return r * angular_sum(func2d, r, quad.n_angle, center)

    return log_radial_quad(radial, r_min, r_max, quad, points=points, label=label)


def dblquad_checked(func: Callable[[float, float], float], a: float, b: float,
                    inner_a: Callable[[float], float], inner_b: Callable[[float], float],
                    quad: QuadratureConfig, label: str = "double integral") -> Tuple[float, float]:
    """scipy dblquad, func(inner, outer), with the same convergence contract as quad_checked"""
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", integrate.IntegrationWarning)
        value, error = integrate.dblquad(func, a, b, inner_a, inner_b,
                                         epsabs=quad.abs_tol, epsrel=quad.rel_tol)

    threshold = max(quad.fail_rel_error * abs(value), quad.abs_tol, 1e-300)
    if not np.isfinite(value) or error > threshold:
        raise NumericalError(f"{label} did not converge", value=value, error=error)
    if caught:
        logger.debug(f"{label}: {caught[-1].message} (estimate {value:.6g} +/- {error:.2g})")
    return value, error
