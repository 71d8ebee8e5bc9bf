"""
Reduced variational functionals and the resolvent bounds on (phi, R_lambda phi).

Plane integrals are over R^2 with Lebesgue measure dp, no (2 pi)^-2 factor. Every
bound returns the resolvent-scale value; multiply by lambda^-2 for E_hat(lambda).
"""

import copy
import math
from concurrent.futures import ProcessPoolExecutor
from functools import lru_cache
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy import interpolate, special

from .env_sampler import GaussianMollifier, Mollifier, TracerModel
from .errors import DomainError, NumericalError, PreconditionError
from .quadrature import (QuadratureConfig, angle_nodes, dblquad_checked, log_radial_quad,
                         polar_integral)
from .utils import setup_logging, settings_section, thread_cap

logger = setup_logging(__name__)

D_PROBES = (1e-3, 1e-2, 1e-1, 1.0)
FIT_LAMBDAS = tuple(np.logspace(-8, -1, 4))
FIT_MOMENTA = tuple(np.logspace(-4, -0.5, 4))


def _variational_settings() -> Dict:
    defaults = {"d_nodes": 64, "c_grid_min": 1e-4, "c_grid_max": 1.0, "c_grid_size": 17, "ring_points": 16}
    defaults.update(settings_section("variational"))
    return defaults


def _radial_max(mollifier: Mollifier, quad: QuadratureConfig) -> float:
    return float(min(quad.p_max, mollifier.spectral_cutoff(1e-16)))


def _radial_min(lam: float) -> float:
    return 1e-7 * math.sqrt(min(lam, 1.0))


class BoundQuery(BaseModel):
    """(lambda, model, mollifier, quadrature) plus the knobs of the individual bounds"""
    model_config = ConfigDict(frozen=True, populate_by_name=True)

    lam: float = Field(..., gt=0, alias="lambda", description="Resolvent parameter")
    model: TracerModel
    mollifier: Mollifier = Field(default_factory=GaussianMollifier, discriminator="kind")
    quad: QuadratureConfig = Field(default_factory=QuadratureConfig.from_settings)
    c: Optional[float] = Field(None, ge=0, description="SRBP test-function amplitude; None optimizes over the c grid")
    c_log: Optional[float] = Field(None, gt=0, description="Anisotropic log-bound constant; None fits it from D")
    kernel_off: bool = Field(False, description="Force D = 0")

    @model_validator(mode="after")
    def _check_cutoff(self) -> "BoundQuery":
        tail = float(self.mollifier.v_hat(self.quad.p_max))
        if tail >= 1e-12:
            raise ValueError(f"V_hat(p_max) = {tail:.3g}; raise p_max until it is below 1e-12")
        return self

    @property
    def radial_min(self) -> float:
        return _radial_min(self.lam)

    @property
    def radial_max(self) -> float:
        return _radial_max(self.mollifier, self.quad)

    def at(self, lam: float) -> "BoundQuery":
        return self.model_copy(update={"lam": float(lam)})


class Estimate(NamedTuple):
    value: float
    error: float


class SrbpBound(NamedTuple):
    value: float
    error: float
    c: float


class AnisoBound(NamedTuple):
    value: float
    error: float
    polar_value: float
    c_log: float


class FunctionalValues(BaseModel):
    lam: float
    model: TracerModel
    J1: float = 0.0
    J2: float = 0.0
    J3: Optional[float] = Field(None, description="Schwarz-bounded J3 (DCGF, anisotropic)")
    J31_bound: Optional[float] = None
    J32_prime: Optional[float] = None
    J3_direct: Optional[float] = Field(None, description="Low-resolution direct 4D J3")
    J3_schwarz_discrete: Optional[float] = Field(None, description="Schwarz bound on the same 4D nodes")
    D_at_probes: Dict[str, float] = Field(default_factory=dict)
    lower_bound: Optional[float] = None
    upper_bound: Optional[float] = None
    c: Optional[float] = None
    errors: Dict[str, float] = Field(default_factory=dict)

    @property
    def j3_terms(self) -> float:
        if self.J3 is not None:
            return self.J3
        return (self.J31_bound or 0.0) + (self.J32_prime or 0.0)

    @property
    def objective(self) -> float:
        """2 J1 - J2 - J3-type terms"""
        return 2.0 * self.J1 - self.J2 - self.j3_terms

    @property
    def error_estimate(self) -> float:
        return float(sum(self.errors.values()))


# --- h and its derivative -------------------------------------------------

def _positive(x, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0):
        raise DomainError(f"{name} is defined for x > 0 only")
    return x


def h_func(x):
    """h(x) = 1 / (x log(x + 1/x))"""
    x = _positive(x, "h")
    return 1.0 / (x * np.log(x + 1.0 / x))


def h_prime(x):
    x = _positive(x, "h'")
    log_term = np.log(x + 1.0 / x)
    return -(log_term + (x * x - 1.0) / (x * x + 1.0)) / (x * x * log_term ** 2)


# --- D kernels ------------------------------------------------------------

def _kernel_args(lam: float, p_abs: float, mollifier, quad):
    if lam <= 0 or p_abs <= 0:
        raise DomainError(f"D needs lambda > 0 and |p| > 0 (lambda={lam}, |p|={p_abs})")
    return float(lam), float(p_abs), mollifier or GaussianMollifier(), quad or QuadratureConfig.from_settings()


def _support_points(mollifier) -> List[float]:
    return [float(mollifier.cutoff)] if mollifier.kind == "flat" else []


def D_dcgf(lam: float, p_abs: float, mollifier: Mollifier = None, quad: QuadratureConfig = None) -> float:
    """4 int V_hat(q) (p x q)^2 / (|p|^2 |q|^2) / (lam + |p - q|^2) dq, angle done in closed form"""
    lam, p, mollifier, quad = _kernel_args(lam, p_abs, mollifier, quad)
    width = math.sqrt(lam)

    def integrand(r: float) -> float:
        a = lam + r * r + p * p
        root = math.sqrt((lam + (r - p) ** 2) * (lam + (r + p) ** 2))
        return 8.0 * math.pi * float(mollifier.v_hat(r)) * r / (a + root)

    points = [p, p - width, p + width] + _support_points(mollifier)
    value, _ = log_radial_quad(integrand, 1e-8 * min(p, width, 1.0), _radial_max(mollifier, quad), quad,
                               points=[q for q in points if q > 0], label=f"D_dcgf(lam={lam:g}, p={p:g})")
    return value


def _centered_kernel(lam: float, p: float, x_min: float, mollifier, quad, label: str) -> float:
    """4 int_{|x| >= x_min} V_hat(p + x) / (lam + |x|^2) dx in polar coordinates centred at p"""
    width = math.sqrt(lam)

    def integrand(x: float) -> float:
        return 4.0 * x / (lam + x * x) * float(mollifier.ring_integral(p, x))

    x_max = p + _radial_max(mollifier, quad)
    points = [width, p]
    for cut in _support_points(mollifier):
        points += [abs(cut - p), cut + p]
    value, _ = log_radial_quad(integrand, x_min, x_max, quad, points=[q for q in points if q > 0], label=label)
    return value


def D_srbp(lam: float, p_abs: float, mollifier: Mollifier = None, quad: QuadratureConfig = None) -> float:
    """4 int V_hat(q) / (lam + |p - q|^2) 1{|p - q| >= |p|/3} dq"""
    lam, p, mollifier, quad = _kernel_args(lam, p_abs, mollifier, quad)
    return _centered_kernel(lam, p, p / 3.0, mollifier, quad, f"D_srbp(lam={lam:g}, p={p:g})")


def D_aniso(lam: float, p_abs: float, mollifier: Mollifier = None, quad: QuadratureConfig = None) -> float:
    """4 int V_hat(q) / (lam + |p - q|^2) dq"""
    lam, p, mollifier, quad = _kernel_args(lam, p_abs, mollifier, quad)
    x_min = 1e-8 * min(p, math.sqrt(lam), 1.0)
    return _centered_kernel(lam, p, x_min, mollifier, quad, f"D_aniso(lam={lam:g}, p={p:g})")


KERNELS: Dict[str, Callable] = {"dcgf": D_dcgf, "srbp": D_srbp, "aniso": D_aniso}


class KernelTable:
    """Cubic interpolant of log D against log |p| on log-spaced nodes, clamped at both ends"""

    def __init__(self, nodes: np.ndarray, values: np.ndarray):
        self.nodes = np.asarray(nodes, dtype=float)
        self.values = np.asarray(values, dtype=float)
        self._spline = interpolate.CubicSpline(np.log(self.nodes), np.log(np.maximum(self.values, 1e-300)))
        self._slope = self._spline.derivative()

    def __call__(self, p_abs):
        log_p = np.log(np.clip(np.asarray(p_abs, dtype=float), self.nodes[0], self.nodes[-1]))
        return np.exp(self._spline(log_p))

    def derivative(self, p_abs):
        p_abs = np.asarray(p_abs, dtype=float)
        inside = (p_abs > self.nodes[0]) & (p_abs < self.nodes[-1])
        slope = np.where(inside, self._slope(np.log(np.clip(p_abs, self.nodes[0], self.nodes[-1]))), 0.0)
        return self(p_abs) * slope / np.where(p_abs > 0, p_abs, 1.0)


class ZeroKernel:
    def __call__(self, p_abs):
        return np.zeros_like(np.asarray(p_abs, dtype=float))

    def derivative(self, p_abs):
        return np.zeros_like(np.asarray(p_abs, dtype=float))


@lru_cache(maxsize=64)
def kernel_table(kind: str, lam: float, mollifier: Mollifier, quad: QuadratureConfig,
                 n_nodes: int = 64) -> KernelTable:
    """D(lam, .) tabulated between the radial floor and cutoff of the bound integrals"""
    kernel = KERNELS[kind]
    nodes = np.logspace(math.log10(_radial_min(lam)), math.log10(_radial_max(mollifier, quad)), n_nodes)
    values = np.array([kernel(lam, node, mollifier, quad) for node in nodes])
    logger.debug(f"Built D_{kind} table at lambda={lam:g} ({n_nodes} nodes)")
    return KernelTable(nodes, values)


def _kernel_for(query: BoundQuery, kind: str):
    if query.kernel_off:
        return ZeroKernel()
    return kernel_table(kind, query.lam, query.mollifier, query.quad, int(_variational_settings()["d_nodes"]))


def _kernel_kind(model: TracerModel) -> str:
    return {TracerModel.SRBP: "srbp", TracerModel.SRBP_ANISO: "aniso", TracerModel.DCGF: "dcgf"}[model]


def kernel_grid(kind: str, lambdas: Sequence[float], momenta: Sequence[float],
                mollifier: Mollifier = None, quad: QuadratureConfig = None) -> np.ndarray:
    kernel = KERNELS[kind]
    return np.array([[kernel(lam, p, mollifier, quad) for p in momenta] for lam in lambdas])


def log_bound_envelope(lambdas: Sequence[float], momenta: Sequence[float], p_scale: float = 1.0) -> np.ndarray:
    """|log(lam + |p|^2 / p_scale^2)| on the (lambda, |p|) grid"""
    lam = np.asarray(lambdas, dtype=float)[:, None]
    p = np.asarray(momenta, dtype=float)[None, :]
    return np.abs(np.log(lam + p ** 2 / p_scale ** 2))


def fit_log_bound_constant(kind: str, lambdas: Sequence[float] = FIT_LAMBDAS,
                           momenta: Sequence[float] = FIT_MOMENTA, p_scale: float = 1.0,
                           margin: float = 1.25, mollifier: Mollifier = None,
                           quad: QuadratureConfig = None) -> float:
    """Smallest C with D <= C |log(lam + |p|^2/p_scale^2)| on the grid, times a safety margin"""
    values = kernel_grid(kind, lambdas, momenta, mollifier, quad)
    envelope = log_bound_envelope(lambdas, momenta, p_scale)
    if np.any(envelope <= 0):
        raise DomainError("log envelope vanishes on the fit grid; keep lam + |p|^2 away from 1")
    return float(margin * np.max(values / envelope))


@lru_cache(maxsize=8)
def fitted_aniso_constant(mollifier: Mollifier, quad: QuadratureConfig) -> float:
    constant = fit_log_bound_constant("aniso", mollifier=mollifier, quad=quad)
    logger.info(f"Fitted anisotropic log-bound constant C = {constant:.6g}")
    return constant


# --- angular identities and closed-form kernel oracles ---------------------

def angular_sin2_integral(a: float, b: float) -> float:
    """int_0^{2 pi} sin^2 t / (a + b cos t) dt = 2 pi (a - sqrt(a^2 - b^2)) / b^2"""
    if a <= abs(b):
        raise DomainError(f"angular identity needs a > |b| (a={a}, b={b})")
    return 2.0 * math.pi / (a + math.sqrt(a * a - b * b))


def angular_cos2_integral(a: float, b: float) -> float:
    """int_0^{2 pi} d alpha / (a + b cos^2 alpha) = 2 pi / sqrt(a (a + b))"""
    if a <= 0 or a + b <= 0:
        raise DomainError(f"angular identity needs a > 0 and a + b > 0 (a={a}, b={b})")
    return 2.0 * math.pi / math.sqrt(a * (a + b))


def pairing_sum(a: float, b: float, t):
    """Integrand at t plus its value at t + pi: 2 a sin^2 t / (a^2 - b^2 cos^2 t) <= 2 / a"""
    t = np.asarray(t, dtype=float)
    return 2.0 * a * np.sin(t) ** 2 / (a * a - b * b * np.cos(t) ** 2)


def dcgf_pairing_bound_integral(lam: float, p_abs: float, quad: QuadratureConfig = None,
                                radius: float = 2.0) -> float:
    """2D quadrature over |q| <= radius of the pair-averaged bound 1 / (lam + |q|^2 + |p|^2)"""
    quad = quad or QuadratureConfig.from_settings()
    value, _ = polar_integral(lambda q1, q2: 1.0 / (lam + q1 ** 2 + q2 ** 2 + p_abs ** 2), quad,
                              1e-12, radius, label="DCGF pairing bound")
    return value


def dcgf_pairing_bound_closed_form(lam: float, p_abs: float, radius: float = 2.0) -> float:
    return math.pi * (math.log(lam + p_abs ** 2 + radius ** 2) - math.log(lam + p_abs ** 2))


def dcgf_flat_kernel_integral(lam: float, p_abs: float, quad: QuadratureConfig = None,
                              radius: float = 2.0) -> float:
    """int_{|q| <= radius} (p x q)^2 / (|p|^2 |q|^2) / (lam + |p - q|^2) dq with p on axis 1"""
    quad = quad or QuadratureConfig.from_settings()

    def integrand(q1, q2):
        return q2 ** 2 / (q1 ** 2 + q2 ** 2) / (lam + (q1 - p_abs) ** 2 + q2 ** 2)

    points = [p_abs] if p_abs < radius else None
    value, _ = polar_integral(integrand, quad, 1e-12, radius, points=points, label="flat DCGF kernel")
    return value


def srbp_annulus_integral(lam: float, p_abs: float, quad: QuadratureConfig = None,
                          radius: float = 2.0) -> float:
    """Angular mean of 4 int 1/(lam + |p - q|^2) 1{|p|/3 <= |p - q| <= radius} dq, by 2D quadrature"""
    quad = quad or QuadratureConfig.from_settings()
    value, _ = polar_integral(lambda q1, q2: 4.0 / (lam + (q1 - p_abs) ** 2 + q2 ** 2), quad,
                              p_abs / 3.0, radius, center=(p_abs, 0.0), label="SRBP annulus")
    return value / (2.0 * math.pi)


def srbp_annulus_closed_form(lam: float, p_abs: float, radius: float = 2.0) -> float:
    return 2.0 * (math.log(lam + radius ** 2) - math.log(lam + p_abs ** 2 / 9.0))


# --- test functions -------------------------------------------------------

class TestFunction:
    """v_hat (odd, isotropic models) or u_hat (even, anisotropic model) and its gradient"""
    __test__ = False
    kind = "custom"
    # built-in choices satisfy parity and integrability for every lam > 0
    verified_by_construction = False

    def __init__(self, parity: str = "odd", amplitude: float = 1.0):
        if parity not in ("odd", "even"):
            raise PreconditionError(f"parity must be 'odd' or 'even', got {parity}")
        self.parity = parity
        self.amplitude = float(amplitude)
        self._verified: Dict[str, float] = {}

    def value(self, p1, p2):
        raise NotImplementedError

    def grad(self, p1, p2) -> Tuple[np.ndarray, np.ndarray]:
        """Central differences; subclasses with a closed form override"""
        p1 = np.asarray(p1, dtype=float)
        p2 = np.asarray(p2, dtype=float)
        step = 1e-6 * (1.0 + np.hypot(p1, p2))
        g1 = (self.value(p1 + step, p2) - self.value(p1 - step, p2)) / (2 * step)
        g2 = (self.value(p1, p2 + step) - self.value(p1, p2 - step)) / (2 * step)
        return g1, g2

    def __call__(self, p1, p2):
        return self.amplitude * self.value(np.asarray(p1, dtype=float), np.asarray(p2, dtype=float))

    def gradient(self, p1, p2) -> Tuple[np.ndarray, np.ndarray]:
        g1, g2 = self.grad(np.asarray(p1, dtype=float), np.asarray(p2, dtype=float))
        return self.amplitude * g1, self.amplitude * g2

    def scaled(self, factor: float) -> "TestFunction":
        other = copy.copy(self)
        other.amplitude = self.amplitude * float(factor)
        other._verified = dict(self._verified)
        return other

    def reflected(self) -> "TestFunction":
        """p -> -v(-p) for odd functions, p -> u(-p) for even ones"""
        sign = -1.0 if self.parity == "odd" else 1.0
        base = self

        def value(p1, p2):
            return sign * base(-p1, -p2)

        def gradient(p1, p2):
            g1, g2 = base.gradient(-p1, -p2)
            return -sign * g1, -sign * g2

        reflected = CustomTestFunction(value, gradient, parity=self.parity)
        reflected.verified_by_construction = self.verified_by_construction
        return reflected

    def check_constraints(self, mollifier: Mollifier = None, quad: QuadratureConfig = None,
                          seed: int = 0, samples: int = 256) -> float:
        """Parity on random samples and finiteness of int V_hat |p|^-2 v^2 (odd) or int V_hat u^2 (even)"""
        mollifier = mollifier or GaussianMollifier()
        quad = quad or QuadratureConfig.from_settings()
        p = np.random.default_rng(seed).normal(scale=2.0, size=(samples, 2))
        forward = self(p[:, 0], p[:, 1])
        backward = self(-p[:, 0], -p[:, 1])
        if not (np.all(np.isfinite(forward)) and np.all(np.isfinite(backward))):
            raise PreconditionError(f"{self.kind} test function has non-finite values")
        sign = -1.0 if self.parity == "odd" else 1.0
        if not np.allclose(backward, sign * forward, rtol=1e-10, atol=1e-12):
            raise PreconditionError(f"{self.kind} test function is not {self.parity}")

        def weighted(q1, q2):
            v = self(q1, q2)
            weight = 1.0 / (q1 ** 2 + q2 ** 2) if self.parity == "odd" else 1.0
            return mollifier.v_hat(np.hypot(q1, q2)) * weight * v ** 2

        r_min, r_max = 1e-10, _radial_max(mollifier, quad)
        try:
            total, _ = polar_integral(weighted, quad, r_min, r_max, label="test-function norm")
        except NumericalError as exc:
            raise PreconditionError(f"{self.kind} test function norm did not converge: {exc.message}")
        inner = r_min ** 2 * np.mean(weighted(r_min * np.cos(angle_nodes(16)), r_min * np.sin(angle_nodes(16))))
        if not np.isfinite(total) or inner > 1e-8 * max(total, 1e-300):
            raise PreconditionError(f"{self.kind} test function has a non-integrable weighted norm")
        return total

    def ensure_constraints(self, mollifier: Mollifier, quad: QuadratureConfig) -> None:
        """check_constraints once per (mollifier, quadrature) pair"""
        if self.verified_by_construction:
            return
        key = f"{mollifier!r}|{quad!r}"
        if key not in self._verified:
            self._verified[key] = self.check_constraints(mollifier, quad)


class CustomTestFunction(TestFunction):
    kind = "custom"

    def __init__(self, value_fn: Callable, gradient_fn: Optional[Callable] = None,
                 parity: str = "odd", amplitude: float = 1.0):
        super().__init__(parity, amplitude)
        self._value_fn = value_fn
        self._gradient_fn = gradient_fn

    def value(self, p1, p2):
        return np.asarray(self._value_fn(p1, p2), dtype=float)

    def grad(self, p1, p2):
        if self._gradient_fn is None:
            return super().grad(p1, p2)
        return self._gradient_fn(p1, p2)

    @classmethod
    def checked(cls, value_fn: Callable, gradient_fn: Optional[Callable] = None, parity: str = "odd",
                mollifier: Mollifier = None, quad: QuadratureConfig = None) -> "CustomTestFunction":
        fn = cls(value_fn, gradient_fn, parity)
        fn.check_constraints(mollifier, quad)
        return fn


class SRBPChoice(TestFunction):
    """v_hat(p) = c p1 h(lam + |p|^2)"""
    kind = "srbp_choice"
    verified_by_construction = True

    def __init__(self, c: float, lam: float):
        super().__init__("odd", c)
        self.lam = float(lam)

    def value(self, p1, p2):
        return p1 * h_func(self.lam + p1 ** 2 + p2 ** 2)

    def grad(self, p1, p2):
        x = self.lam + p1 ** 2 + p2 ** 2
        h, dh = h_func(x), h_prime(x)
        return h + 2.0 * p1 ** 2 * dh, 2.0 * p1 * p2 * dh


class OptimalDCGF(TestFunction):
    """v_hat(p) = p2 / (lam + (1 + D(lam, |p|)) |p|^2)"""
    kind = "optimal_dcgf"
    verified_by_construction = True

    def __init__(self, lam: float, kernel=None):
        super().__init__("odd")
        self.lam = float(lam)
        self.kernel = kernel or ZeroKernel()

    def _denominator(self, p1, p2):
        s = p1 ** 2 + p2 ** 2
        return self.lam + (1.0 + self.kernel(np.sqrt(s))) * s

    def value(self, p1, p2):
        return p2 / self._denominator(p1, p2)

    def grad(self, p1, p2):
        r = np.hypot(p1, p2)
        s = r * r
        d, dd = self.kernel(r), self.kernel.derivative(r)
        q = self.lam + (1.0 + d) * s
        radial = 2.0 * (1.0 + d) + s * dd / np.where(r > 0, r, 1.0)
        return -p2 * radial * p1 / q ** 2, 1.0 / q - p2 * radial * p2 / q ** 2


class AnisoOptimal(TestFunction):
    """u_hat(p) = 1 / (lam + |p|^2 + D(lam, |p|) p1^2)"""
    kind = "aniso_optimal"
    verified_by_construction = True

    def __init__(self, lam: float, kernel=None):
        super().__init__("even")
        self.lam = float(lam)
        self.kernel = kernel or ZeroKernel()

    def value(self, p1, p2):
        r = np.hypot(p1, p2)
        return 1.0 / (self.lam + r * r + self.kernel(r) * p1 ** 2)

    def grad(self, p1, p2):
        r = np.hypot(p1, p2)
        d, dd = self.kernel(r), self.kernel.derivative(r)
        q = self.lam + r * r + d * p1 ** 2
        along = p1 ** 2 * dd / np.where(r > 0, r, 1.0)
        dq1 = 2.0 * p1 + 2.0 * d * p1 + along * p1
        dq2 = 2.0 * p2 + along * p2
        return -dq1 / q ** 2, -dq2 / q ** 2


# --- functionals ----------------------------------------------------------

def _check_test_function(query: BoundQuery, test_fn: TestFunction) -> None:
    needed = "even" if query.model == TracerModel.SRBP_ANISO else "odd"
    if test_fn.parity != needed:
        raise PreconditionError(f"{query.model.value} needs an {needed} test function, got {test_fn.kind}")
    test_fn.ensure_constraints(query.mollifier, query.quad)


def _ring_offsets(ring_points: int) -> np.ndarray:
    angles = angle_nodes(ring_points)
    return np.stack([np.cos(angles), np.sin(angles)])


def j32_prime(query: BoundQuery, test_fn: TestFunction, ring_points: Optional[int] = None) -> Estimate:
    """1/4 int V_hat |p|^2 sup_{|r - p| < |p|/3} |grad v(r)|^2, sup over the centre and two rings"""
    ring_points = ring_points or int(_variational_settings()["ring_points"])
    unit = _ring_offsets(ring_points)
    radii = np.array([1.0 / 6.0, 0.99 / 3.0])

    def integrand(p1, p2):
        r = np.hypot(p1, p2)
        spread = r[:, None, None] * radii[None, :, None]
        ring1 = (p1[:, None, None] + spread * unit[0][None, None, :]).reshape(len(r), -1)
        ring2 = (p2[:, None, None] + spread * unit[1][None, None, :]).reshape(len(r), -1)
        q1 = np.concatenate([p1[:, None], ring1], axis=1)
        q2 = np.concatenate([p2[:, None], ring2], axis=1)
        g1, g2 = test_fn.gradient(q1, q2)
        sup = np.max(g1 ** 2 + g2 ** 2, axis=1)
        return 0.25 * query.mollifier.v_hat(r) * r ** 2 * sup

    points = [math.sqrt(query.lam)]
    value, error = polar_integral(integrand, query.quad, query.radial_min, query.radial_max,
                                  points=points, label="J32'")
    return Estimate(value, error)


def j32_envelope(query: BoundQuery, c: float = 1.0) -> Estimate:
    """34 c^2 / 4 int V_hat |p|^2 h(lam + 4|p|^2/9)^2 dp: the exact sup of the 34 h^2 envelope"""
    lam = query.lam

    def integrand(r: float) -> float:
        return 2.0 * math.pi * r * 8.5 * c * c * float(query.mollifier.v_hat(r)) * r * r \
            * float(h_func(lam + 4.0 * r * r / 9.0)) ** 2

    return Estimate(*log_radial_quad(integrand, query.radial_min, query.radial_max, query.quad,
                                     points=[math.sqrt(lam)], label="J32' envelope"))


def j3_direct(query: BoundQuery, test_fn: TestFunction, n_radial: int = 24,
              n_angle: int = 32) -> Tuple[float, float]:
    """Direct 4D J3 on a tensor Gauss-Legendre x uniform-angle grid, and the Schwarz bound on the same nodes"""
    _check_test_function(query, test_fn)
    x, w = np.polynomial.legendre.leggauss(n_radial)
    r_max = query.radial_max
    r = 0.5 * r_max * (x + 1.0)
    theta = angle_nodes(n_angle)
    rr, tt = np.meshgrid(r, theta, indexing="ij")
    weights = (0.5 * r_max * w[:, None] * rr * (2.0 * np.pi / n_angle)).ravel()
    p1, p2 = (rr * np.cos(tt)).ravel(), (rr * np.sin(tt)).ravel()
    density = query.mollifier.v_hat(np.hypot(p1, p2)) * weights

    dist2 = (p1[:, None] - p1[None, :]) ** 2 + (p2[:, None] - p2[None, :]) ** 2
    resolvent = 1.0 / (query.lam + dist2)
    norm2 = p1 ** 2 + p2 ** 2
    if query.model == TracerModel.SRBP_ANISO:
        f = p1 * test_fn(p1, p2)
        kernel = resolvent
    else:
        f = test_fn(p1, p2)
        if query.model == TracerModel.DCGF:
            pair = (p1[:, None] * p2[None, :] - p2[:, None] * p1[None, :]) ** 2
        else:
            pair = (p1[:, None] * p1[None, :] + p2[:, None] * p2[None, :]) ** 2
        kernel = pair / (norm2[:, None] * norm2[None, :]) * resolvent

    weighted = density[:, None] * density[None, :] * kernel
    direct = float(np.sum(weighted * (f[:, None] - f[None, :]) ** 2))
    schwarz = float(4.0 * np.sum(weighted * f[:, None] ** 2))
    return direct, schwarz


def functionals(query: BoundQuery, test_fn: TestFunction, direct_j3: bool = False,
                probes: Sequence[float] = D_PROBES) -> FunctionalValues:
    """J1, J2 and the J3-type terms of the reduced variational problem for one test function"""
    _check_test_function(query, test_fn)
    lam = query.lam
    v_hat = query.mollifier.v_hat
    errors: Dict[str, float] = {}
    points = [math.sqrt(lam)]

    def plane(func2d, label: str) -> float:
        value, error = polar_integral(func2d, query.quad, query.radial_min, query.radial_max,
                                      points=points, label=f"{label}(lam={lam:g})")
        errors[label] = error
        return value

    kind = _kernel_kind(query.model)
    kernel = _kernel_for(query, kind)
    values = FunctionalValues(lam=lam, model=query.model)

    if query.model == TracerModel.SRBP_ANISO:
        values.J1 = plane(lambda p1, p2: v_hat(np.hypot(p1, p2)) * test_fn(p1, p2), "J1")
        values.J2 = plane(lambda p1, p2: v_hat(np.hypot(p1, p2)) * (lam + p1 ** 2 + p2 ** 2)
                          * test_fn(p1, p2) ** 2, "J2")
        values.J3 = plane(lambda p1, p2: v_hat(np.hypot(p1, p2)) * kernel(np.hypot(p1, p2))
                          * p1 ** 2 * test_fn(p1, p2) ** 2, "J3")
    else:
        axis = 0 if query.model == TracerModel.SRBP else 1

        def first(p1, p2):
            s = p1 ** 2 + p2 ** 2
            return v_hat(np.sqrt(s)) * (p1, p2)[axis] / s * test_fn(p1, p2)

        def second(p1, p2):
            s = p1 ** 2 + p2 ** 2
            return v_hat(np.sqrt(s)) * (lam + s) / s * test_fn(p1, p2) ** 2

        def third(p1, p2):
            r = np.hypot(p1, p2)
            return v_hat(r) * kernel(r) * test_fn(p1, p2) ** 2

        values.J1 = plane(first, "J1")
        values.J2 = plane(second, "J2")
        if query.model == TracerModel.DCGF:
            values.J3 = plane(third, "J3")
        else:
            values.J31_bound = plane(third, "J31_bound")
            values.J32_prime, errors["J32_prime"] = j32_prime(query, test_fn)

    if direct_j3:
        values.J3_direct, values.J3_schwarz_discrete = j3_direct(query, test_fn)
    if probes and not query.kernel_off:
        values.D_at_probes = {f"{p:g}": KERNELS[kind](lam, p, query.mollifier, query.quad) for p in probes}
    values.errors = errors
    return values


# --- bounds ---------------------------------------------------------------

def _check_regime(query: BoundQuery) -> None:
    if not 0 < query.lam < 1:
        raise DomainError(f"bounds need 0 < lambda < 1 (lambda={query.lam})")


def lower_bound_dcgf(query: BoundQuery) -> Estimate:
    """int V_hat(p) / (lam + (1 + D(lam, |p|)) |p|^2) dp with D interpolated from its table"""
    _check_regime(query)
    lam = query.lam
    kernel = _kernel_for(query, "dcgf")

    def integrand(r: float) -> float:
        return 2.0 * math.pi * float(query.mollifier.v_hat(r)) * r / (lam + (1.0 + float(kernel(r))) * r * r)

    return Estimate(*log_radial_quad(integrand, query.radial_min, query.radial_max, query.quad,
                                     points=[math.sqrt(lam)], label=f"DCGF lower bound(lam={lam:g})"))


@lru_cache(maxsize=64)
def _srbp_coefficients(query: BoundQuery) -> Tuple[float, float, float, float]:
    """J1 and J2 + J31 + J32' of the unit-amplitude choice, with their error estimates"""
    values = functionals(query, SRBPChoice(1.0, query.lam), probes=())
    quadratic = values.J2 + values.J31_bound + values.J32_prime
    err_linear = values.errors["J1"]
    err_quadratic = values.errors["J2"] + values.errors["J31_bound"] + values.errors["J32_prime"]
    return values.J1, quadratic, err_linear, err_quadratic


def c_grid() -> np.ndarray:
    settings = _variational_settings()
    return np.logspace(math.log10(settings["c_grid_min"]), math.log10(settings["c_grid_max"]),
                       int(settings["c_grid_size"]))


def lower_bound_srbp(query: BoundQuery) -> SrbpBound:
    """2 J1 - J2 - J31_bound - J32' at v* = c p1 h(lam + |p|^2); c from the query or the best grid point"""
    _check_regime(query)
    linear, quadratic, err_linear, err_quadratic = _srbp_coefficients(query.model_copy(update={"c": None}))
    if query.c is not None:
        c = float(query.c)
    else:
        grid = c_grid()
        c = float(grid[np.argmax(2.0 * grid * linear - grid ** 2 * quadratic)])
    value = 2.0 * c * linear - c * c * quadratic
    return SrbpBound(value, 2.0 * c * err_linear + c * c * err_quadratic, c)


def lower_bound_aniso(query: BoundQuery) -> AnisoBound:
    """int_{|p| < 1/2} V_hat(p) / (lam + |p|^2 + C p1^2 |log lam|) dp, with the polar comparison integral"""
    _check_regime(query)
    lam = query.lam
    c_log = query.c_log or fitted_aniso_constant(query.mollifier, query.quad)
    stiffness = c_log * abs(math.log(lam))
    edge = 0.5

    def integrand(alpha: float, u: float) -> float:
        r = math.exp(u)
        p1 = r * math.cos(alpha)
        return r * r * float(query.mollifier.v_hat(r)) / (lam + r * r + stiffness * p1 * p1)

    value, error = dblquad_checked(integrand, math.log(query.radial_min), math.log(edge),
                                   lambda u: 0.0, lambda u: 0.5 * math.pi, query.quad,
                                   label=f"anisotropic lower bound(lam={lam:g})")

    floor = float(query.mollifier.v_hat(edge))

    def polar(r: float) -> float:
        return floor * 2.0 * math.pi * r / math.sqrt((r * r + lam) * ((1.0 + stiffness) * r * r + lam))

    polar_value, _ = log_radial_quad(polar, query.radial_min, edge, query.quad,
                                     points=[math.sqrt(lam)], label="anisotropic polar form")
    return AnisoBound(4.0 * value, 4.0 * error, polar_value, c_log)


def upper_bound(query: BoundQuery) -> Estimate:
    """int V_hat(p) w(p) / (lam + |p|^2) dp, w = p_axis^2/|p|^2 (angular mean 1/2) or 1 (anisotropic)"""
    _check_regime(query)
    lam = query.lam
    weight = 1.0 if query.model == TracerModel.SRBP_ANISO else 0.5

    def integrand(r: float) -> float:
        return 2.0 * math.pi * weight * float(query.mollifier.v_hat(r)) * r / (lam + r * r)

    return Estimate(*log_radial_quad(integrand, query.radial_min, query.radial_max, query.quad,
                                     points=[math.sqrt(lam)], label=f"upper bound(lam={lam:g})"))


def upper_bound_gaussian(lam: float, model: TracerModel, sigma: float = 1.0) -> float:
    """Closed form of upper_bound for the Gaussian mollifier: w pi e^{a} E1(a), a = sigma^2 lam / 2"""
    weight = 1.0 if model == TracerModel.SRBP_ANISO else 0.5
    a = 0.5 * sigma ** 2 * lam
    return float(weight * math.pi * math.exp(a) * special.exp1(a))


def loglog_slopes(lambdas: Sequence[float], values: Sequence[float]) -> np.ndarray:
    """Secant slopes of values against log log(1/lambda) between consecutive sweep points"""
    lambdas = np.asarray(lambdas, dtype=float)
    if np.any((lambdas <= 0) | (lambdas >= 1)):
        raise DomainError("log log(1/lambda) needs 0 < lambda < 1")
    x = np.log(np.log(1.0 / lambdas))
    return np.diff(np.asarray(values, dtype=float)) / np.diff(x)


def bound_row(query: BoundQuery) -> FunctionalValues:
    """Bounds plus the functionals of the test function each bound is built on"""
    upper = upper_bound(query)
    if query.model == TracerModel.DCGF:
        lower = lower_bound_dcgf(query)
        values = functionals(query, OptimalDCGF(query.lam, _kernel_for(query, "dcgf")))
        c = None
    elif query.model == TracerModel.SRBP:
        lower = lower_bound_srbp(query)
        values = functionals(query, SRBPChoice(lower.c, query.lam))
        c = lower.c
    else:
        lower = lower_bound_aniso(query)
        values = functionals(query, AnisoOptimal(query.lam, _kernel_for(query, "aniso")))
        c = None

    errors = dict(values.errors)
    errors.update({"lower_bound": lower.error, "upper_bound": upper.error})
    return values.model_copy(update={"lower_bound": lower.value, "upper_bound": upper.value,
                                     "c": c, "errors": errors})


def bound_sweep(query: BoundQuery, lambdas: Sequence[float], workers: Optional[int] = None) -> List[FunctionalValues]:
    """One bound_row per lambda, in input order"""
    queries = [query.at(lam) for lam in lambdas]
    workers = workers or thread_cap()
    logger.info(f"Bound sweep: model={query.model.value}, {len(queries)} lambda values, {workers} worker(s)")
    if workers > 1 and len(queries) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(bound_row, queries))
    return [bound_row(q) for q in queries]
