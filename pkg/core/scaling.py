"""
Alder-Wainwright scaling consistency and the bridge from Monte Carlo E(t) to
Laplace-transform bounds.
"""

import math
from pathlib import Path
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, field_validator, model_validator
from scipy import stats

from .dynamics import EnsembleStats
from .errors import DomainError
from .quadrature import QuadratureConfig, quad_checked
from .utils import setup_logging, settings_section

logger = setup_logging(__name__)

AW_TABLE: Dict[Tuple[int, bool], Tuple[float, float]] = {
    (1, True): (2.0 / 3.0, 0.0),
    (2, True): (0.5, 0.25),
    (2, False): (0.5, 1.0 / 3.0),
    (3, True): (0.5, 0.0),
}


class ScalingAnsatz(BaseModel):
    """alpha(t) = t^nu (log t)^gamma in dimension d"""
    nu: float = Field(..., ge=0.5, lt=1.0)
    gamma: float = Field(0.0, ge=0.0)
    d: int = Field(2, ge=1, le=3)
    isotropic: bool = True

    @classmethod
    def from_table(cls, d: int, isotropic: bool = True) -> "ScalingAnsatz":
        nu, gamma = aw_exponents(d, isotropic)
        return cls(nu=nu, gamma=gamma, d=d, isotropic=isotropic)

    def integrand_exponents(self) -> Tuple[float, float]:
        """(a, b) with the Green-Kubo integrand equal to e^{a u} u^{-b} du in u = log s"""
        if self.isotropic:
            return 1.0 - self.d * self.nu, self.d * self.gamma
        return 0.5 - self.nu, self.gamma


class MsdSeries(BaseModel):
    times: List[float]
    values: List[float]
    stderr: Optional[List[float]] = None

    @field_validator("times")
    @classmethod
    def _increasing(cls, times: List[float]) -> List[float]:
        array = np.asarray(times, dtype=float)
        if array.size < 2 or np.any(array <= 0) or np.any(np.diff(array) <= 0):
            raise ValueError("times must be positive and strictly increasing")
        return [float(t) for t in array]

    @model_validator(mode="after")
    def _lengths(self) -> "MsdSeries":
        if len(self.values) != len(self.times):
            raise ValueError("times and values differ in length")
        if self.stderr is not None and len(self.stderr) != len(self.times):
            raise ValueError("times and stderr differ in length")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("values must be finite")
        return self

    @classmethod
    def from_stats(cls, ensemble: EnsembleStats) -> "MsdSeries":
        return cls(times=ensemble.times, values=ensemble.E, stderr=ensemble.stderr)

    @classmethod
    def from_csv(cls, input_path: str) -> "MsdSeries":
        """Reads the t, E_t, stderr columns written by the simulate subcommand"""
        frame = pd.read_csv(input_path)
        stderr = frame["stderr"].tolist() if "stderr" in frame.columns else None
        return cls(times=frame["t"].tolist(), values=frame["E_t"].tolist(), stderr=stderr)

    @classmethod
    def synthetic(cls, func: Callable[[np.ndarray], np.ndarray], times: Sequence[float]) -> "MsdSeries":
        times = np.asarray(times, dtype=float)
        return cls(times=times.tolist(), values=np.asarray(func(times), dtype=float).tolist())

    def arrays(self) -> Tuple[np.ndarray, np.ndarray]:
        return np.asarray(self.times), np.asarray(self.values)

    def scaled(self, factor: float) -> "MsdSeries":
        stderr = None if self.stderr is None else [factor * s for s in self.stderr]
        return MsdSeries(times=self.times, values=[factor * v for v in self.values], stderr=stderr)


class AwReport(NamedTuple):
    slope: float
    intercept: float
    times: np.ndarray
    log_lhs: np.ndarray
    log_rhs: np.ndarray


class LaplaceEstimate(NamedTuple):
    lam: float
    value: float
    tail_fraction: float


class ExponentFit(NamedTuple):
    gamma: float
    gamma_stderr: float
    gamma_ci: Tuple[float, float]
    amplitude: float
    amplitude_ci: Tuple[float, float]
    dof: int

    def significantly_positive(self, level: float = 0.95) -> bool:
        """One-sided test gamma > 0"""
        return self.gamma - stats.t.ppf(level, self.dof) * self.gamma_stderr > 0


class TrendTest(NamedTuple):
    t_lo: float
    t_hi: float
    ratio_lo: float
    ratio_hi: float
    z: float
    p_value: float
    significant: bool


def aw_exponents(d: int, isotropic: bool = True) -> Tuple[float, float]:
    """(nu, gamma) consistent with both E ~ alpha^2 and E ~ t int^t alpha^-d"""
    key = (int(d), bool(isotropic) or int(d) != 2)
    if int(d) != 2 and not isotropic:
        raise DomainError(f"the anisotropic exponents are tabulated for d = 2 only (d={d})")
    if key not in AW_TABLE:
        raise DomainError(f"unsupported dimension d={d}; expected 1, 2 or 3")
    return AW_TABLE[key]


def default_t_grid() -> np.ndarray:
    settings = settings_section("scaling")
    return np.logspace(math.log10(settings.get("t_min", 1e4)), math.log10(settings.get("t_max", 1e16)),
                       int(settings.get("t_points", 200)))


def _green_kubo_log_integral(a: float, b: float, upper: float, lower: Optional[float],
                             quad: QuadratureConfig) -> float:
    """log of int_{lower}^{upper} e^{a u} u^{-b} du, integrand scaled by e^{-a upper}"""
    if lower is None:
        if b == 0 and a > 0:
            lower = -np.inf
        elif b < 1:
            lower = 0.0
        else:
            lower = math.log(2.0)
    if lower == 0.0 and b > 0:
        value, _ = quad_checked(lambda u: math.exp(a * (u - upper)), 0.0, upper, quad,
                                label="Green-Kubo integral", weight="alg", wvar=(-b, 0.0))
    elif b == 0:
        value, _ = quad_checked(lambda u: math.exp(a * (u - upper)), lower, upper, quad,
                                label="Green-Kubo integral")
    else:
        value, _ = quad_checked(lambda u: math.exp(a * (u - upper)) * u ** (-b), lower, upper, quad,
                                label="Green-Kubo integral")
    if value <= 0:
        raise DomainError(f"Green-Kubo integral is not positive on [{lower}, {upper}]")
    return a * upper + math.log(value)


def aw_residual(ansatz: ScalingAnsatz, t_grid: Optional[Sequence[float]] = None,
                lower_limit: Optional[float] = None, quad: QuadratureConfig = None) -> AwReport:
    """Regress log(alpha(t)^2 / (t int^t alpha(s)^-d ds)) on log log t

    The lower limit of the s-integral defaults to s = 1 when the log singularity is
    integrable, s = 0 for pure powers with a growing integrand, s = 2 otherwise.
    """
    t = default_t_grid() if t_grid is None else np.asarray(t_grid, dtype=float)
    if t.min() <= math.e or math.log10(t.max() / t.min()) < 6:
        raise DomainError("t_grid must start above e and span at least six decades")
    quad = quad or QuadratureConfig.from_settings()
    a, b = ansatz.integrand_exponents()
    lower = None if lower_limit is None else math.log(lower_limit)

    log_t = np.log(t)
    log_lhs = 2.0 * ansatz.nu * log_t + 2.0 * ansatz.gamma * np.log(log_t)
    log_rhs = np.array([lt + _green_kubo_log_integral(a, b, lt, lower, quad) for lt in log_t])
    slope, intercept = np.polyfit(np.log(log_t), log_lhs - log_rhs, 1)
    logger.info(f"AW residual d={ansatz.d} iso={ansatz.isotropic} nu={ansatz.nu:.4g} "
                f"gamma={ansatz.gamma:.4g}: slope={slope:.3e}")
    return AwReport(float(slope), float(intercept), t, log_lhs, log_rhs)


def _tail_shape(gamma: float) -> Callable[[np.ndarray], np.ndarray]:
    if gamma == 0:
        return lambda t: np.asarray(t, dtype=float)
    return lambda t: np.asarray(t, dtype=float) * np.log(np.asarray(t, dtype=float)) ** gamma


def laplace_msd(series: MsdSeries, lam: float, tail_gamma: float = 0.0,
                min_lambda_t: Optional[float] = None, quad: QuadratureConfig = None) -> LaplaceEstimate:
    """int_0^inf E(t) e^{-lam t} dt from the series plus a fitted tail a t (log t)^gamma beyond t_max

    E is taken piecewise linear through (0, 0) and the series points; each segment
    is integrated against the exponential exactly.
    """
    times, values = series.arrays()
    t_end = float(times[-1])
    min_lambda_t = min_lambda_t or float(settings_section("scaling").get("laplace_min_lambda_t", 5.0))
    if lam <= 0 or lam * t_end < min_lambda_t:
        raise DomainError(f"lambda={lam:g} too small for a series ending at t={t_end:g}; "
                          f"minimum admissible lambda is {min_lambda_t / t_end:g}",
                          payload={"min_lambda": min_lambda_t / t_end})

    t = np.concatenate([[0.0], times])
    e = np.concatenate([[0.0], values])
    left, right = t[:-1], t[1:]
    width = right - left
    decay_left, decay_right = np.exp(-lam * left), np.exp(-lam * right)
    # int_l^r (E_l + s (x - l)) e^{-lam x} dx with s the segment slope
    slope = np.diff(e) / width
    body = np.sum(e[:-1] * (decay_left - decay_right) / lam
                  + slope * ((decay_left - decay_right) / lam ** 2 - width * decay_right / lam))

    shape = _tail_shape(tail_gamma)
    last = times >= t_end / 10.0
    g = shape(times[last])
    amplitude = float(np.dot(g, values[last]) / np.dot(g, g))
    if tail_gamma == 0:
        tail = amplitude * math.exp(-lam * t_end) * (t_end / lam + 1.0 / lam ** 2)
    else:
        quad = quad or QuadratureConfig.from_settings()
        scaled, _ = quad_checked(lambda x: float(shape(x)) * math.exp(-lam * (x - t_end)), t_end, np.inf, quad,
                                 label="Laplace tail")
        tail = amplitude * math.exp(-lam * t_end) * scaled

    value = float(body + tail)
    fraction = tail / value if value != 0 else 0.0
    if abs(fraction) > 0.05:
        logger.warning(f"Laplace tail carries {fraction:.1%} of the value at lambda={lam:g}")
    return LaplaceEstimate(float(lam), value, float(fraction))


def laplace_exact_t_log_t(lam: float) -> float:
    """int_0^inf t log t e^{-lam t} dt = (1 - euler_gamma - log lam) / lam^2"""
    return (1.0 - np.euler_gamma - math.log(lam)) / lam ** 2


def fit_exponents(series: MsdSeries, weighted: bool = True, level: float = 0.95) -> ExponentFit:
    """Weighted least squares of log(E/t) on log log t: slope gamma-hat, amplitude e^intercept"""
    times, values = series.arrays()
    if np.any(values <= 0):
        raise DomainError("fit_exponents needs a positive series")
    keep = times > math.e
    if keep.sum() < 10 or math.log10(times[keep].max() / times[keep].min()) < 2:
        raise DomainError("fit_exponents needs >= 10 points with t > e spanning >= 2 decades")

    x = np.log(np.log(times[keep]))
    y = np.log(values[keep] / times[keep])
    sigma = None
    if weighted and series.stderr is not None:
        err = np.asarray(series.stderr)[keep]
        if np.all(err > 0):
            sigma = err / values[keep]

    if sigma is not None:
        (slope, intercept), cov = np.polyfit(x, y, 1, w=1.0 / sigma, cov="unscaled")
    else:
        (slope, intercept), cov = np.polyfit(x, y, 1, cov=True)
    dof = int(keep.sum() - 2)
    quantile = stats.t.ppf(0.5 + level / 2.0, dof)
    slope_se, intercept_se = float(np.sqrt(cov[0, 0])), float(np.sqrt(cov[1, 1]))
    return ExponentFit(
        gamma=float(slope),
        gamma_stderr=slope_se,
        gamma_ci=(float(slope - quantile * slope_se), float(slope + quantile * slope_se)),
        amplitude=float(math.exp(intercept)),
        amplitude_ci=(float(math.exp(intercept - quantile * intercept_se)),
                      float(math.exp(intercept + quantile * intercept_se))),
        dof=dof,
    )


def superdiffusive_trend(series: MsdSeries, t_lo: float, t_hi: float, level: float = 0.95) -> TrendTest:
    """One-sided z-test that E(t)/t at t_hi exceeds E(t)/t at t_lo"""
    if series.stderr is None:
        raise DomainError("superdiffusive_trend needs standard errors")
    times, values = series.arrays()
    err = np.asarray(series.stderr)
    i = int(np.argmin(np.abs(times - t_lo)))
    j = int(np.argmin(np.abs(times - t_hi)))
    ratio_lo, ratio_hi = values[i] / times[i], values[j] / times[j]
    spread = math.hypot(err[i] / times[i], err[j] / times[j])
    z = (ratio_hi - ratio_lo) / spread if spread > 0 else math.inf
    p_value = float(stats.norm.sf(z))
    return TrendTest(float(times[i]), float(times[j]), float(ratio_lo), float(ratio_hi), float(z),
                     p_value, p_value < 1.0 - level)


def growth_envelopes(times: Sequence[float]) -> Dict[str, np.ndarray]:
    """Shapes t log log t, t (log t)^(1/2), t (log t)^(2/3), t log t for overlays; no constants"""
    t = np.asarray(times, dtype=float)
    if np.any(t <= math.e):
        raise DomainError("envelopes need t > e")
    log_t = np.log(t)
    return {
        "t_loglog_t": t * np.log(log_t),
        "t_sqrt_log_t": t * np.sqrt(log_t),
        "t_log_t_2_3": t * log_t ** (2.0 / 3.0),
        "t_log_t": t * log_t,
    }


def write_series_csv(series: MsdSeries, output_path: str) -> str:
    Path(output_path).parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame({"t": series.times, "E_t": series.values})
    if series.stderr is not None:
        frame["stderr"] = series.stderr
    frame.to_csv(output_path, index=False, float_format="%.17g")
    return output_path
