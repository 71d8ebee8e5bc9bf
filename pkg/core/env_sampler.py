"""
Mollifier, stationary Gaussian environment laws and periodic spectral sampling.

Conventions: K(x) = (2 pi)^-2 int K_hat(p) exp(i p.x) dp, grid node (i, j) sits at
(i h, j h) with h = L / N, array axis 0 is coordinate 1.
"""

from enum import Enum
from pathlib import Path
from typing import Literal, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, field_validator
from scipy import special

from .errors import ConfigurationError, DomainError
from .quadrature import QuadratureConfig, quad_checked
from .utils import setup_logging, ensure_directory

logger = setup_logging(__name__)


class GaussianMollifier(BaseModel):
    """V(x) = exp(-|x|^2 / 2 sigma^2) / (2 pi sigma^2), V_hat(p) = exp(-sigma^2 |p|^2 / 2)"""
    model_config = ConfigDict(frozen=True)

    kind: Literal["gaussian"] = "gaussian"
    sigma: float = Field(1.0, gt=0, description="Length scale")

    def v_hat(self, p_abs):
        p_abs = np.asarray(p_abs, dtype=float)
        return np.exp(-0.5 * self.sigma ** 2 * p_abs ** 2)

    def u_hat(self, p_abs):
        return np.sqrt(self.v_hat(p_abs))

    def v(self, x_abs):
        x_abs = np.asarray(x_abs, dtype=float)
        return np.exp(-0.5 * x_abs ** 2 / self.sigma ** 2) / (2.0 * np.pi * self.sigma ** 2)

    def grad_v(self, y1, y2) -> Tuple[np.ndarray, np.ndarray]:
        y1 = np.asarray(y1, dtype=float)
        y2 = np.asarray(y2, dtype=float)
        scale = -self.v(np.hypot(y1, y2)) / self.sigma ** 2
        return scale * y1, scale * y2

    def spectral_cutoff(self, threshold: float = 1e-12) -> float:
        """Smallest |p| with V_hat(|p|) <= threshold"""
        return float(np.sqrt(2.0 * np.log(1.0 / threshold)) / self.sigma)

    def ring_integral(self, center_abs, radius):
        """int_0^{2 pi} V_hat(|c + radius e^{i theta}|) d theta, closed form via the scaled Bessel I0"""
        center_abs = np.asarray(center_abs, dtype=float)
        radius = np.asarray(radius, dtype=float)
        s2 = self.sigma ** 2
        return 2.0 * np.pi * np.exp(-0.5 * s2 * (center_abs - radius) ** 2) * special.ive(0, s2 * center_abs * radius)


class FlatMollifier(BaseModel):
    """V_hat = height on |p| <= cutoff, zero outside; the flattened density of the closed-form kernel oracles"""
    model_config = ConfigDict(frozen=True)

    kind: Literal["flat"] = "flat"
    cutoff: float = Field(1.0, gt=0)
    height: float = Field(1.0, gt=0)

    def v_hat(self, p_abs):
        p_abs = np.asarray(p_abs, dtype=float)
        return np.where(p_abs <= self.cutoff, self.height, 0.0)

    def u_hat(self, p_abs):
        return np.sqrt(self.v_hat(p_abs))

    def v(self, x_abs):
        x_abs = np.asarray(x_abs, dtype=float)
        z = self.cutoff * x_abs
        safe = np.where(z > 0, z, 1.0)
        ratio = np.where(z > 0, special.j1(safe) / safe, 0.5)
        return self.height * self.cutoff ** 2 * ratio / (2.0 * np.pi)

    def grad_v(self, y1, y2) -> Tuple[np.ndarray, np.ndarray]:
        y1 = np.asarray(y1, dtype=float)
        y2 = np.asarray(y2, dtype=float)
        r = np.hypot(y1, y2)
        safe = np.where(r > 0, r, 1.0)
        dv_dr = -self.height * self.cutoff ** 2 * special.jv(2, self.cutoff * safe) / (2.0 * np.pi * safe)
        scale = np.where(r > 0, dv_dr / safe, 0.0)
        return scale * y1, scale * y2

    def spectral_cutoff(self, threshold: float = 1e-12) -> float:
        return float(self.cutoff)

    def ring_integral(self, center_abs, radius):
        """Arc length of the ring |q - c| = radius inside the support, times the height"""
        center_abs = np.asarray(center_abs, dtype=float)
        radius = np.asarray(radius, dtype=float)
        product = center_abs * radius
        safe = np.where(product > 0, product, 1.0)
        kappa = (self.cutoff ** 2 - center_abs ** 2 - radius ** 2) / (2.0 * safe)
        arc = 2.0 * np.pi - 2.0 * np.arccos(np.clip(kappa, -1.0, 1.0))
        degenerate = np.where(center_abs + radius <= self.cutoff, 2.0 * np.pi, 0.0)
        return self.height * np.where(product > 0, arc, degenerate)


Mollifier = Union[GaussianMollifier, FlatMollifier]


class EnvironmentModel(str, Enum):
    GRADIENT = "gradient_gff"   # isotropic SRBP environment
    CURL = "curl_gff"           # DCGF environment
    SCALAR = "scalar_aniso"     # anisotropic SRBP environment


MODEL_IDS = {EnvironmentModel.GRADIENT: 0, EnvironmentModel.CURL: 1, EnvironmentModel.SCALAR: 2}


class TracerModel(str, Enum):
    SRBP = "srbp"
    SRBP_ANISO = "srbp_aniso"
    DCGF = "dcgf"

    @property
    def environment(self) -> EnvironmentModel:
        return {
            TracerModel.SRBP: EnvironmentModel.GRADIENT,
            TracerModel.SRBP_ANISO: EnvironmentModel.SCALAR,
            TracerModel.DCGF: EnvironmentModel.CURL,
        }[self]

    @property
    def self_repelling(self) -> bool:
        return self != TracerModel.DCGF


class CovarianceSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    model: EnvironmentModel
    mollifier: Mollifier = Field(default_factory=GaussianMollifier, discriminator="kind")


class FieldSample(BaseModel):
    """A realized drift field on the N x N periodic grid of side L; read-only after construction"""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    box: float
    grid: int
    model: EnvironmentModel
    seed: int
    values: np.ndarray          # (2, N, N) real
    fourier_modes: np.ndarray   # (2, N, N) complex, omega_hat normalized so omega = sum_k omega_hat e^{ikx}

    @field_validator("values", "fourier_modes")
    @classmethod
    def _freeze(cls, array: np.ndarray) -> np.ndarray:
        array = np.ascontiguousarray(array)
        array.setflags(write=False)
        return array

    @property
    def spacing(self) -> float:
        return self.box / self.grid


def wavevectors(box: float, grid: int) -> Tuple[np.ndarray, np.ndarray]:
    """k1, k2 arrays (N, N) in fft ordering, axis 0 is coordinate 1"""
    k = 2.0 * np.pi * np.fft.fftfreq(grid, d=box / grid)
    return np.meshgrid(k, k, indexing="ij")


def retained_mask(grid: int) -> np.ndarray:
    """Modes kept by the sampler: not the zero mode, not on a Nyquist line"""
    n = np.fft.fftfreq(grid) * grid
    n1, n2 = np.meshgrid(n, n, indexing="ij")
    nyquist = grid // 2
    mask = (np.abs(n1) < nyquist) & (np.abs(n2) < nyquist)
    mask[0, 0] = False
    return mask


def _projection(model: EnvironmentModel, p1, p2) -> Tuple[np.ndarray, np.ndarray]:
    """Unit direction of the rank-1 covariance: p/|p| or p~/|p| with p~ = (p2, -p1)"""
    norm = np.hypot(p1, p2)
    if model == EnvironmentModel.GRADIENT:
        return p1 / norm, p2 / norm
    return p2 / norm, -p1 / norm


def spectral_covariance(spec: CovarianceSpec, p) -> np.ndarray:
    """K_hat(p) as a (..., 2, 2) array"""
    p = np.asarray(p, dtype=float)
    p1, p2 = p[..., 0], p[..., 1]
    p_abs = np.hypot(p1, p2)
    v_hat = spec.mollifier.v_hat(p_abs)
    out = np.zeros(p.shape[:-1] + (2, 2))

    if spec.model == EnvironmentModel.SCALAR:
        out[..., 0, 0] = v_hat
        return out

    if np.any(p_abs == 0):
        raise DomainError(f"K_hat has no limit at p = 0 for {spec.model.value}; exclude the zero mode")
    e1, e2 = _projection(spec.model, p1, p2)
    out[..., 0, 0] = e1 * e1 * v_hat
    out[..., 0, 1] = e1 * e2 * v_hat
    out[..., 1, 0] = e1 * e2 * v_hat
    out[..., 1, 1] = e2 * e2 * v_hat
    return out


def _check_grid(spec: CovarianceSpec, box: float, grid: int) -> None:
    if box <= 0 or grid <= 0:
        raise ConfigurationError(f"box and grid must be positive (box={box}, grid={grid})")
    if grid % 2 != 0 or grid < 16:
        raise ConfigurationError(f"grid must be even and >= 16 (grid={grid})")
    sigma = getattr(spec.mollifier, "sigma", 1.0)
    if box <= 10.0 * sigma:
        raise ConfigurationError(f"box must exceed 10 sigma (box={box}, sigma={sigma})")


def field_generator(seed: int) -> np.random.Generator:
    """Counter-based stream: node i of the white-noise grid is Philox(seed) at counter i"""
    return np.random.Generator(np.random.Philox(key=int(seed)))


def sample_field(spec: CovarianceSpec, box: float, grid: int, seed: int) -> FieldSample:
    """Spectral synthesis: filtered white noise keeps Hermitian symmetry by construction"""
    _check_grid(spec, box, grid)
    rng = field_generator(seed)
    white_hat = np.fft.fft2(rng.standard_normal((grid, grid))) / grid

    k1, k2 = wavevectors(box, grid)
    mask = retained_mask(grid)
    k_abs = np.hypot(k1, k2)
    amplitude = np.where(mask, np.sqrt(spec.mollifier.v_hat(k_abs)) / box, 0.0) * white_hat

    modes = np.zeros((2, grid, grid), dtype=complex)
    if spec.model == EnvironmentModel.SCALAR:
        modes[0] = amplitude
    else:
        e1, e2 = _projection(spec.model, np.where(mask, k1, 1.0), np.where(mask, k2, 0.0))
        modes[0] = np.where(mask, 1j * e1, 0.0) * amplitude
        modes[1] = np.where(mask, 1j * e2, 0.0) * amplitude

    values = np.real(np.fft.ifft2(modes, axes=(1, 2))) * grid ** 2
    if spec.model == EnvironmentModel.SCALAR:
        values[1] = 0.0
    return FieldSample(box=box, grid=grid, model=spec.model, seed=int(seed),
                       values=values, fourier_modes=modes)


def zero_field(model: EnvironmentModel, box: float, grid: int) -> FieldSample:
    """F = 0 override for the Brownian reductions"""
    return FieldSample(box=box, grid=grid, model=model, seed=0,
                       values=np.zeros((2, grid, grid)),
                       fourier_modes=np.zeros((2, grid, grid), dtype=complex))


def bilinear_stencil(x: np.ndarray, spacing: float, grid: int):
    """Periodic bilinear corners and weights for positions x (..., 2)"""
    scaled = np.asarray(x, dtype=float) / spacing
    base = np.floor(scaled)
    frac = scaled - base
    i0 = base[..., 0].astype(np.int64) % grid
    j0 = base[..., 1].astype(np.int64) % grid
    i1 = (i0 + 1) % grid
    j1 = (j0 + 1) % grid
    fx, fy = frac[..., 0], frac[..., 1]
    weights = ((1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy)
    corners = ((i0, j0), (i1, j0), (i0, j1), (i1, j1))
    return corners, weights


def interpolate_grid(values: np.ndarray, spacing: float, x: np.ndarray) -> np.ndarray:
    """Bilinear interpolation of (C, N, N) grid values at positions (..., 2) -> (..., C)"""
    grid = values.shape[-1]
    corners, weights = bilinear_stencil(x, spacing, grid)
    out = 0.0
    for (i, j), w in zip(corners, weights):
        out = out + values[:, i, j] * w
    return np.moveaxis(np.asarray(out), 0, -1)


def interpolate_batch(values: np.ndarray, spacing: float, x: np.ndarray) -> np.ndarray:
    """Per-member bilinear interpolation: values (B, C, N, N), x (B, 2) -> (B, C)"""
    batch, channels, grid = values.shape[0], values.shape[1], values.shape[-1]
    corners, weights = bilinear_stencil(x, spacing, grid)
    rows = np.arange(batch)[:, None]
    cols = np.arange(channels)[None, :]
    out = np.zeros((batch, channels))
    for (i, j), w in zip(corners, weights):
        out += values[rows, cols, i[:, None], j[:, None]] * w[:, None]
    return out


def evaluate_field(sample: FieldSample, x) -> np.ndarray:
    """Drift vector at x (periodic, bilinear, exact at nodes)"""
    return interpolate_grid(sample.values, sample.spacing, np.asarray(x, dtype=float))


def spectral_divergence(sample: FieldSample) -> float:
    """max over modes of |p . omega_hat(p)| of the realized field"""
    modes = np.fft.fft2(sample.values, axes=(1, 2)) / sample.grid ** 2
    k1, k2 = wavevectors(sample.box, sample.grid)
    return float(np.max(np.abs(k1 * modes[0] + k2 * modes[1])))


def spectral_rotation(sample: FieldSample) -> float:
    """max over modes of |p~ . omega_hat(p)| with p~ = (p2, -p1)"""
    modes = np.fft.fft2(sample.values, axes=(1, 2)) / sample.grid ** 2
    k1, k2 = wavevectors(sample.box, sample.grid)
    return float(np.max(np.abs(k2 * modes[0] - k1 * modes[1])))


def real_space_covariance(spec: CovarianceSpec, x, quad: QuadratureConfig = None) -> np.ndarray:
    """K(x) on the plane; angular integral through Bessel functions, radial by adaptive quadrature"""
    quad = quad or QuadratureConfig.from_settings()
    x = np.asarray(x, dtype=float)
    rho = float(np.hypot(x[0], x[1]))
    phi = float(np.arctan2(x[1], x[0]))
    p_max = min(quad.p_max, spec.mollifier.spectral_cutoff(1e-16))
    v_hat = spec.mollifier.v_hat
    breaks = [spec.mollifier.spectral_cutoff()] if spec.mollifier.kind == "flat" else None

    i0, _ = quad_checked(lambda r: v_hat(r) * r * special.j0(r * rho), 0.0, p_max, quad,
                         points=breaks, label="covariance J0 integral")
    if spec.model == EnvironmentModel.SCALAR:
        return np.array([[i0 / (2.0 * np.pi), 0.0], [0.0, 0.0]])

    i2 = 0.0
    if rho > 0:
        i2, _ = quad_checked(lambda r: v_hat(r) * r * special.jv(2, r * rho), 0.0, p_max, quad,
                             points=breaks, label="covariance J2 integral")
    rotation = np.array([[np.cos(2 * phi), np.sin(2 * phi)], [np.sin(2 * phi), -np.cos(2 * phi)]])
    sign = -1.0 if spec.model == EnvironmentModel.GRADIENT else 1.0
    return (i0 * np.eye(2) + sign * i2 * rotation) / (4.0 * np.pi)


def torus_covariance(spec: CovarianceSpec, box: float, grid: int, x) -> np.ndarray:
    """Exact covariance of sample_field on the torus: sum over retained modes of K_hat(k) cos(k.x) / L^2"""
    x = np.asarray(x, dtype=float)
    k1, k2 = wavevectors(box, grid)
    mask = retained_mask(grid)
    p = np.stack([k1[mask], k2[mask]], axis=-1)
    weights = np.cos(p[:, 0] * x[0] + p[:, 1] * x[1]) / box ** 2
    return np.einsum("m,mkl->kl", weights, spectral_covariance(spec, p))


def node_positions(sample: FieldSample) -> Tuple[np.ndarray, np.ndarray]:
    axis = np.arange(sample.grid) * sample.spacing
    return np.meshgrid(axis, axis, indexing="ij")


def write_field_csv(sample: FieldSample, output_path: str) -> str:
    """Columns x, y, omega1, omega2 at every grid node"""
    ensure_directory(str(Path(output_path).parent))
    x, y = node_positions(sample)
    frame = pd.DataFrame({
        "x": x.ravel(),
        "y": y.ravel(),
        "omega1": sample.values[0].ravel(),
        "omega2": sample.values[1].ravel(),
    })
    frame.to_csv(output_path, index=False, float_format="%.17g")
    logger.info(f"Field sample written to: {output_path}")
    return output_path


FIELD_HEADER = np.dtype([("magic", "S4"), ("box", "<f8"), ("grid", "<i8"),
                         ("model", "<i8"), ("seed", "<u8")])


def write_field_binary(sample: FieldSample, output_path: str) -> str:
    """Header (L, N, model id, seed) followed by row-major float64 values of both components"""
    ensure_directory(str(Path(output_path).parent))
    header = np.array([(b"SDFS", sample.box, sample.grid, MODEL_IDS[sample.model], sample.seed)],
                      dtype=FIELD_HEADER)
    with open(output_path, "wb") as handle:
        handle.write(header.tobytes())
        handle.write(np.ascontiguousarray(sample.values, dtype="<f8").tobytes())
    logger.info(f"Binary field dump written to: {output_path}")
    return output_path


def read_field_binary(input_path: str) -> FieldSample:
    raw = Path(input_path).read_bytes()
    header = np.frombuffer(raw[:FIELD_HEADER.itemsize], dtype=FIELD_HEADER)[0]
    if header["magic"] != b"SDFS":
        raise ConfigurationError(f"{input_path} is not a field dump")
    grid = int(header["grid"])
    values = np.frombuffer(raw[FIELD_HEADER.itemsize:], dtype="<f8").reshape(2, grid, grid)
    model = {v: k for k, v in MODEL_IDS.items()}[int(header["model"])]
    box = float(header["box"])
    modes = np.fft.fft2(values, axes=(1, 2)) / grid ** 2
    return FieldSample(box=box, grid=grid, model=model, seed=int(header["seed"]),
                       values=values.copy(), fourier_modes=modes)
