"""
Euler-Maruyama integration of the three tracer SDEs.

Trajectories are integrated in batches that share nothing but array shape: every
member owns its environment sample, local-time grid row and noise stream, all
derived from SeedSequence(seed, spawn_key=(index,)).
"""

import math
from concurrent.futures import ProcessPoolExecutor
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .env_sampler import (CovarianceSpec, FieldSample, GaussianMollifier, Mollifier, TracerModel,
                          bilinear_stencil, interpolate_batch, retained_mask, sample_field,
                          wavevectors, zero_field)
from .errors import ConfigurationError, InstabilityError
from .utils import setup_logging, settings_section, thread_cap

logger = setup_logging(__name__)


class SimConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    model: TracerModel
    dt: float = Field(0.01, gt=0, le=0.1, description="Euler-Maruyama time step")
    t_max: float = Field(..., gt=0, description="Horizon")
    output_times: Tuple[float, ...] = Field((), description="Recording times; empty means (t_max,)")
    box: float = Field(64.0, gt=0)
    grid: int = Field(256, gt=0)
    seed: int = Field(0, ge=0)
    ensemble_size: int = Field(1, ge=1)
    mollifier: Mollifier = Field(default_factory=GaussianMollifier, discriminator="kind")
    refresh_every: int = Field(10, ge=1, description="Steps between spectral local-time drift refreshes")
    batch_size: int = Field(64, ge=1)
    noise_block: int = Field(512, ge=1)
    noise_substeps: int = Field(1, ge=1, description="Normal pairs per step, combined as sum / sqrt(s)")
    environment_off: bool = Field(False, description="F = 0")
    repulsion_off: bool = Field(False, description="No local-time force (deposits still recorded)")

    @field_validator("output_times", mode="before")
    @classmethod
    def _sorted_times(cls, value):
        return tuple(sorted(float(t) for t in (value or ())))

    @model_validator(mode="after")
    def _check_times(self) -> "SimConfig":
        if self.t_max < self.dt:
            raise ValueError(f"t_max={self.t_max} is shorter than one step dt={self.dt}")
        for t in self.output_times:
            if not 0 < t <= self.t_max:
                raise ValueError(f"output time {t} outside (0, t_max={self.t_max}]")
        return self

    @classmethod
    def from_settings(cls, **values) -> "SimConfig":
        merged = dict(settings_section("dynamics"))
        merged.update({k: v for k, v in settings_section("sampler").items() if k in ("box", "grid")})
        merged.update({k: v for k, v in values.items() if v is not None})
        return cls(**{k: v for k, v in merged.items() if k in cls.model_fields})

    @property
    def times(self) -> Tuple[float, ...]:
        return self.output_times or (self.t_max,)

    @property
    def n_steps(self) -> int:
        return int(round(self.t_max / self.dt))

    @property
    def output_steps(self) -> np.ndarray:
        return np.maximum(np.rint(np.asarray(self.times) / self.dt).astype(np.int64), 1)


def log_output_times(dt: float, t_max: float, points: int = 20) -> Tuple[float, ...]:
    """Log-spaced recording times snapped to multiples of dt, ending at t_max"""
    start = max(dt, t_max / 1e3)
    steps = np.unique(np.rint(np.logspace(math.log10(start), math.log10(t_max), points) / dt).astype(np.int64))
    times = [float(s * dt) for s in steps if s >= 1 and s * dt <= t_max]
    if not times or times[-1] != t_max:
        times.append(float(t_max))
    return tuple(times)


class Trajectory(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    index: int
    times: np.ndarray
    positions: np.ndarray                       # (T, 2), unwrapped
    local_time: Optional[np.ndarray] = None     # (N, N), self-repelling models
    deposited_mass: Optional[float] = None
    max_abs: float = 0.0


class EnsembleStats(BaseModel):
    times: List[float]
    E: List[float]
    stderr: List[float]
    E1: List[float]
    E2: List[float]
    E1_stderr: List[float]
    E2_stderr: List[float]
    ensemble_size: int
    wrap_warnings: int = Field(0, description="Trajectories with max |X| > L/4")

    @classmethod
    def from_positions(cls, times: Sequence[float], positions: np.ndarray, wrap_warnings: int = 0) -> "EnsembleStats":
        """positions (M, T, 2) in trajectory order"""
        squares = positions ** 2
        total = squares.sum(axis=-1)
        m = positions.shape[0]

        def sem(values):
            return (values.std(axis=0, ddof=1) / math.sqrt(m)).tolist()

        e1 = squares[..., 0].mean(axis=0)
        e2 = squares[..., 1].mean(axis=0)
        return cls(times=[float(t) for t in times], E=(e1 + e2).tolist(), stderr=sem(total),
                   E1=e1.tolist(), E2=e2.tolist(), E1_stderr=sem(squares[..., 0]),
                   E2_stderr=sem(squares[..., 1]), ensemble_size=m, wrap_warnings=wrap_warnings)


def trajectory_seeds(seed: int, index: int) -> Tuple[int, np.random.SeedSequence]:
    """Environment seed and noise seed sequence of trajectory `index`"""
    env_seq, noise_seq = np.random.SeedSequence(int(seed), spawn_key=(int(index),)).spawn(2)
    words = env_seq.generate_state(2, dtype=np.uint32)
    return int(words[0]) | (int(words[1]) << 32), noise_seq


class NoiseStream:
    """Driving noise of a batch: per-member Philox streams read in blocks of (steps, substeps, 2)"""

    def __init__(self, seed_sequences: Sequence[np.random.SeedSequence], substeps: int = 1, block: int = 512):
        self.generators = [np.random.Generator(np.random.Philox(seq)) for seq in seed_sequences]
        self.substeps = substeps
        self.block = block
        self._buffer = np.empty((len(self.generators), 0, 2))
        self._cursor = 0

    def _refill(self, steps: int) -> None:
        draws = [g.standard_normal((steps, self.substeps, 2)) for g in self.generators]
        self._buffer = np.stack(draws).sum(axis=2) / math.sqrt(self.substeps)
        self._cursor = 0

    def next(self, remaining: Optional[int] = None) -> np.ndarray:
        """(B, 2) standard normal pairs for one step"""
        if self._cursor >= self._buffer.shape[1]:
            steps = self.block if remaining is None else max(1, min(self.block, remaining))
            self._refill(steps)
        out = self._buffer[:, self._cursor]
        self._cursor += 1
        return out


def local_time_force_grid(values: np.ndarray, box: float, mollifier: Mollifier) -> np.ndarray:
    """-grad V * l at the grid nodes for node masses `values` (B, N, N) -> (B, 2, N, N)"""
    grid = values.shape[-1]
    k1, k2 = wavevectors(box, grid)
    kernel = np.where(retained_mask(grid), mollifier.v_hat(np.hypot(k1, k2)), 0.0)
    hat = np.fft.fft2(values, axes=(1, 2)) * kernel
    scale = -(grid ** 2) / box ** 2
    f1 = scale * np.real(np.fft.ifft2(1j * k1 * hat, axes=(1, 2)))
    f2 = scale * np.real(np.fft.ifft2(1j * k2 * hat, axes=(1, 2)))
    return np.stack([f1, f2], axis=1)


class LocalTimeGrid:
    """Occupation-time accumulator of a batch with a lazily refreshed spectral drift cache"""

    def __init__(self, box: float, grid: int, mollifier: Mollifier = None, batch: int = 1, refresh_every: int = 10):
        self.box = float(box)
        self.grid = int(grid)
        self.mollifier = mollifier or GaussianMollifier()
        self.refresh_every = int(refresh_every)
        self.values = np.zeros((batch, grid, grid))
        self.deposited_mass = np.zeros(batch)
        self.dirty = False
        self._field = np.zeros((batch, 2, grid, grid))
        self._pending_nodes: List[np.ndarray] = []
        self._pending_mass: List[np.ndarray] = []

    @property
    def spacing(self) -> float:
        return self.box / self.grid

    @property
    def batch(self) -> int:
        return self.values.shape[0]

    def deposit(self, x: np.ndarray, mass: float) -> None:
        """Spread `mass` bilinearly over the four nodes around each position x (B, 2)"""
        corners, weights = bilinear_stencil(np.asarray(x, dtype=float), self.spacing, self.grid)
        rows = np.arange(self.batch)
        nodes, masses = [], []
        for (i, j), w in zip(corners, weights):
            np.add.at(self.values, (rows, i, j), w * mass)
            nodes.append(np.stack([i, j], axis=-1) * self.spacing)
            masses.append(w * mass)
        self.deposited_mass += mass
        self._pending_nodes.append(np.stack(nodes, axis=1))
        self._pending_mass.append(np.stack(masses, axis=1))
        self.dirty = True

    def refresh(self) -> None:
        if np.any(self.values):
            self._field = local_time_force_grid(self.values, self.box, self.mollifier)
        self._pending_nodes.clear()
        self._pending_mass.clear()
        self.dirty = False

    def force(self, x: np.ndarray) -> np.ndarray:
        """-(grad V * l)(x) for positions (B, 2); deposits since the last refresh enter analytically"""
        if len(self._pending_nodes) >= self.refresh_every:
            self.refresh()
        x = np.asarray(x, dtype=float)
        out = interpolate_batch(self._field, self.spacing, x)
        if self._pending_nodes:
            nodes = np.concatenate(self._pending_nodes, axis=1)
            masses = np.concatenate(self._pending_mass, axis=1)
            d = x[:, None, :] - nodes
            d -= self.box * np.round(d / self.box)
            g1, g2 = self.mollifier.grad_v(d[..., 0], d[..., 1])
            out[:, 0] -= np.sum(masses * g1, axis=1)
            out[:, 1] -= np.sum(masses * g2, axis=1)
        return out

    def total(self) -> np.ndarray:
        return self.values.sum(axis=(1, 2))


class TracerState:
    """Positions, environment and local time of a batch of tracers"""

    def __init__(self, model: TracerModel, environment: np.ndarray, box: float,
                 local_time: Optional[LocalTimeGrid] = None, positions: Optional[np.ndarray] = None,
                 repulsion: bool = True, first_index: int = 0):
        self.model = model
        self.environment = environment          # (B, 2, N, N)
        self.box = float(box)
        self.grid = environment.shape[-1]
        self.local_time = local_time
        self.repulsion = repulsion
        self.first_index = first_index
        batch = environment.shape[0]
        self.positions = np.zeros((batch, 2)) if positions is None else np.array(positions, dtype=float)
        self.time = 0.0
        self.steps = 0

    @classmethod
    def from_samples(cls, model: TracerModel, samples: Sequence[FieldSample], mollifier: Mollifier = None,
                     positions: Optional[np.ndarray] = None, refresh_every: int = 10,
                     repulsion: bool = True, first_index: int = 0) -> "TracerState":
        environment = np.stack([s.values for s in samples])
        box, grid = samples[0].box, samples[0].grid
        local_time = None
        if model.self_repelling:
            local_time = LocalTimeGrid(box, grid, mollifier, len(samples), refresh_every)
        return cls(model, environment, box, local_time, positions, repulsion, first_index)

    @property
    def spacing(self) -> float:
        return self.box / self.grid

    def field_at(self, x: Optional[np.ndarray] = None) -> np.ndarray:
        return interpolate_batch(self.environment, self.spacing, self.positions if x is None else x)


def initial_environment(model: TracerModel, box: float, grid: int, seed: int,
                        mollifier: Mollifier = None) -> FieldSample:
    """Stationary starting field: SRBP -> gradient GFF, DCGF -> curl GFF, anisotropic SRBP -> scalar"""
    spec = CovarianceSpec(model=model.environment, mollifier=mollifier or GaussianMollifier())
    return sample_field(spec, box, grid, seed)


def srbp_drift(state: TracerState) -> np.ndarray:
    """F(X) - (grad V * l)(X); the anisotropic model keeps only the first coordinate"""
    drift = state.field_at()
    if state.local_time is not None and state.repulsion:
        drift = drift + state.local_time.force(state.positions)
    if state.model == TracerModel.SRBP_ANISO:
        drift[:, 1] = 0.0
    return drift


def _guard(state: TracerState, increment: np.ndarray) -> None:
    jump = np.hypot(increment[:, 0], increment[:, 1])
    bad = np.flatnonzero(jump > state.box / 4.0)
    if bad.size:
        index = state.first_index + int(bad[0])
        raise InstabilityError(f"step of length {jump[bad[0]]:.3g} exceeds L/4 = {state.box / 4:.3g}; reduce dt",
                               trajectory=index, time=state.time)


def step_dcgf(state: TracerState, dt: float, noise: np.ndarray) -> TracerState:
    """X <- X + F(X) dt + sqrt(2 dt) noise"""
    increment = state.field_at() * dt + math.sqrt(2.0 * dt) * np.asarray(noise, dtype=float)
    _guard(state, increment)
    state.positions = state.positions + increment
    state.time += dt
    state.steps += 1
    return state


def step_srbp(state: TracerState, dt: float, noise: np.ndarray) -> TracerState:
    """Euler step with the self-repelling drift, then deposit dt at the pre-step position"""
    noise = np.asarray(noise, dtype=float)
    scale = math.sqrt(2.0 * dt)
    drift = srbp_drift(state)
    old = state.positions.copy()
    if state.model == TracerModel.SRBP_ANISO:
        increment = np.stack([drift[:, 0] * dt + scale * noise[:, 0], scale * noise[:, 1]], axis=1)
        _guard(state, increment)
        state.positions[:, 0] = state.positions[:, 0] + increment[:, 0]
        state.positions[:, 1] = state.positions[:, 1] + scale * noise[:, 1]
    else:
        increment = drift * dt + scale * noise
        _guard(state, increment)
        state.positions = state.positions + increment
    state.local_time.deposit(old, dt)
    state.time += dt
    state.steps += 1
    return state


def environment_probe(state: TracerState, displacements: np.ndarray) -> np.ndarray:
    """eta(t, x) = drift profile at X(t) + x for each displacement: (B, n, 2)"""
    displacements = np.atleast_2d(np.asarray(displacements, dtype=float))
    out = []
    for shift in displacements:
        x = state.positions + shift
        value = state.field_at(x)
        if state.local_time is not None and state.repulsion:
            value = value + state.local_time.force(x)
        out.append(value)
    return np.stack(out, axis=1)


def build_batch(config: SimConfig, indices: Sequence[int]) -> Tuple[TracerState, NoiseStream]:
    seeds = [trajectory_seeds(config.seed, i) for i in indices]
    if config.environment_off:
        samples = [zero_field(config.model.environment, config.box, config.grid) for _ in indices]
    else:
        samples = [initial_environment(config.model, config.box, config.grid, env_seed, config.mollifier)
                   for env_seed, _ in seeds]
    state = TracerState.from_samples(config.model, samples, config.mollifier,
                                     refresh_every=config.refresh_every,
                                     repulsion=not config.repulsion_off, first_index=int(indices[0]))
    noise = NoiseStream([seq for _, seq in seeds], config.noise_substeps, config.noise_block)
    return state, noise


def run_batch(config: SimConfig, indices: Sequence[int], keep_local_time: bool = True) -> List[Trajectory]:
    """Integrate trajectories `indices` together; results do not depend on how indices are batched"""
    state, noise = build_batch(config, indices)
    stepper = step_srbp if config.model.self_repelling else step_dcgf
    record_at = config.output_steps
    recorded = np.zeros((len(indices), len(record_at), 2))
    max_abs = np.zeros(len(indices))
    slot = 0
    total = config.n_steps
    for step in range(1, total + 1):
        stepper(state, config.dt, noise.next(total - step + 1))
        max_abs = np.maximum(max_abs, np.hypot(state.positions[:, 0], state.positions[:, 1]))
        while slot < len(record_at) and record_at[slot] == step:
            recorded[:, slot] = state.positions
            slot += 1

    trajectories = []
    for b, index in enumerate(indices):
        local = state.local_time
        trajectories.append(Trajectory(
            index=int(index),
            times=np.asarray(config.times),
            positions=recorded[b],
            local_time=local.values[b].copy() if (local is not None and keep_local_time) else None,
            deposited_mass=float(local.deposited_mass[b]) if local is not None else None,
            max_abs=float(max_abs[b]),
        ))
    return trajectories


def simulate(config: SimConfig, index: int = 0) -> Trajectory:
    """One trajectory from X(0) = 0 in a fresh stationary environment"""
    return run_batch(config, [index])[0]


def _batch_job(args) -> List[Trajectory]:
    config, indices = args
    return run_batch(config, indices, keep_local_time=False)


def run_ensemble(config: SimConfig, workers: Optional[int] = None) -> EnsembleStats:
    """E(t), E1(t), E2(t) with standard errors over ensemble_size independent trajectories"""
    if config.ensemble_size < 2:
        raise ConfigurationError(f"ensemble_size must be >= 2 (got {config.ensemble_size})")
    indices = np.arange(config.ensemble_size)
    batches = [indices[i:i + config.batch_size].tolist() for i in range(0, len(indices), config.batch_size)]
    workers = workers or thread_cap()
    logger.info(f"Ensemble: model={config.model.value}, M={config.ensemble_size}, "
                f"{len(batches)} batch(es), {workers} worker(s)")

    jobs = [(config, batch) for batch in batches]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_batch_job, jobs))
    else:
        results = [_batch_job(job) for job in jobs]

    trajectories = [t for batch in results for t in batch]
    positions = np.stack([t.positions for t in trajectories])
    wraps = int(sum(t.max_abs > config.box / 4.0 for t in trajectories))
    if wraps:
        logger.warning(f"{wraps} of {len(trajectories)} trajectories moved beyond L/4 = {config.box / 4:g}; "
                       f"finite-box wake effects possible")
    return EnsembleStats.from_positions(config.times, positions, wraps)
