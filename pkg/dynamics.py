"""
Benchmark Dynamics and Trajectory Datasets
==========================================

Ground-truth simulators for the four benchmark systems:

1. Single pendulum          q = (theta)
2. Cart-pendulum            q = (theta, x)
3. Double pendulum          q = (theta1, theta2)
4. Spherical pendulum       q = (theta, phi)

plus external forcing, Gaussian noise injection and CSV/JSON dataset files.

Dependencies:
    pip install numpy tqdm colorama

Usage:
    from dynamics import SystemSpec, ForcingSpec, DatasetParams, generate_dataset

    system = SystemSpec("cart_pendulum")
    data = generate_dataset(system, ForcingSpec(active=True), DatasetParams(trajectories=20))
"""

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from console import console
from exceptions import (
    ConfigError,
    DatasetParseError,
    NonFiniteStateError,
    SingularConfigurationError,
)
from symlib import CandidateExpr, CoordinateSpace

SYSTEM_KINDS = ("single_pendulum", "cart_pendulum", "double_pendulum", "spherical_pendulum")
COORDINATE_NAMES = {
    "single_pendulum": ("theta",),
    "cart_pendulum": ("theta", "x"),
    "double_pendulum": ("theta1", "theta2"),
    "spherical_pendulum": ("theta", "phi"),
}
FORCING_FORMS = ("sin", "cos", "sin+cos")
NOISE_CHANNELS = ("q", "qd", "qdd", "tau")

SINGULAR_SIN = 1e-6
DEFAULT_DT = 0.01
DEFAULT_DURATION = 5.0
DEFAULT_SUBSTEPS = 10
MAX_RESAMPLE_ATTEMPTS = 20

# RNG stream ids, combined with (seed, trajectory index)
STREAM_INITIAL = 0
STREAM_FORCING = 1

PathLike = Union[str, Path]


@dataclass
class SystemSpec:
    """Physical parameters of a benchmark system (SI units)"""
    kind: str = "single_pendulum"
    mass: float = 1.0
    mass2: float = 1.0
    cart_mass: float = 0.5
    length: float = 1.0
    gravity: float = 9.81

    def __post_init__(self):
        if self.kind not in SYSTEM_KINDS:
            raise ConfigError(f"Unknown system kind {self.kind!r}; choose from {list(SYSTEM_KINDS)}")
        for name in ("mass", "mass2", "cart_mass", "length", "gravity"):
            value = getattr(self, name)
            if not np.isfinite(value) or value <= 0:
                raise ConfigError(f"System parameter {name} must be positive, got {value}")

    @property
    def names(self) -> Tuple[str, ...]:
        return COORDINATE_NAMES[self.kind]

    @property
    def n(self) -> int:
        return len(self.names)

    @property
    def space(self) -> CoordinateSpace:
        return CoordinateSpace(self.names)

    def _true_terms(self) -> Dict[str, float]:
        m, L, g = self.mass, self.length, self.gravity
        if self.kind == "single_pendulum":
            return {"theta_dot**2": 0.5 * m * L**2, "cos(theta)": m * g * L}
        if self.kind == "cart_pendulum":
            l = L / 2
            return {
                "theta_dot**2": m * l**2,
                "x_dot**2": 0.5 * (self.cart_mass + m),
                "x_dot*theta_dot*cos(theta)": m * l,
                "cos(theta)": m * g * l,
            }
        if self.kind == "double_pendulum":
            m1, m2 = self.mass, self.mass2
            return {
                "theta1_dot**2": 0.5 * (m1 + m2) * L**2,
                "theta2_dot**2": 0.5 * m2 * L**2,
                "theta1_dot*theta2_dot*cos(theta1)*cos(theta2)": m2 * L**2,
                "theta1_dot*theta2_dot*sin(theta1)*sin(theta2)": m2 * L**2,
                "cos(theta1)": (m1 + m2) * g * L,
                "cos(theta2)": m2 * g * L,
            }
        return {
            "phi_dot**2*sin(theta)**2": 0.5 * m * L**2,
            "theta_dot**2": 0.5 * m * L**2,
            "cos(theta)": m * g * L,
        }

    def true_coefficients(self) -> Dict[str, float]:
        """Reference Lagrangian as {candidate key: coefficient}"""
        space = self.space
        return {CandidateExpr.parse(text, space).key: value for text, value in self._true_terms().items()}

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> "SystemSpec":
        return cls(**data)


@dataclass(frozen=True)
class Forcing:
    """
    Realized external input tau_i(t) = A_i * f(omega_i t)

    amplitudes/frequencies have shape (n,) for one trajectory or (B, n)
    for a batch integrated together.
    """
    form: str
    amplitudes: np.ndarray
    frequencies: np.ndarray

    @classmethod
    def passive(cls, n: int) -> "Forcing":
        return cls("sin", np.zeros(n), np.zeros(n))

    @classmethod
    def stack(cls, forcings: Sequence["Forcing"]) -> "Forcing":
        forms = {f.form for f in forcings}
        if len(forms) != 1:
            raise ConfigError("Cannot batch forcings with different forms")
        return cls(
            forms.pop(),
            np.stack([f.amplitudes for f in forcings]),
            np.stack([f.frequencies for f in forcings]),
        )

    @property
    def active(self) -> bool:
        return bool(np.any(self.amplitudes != 0))

    def __call__(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        phase = np.multiply.outer(t, self.frequencies) if t.ndim else self.frequencies * t
        if self.form == "sin":
            shape = np.sin(phase)
        elif self.form == "cos":
            shape = np.cos(phase)
        else:
            shape = np.sin(phase) + np.cos(phase)
        return self.amplitudes * shape

    def to_dict(self) -> Dict:
        return {
            "form": self.form,
            "amplitudes": np.asarray(self.amplitudes).tolist(),
            "frequencies": np.asarray(self.frequencies).tolist(),
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "Forcing":
        return cls(data["form"], np.asarray(data["amplitudes"], float), np.asarray(data["frequencies"], float))


@dataclass
class ForcingSpec:
    """How per-trajectory forcing is drawn"""
    active: bool = False
    form: str = "sin"
    amplitude_range: Tuple[float, float] = (0.5, 2.0)
    frequency_range: Tuple[float, float] = (0.5 * math.pi, 2.0 * math.pi)

    def __post_init__(self):
        self.amplitude_range = tuple(float(v) for v in self.amplitude_range)
        self.frequency_range = tuple(float(v) for v in self.frequency_range)
        if self.form not in FORCING_FORMS:
            raise ConfigError(f"Unknown forcing form {self.form!r}; choose from {list(FORCING_FORMS)}")
        for name in ("amplitude_range", "frequency_range"):
            low, high = getattr(self, name)
            if not (0 <= low <= high):
                raise ConfigError(f"{name} must satisfy 0 <= low <= high, got {(low, high)}")

    def draw(self, n: int, rng: np.random.Generator) -> Forcing:
        if not self.active:
            return Forcing.passive(n)
        amplitudes = rng.uniform(*self.amplitude_range, size=n)
        frequencies = rng.uniform(*self.frequency_range, size=n)
        return Forcing(self.form, amplitudes, frequencies)

    def to_dict(self) -> Dict:
        data = asdict(self)
        data["amplitude_range"] = list(self.amplitude_range)
        data["frequency_range"] = list(self.frequency_range)
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> "ForcingSpec":
        return cls(**data)


@dataclass
class DatasetParams:
    trajectories: int = 100
    duration: float = DEFAULT_DURATION
    dt: float = DEFAULT_DT
    seed: int = 0
    substeps: int = DEFAULT_SUBSTEPS
    chunk_size: int = 32

    def __post_init__(self):
        if self.trajectories < 1:
            raise ConfigError(f"trajectories must be >= 1, got {self.trajectories}")
        if self.dt <= 0 or self.duration < self.dt:
            raise ConfigError(f"Need dt > 0 and duration >= dt, got dt={self.dt}, duration={self.duration}")
        if self.substeps < 1 or self.chunk_size < 1:
            raise ConfigError("substeps and chunk_size must be >= 1")

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> "DatasetParams":
        return cls(**data)


@dataclass
class NoiseSpec:
    sigma: float = 0.0
    channels: Tuple[str, ...] = ("q", "qd", "qdd")
    seed: int = 0

    def __post_init__(self):
        self.channels = tuple(self.channels)
        if not np.isfinite(self.sigma) or self.sigma < 0:
            raise ConfigError(f"Noise sigma must be >= 0, got {self.sigma}")
        unknown = [c for c in self.channels if c not in NOISE_CHANNELS]
        if unknown:
            raise ConfigError(f"Unknown noise channels {unknown}; choose from {list(NOISE_CHANNELS)}")


@dataclass
class TrajectoryDataset:
    """
    Stacked samples of many trajectories

    t and traj_id have shape (S,); q, qd, qdd and tau have shape (S, n).
    """
    t: np.ndarray
    q: np.ndarray
    qd: np.ndarray
    qdd: np.ndarray
    tau: np.ndarray
    traj_id: np.ndarray
    metadata: Dict = field(default_factory=dict)

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        self.traj_id = np.asarray(self.traj_id, dtype=int)
        for name in ("q", "qd", "qdd", "tau"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float).reshape(len(self.t), -1))
        shapes = {getattr(self, name).shape for name in ("q", "qd", "qdd", "tau")}
        if len(shapes) != 1 or len(self.traj_id) != len(self.t):
            raise ConfigError(f"Inconsistent dataset array shapes: {sorted(shapes)}")

    @property
    def n(self) -> int:
        return self.q.shape[1]

    @property
    def n_samples(self) -> int:
        return len(self.t)

    @property
    def trajectory_ids(self) -> List[int]:
        return sorted(set(self.traj_id.tolist()))

    @property
    def n_trajectories(self) -> int:
        return len(self.trajectory_ids)

    @property
    def has_tau(self) -> bool:
        """True when the data were recorded under active external forcing"""
        return bool(self.metadata.get("forcing_active", False))

    @property
    def system(self) -> Optional[SystemSpec]:
        data = self.metadata.get("system")
        return SystemSpec.from_dict(data) if data else None

    def select(self, mask: np.ndarray) -> "TrajectoryDataset":
        return TrajectoryDataset(
            self.t[mask], self.q[mask], self.qd[mask], self.qdd[mask], self.tau[mask],
            self.traj_id[mask], dict(self.metadata),
        )

    def trajectory(self, traj: int) -> "TrajectoryDataset":
        mask = self.traj_id == traj
        if not mask.any():
            raise ConfigError(f"Trajectory {traj} is not in the dataset")
        return self.select(mask)

    def initial_states(self) -> Tuple[np.ndarray, np.ndarray]:
        """(q0, qd0) per trajectory in trajectory-id order"""
        firsts = [int(np.flatnonzero(self.traj_id == i)[0]) for i in self.trajectory_ids]
        return self.q[firsts], self.qd[firsts]

    def forcing(self, traj: int) -> Forcing:
        """The forcing the trajectory was recorded under"""
        params = self.metadata.get("forcing_params")
        if not params:
            return Forcing.passive(self.n)
        return Forcing.from_dict(params[self.trajectory_ids.index(traj)])

    @classmethod
    def concatenate(cls, parts: Sequence["TrajectoryDataset"], metadata: Dict) -> "TrajectoryDataset":
        return cls(
            np.concatenate([p.t for p in parts]),
            np.concatenate([p.q for p in parts]),
            np.concatenate([p.qd for p in parts]),
            np.concatenate([p.qdd for p in parts]),
            np.concatenate([p.tau for p in parts]),
            np.concatenate([p.traj_id for p in parts]),
            metadata,
        )


# ---------------------------------------------------------------------------
# Equations of motion (hand-derived from the reference Lagrangians)
# Each returns (qdd, singular) for a batch of states of shape (B, n).
# ---------------------------------------------------------------------------

def _single_eom(system: SystemSpec, q, qd, tau):
    m, L, g = system.mass, system.length, system.gravity
    qdd = (tau[:, 0] - m * g * L * np.sin(q[:, 0])) / (m * L**2)
    return qdd[:, None], np.zeros(len(q), dtype=bool)


def _cart_eom(system: SystemSpec, q, qd, tau):
    coeffs = system._true_terms()
    a, b = coeffs["theta_dot**2"], coeffs["x_dot**2"]
    c, d = coeffs["x_dot*theta_dot*cos(theta)"], coeffs["cos(theta)"]
    theta, theta_dot = q[:, 0], qd[:, 0]
    cos, sin = np.cos(theta), np.sin(theta)
    # [[2a, c cos], [c cos, 2b]] qdd = rhs
    m11, m12, m22 = 2 * a, c * cos, 2 * b
    r1 = tau[:, 0] - d * sin
    r2 = tau[:, 1] + c * theta_dot**2 * sin
    det = m11 * m22 - m12**2
    qdd = np.stack([(m22 * r1 - m12 * r2) / det, (m11 * r2 - m12 * r1) / det], axis=1)
    return qdd, np.zeros(len(q), dtype=bool)


def _double_eom(system: SystemSpec, q, qd, tau):
    m1, m2, L, g = system.mass, system.mass2, system.length, system.gravity
    delta = q[:, 0] - q[:, 1]
    cos_d, sin_d = np.cos(delta), np.sin(delta)
    m11 = (m1 + m2) * L**2
    m12 = m2 * L**2 * cos_d
    m22 = m2 * L**2
    r1 = tau[:, 0] - m2 * L**2 * sin_d * qd[:, 1]**2 - (m1 + m2) * g * L * np.sin(q[:, 0])
    r2 = tau[:, 1] + m2 * L**2 * sin_d * qd[:, 0]**2 - m2 * g * L * np.sin(q[:, 1])
    det = m11 * m22 - m12**2
    qdd = np.stack([(m22 * r1 - m12 * r2) / det, (m11 * r2 - m12 * r1) / det], axis=1)
    return qdd, np.zeros(len(q), dtype=bool)


def _spherical_eom(system: SystemSpec, q, qd, tau):
    m, L, g = system.mass, system.length, system.gravity
    sin, cos = np.sin(q[:, 0]), np.cos(q[:, 0])
    singular = np.abs(sin) < SINGULAR_SIN
    sin2 = np.where(singular, 1.0, sin**2)
    theta_dd = sin * cos * qd[:, 1]**2 - (g / L) * sin + tau[:, 0] / (m * L**2)
    phi_dd = (tau[:, 1] / (m * L**2) - 2 * sin * cos * qd[:, 0] * qd[:, 1]) / sin2
    qdd = np.stack([theta_dd, phi_dd], axis=1)
    qdd[singular] = np.nan
    return qdd, singular


_EOM = {
    "single_pendulum": _single_eom,
    "cart_pendulum": _cart_eom,
    "double_pendulum": _double_eom,
    "spherical_pendulum": _spherical_eom,
}


def true_accelerations(system: SystemSpec, q, qd, tau) -> Tuple[np.ndarray, np.ndarray]:
    """Batched EOM: (qdd, singular mask) for states of shape (B, n)"""
    return _EOM[system.kind](system, q, qd, tau)


def equations_of_motion(system: SystemSpec, q, q_dot, tau=None, t: float = 0.0) -> np.ndarray:
    """
    Accelerations of the reference system under external input

    Args:
        system: System parameters
        q, q_dot: State, shape (n,) or (B, n)
        tau: External input with the same shape (zeros if None)
        t: Sample time, only used in diagnostics

    Returns:
        q_ddot with the same shape as q
    """
    q = np.asarray(q, dtype=float)
    single = q.ndim == 1
    q2 = np.atleast_2d(q)
    qd2 = np.atleast_2d(np.asarray(q_dot, dtype=float))
    tau2 = np.zeros_like(q2) if tau is None else np.atleast_2d(np.asarray(tau, dtype=float))
    if q2.shape[1] != system.n or qd2.shape != q2.shape or tau2.shape != q2.shape:
        raise ConfigError(f"{system.kind} expects states with n = {system.n}, got q{q.shape}")
    if not (np.isfinite(q2).all() and np.isfinite(qd2).all()):
        raise NonFiniteStateError(f"Non-finite state passed to the {system.kind} EOM", time=t, state=(q, q_dot))

    qdd, singular = true_accelerations(system, q2, qd2, tau2)
    if singular.any():
        raise SingularConfigurationError(
            f"{system.kind}: |sin(theta)| < {SINGULAR_SIN} at t = {t:.4f}s (EOM contains 1/sin(theta))",
            time=t,
        )
    return qdd[0] if single else qdd


def total_energy(system: SystemSpec, q, q_dot) -> np.ndarray:
    """T + V of the reference system for states of shape (..., n)"""
    q = np.asarray(q, dtype=float)
    qd = np.asarray(q_dot, dtype=float)
    m, L, g = system.mass, system.length, system.gravity
    if system.kind == "single_pendulum":
        return 0.5 * m * L**2 * qd[..., 0]**2 - m * g * L * np.cos(q[..., 0])
    if system.kind == "cart_pendulum":
        c = system._true_terms()
        kinetic = (c["theta_dot**2"] * qd[..., 0]**2 + c["x_dot**2"] * qd[..., 1]**2
                   + c["x_dot*theta_dot*cos(theta)"] * qd[..., 0] * qd[..., 1] * np.cos(q[..., 0]))
        return kinetic - c["cos(theta)"] * np.cos(q[..., 0])
    if system.kind == "double_pendulum":
        m1, m2 = system.mass, system.mass2
        kinetic = (0.5 * (m1 + m2) * L**2 * qd[..., 0]**2 + 0.5 * m2 * L**2 * qd[..., 1]**2
                   + m2 * L**2 * qd[..., 0] * qd[..., 1] * np.cos(q[..., 0] - q[..., 1]))
        return kinetic - (m1 + m2) * g * L * np.cos(q[..., 0]) - m2 * g * L * np.cos(q[..., 1])
    kinetic = 0.5 * m * L**2 * (qd[..., 0]**2 + qd[..., 1]**2 * np.sin(q[..., 0])**2)
    return kinetic - m * g * L * np.cos(q[..., 0])


def angular_momentum_phi(system: SystemSpec, q, q_dot) -> np.ndarray:
    """Conserved p_phi = phi_dot sin^2(theta) of the passive spherical pendulum"""
    if system.kind != "spherical_pendulum":
        raise ConfigError(f"angular_momentum_phi is only defined for spherical_pendulum, not {system.kind}")
    q = np.asarray(q, dtype=float)
    qd = np.asarray(q_dot, dtype=float)
    return qd[..., 1] * np.sin(q[..., 0])**2


# ---------------------------------------------------------------------------
# Integration
# ---------------------------------------------------------------------------

Accelerations = Callable[[np.ndarray, np.ndarray, np.ndarray], Tuple[np.ndarray, np.ndarray]]


@dataclass
class BatchTrajectories:
    """Output of rk4_batch; state arrays have shape (B, S, n)"""
    t: np.ndarray
    q: np.ndarray
    qd: np.ndarray
    qdd: np.ndarray
    tau: np.ndarray
    failed: np.ndarray
    singular: np.ndarray
    fail_time: np.ndarray


def _step_count(duration: float, dt: float) -> int:
    if dt <= 0 or duration < dt:
        raise ConfigError(f"Need dt > 0 and duration >= dt, got dt={dt}, duration={duration}")
    return int(round(duration / dt))


def rk4_batch(
    accelerations: Accelerations,
    q0,
    qd0,
    forcing: Optional[Forcing],
    duration: float,
    dt: float,
    substeps: int = DEFAULT_SUBSTEPS,
    t0: float = 0.0,
) -> BatchTrajectories:
    """
    Classic RK4 on (q, q_dot) for a batch of trajectories sharing one time grid

    Rows whose accelerations are flagged or become non-finite are marked
    failed and carried along with a zeroed state; they never raise.
    """
    q = np.array(q0, dtype=float, ndmin=2)
    qd = np.array(qd0, dtype=float, ndmin=2)
    batch, n = q.shape
    steps = _step_count(duration, dt)
    h = dt / substeps
    t_grid = t0 + dt * np.arange(steps + 1)

    out_q = np.full((batch, steps + 1, n), np.nan)
    out_qd = np.full_like(out_q, np.nan)
    out_qdd = np.full_like(out_q, np.nan)
    out_tau = np.full_like(out_q, np.nan)
    failed = np.zeros(batch, dtype=bool)
    singular = np.zeros(batch, dtype=bool)
    fail_time = np.full(batch, np.nan)

    def external(t):
        if forcing is None:
            return np.zeros((batch, n))
        return np.broadcast_to(forcing(t), (batch, n))

    def rhs(t, q_, qd_):
        finite = np.isfinite(q_).all(axis=1) & np.isfinite(qd_).all(axis=1)
        q_safe = np.where(finite[:, None], q_, 0.0)
        qd_safe = np.where(finite[:, None], qd_, 0.0)
        qdd_, bad = accelerations(q_safe, qd_safe, external(t))
        return qdd_, bad, ~finite

    def mark(bad, non_finite, t):
        nonlocal failed
        new = (bad | non_finite) & ~failed
        fail_time[new] = t
        singular[bad & ~failed] = True
        failed = failed | new

    with np.errstate(all="ignore"):
        acc, bad, non_finite = rhs(t_grid[0], q, qd)
        mark(bad, non_finite, t_grid[0])
        out_q[:, 0], out_qd[:, 0], out_qdd[:, 0], out_tau[:, 0] = q, qd, acc, external(t_grid[0])

        for step in range(steps):
            for sub in range(substeps):
                t = t0 + step * dt + sub * h
                k1a, b1, f1 = rhs(t, q, qd)
                k2v = qd + 0.5 * h * k1a
                k2a, b2, f2 = rhs(t + 0.5 * h, q + 0.5 * h * qd, k2v)
                k3v = qd + 0.5 * h * k2a
                k3a, b3, f3 = rhs(t + 0.5 * h, q + 0.5 * h * k2v, k3v)
                k4v = qd + h * k3a
                k4a, b4, f4 = rhs(t + h, q + h * k3v, k4v)
                q = q + (h / 6.0) * (qd + 2 * k2v + 2 * k3v + k4v)
                qd = qd + (h / 6.0) * (k1a + 2 * k2a + 2 * k3a + k4a)
                mark(b1 | b2 | b3 | b4, f1 | f2 | f3 | f4, t)

            t_next = t_grid[step + 1]
            acc, bad, non_finite = rhs(t_next, q, qd)
            mark(bad, non_finite, t_next)
            out_q[:, step + 1], out_qd[:, step + 1] = q, qd
            out_qdd[:, step + 1], out_tau[:, step + 1] = acc, external(t_next)
            if failed.all():
                break

            q = np.where(failed[:, None], 0.0, q)
            qd = np.where(failed[:, None], 0.0, qd)

    return BatchTrajectories(t_grid, out_q, out_qd, out_qdd, out_tau, failed, singular, fail_time)


def rk4_integrate(
    system: SystemSpec,
    forcing: Optional[Forcing],
    init: Tuple[Sequence[float], Sequence[float]],
    duration: float = DEFAULT_DURATION,
    dt: float = DEFAULT_DT,
    substeps: int = DEFAULT_SUBSTEPS,
    traj_id: int = 0,
) -> TrajectoryDataset:
    """
    Integrate one clean trajectory of the reference system

    q_ddot and tau are recorded from the EOM and forcing at each sample time.

    Raises:
        SingularConfigurationError: spherical pendulum reached |sin(theta)| < 1e-6
        NonFiniteStateError: the state blew up
    """
    q0, qd0 = (np.asarray(v, dtype=float) for v in init)
    if q0.shape != (system.n,) or qd0.shape != (system.n,):
        raise ConfigError(f"{system.kind} expects initial states with n = {system.n}")
    forcing = forcing or Forcing.passive(system.n)

    result = rk4_batch(
        lambda q, qd, tau: true_accelerations(system, q, qd, tau),
        q0[None], qd0[None], forcing, duration, dt, substeps,
    )
    if result.failed[0]:
        when = float(result.fail_time[0])
        if result.singular[0]:
            raise SingularConfigurationError(
                f"{system.kind}: trajectory reached |sin(theta)| < {SINGULAR_SIN} at t = {when:.3f}s", time=when
            )
        raise NonFiniteStateError(
            f"{system.kind}: state became non-finite at t = {when:.3f}s from q0={q0.tolist()}, qd0={qd0.tolist()}",
            time=when, state=(q0, qd0),
        )

    samples = len(result.t)
    metadata = _metadata(system, None, duration, dt, substeps, seed=None, forcings=[forcing])
    return TrajectoryDataset(
        result.t, result.q[0], result.qd[0], result.qdd[0], result.tau[0],
        np.full(samples, traj_id), metadata,
    )


def _initial_state(system: SystemSpec, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    n = system.n
    q = np.zeros(n)
    qd = np.zeros(n)
    if system.kind == "spherical_pendulum":
        q[0] = rng.uniform(math.pi / 3, math.pi / 2)
        qd[1] = math.pi
    elif system.kind == "double_pendulum":
        q[:] = rng.uniform(-math.pi, math.pi, size=2)
    else:
        q[0] = rng.uniform(-math.pi, math.pi)
    return q, qd


def sample_initial_conditions(
    system: SystemSpec, count: int, seed: int
) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Seeded (q0, qd0) draws from the per-system ranges, one RNG stream per index"""
    if count < 1:
        raise ConfigError(f"count must be >= 1, got {count}")
    return [
        _initial_state(system, np.random.default_rng([seed, index, STREAM_INITIAL]))
        for index in range(count)
    ]


def _metadata(system, forcing_spec, duration, dt, substeps, seed, forcings) -> Dict:
    active = any(f.active for f in forcings)
    return {
        "system": system.to_dict(),
        "kind": system.kind,
        "coordinates": list(system.names),
        "sigma": 0.0,
        "noise_seed": None,
        "noise_channels": [],
        "seed": seed,
        "dt": dt,
        "duration": duration,
        "substeps": substeps,
        "trajectories": len(forcings),
        "forcing": forcing_spec.to_dict() if forcing_spec else None,
        "forcing_active": active,
        "forcing_params": [f.to_dict() for f in forcings] if active else [],
    }


def _integrate_chunk(system, indices, initial, forcings, params) -> List[TrajectoryDataset]:
    """Integrate a fixed chunk together; failed rows are retried alone with fresh initial states"""
    q0 = np.stack([initial[i][0] for i in indices])
    qd0 = np.stack([initial[i][1] for i in indices])
    accel = lambda q, qd, tau: true_accelerations(system, q, qd, tau)
    result = rk4_batch(
        accel, q0, qd0, Forcing.stack([forcings[i] for i in indices]),
        params.duration, params.dt, params.substeps,
    )

    parts = []
    for row, index in enumerate(indices):
        if not result.failed[row]:
            arrays = (result.q[row], result.qd[row], result.qdd[row], result.tau[row])
        else:
            arrays = _resample_trajectory(system, index, forcings[index], params)
        samples = len(result.t)
        parts.append(TrajectoryDataset(result.t, *arrays, np.full(samples, index)))
    return parts


def _resample_trajectory(system, index, forcing, params):
    last_error: Optional[Exception] = None
    for attempt in range(1, MAX_RESAMPLE_ATTEMPTS + 1):
        rng = np.random.default_rng([params.seed, index, STREAM_INITIAL, attempt])
        try:
            traj = rk4_integrate(
                system, forcing, _initial_state(system, rng),
                params.duration, params.dt, params.substeps, traj_id=index,
            )
            console.warn(f"Trajectory {index} resampled (attempt {attempt}) after: {last_error or 'failure'}")
            return traj.q, traj.qd, traj.qdd, traj.tau
        except (SingularConfigurationError, NonFiniteStateError) as e:
            last_error = e
    raise NonFiniteStateError(
        f"Trajectory {index} failed after {MAX_RESAMPLE_ATTEMPTS} resampled initial conditions: {last_error}"
    )


def generate_dataset(
    system: SystemSpec,
    forcing: ForcingSpec,
    params: DatasetParams,
    workers: int = 1,
) -> TrajectoryDataset:
    """
    Simulate params.trajectories clean trajectories

    Each trajectory draws its initial state and forcing from its own RNG
    stream (seed, index, stream). Trajectories are integrated in chunks of
    params.chunk_size regardless of the worker count, so the output does not
    depend on how many threads run it.
    """
    if workers < 1:
        raise ConfigError(f"workers must be >= 1, got {workers}")
    count = params.trajectories
    initial = sample_initial_conditions(system, count, params.seed)
    forcings = [
        forcing.draw(system.n, np.random.default_rng([params.seed, index, STREAM_FORCING]))
        for index in range(count)
    ]
    chunks = [list(range(start, min(start + params.chunk_size, count)))
              for start in range(0, count, params.chunk_size)]

    console.log(f"🚀 Simulating {count} {system.kind} trajectories "
                f"({params.duration}s @ {1 / params.dt:.0f} Hz, {workers} worker(s))...")
    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(console.progress(
            pool.map(lambda chunk: _integrate_chunk(system, chunk, initial, forcings, params), chunks),
            desc="chunks", total=len(chunks),
        ))

    parts = [part for chunk in results for part in chunk]
    metadata = _metadata(system, forcing, params.duration, params.dt, params.substeps, params.seed, forcings)
    dataset = TrajectoryDataset.concatenate(parts, metadata)
    console.success(f"✓ Generated {dataset.n_samples} samples across {count} trajectories")
    return dataset


def add_noise(dataset: TrajectoryDataset, noise: NoiseSpec) -> TrajectoryDataset:
    """
    Add independent N(0, sigma) noise to the selected channels

    Each channel draws from its own stream (seed, channel), so the noise on q
    does not change when more channels are selected.
    """
    metadata = dict(dataset.metadata)
    metadata.update({"sigma": float(noise.sigma), "noise_seed": noise.seed, "noise_channels": list(noise.channels)})
    arrays = {name: getattr(dataset, name).copy() for name in NOISE_CHANNELS}
    if noise.sigma > 0:
        for name in noise.channels:
            rng = np.random.default_rng([noise.seed, NOISE_CHANNELS.index(name)])
            arrays[name] = arrays[name] + rng.normal(0.0, noise.sigma, size=arrays[name].shape)
    return TrajectoryDataset(
        dataset.t.copy(), arrays["q"], arrays["qd"], arrays["qdd"], arrays["tau"],
        dataset.traj_id.copy(), metadata,
    )


# ---------------------------------------------------------------------------
# Dataset files
# ---------------------------------------------------------------------------

def dataset_header(n: int) -> List[str]:
    columns = ["t"]
    for prefix in ("q", "qd", "qdd", "tau"):
        columns += [f"{prefix}_{i}" for i in range(1, n + 1)]
    return columns + ["traj_id"]


def metadata_path(path: PathLike) -> Path:
    return Path(path).with_suffix(".json")


def save_dataset(dataset: TrajectoryDataset, path: PathLike) -> Path:
    """Write the CSV plus its JSON sidecar; floats use repr so the round trip is exact"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(dataset_header(dataset.n))
        for k in range(dataset.n_samples):
            row = [repr(float(dataset.t[k]))]
            for block in (dataset.q, dataset.qd, dataset.qdd, dataset.tau):
                row += [repr(float(v)) for v in block[k]]
            row.append(str(int(dataset.traj_id[k])))
            writer.writerow(row)
    with metadata_path(path).open("w", encoding="utf-8") as fh:
        json.dump(dataset.metadata, fh, indent=2)
    console.success(f"✓ Saved dataset to {path}")
    return path


def load_dataset(path: PathLike) -> TrajectoryDataset:
    """
    Read a dataset CSV (and its JSON sidecar when present)

    Raises:
        DatasetParseError: wrong header, wrong column count or bad numbers,
            with the offending path and line
    """
    path = Path(path)
    sidecar = metadata_path(path)
    metadata: Dict = {}
    if sidecar.exists():
        try:
            metadata = json.loads(sidecar.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise DatasetParseError(f"invalid metadata JSON: {e.msg}", str(sidecar), e.lineno) from e

    with path.open("r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DatasetParseError("empty dataset file", str(path), 1)

        if metadata.get("coordinates"):
            n = len(metadata["coordinates"])
        elif (len(header) - 2) % 4 == 0 and len(header) >= 6:
            n = (len(header) - 2) // 4
        else:
            raise DatasetParseError(f"cannot infer n from {len(header)} header columns", str(path), 1)
        expected = dataset_header(n)
        if header != expected:
            raise DatasetParseError(
                f"expected {len(expected)} columns for n = {n} ({','.join(expected)}), got {len(header)}",
                str(path), 1,
            )

        rows = []
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(expected):
                raise DatasetParseError(
                    f"expected {len(expected)} columns for n = {n}, got {len(row)}", str(path), line
                )
            try:
                values = [float(v) for v in row[:-1]]
                traj = int(row[-1])
            except ValueError as e:
                raise DatasetParseError(f"bad value: {e}", str(path), line) from e
            rows.append((values, traj))

    if not rows:
        raise DatasetParseError("dataset has no samples", str(path), 2)
    values = np.array([r[0] for r in rows], dtype=float)
    traj_id = np.array([r[1] for r in rows], dtype=int)
    blocks = [values[:, 1 + k * n: 1 + (k + 1) * n] for k in range(4)]
    return TrajectoryDataset(values[:, 0], *blocks, traj_id, metadata)
