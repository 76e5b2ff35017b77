"""
Staged Proximal-Gradient Training
=================================

Accelerated proximal gradient (FISTA-style) minimization of

    J(c) + lambda * ||c||_1

with mini-batches, staged hard-thresholding and an alpha/lambda schedule:

    stage 1:  alpha0,          lambda0,          threshold 1e-2
    stage k:  alpha0 * 2^k-1,  lambda0 / 10^k-1, threshold 1e-1

Stages repeat until the batch-mean cost reaches the tolerance. If it never
does, the tolerance is relaxed once before the run is flagged non-converged.

Usage:
    from optimizer import StageSchedule, train

    model, report = train(library, dataset, case=1, schedule=StageSchedule.for_system("single_pendulum"))
    print(model.render())
"""

import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from console import console
from elgrad import (
    ELTensors,
    LagrangianModel,
    assemble_tensors,
    cost_case1,
    cost_case2,
    is_trivial_lagrangian,
    null_directions,
    prior_aliases,
    residual_features,
    upsilon_residual,
)
from exceptions import (
    ConfigError,
    DegenerateModelError,
    EmptyModelError,
    NonFiniteGradientError,
    NonFiniteStateError,
    PriorSelectionError,
)
from symlib import CandidateLibrary

CASES = (1, 2, 3)
PROX_SCALINGS = ("step", "raw")
REDUCTIONS = ("mean", "sum")
CASE2_INITS = ("null_space", "uniform")
CASE2_INIT_RANGE = 0.1
POLISH_ITERATIONS = 200
POLISH_EPS = 1e-12
POLISH_SNAP = 1e-9

# (alpha0, lambda0) per benchmark system
SYSTEM_HYPERPARAMETERS = {
    "single_pendulum": (1e-5, 0.1),
    "cart_pendulum": (1e-5, 1.0),
    "double_pendulum": (5e-6, 1.0),
    "spherical_pendulum": (1e-5, 1.0),
}

CostFn = Callable[[np.ndarray], Tuple[float, np.ndarray]]


@dataclass
class StageSchedule:
    """Hyperparameters of the staged training run"""
    alpha: float = 1e-5
    lam: float = 1.0
    alpha_growth: float = 2.0
    lambda_decay: float = 10.0
    epochs_per_stage: int = 100
    batch_size: int = 128
    threshold_stage1: float = 1e-2
    threshold_later: float = 1e-1
    tolerance: float = 1e-3
    max_stages: int = 4
    min_stages: int = 1
    relaxed_tolerance_factor: float = 10.0
    prox_scaling: str = "step"
    reduction: str = "mean"
    cap_alpha: bool = True
    momentum: bool = True
    restart_momentum: bool = False
    scale_terms: bool = False
    threshold_unpenalized: bool = False
    refit: bool = False
    polish: bool = True
    drop_aliases: bool = True
    case2_init: str = "null_space"
    case2_gauge: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if self.alpha <= 0 or self.lam < 0:
            raise ConfigError(f"Need alpha > 0 and lambda >= 0, got alpha={self.alpha}, lambda={self.lam}")
        if self.alpha_growth <= 0 or self.lambda_decay <= 0:
            raise ConfigError("alpha_growth and lambda_decay must be positive")
        if self.epochs_per_stage < 1 or self.batch_size < 1:
            raise ConfigError("epochs_per_stage and batch_size must be >= 1")
        if self.threshold_stage1 < 0 or self.threshold_later < 0:
            raise ConfigError("Hard thresholds must be >= 0")
        if self.tolerance <= 0 or self.relaxed_tolerance_factor < 1:
            raise ConfigError("Need tolerance > 0 and relaxed_tolerance_factor >= 1")
        if not 1 <= self.min_stages <= self.max_stages:
            raise ConfigError(f"Need 1 <= min_stages <= max_stages, got {self.min_stages}, {self.max_stages}")
        if self.prox_scaling not in PROX_SCALINGS:
            raise ConfigError(f"prox_scaling must be one of {PROX_SCALINGS}, got {self.prox_scaling!r}")
        if self.reduction not in REDUCTIONS:
            raise ConfigError(f"reduction must be one of {REDUCTIONS}, got {self.reduction!r}")
        if self.case2_init not in CASE2_INITS:
            raise ConfigError(f"case2_init must be one of {CASE2_INITS}, got {self.case2_init!r}")
        if self.case2_gauge <= 0:
            raise ConfigError(f"case2_gauge must be positive, got {self.case2_gauge}")
        if self.alpha > 1e-5:
            console.warn(f"alpha = {self.alpha:g} is above the recommended 1e-5")
        if not 0.1 <= self.lam <= 5:
            console.warn(f"lambda = {self.lam:g} is outside the usual [0.1, 5] range")

    @classmethod
    def for_system(cls, kind: str, **overrides) -> "StageSchedule":
        """Benchmark preset: per-system alpha/lambda, summed batch gradients, stage-end refits"""
        if kind not in SYSTEM_HYPERPARAMETERS:
            raise ConfigError(f"No schedule preset for {kind!r}")
        alpha, lam = SYSTEM_HYPERPARAMETERS[kind]
        params = {"alpha": alpha, "lam": lam, "reduction": "sum", "min_stages": 2, "refit": True}
        params.update(overrides)
        return cls(**params)

    def alpha_at(self, stage: int) -> float:
        return self.alpha * self.alpha_growth ** (stage - 1)

    def lambda_at(self, stage: int) -> float:
        return self.lam / self.lambda_decay ** (stage - 1)

    def threshold_at(self, stage: int) -> float:
        return self.threshold_stage1 if stage == 1 else self.threshold_later

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> "StageSchedule":
        return cls(**data)


@dataclass
class TrainState:
    """Optimizer state; removed (inactive) indices stay at zero for the rest of the run"""
    c: np.ndarray
    c_prev: np.ndarray
    active: np.ndarray
    iteration: int = 1
    stage: int = 0
    history: List[float] = field(default_factory=list)
    seed: int = 0
    last_cost: float = float("nan")

    @classmethod
    def initial(cls, c0: np.ndarray, seed: int = 0, active: Optional[np.ndarray] = None) -> "TrainState":
        c0 = np.asarray(c0, dtype=float)
        active = np.ones(len(c0), dtype=bool) if active is None else np.asarray(active, dtype=bool).copy()
        c0 = np.where(active, c0, 0.0)
        return cls(c0.copy(), c0.copy(), active, seed=seed)


@dataclass
class StageRecord:
    stage: int
    alpha: float
    lam: float
    threshold: float
    epoch_costs: List[float]
    final_cost: float
    survivors: List[str]
    removed: List[str]

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class TrainReport:
    """What happened during train(); serialized next to the model"""
    case: int
    prior_term: Optional[str]
    converged: bool
    relaxed: bool
    stages_used: int
    final_cost: float
    stages: List[StageRecord]
    coefficients: Dict[str, float]
    schedule: Dict
    seed: int
    wall_time: float
    error: Optional[str] = None
    aliases: List[str] = field(default_factory=list)

    @property
    def survivor_history(self) -> List[List[str]]:
        return [record.survivors for record in self.stages]

    def to_dict(self) -> Dict:
        data = asdict(self)
        data["stages"] = [record.to_dict() for record in self.stages]
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> "TrainReport":
        data = dict(data)
        data["stages"] = [StageRecord(**record) for record in data.get("stages", [])]
        return cls(**data)

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "TrainReport":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


class Objective:
    """
    Case-specific cost over the learned coefficient vector

    For case III the learned vector skips the prior term r.
    """

    def __init__(self, tensors: ELTensors, case: int, prior_index: Optional[int] = None):
        if case not in CASES:
            raise ConfigError(f"case must be one of {CASES}, got {case}")
        if case == 3 and prior_index is None:
            raise ConfigError("Case III needs a prior term")
        self.tensors = tensors
        self.case = case
        self.prior_index = prior_index if case == 3 else None
        self._hessian: Optional[np.ndarray] = None

    @property
    def dim(self) -> int:
        return self.tensors.p - 1 if self.prior_index is not None else self.tensors.p

    @property
    def n_samples(self) -> int:
        return self.tensors.n_samples

    @property
    def convex(self) -> bool:
        return self.case in (1, 3)

    def learned_indices(self) -> np.ndarray:
        indices = np.arange(self.tensors.p)
        return indices if self.prior_index is None else np.delete(indices, self.prior_index)

    def __call__(self, c: np.ndarray, batch=None) -> Tuple[float, np.ndarray]:
        if self.case == 1:
            return cost_case1(self.tensors, c, batch)
        if self.case == 2:
            return cost_case2(self.tensors, c, batch)
        return upsilon_residual(self.tensors, c, self.prior_index, batch)

    def features(self) -> np.ndarray:
        """EL features of the learned terms, (S, dim, n)"""
        return self.tensors.E[:, self.learned_indices()]

    def target(self) -> np.ndarray:
        """What the learned features should reproduce: tau (case I) or -E_r (case III)"""
        if self.case == 1:
            return self.tensors.tau
        if self.case == 3:
            return -self.tensors.E[:, self.prior_index]
        raise ConfigError("Case II has no linear target")

    def hessian(self) -> np.ndarray:
        """Full-data Hessian of the quadratic cases, 2/S sum F^T F"""
        if not self.convex:
            raise ConfigError("Case II is not quadratic; it has no constant Hessian")
        if self._hessian is None:
            features = self.features()
            self._hessian = 2.0 / self.n_samples * np.einsum("spi,sqi->pq", features, features)
        return self._hessian

    def lipschitz(self, active: Optional[np.ndarray] = None) -> float:
        H = self.hessian()
        if active is not None:
            H = H[np.ix_(active, active)]
        return float(np.linalg.eigvalsh(H)[-1]) if H.size else 0.0

    def least_squares(self, active: np.ndarray) -> np.ndarray:
        """Unpenalized minimizer of the quadratic cost over the active terms (minimum norm)"""
        idx = np.flatnonzero(active)
        F = np.swapaxes(self.features()[:, idx], 1, 2).reshape(-1, idx.size)
        solution = np.linalg.lstsq(F, self.target().reshape(-1), rcond=None)[0]
        c = np.zeros(self.dim)
        c[idx] = solution
        return c

    def null_space_fit(self, active: np.ndarray, flat: Optional[np.ndarray] = None) -> np.ndarray:
        """
        Unit vector over the active terms minimizing mean ||sum_k c_k E_k||^2

        Passive data has sum_k c_k E_k == 0 for the true Lagrangian, up to
        scale. Directions in `flat` (trivial Lagrangians) are projected out first.
        """
        idx = np.flatnonzero(active)
        F = self.features()[:, idx]
        gram = np.einsum("spi,sqi->pq", F, F) / self.n_samples
        basis = np.eye(idx.size)
        if flat is not None and flat.shape[1]:
            q, _ = np.linalg.qr(flat, mode="complete")
            basis = q[:, flat.shape[1]:]
        if basis.shape[1] == 0:
            raise DegenerateModelError("Every active term is part of a trivial Lagrangian")
        _, vectors = np.linalg.eigh(basis.T @ gram @ basis)
        c = np.zeros(self.dim)
        c[idx] = basis @ vectors[:, 0]
        return c


def soft_threshold(beta, lam: float, mask=None) -> np.ndarray:
    """
    Proximal operator of lam * ||.||_1

    Components with mask True pass through unchanged.
    """
    if lam < 0:
        raise ConfigError(f"lambda must be >= 0, got {lam}")
    beta = np.asarray(beta, dtype=float)
    shrunk = np.sign(beta) * np.maximum(np.abs(beta) - lam, 0.0)
    if mask is None:
        return shrunk
    return np.where(np.asarray(mask, dtype=bool), beta, shrunk)


def fista_step(
    state: TrainState,
    cost_fn: CostFn,
    alpha: float,
    lam: float,
    exempt: Optional[np.ndarray] = None,
    prox_scaling: str = "step",
    momentum: bool = True,
) -> TrainState:
    """
    One accelerated proximal step

        v   = c + (i - 2) / (i + 1) * (c - c_prev)
        c'  = soft_threshold(v - alpha * grad J(v), alpha * lam | lam)

    With momentum=False this is the plain proximal step (v = c).

    Raises:
        NonFiniteGradientError: the gradient at v is NaN or inf
    """
    if alpha <= 0:
        raise ConfigError(f"alpha must be > 0, got {alpha}")
    i = state.iteration
    beta = (i - 2) / (i + 1) if momentum else 0.0
    v = state.c + beta * (state.c - state.c_prev)
    v[~state.active] = 0.0

    cost, grad = cost_fn(v)
    if not (np.isfinite(cost) and np.all(np.isfinite(grad))):
        raise NonFiniteGradientError(
            f"Non-finite cost/gradient at iteration {i} (stage {state.stage}, |v|max={np.max(np.abs(v)):.3g})",
            iteration=i,
        )

    threshold = alpha * lam if prox_scaling == "step" else lam
    c_new = soft_threshold(v - alpha * grad, threshold, exempt)
    c_new[~state.active] = 0.0
    return replace(state, c=c_new, c_prev=state.c, iteration=i + 1, last_cost=float(cost))


def _stage_alpha(objective: Objective, schedule: StageSchedule, stage_index: int, active: np.ndarray) -> float:
    alpha = schedule.alpha_at(stage_index)
    if schedule.cap_alpha and objective.convex and active.any():
        batch_scale = min(schedule.batch_size, objective.n_samples) if schedule.reduction == "sum" else 1
        L = objective.lipschitz(active) * batch_scale
        if L > 0 and alpha > 1.0 / L:
            console.log(f"   ↳ alpha {alpha:.3g} capped at 1/L = {1.0 / L:.3g}")
            alpha = 1.0 / L
    return alpha


def polish_coefficients(
    c: np.ndarray,
    flat: np.ndarray,
    weights: Optional[np.ndarray] = None,
    iterations: int = POLISH_ITERATIONS,
) -> np.ndarray:
    """
    Sparsest equivalent coefficients: minimize sum_k w_k |c_k + (flat z)_k| over z

    Moving along the columns of `flat` (trivial Lagrangians) leaves every cost
    unchanged, e.g. cos(theta) versus cos(theta)**3 + sin(theta)**2*cos(theta).
    Solved by iteratively reweighted least squares; entries ending below
    POLISH_SNAP of the largest are set to zero.
    """
    c = np.asarray(c, dtype=float)
    if flat.size == 0 or not np.any(c):
        return c.copy()
    weights = np.ones_like(c) if weights is None else np.asarray(weights, dtype=float)
    x = c.copy()
    for _ in range(iterations):
        omega = weights / np.maximum(np.abs(x), POLISH_EPS * np.abs(x).max())
        lhs = flat.T @ (omega[:, None] * flat)
        rhs = -flat.T @ (omega * c)
        z = np.linalg.lstsq(lhs, rhs, rcond=None)[0]
        x = c + flat @ z
    x[np.abs(x) <= POLISH_SNAP * np.abs(x).max()] = 0.0
    return x


class StageRefinement:
    """
    Stage-end clean-up of the coefficients, applied before hard-thresholding

    refit:  least squares over the active terms (cases I/III), or the
            smallest EL-residual direction (case II)
    polish: slide along trivial Lagrangians to the sparsest equivalent
    Case II coefficients are then rescaled so max |c_k / s_k| = case2_gauge,
    which keeps the scale-free acceleration cost from shrinking them away.
    """

    def __init__(self, objective: Objective, trivial: np.ndarray, scales: np.ndarray, schedule: StageSchedule):
        self.objective = objective
        self.trivial = trivial
        self.scales = np.asarray(scales, dtype=float)
        self.schedule = schedule

    def flat(self, active: np.ndarray) -> np.ndarray:
        """Trivial-Lagrangian directions among the active terms"""
        return null_directions(self.trivial[:, active])

    def gauge(self, c: np.ndarray) -> np.ndarray:
        top = np.max(np.abs(c / self.scales))
        return c if top == 0 else c * (self.schedule.case2_gauge / top)

    def initial(self, active: np.ndarray) -> np.ndarray:
        """Case II starting point: the passive null-space direction, largest entry positive"""
        c = self.objective.null_space_fit(active, self.flat(active))
        c = self._polish(c, active)
        if c[np.argmax(np.abs(c))] < 0:
            c = -c
        return self.gauge(c)

    def __call__(self, c: np.ndarray, active: np.ndarray) -> np.ndarray:
        if self.schedule.refit:
            if self.objective.convex:
                c = self.objective.least_squares(active)
            else:
                fitted = self.objective.null_space_fit(active, self.flat(active))
                c = fitted if fitted @ c >= 0 else -fitted
        if self.schedule.polish:
            c = self._polish(c, active)
        return c if self.objective.convex else self.gauge(c)

    def _polish(self, c: np.ndarray, active: np.ndarray) -> np.ndarray:
        idx = np.flatnonzero(active)
        polished = np.zeros_like(c)
        polished[idx] = polish_coefficients(c[idx], self.flat(active), 1.0 / self.scales[idx])
        return polished


def run_stage(
    state: TrainState,
    objective: Objective,
    schedule: StageSchedule,
    stage_index: int,
    keys: Optional[Sequence[str]] = None,
    exempt: Optional[np.ndarray] = None,
    threshold_exempt: Optional[np.ndarray] = None,
    scales: Optional[np.ndarray] = None,
    refine: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None,
) -> Tuple[TrainState, StageRecord]:
    """
    epochs_per_stage epochs of mini-batch FISTA, then hard-thresholding

    Batches are drawn from a permutation seeded by (seed, stage, epoch).
    `refine(c, active)` (a StageRefinement) runs on the stage-end iterate
    before thresholding, and again on the survivors if anything was removed.
    Terms with |c_k| below the stage threshold (in output scale) are removed
    for the rest of the run.

    Raises:
        EmptyModelError: thresholding removed every remaining term
    """
    if stage_index < 1:
        raise ConfigError(f"stage_index must be >= 1, got {stage_index}")
    dim = objective.dim
    keys = list(keys) if keys is not None else [str(k) for k in range(dim)]
    scales = np.ones(dim) if scales is None else np.asarray(scales, dtype=float)
    threshold_exempt = np.zeros(dim, dtype=bool) if threshold_exempt is None else np.asarray(threshold_exempt)

    alpha = _stage_alpha(objective, schedule, stage_index, state.active)
    lam = schedule.lambda_at(stage_index)
    threshold = schedule.threshold_at(stage_index)

    if schedule.restart_momentum and stage_index > 1:
        state = replace(state, iteration=1, c_prev=state.c.copy())
    state = replace(state, stage=stage_index)

    samples = objective.n_samples
    batch_size = min(schedule.batch_size, samples)
    epoch_costs = []
    for epoch in console.progress(range(schedule.epochs_per_stage), desc=f"stage {stage_index}"):
        order = np.random.default_rng([state.seed, stage_index, epoch]).permutation(samples)
        batch_costs = []
        for start in range(0, samples, batch_size):
            batch = order[start:start + batch_size]
            weight = len(batch) if schedule.reduction == "sum" else 1.0

            def cost_fn(c, batch=batch, weight=weight):
                cost, grad = objective(c, batch)
                return cost, weight * grad

            state = fista_step(state, cost_fn, alpha, lam, exempt, schedule.prox_scaling, schedule.momentum)
            batch_costs.append(state.last_cost)
        epoch_costs.append(float(np.mean(batch_costs)))

    before = state.active.copy()
    c_end = refine(state.c, before) if refine is not None else state.c
    magnitude = np.abs(c_end / scales)
    remove = before & (magnitude < threshold) & ~threshold_exempt
    active = before & ~remove
    if not active.any():
        raise EmptyModelError(
            f"Stage {stage_index}: threshold {threshold:g} removed every term",
            last_survivors=[keys[k] for k in np.flatnonzero(before)],
        )
    c = np.where(active, c_end, 0.0)
    if refine is not None and remove.any():
        c = refine(c, active)
    moved = not np.array_equal(c, np.where(active, state.c, 0.0))
    c_prev = c.copy() if moved else np.where(active, state.c_prev, 0.0)
    state = replace(state, c=c, c_prev=c_prev, active=active, history=state.history + epoch_costs)
    final_cost = float(objective(c)[0]) if moved else epoch_costs[-1]

    record = StageRecord(
        stage=stage_index,
        alpha=alpha,
        lam=lam,
        threshold=threshold,
        epoch_costs=epoch_costs,
        final_cost=final_cost,
        survivors=[keys[k] for k in np.flatnonzero(active)],
        removed=[keys[k] for k in np.flatnonzero(remove)],
    )
    console.log(
        f"   Stage {stage_index}: α={alpha:.3g} λ={lam:.3g} threshold={threshold:g} "
        f"cost={record.final_cost:.4g} survivors={len(record.survivors)}"
    )
    return state, record


def _initial_coefficients(
    objective: Objective,
    schedule: StageSchedule,
    active: np.ndarray,
    refinement: StageRefinement,
) -> np.ndarray:
    if objective.case != 2:
        return np.zeros(objective.dim)
    if schedule.case2_init == "null_space":
        return refinement.initial(active)
    return np.random.default_rng([schedule.seed, 2]).uniform(-CASE2_INIT_RANGE, CASE2_INIT_RANGE, size=objective.dim)


def train(
    library: CandidateLibrary,
    dataset,
    case: int,
    prior_term: Optional[Union[str, int]] = None,
    schedule: Optional[StageSchedule] = None,
    tensors: Optional[ELTensors] = None,
) -> Tuple[LagrangianModel, TrainReport]:
    """
    Fit a sparse Lagrangian over the library

    Args:
        library: Candidate library (its penalty_mask marks known, unpenalized terms)
        dataset: Training TrajectoryDataset
        case: 1 (forced, tau residual), 2 (passive, acceleration), 3 (passive, prior term)
        prior_term: Key or index of the unit-coefficient term for case 3
        schedule: Stage schedule (defaults to StageSchedule())
        tensors: Pre-assembled EL tensors of library over dataset

    Returns:
        (model, report); report.converged is False if even the relaxed
        tolerance was missed, in which case the best stage-end iterate is returned
    """
    schedule = schedule or StageSchedule()
    if case not in CASES:
        raise ConfigError(f"case must be one of {CASES}, got {case}")
    if case == 1 and not dataset.has_tau:
        raise ConfigError("Case I needs a dataset recorded with external forcing (tau)")
    if case == 3 and prior_term is None:
        raise ConfigError("Case III needs a prior term")
    r = None
    if case == 3:
        r = prior_term if isinstance(prior_term, (int, np.integer)) else library.index_of(prior_term)
        if not 0 <= r < len(library):
            raise ConfigError(f"Prior term index {r} is out of range for {len(library)} terms")

    started = time.time()
    tensors = tensors if tensors is not None else assemble_tensors(library, dataset)

    learned = np.arange(len(library)) if r is None else np.delete(np.arange(len(library)), r)
    scales = np.asarray(library.scales, dtype=float)
    if schedule.scale_terms:
        scales = tensors.term_rms()
    if r is not None:
        scales[r] = 1.0
    if np.any(scales != 1.0):
        tensors = tensors.scaled(scales)

    objective = Objective(tensors, case, r)
    keys = [library[k].key for k in learned]
    exempt = ~np.asarray(library.penalty_mask, dtype=bool)[learned]
    threshold_exempt = np.zeros_like(exempt) if schedule.threshold_unpenalized else exempt
    learned_scales = scales[learned]

    trivial = residual_features(library, seed=schedule.seed)
    aliases = prior_aliases(trivial, r) if r is not None and schedule.drop_aliases else []
    active = ~np.isin(learned, aliases)
    refinement = StageRefinement(objective, trivial[:, learned] / learned_scales, learned_scales, schedule)

    prior_label = f" (prior {library[r].key})" if r is not None else ""
    console.log(f"🔎 Training case {case}{prior_label} over {len(library)} candidates, "
                f"{tensors.n_samples} samples...")
    if aliases:
        console.log(f"   ↳ left out {len(aliases)} term(s) that cancel the prior exactly: "
                    f"{', '.join(library[k].key for k in aliases)}")

    c0 = _initial_coefficients(objective, schedule, active, refinement)
    state = TrainState.initial(c0, seed=schedule.seed, active=active)
    records: List[StageRecord] = []
    best: Optional[Tuple[float, TrainState]] = None
    converged = relaxed = False

    for stage in range(1, schedule.max_stages + 1):
        state, record = run_stage(state, objective, schedule, stage, keys, exempt, threshold_exempt,
                                  learned_scales, refinement)
        records.append(record)
        if best is None or record.final_cost < best[0]:
            best = (record.final_cost, state)
        if stage >= schedule.min_stages and record.final_cost <= schedule.tolerance:
            converged = True
            break

    if not converged:
        relaxed_tolerance = schedule.tolerance * schedule.relaxed_tolerance_factor
        if records[-1].final_cost <= relaxed_tolerance:
            converged = relaxed = True
            console.warn(f"Converged only against the relaxed tolerance {relaxed_tolerance:g}")
        else:
            console.warn(f"Did not reach the relaxed tolerance {relaxed_tolerance:g}; "
                         f"returning the best iterate (cost {best[0]:.4g})")
            state = best[1]

    final_cost = records[-1].final_cost if converged else best[0]
    model = LagrangianModel(library, state.c / learned_scales, r, case)
    if is_trivial_lagrangian(trivial, model.full_coefficients()):
        raise DegenerateModelError(f"Learned Lagrangian {model.render(3) or '0'} has an identically zero EL residual")
    report = TrainReport(
        case=case,
        prior_term=model.prior_key,
        converged=converged,
        relaxed=relaxed,
        stages_used=len(records),
        final_cost=float(final_cost),
        stages=records,
        coefficients=model.coefficient_map(),
        schedule=schedule.to_dict(),
        seed=schedule.seed,
        wall_time=time.time() - started,
        aliases=[library[k].key for k in aliases],
    )
    status = "✓ Converged" if converged else "⚠️ Not converged"
    console.success(f"{status} after {len(records)} stage(s): L = {model.render(3) or '0'}")
    return model, report


ScoreFn = Callable[[LagrangianModel, TrainReport], float]


def select_prior_term(
    library: CandidateLibrary,
    dataset,
    candidates: Sequence[str],
    schedule: Optional[StageSchedule] = None,
    score_fn: Optional[ScoreFn] = None,
) -> Tuple[str, LagrangianModel, TrainReport]:
    """
    Train case III once per candidate prior term and keep the best model

    Converged runs rank ahead of non-converged ones; within each group the
    lowest score wins (score_fn, or the final training cost by default).

    Raises:
        PriorSelectionError: every candidate failed
    """
    if not candidates:
        raise ConfigError("select_prior_term needs at least one candidate")
    tensors = assemble_tensors(library, dataset)
    results = []
    failures = []
    for key in candidates:
        console.info(f"🧪 Prior term candidate: {key}")
        try:
            model, report = train(library, dataset, 3, key, schedule, tensors=tensors)
            score = score_fn(model, report) if score_fn else report.final_cost
        except (EmptyModelError, NonFiniteGradientError, DegenerateModelError, NonFiniteStateError) as e:
            console.warn(f"Candidate {key} failed: {e}")
            failures.append((key, e))
            continue
        console.log(f"   score({key}) = {score:.4g}")
        results.append((not report.converged, score, key, model, report))

    if not results:
        raise PriorSelectionError(failures)
    results.sort(key=lambda item: (item[0], item[1]))
    _, score, key, model, report = results[0]
    console.success(f"✓ Selected prior term {key} (score {score:.4g})")
    return key, model, report
