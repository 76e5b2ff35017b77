"""
Euler-Lagrange Residuals
========================

Per-term Euler-Lagrange tensors and the three training costs:

    M_k = d2phi_k/dqd dqd      (n x n)
    N_k = d2phi_k/dqd dq       (n x n)
    O_k = dphi_k/dq            (n)

    E_k = M_k qdd + N_k qd - O_k      EL feature of term k
    G_k = N_k qd - O_k                velocity/position drift of term k

Case I   (forced):      J = mean ||tau - sum_k c_k E_k||^2
Case II  (passive):     J = mean ||qdd - pinv(-sum c M) sum c G||^2
Case III (prior term):  J = mean ||-E_r - sum_{k != r} c_k E_k||^2

All costs return (J, dJ/dc) with the gradient in closed form.
"""

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import sympy as sp

from exceptions import ConfigError, DegenerateModelError, DimensionError, NonFiniteStateError
from symlib import CandidateExpr, CandidateLibrary, el_components, render

PINV_RCOND_FACTOR = np.finfo(float).eps
NULL_TOLERANCE = 1e-8
NULL_MIN_SAMPLES = 64
NULL_STREAM = 7


@lru_cache(maxsize=None)
def _compiled_components(term: CandidateExpr) -> Callable:
    """One lambdified function returning the flat [M..., N..., O...] entries"""
    M, N, O = el_components(term)
    space = term.space
    entries = list(M) + list(N) + list(O)
    return sp.lambdify(space.coordinates + space.velocities, entries, "numpy")


def term_components(term: CandidateExpr, q: np.ndarray, qd: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Numeric (M, N, O) of one term at samples of shape (S, n)"""
    n = term.space.n
    samples = q.shape[0]
    args = [q[:, i] for i in range(n)] + [qd[:, i] for i in range(n)]
    values = np.stack([
        np.broadcast_to(np.asarray(v, dtype=float), (samples,))
        for v in _compiled_components(term)(*args)
    ], axis=1)
    M = values[:, : n * n].reshape(samples, n, n)
    N = values[:, n * n: 2 * n * n].reshape(samples, n, n)
    O = values[:, 2 * n * n:]
    return M, N, O


@dataclass
class ELTensors:
    """
    Sample-major EL tensors for a library over a set of samples

    M, N: (S, p, n, n); O, E, G: (S, p, n); qdd, tau: (S, n)
    """
    M: np.ndarray
    N: np.ndarray
    O: np.ndarray
    E: np.ndarray
    G: np.ndarray
    qdd: np.ndarray
    tau: np.ndarray
    keys: List[str] = field(default_factory=list)

    @property
    def n_samples(self) -> int:
        return self.M.shape[0]

    @property
    def p(self) -> int:
        return self.M.shape[1]

    @property
    def n(self) -> int:
        return self.M.shape[2]

    def select_terms(self, indices: Sequence[int]) -> "ELTensors":
        idx = np.asarray(indices, dtype=int)
        return ELTensors(
            self.M[:, idx], self.N[:, idx], self.O[:, idx], self.E[:, idx], self.G[:, idx],
            self.qdd, self.tau, [self.keys[i] for i in idx] if self.keys else [],
        )

    def scaled(self, scales: Sequence[float]) -> "ELTensors":
        """Tensors of phi_k / s_k"""
        s = np.asarray(scales, dtype=float)
        return ELTensors(
            self.M / s[None, :, None, None], self.N / s[None, :, None, None],
            self.O / s[None, :, None], self.E / s[None, :, None], self.G / s[None, :, None],
            self.qdd, self.tau, list(self.keys),
        )

    def term_rms(self) -> np.ndarray:
        """Root-mean-square of each term's EL feature, used for per-term scaling"""
        rms = np.sqrt(np.mean(np.sum(self.E**2, axis=2), axis=0))
        return np.where(rms > 0, rms, 1.0)


def evaluate_tensors(
    library: CandidateLibrary,
    q,
    qd,
    qdd=None,
    tau=None,
    t=None,
) -> ELTensors:
    """EL tensors for every library term at raw sample arrays of shape (S, n)"""
    n = library.space.n
    q = np.atleast_2d(np.asarray(q, dtype=float))
    qd = np.atleast_2d(np.asarray(qd, dtype=float))
    qdd = np.zeros_like(q) if qdd is None else np.atleast_2d(np.asarray(qdd, dtype=float))
    tau = np.zeros_like(q) if tau is None else np.atleast_2d(np.asarray(tau, dtype=float))
    for name, arr in (("q", q), ("qd", qd), ("qdd", qdd), ("tau", tau)):
        if arr.shape[1:] != (n,) or arr.shape[0] != q.shape[0]:
            raise DimensionError(f"{name} has shape {arr.shape}, expected (S, {n})")

    samples, p = q.shape[0], len(library)
    M = np.empty((samples, p, n, n))
    N = np.empty((samples, p, n, n))
    O = np.empty((samples, p, n))
    for k, term in enumerate(library.terms):
        M[:, k], N[:, k], O[:, k] = term_components(term, q, qd)
        bad = ~(np.isfinite(M[:, k]).all(axis=(1, 2)) & np.isfinite(N[:, k]).all(axis=(1, 2))
                & np.isfinite(O[:, k]).all(axis=1))
        if bad.any():
            s = int(np.flatnonzero(bad)[0])
            when = float(t[s]) if t is not None else None
            raise NonFiniteStateError(f"Term {term.key} is non-finite at sample {s}", time=when, state=(q[s], qd[s]))

    G = np.einsum("spij,sj->spi", N, qd) - O
    E = np.einsum("spij,sj->spi", M, qdd) + G
    return ELTensors(M, N, O, E, G, qdd, tau, library.keys())


def assemble_tensors(library: CandidateLibrary, dataset) -> ELTensors:
    """
    EL tensors for every term at every dataset sample

    The symbolic second partials of each term are built once (and cached per
    term); the numeric tensors are then kept for the whole training run.
    """
    names = dataset.metadata.get("coordinates")
    if names and tuple(names) != library.space.names:
        raise ConfigError(f"Dataset coordinates {names} do not match library coordinates {list(library.space.names)}")
    if dataset.n != library.space.n:
        raise DimensionError(f"Dataset has n = {dataset.n}, library expects n = {library.space.n}")
    return evaluate_tensors(library, dataset.q, dataset.qd, dataset.qdd, dataset.tau, t=dataset.t)


def residual_features(library: CandidateLibrary, samples: Optional[int] = None, seed: int = 0) -> np.ndarray:
    """
    EL features of every term at random states, stacked to (samples * n, p)

    q, q_dot and q_ddot are drawn uniformly from [-2, 2] as in is_trivial_term,
    so a coefficient vector c with features @ c == 0 is a Lagrangian whose
    EL residual vanishes regardless of trajectory.
    """
    n, p = library.space.n, len(library)
    count = samples or max(NULL_MIN_SAMPLES, 2 * p)
    rng = np.random.default_rng([seed, NULL_STREAM])
    q, qd, qdd = (rng.uniform(-2.0, 2.0, size=(count, n)) for _ in range(3))
    E = evaluate_tensors(library, q, qd, qdd).E
    return np.swapaxes(E, 1, 2).reshape(count * n, p)


def null_directions(features: np.ndarray, tol: float = NULL_TOLERANCE) -> np.ndarray:
    """
    Orthonormal basis (k, m) of the coefficient directions c with features @ c == 0

    Columns are normalized before the SVD; all-zero columns (single trivial
    terms) each contribute their own unit vector. m is 0 for independent columns.
    """
    features = np.asarray(features, dtype=float)
    k = features.shape[1]
    if k == 0:
        return np.zeros((0, 0))
    norms = np.linalg.norm(features, axis=0)
    top = norms.max()
    zero = norms <= tol * top if top > 0 else np.ones(k, dtype=bool)
    blocks = [np.eye(k)[:, zero]]
    live = np.flatnonzero(~zero)
    if live.size:
        _, s, vt = np.linalg.svd(features[:, live] / norms[live], full_matrices=True)
        rank = int(np.sum(s > tol * s[0]))
        block = np.zeros((k, live.size - rank))
        block[live] = vt[rank:].T / norms[live][:, None]
        blocks.append(block)
    basis = np.hstack(blocks)
    if basis.shape[1] == 0:
        return basis
    basis, _ = np.linalg.qr(basis)
    return basis


def prior_aliases(features: np.ndarray, r: int, tol: float = NULL_TOLERANCE) -> List[int]:
    """
    Terms to leave out so that the prior term r cannot be cancelled exactly

    While some combination phi_r + sum_k w_k phi_k has a vanishing EL residual,
    the highest-index term in that combination is dropped. For example
    theta_dot**2 == theta_dot**2*cos(theta)**2 + theta_dot**2*sin(theta)**2
    drops theta_dot**2*sin(theta)**2.

    Raises:
        ConfigError: the prior term is itself trivial
    """
    kept = list(range(features.shape[1]))
    dropped: List[int] = []
    while True:
        basis = null_directions(features[:, kept], tol)
        pos = kept.index(r)
        weight = basis[pos]
        if np.linalg.norm(weight) <= tol:
            return sorted(dropped)
        direction = basis @ weight
        involved = [kept[i] for i in np.flatnonzero(np.abs(direction) > tol * np.abs(direction).max())
                    if kept[i] != r]
        if not involved:
            raise ConfigError(f"Prior term at index {r} has an identically zero EL residual")
        victim = max(involved)
        kept.remove(victim)
        dropped.append(victim)


def is_trivial_lagrangian(features: np.ndarray, c, tol: float = NULL_TOLERANCE) -> bool:
    """True when sum_k c_k phi_k has a vanishing EL residual at every sampled state"""
    c = np.asarray(c, dtype=float)
    scale = np.linalg.norm(features) * np.linalg.norm(c)
    return bool(scale == 0 or np.linalg.norm(features @ c) <= tol * scale)


def _batch(tensors: ELTensors, batch) -> Tuple[np.ndarray, ...]:
    if batch is None:
        return tensors.M, tensors.E, tensors.G, tensors.qdd, tensors.tau
    return tensors.M[batch], tensors.E[batch], tensors.G[batch], tensors.qdd[batch], tensors.tau[batch]


def _check_coefficients(c, p: int) -> np.ndarray:
    c = np.asarray(c, dtype=float)
    if c.shape != (p,):
        raise DimensionError(f"Expected {p} coefficients, got shape {c.shape}")
    return c


def tau_pred(tensors: ELTensors, c, sample: Optional[int] = None) -> np.ndarray:
    """sum_k c_k E_k at one sample (n,) or at every sample (S, n)"""
    c = _check_coefficients(c, tensors.p)
    if sample is not None:
        return tensors.E[sample].T @ c
    return np.einsum("spi,p->si", tensors.E, c)


def _quadratic_cost(features: np.ndarray, target: np.ndarray, c: np.ndarray) -> Tuple[float, np.ndarray]:
    residual = target - np.einsum("spi,p->si", features, c)
    size = features.shape[0]
    cost = float(np.sum(residual**2) / size)
    grad = -2.0 / size * np.einsum("spi,si->p", features, residual)
    return cost, grad


def cost_case1(tensors: ELTensors, c, batch=None) -> Tuple[float, np.ndarray]:
    """Mean ||tau - tau_pred(c)||^2 over the batch and its gradient"""
    c = _check_coefficients(c, tensors.p)
    _, E, _, _, tau = _batch(tensors, batch)
    return _quadratic_cost(E, tau, c)


def pinv(A: np.ndarray) -> np.ndarray:
    """Batched Moore-Penrose inverse with cutoff n * eps * sigma_max"""
    n = A.shape[-1]
    return np.linalg.pinv(A, n * PINV_RCOND_FACTOR)


def _mass_and_drift(M, G, c):
    A = -np.einsum("spij,p->sij", M, c)
    b = np.einsum("spi,p->si", G, c)
    return A, b


def predict_qddot(tensors: ELTensors, c, sample: Optional[int] = None, tau=None) -> np.ndarray:
    """
    Accelerations implied by the model, pinv(-sum c M) (sum c G - tau)

    Raises:
        DegenerateModelError: c is identically zero
    """
    c = _check_coefficients(c, tensors.p)
    if not np.any(c):
        raise DegenerateModelError("All coefficients are zero; the model predicts no dynamics")
    rows = slice(None) if sample is None else slice(sample, sample + 1)
    A, b = _mass_and_drift(tensors.M[rows], tensors.G[rows], c)
    if tau is not None:
        b = b - np.atleast_2d(np.asarray(tau, dtype=float))
    qdd = np.einsum("sij,sj->si", pinv(A), b)
    return qdd[0] if sample is not None else qdd


def cost_case2(tensors: ELTensors, c, batch=None) -> Tuple[float, np.ndarray]:
    """
    Mean ||qdd - qdd_pred(c)||^2 and its gradient

    The gradient treats pinv(A) as a smooth inverse on its full-rank subspace:
    dJ/dc_k = -2/B sum_s w_s^T (G_k + M_k y), y = pinv(A) b, w = pinv(A)^T e.
    """
    c = _check_coefficients(c, tensors.p)
    if not np.any(c):
        raise DegenerateModelError("All coefficients are zero; the model predicts no dynamics")
    M, _, G, qdd, _ = _batch(tensors, batch)
    A, b = _mass_and_drift(M, G, c)
    A_pinv = pinv(A)
    y = np.einsum("sij,sj->si", A_pinv, b)
    error = qdd - y
    size = M.shape[0]
    cost = float(np.sum(error**2) / size)
    w = np.einsum("sji,sj->si", A_pinv, error)
    direction = G + np.einsum("spij,sj->spi", M, y)
    grad = -2.0 / size * np.einsum("si,spi->p", w, direction)
    return cost, grad


def upsilon_residual(tensors: ELTensors, c, r: int, batch=None) -> Tuple[float, np.ndarray]:
    """
    Case III cost with the prior term r fixed at unit coefficient

    Args:
        c: coefficients of the other p - 1 terms, in library order without r

    Returns:
        (mean ||-E_r - sum_{k != r} c_k E_k||^2, gradient of length p - 1)
    """
    if not 0 <= r < tensors.p:
        raise ConfigError(f"Prior term index {r} is out of range for a library of {tensors.p} terms")
    c = _check_coefficients(c, tensors.p - 1)
    _, E, _, _, _ = _batch(tensors, batch)
    rest = np.delete(np.arange(tensors.p), r)
    return _quadratic_cost(E[:, rest], -E[:, r], c)


@dataclass
class LagrangianModel:
    """
    Fitted coefficients over a library

    With prior_index set, `coefficients` has p - 1 entries (the prior term is
    implicit with coefficient 1); otherwise it has p entries.
    """
    library: CandidateLibrary
    coefficients: np.ndarray
    prior_index: Optional[int] = None
    case: int = 1

    def __post_init__(self):
        self.coefficients = np.asarray(self.coefficients, dtype=float)
        p = len(self.library)
        if self.prior_index is not None and not 0 <= self.prior_index < p:
            raise ConfigError(f"Prior term index {self.prior_index} is out of range for {p} terms")
        expected = p - 1 if self.prior_index is not None else p
        if self.coefficients.shape != (expected,):
            raise DimensionError(f"Expected {expected} coefficients, got {self.coefficients.shape}")

    @property
    def prior_key(self) -> Optional[str]:
        return None if self.prior_index is None else self.library[self.prior_index].key

    def full_coefficients(self) -> np.ndarray:
        if self.prior_index is None:
            return self.coefficients.copy()
        return np.insert(self.coefficients, self.prior_index, 1.0)

    def coefficient_map(self, tol: float = 0.0) -> Dict[str, float]:
        """{key: coefficient} for terms with |c| > tol, in library order"""
        return {
            term.key: float(c)
            for term, c in zip(self.library.terms, self.full_coefficients())
            if abs(c) > tol
        }

    def support(self, tol: float = 0.0) -> List[str]:
        return list(self.coefficient_map(tol))

    def normalized(self, key: Optional[str] = None) -> Dict[str, float]:
        """Coefficients divided by the coefficient of `key` (default: prior term, else largest)"""
        full = self.full_coefficients()
        if key is not None:
            pivot = full[self.library.index_of(key)]
        elif self.prior_index is not None:
            pivot = 1.0
        else:
            pivot = full[int(np.argmax(np.abs(full)))]
        if pivot == 0:
            raise DegenerateModelError(f"Cannot normalize by a zero coefficient ({key})")
        return {k: v / pivot for k, v in self.coefficient_map().items()}

    def render(self, precision: int = 2) -> str:
        return render(self, precision)

    def to_dict(self) -> Dict:
        return {
            "case": self.case,
            "library": self.library.to_dict(),
            "prior_term": self.prior_key,
            "coefficients": {term.key: float(c) for term, c in zip(self.library.terms, self.full_coefficients())},
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "LagrangianModel":
        library = CandidateLibrary.from_dict(data["library"])
        return cls.from_coefficients(library, data["coefficients"], data.get("prior_term"), data.get("case", 1))

    @classmethod
    def from_coefficients(
        cls,
        library: CandidateLibrary,
        mapping: Dict[str, float],
        prior_key: Optional[str] = None,
        case: int = 1,
    ) -> "LagrangianModel":
        """
        Model from {key: coefficient}; missing terms are zero

        Raises:
            ConfigError: prior_key is given but has no nonzero coefficient
        """
        full = np.zeros(len(library))
        for key, value in mapping.items():
            full[library.index_of(key)] = float(value)
        if prior_key is None:
            return cls(library, full, None, case)
        r = library.index_of(prior_key)
        if full[r] == 0.0:
            raise ConfigError(f"Prior term {library[r].key} needs a nonzero coefficient in the mapping")
        if full[r] != 1.0:
            full = full / full[r]
        return cls(library, np.delete(full, r), r, case)


class ModelDynamics:
    """
    Accelerations of a fitted model, usable as an rk4_batch right-hand side

    Only terms with nonzero coefficients are evaluated.
    """

    def __init__(self, model: LagrangianModel):
        full = model.full_coefficients()
        self.active = np.flatnonzero(full)
        if len(self.active) == 0:
            raise DegenerateModelError("Cannot roll out a model with no nonzero terms")
        self.terms = [model.library[k] for k in self.active]
        self.c = full[self.active]
        self.n = model.library.space.n

    def __call__(self, q: np.ndarray, qd: np.ndarray, tau: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        samples = q.shape[0]
        A = np.zeros((samples, self.n, self.n))
        b = np.zeros((samples, self.n))
        for coeff, term in zip(self.c, self.terms):
            M, N, O = term_components(term, q, qd)
            A -= coeff * M
            b += coeff * (np.einsum("sij,sj->si", N, qd) - O)
        b -= tau
        finite = np.isfinite(A).all(axis=(1, 2)) & np.isfinite(b).all(axis=1)
        qdd = np.full((samples, self.n), np.nan)
        if finite.any():
            qdd[finite] = np.einsum("sij,sj->si", pinv(A[finite]), b[finite])
        bad = ~finite | ~np.isfinite(qdd).all(axis=1)
        return qdd, bad
