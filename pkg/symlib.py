"""
Symbolic Candidate Library
==========================

Candidate functions phi_k(q, q_dot) for sparse Lagrangian identification:

1. Coordinate spaces (q_i and the matching velocities q_i_dot)
2. Candidate expressions built from {q_i, q_i_dot, sin(q_i), cos(q_i), constants}
   with exact partial derivatives
3. Polynomial and cross-term library generation
4. Numerical trivial-term detection (terms whose Euler-Lagrange residual
   vanishes on every trajectory)
5. Rendering of a fitted Lagrangian as text

Dependencies:
    pip install sympy numpy

Usage:
    from symlib import cart_pendulum_library

    library = cart_pendulum_library()
    print(len(library))            # 55
    print(library[0].display())    # θ̇
"""

import copy
import itertools
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Any, Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import sympy as sp

from exceptions import ConfigError, DimensionError, UnknownVariableError

GREEK_NAMES = {
    "theta": "θ",
    "phi": "φ",
    "psi": "ψ",
    "alpha": "α",
    "beta": "β",
    "gamma": "γ",
}
SUBSCRIPTS = str.maketrans("0123456789", "₀₁₂₃₄₅₆₇₈₉")
SUPERSCRIPTS = str.maketrans("0123456789", "⁰¹²³⁴⁵⁶⁷⁸⁹")
COMBINING_DOT = "̇"

TRIVIAL_SAMPLES = 64
TRIVIAL_TOLERANCE = 1e-9

Variable = Union[str, sp.Symbol]


def _pretty_label(name: str, dotted: bool = False) -> str:
    """theta1 -> θ₁, with a combining dot for velocities (θ̇₁)"""
    stem = name.rstrip("0123456789")
    digits = name[len(stem):]
    base = GREEK_NAMES.get(stem, stem)
    if dotted:
        base += COMBINING_DOT
    return base + digits.translate(SUBSCRIPTS)


@dataclass(frozen=True)
class CoordinateSpace:
    """Ordered generalized coordinates q_1..q_n and their velocities"""
    names: Tuple[str, ...]

    def __post_init__(self):
        names = tuple(self.names)
        object.__setattr__(self, "names", names)
        if len(names) < 1:
            raise ConfigError("A coordinate space needs at least one coordinate")
        if len(set(names)) != len(names):
            raise ConfigError(f"Coordinate labels must be unique, got {list(names)}")
        for name in names:
            if not name.isidentifier() or name.endswith("_dot") or name.endswith("_ddot"):
                raise ConfigError(f"Invalid coordinate label: {name!r}")

    @property
    def n(self) -> int:
        return len(self.names)

    @cached_property
    def coordinates(self) -> Tuple[sp.Symbol, ...]:
        return tuple(sp.Symbol(name) for name in self.names)

    @cached_property
    def velocities(self) -> Tuple[sp.Symbol, ...]:
        return tuple(sp.Symbol(f"{name}_dot") for name in self.names)

    @cached_property
    def accelerations(self) -> Tuple[sp.Symbol, ...]:
        return tuple(sp.Symbol(f"{name}_ddot") for name in self.names)

    def symbol(self, variable: Variable) -> sp.Symbol:
        """Resolve a coordinate or velocity by name or symbol"""
        name = variable.name if isinstance(variable, sp.Symbol) else str(variable)
        for sym in self.coordinates + self.velocities:
            if sym.name == name:
                return sym
        raise UnknownVariableError(
            f"Unknown variable {name!r}; expected one of "
            f"{[s.name for s in self.coordinates + self.velocities]}"
        )

    def namespace(self) -> Dict[str, Any]:
        """Locals for sympify so labels like 'gamma' stay plain symbols"""
        names: Dict[str, Any] = {"sin": sp.sin, "cos": sp.cos}
        for sym in self.coordinates + self.velocities:
            names[sym.name] = sym
        return names

    def label(self, sym: sp.Symbol) -> str:
        if sym in self.coordinates:
            return _pretty_label(sym.name)
        if sym in self.velocities:
            return _pretty_label(sym.name[: -len("_dot")], dotted=True)
        return sym.name


def _check_atoms(expr: sp.Expr, space: CoordinateSpace):
    """Reject anything outside products/sums/integer powers of the allowed atoms"""
    allowed = set(space.coordinates) | set(space.velocities)

    def visit(node):
        if node.is_Number:
            if not node.is_finite:
                raise ConfigError(f"Non-finite constant in candidate: {expr}")
            return
        if node.is_Symbol:
            if node not in allowed:
                raise UnknownVariableError(f"Symbol {node} is not part of coordinates {list(space.names)}")
            return
        if isinstance(node, (sp.sin, sp.cos)):
            if node.args[0] not in space.coordinates:
                raise ConfigError(f"Trigonometric atoms must take a bare coordinate, got {node}")
            return
        if node.is_Pow:
            base, exponent = node.args
            if not (exponent.is_Integer and exponent >= 0):
                raise ConfigError(f"Only non-negative integer powers are allowed, got {node}")
            visit(base)
            return
        if node.is_Add or node.is_Mul:
            for arg in node.args:
                visit(arg)
            return
        raise ConfigError(f"Unsupported atom {node} in candidate {expr}")

    visit(expr)


@dataclass(frozen=True)
class CandidateExpr:
    """A candidate function phi(q, q_dot) with exact symbolic derivatives"""
    expr: sp.Expr
    space: CoordinateSpace

    def __post_init__(self):
        expr = sp.sympify(self.expr)
        object.__setattr__(self, "expr", expr)
        _check_atoms(expr, self.space)

    @classmethod
    def parse(cls, text: str, space: CoordinateSpace) -> "CandidateExpr":
        try:
            expr = sp.sympify(text, locals=space.namespace())
        except (sp.SympifyError, SyntaxError, TypeError) as e:
            raise ConfigError(f"Cannot parse candidate {text!r}: {e}") from e
        return cls(expr, space)

    @property
    def key(self) -> str:
        """Stable ASCII name used in configs, CSV and JSON"""
        return str(self.expr)

    @cached_property
    def _compiled(self):
        return sp.lambdify(self.space.coordinates + self.space.velocities, self.expr, "numpy")

    def __mul__(self, other: "CandidateExpr") -> "CandidateExpr":
        if other.space != self.space:
            raise ConfigError("Cannot multiply candidates from different coordinate spaces")
        return CandidateExpr(self.expr * other.expr, self.space)

    def __pow__(self, exponent: int) -> "CandidateExpr":
        return CandidateExpr(self.expr ** exponent, self.space)

    def __call__(self, q, q_dot):
        return evaluate(self, q, q_dot)

    def __str__(self) -> str:
        return self.key

    def display(self) -> str:
        """Unicode form, e.g. φ̇²sin²(θ)"""
        expr = self.expr
        if expr.is_Add:
            return sp.sstr(expr)
        coeff, rest = expr.as_coeff_Mul()
        powers = rest.as_powers_dict() if rest != 1 else {}
        space = self.space

        def rank(base):
            if base in space.velocities:
                return (0, space.velocities.index(base), 0)
            if base in space.coordinates:
                return (1, space.coordinates.index(base), 0)
            if isinstance(base, (sp.sin, sp.cos)):
                return (2, space.coordinates.index(base.args[0]), 0 if isinstance(base, sp.sin) else 1)
            return (3, 0, 0)

        parts = []
        for base in sorted(powers, key=rank):
            exponent = int(powers[base])
            sup = str(exponent).translate(SUPERSCRIPTS) if exponent != 1 else ""
            if isinstance(base, (sp.sin, sp.cos)):
                fn = "sin" if isinstance(base, sp.sin) else "cos"
                parts.append(f"{fn}{sup}({space.label(base.args[0])})")
            else:
                parts.append(f"{space.label(base)}{sup}")
        body = "".join(parts)
        if coeff == 1 and body:
            return body
        if not body:
            return sp.sstr(coeff)
        return f"{sp.sstr(coeff)}{body}"


def _as_array(values, n: int, name: str) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(values, dtype=float))
    if arr.shape[-1] != n:
        raise DimensionError(f"{name} has {arr.shape[-1]} entries per sample, expected n = {n}")
    return arr


def evaluate(expr: CandidateExpr, q, q_dot) -> Union[float, np.ndarray]:
    """
    Evaluate a candidate at one sample or a stack of samples

    Args:
        expr: Candidate expression
        q: Coordinates, shape (n,) or (..., n)
        q_dot: Velocities, same shape as q

    Returns:
        float for a single sample, otherwise an array over the leading axes
    """
    n = expr.space.n
    q = _as_array(q, n, "q")
    q_dot = _as_array(q_dot, n, "q_dot")
    if q.shape != q_dot.shape:
        raise DimensionError(f"q {q.shape} and q_dot {q_dot.shape} must have the same shape")
    args = [q[..., i] for i in range(n)] + [q_dot[..., i] for i in range(n)]
    value = np.broadcast_to(np.asarray(expr._compiled(*args), dtype=float), q.shape[:-1])
    return float(value) if value.ndim == 0 else np.array(value)


def diff(expr: CandidateExpr, var: Variable) -> CandidateExpr:
    """Exact partial derivative with respect to a coordinate or velocity"""
    sym = expr.space.symbol(var)
    return CandidateExpr(sp.diff(expr.expr, sym), expr.space)


def polynomial_combinations(atoms: Sequence[CandidateExpr], max_order: int) -> List[CandidateExpr]:
    """
    All distinct monomials of total degree 1..max_order over the atoms

    Ordering is graded lexicographic by atom index, so the same atoms always
    produce the same term list.
    """
    if not atoms:
        raise ConfigError("polynomial_combinations needs at least one atom")
    if max_order < 1:
        raise ConfigError(f"max_order must be >= 1, got {max_order}")
    space = atoms[0].space
    if any(atom.space != space for atom in atoms):
        raise ConfigError("All atoms must share one coordinate space")

    terms, seen = [], set()
    for degree in range(1, max_order + 1):
        for combo in itertools.combinations_with_replacement(range(len(atoms)), degree):
            product = sp.Mul(*[atoms[i].expr for i in combo])
            if product in seen:
                continue
            seen.add(product)
            terms.append(CandidateExpr(product, space))
    return terms


def cross_terms(set_a: Sequence[CandidateExpr], set_b: Sequence[CandidateExpr]) -> List[CandidateExpr]:
    """Pairwise products a*b in row-major order"""
    if not set_a or not set_b:
        raise ConfigError("cross_terms needs two non-empty sets")
    return [a * b for a in set_a for b in set_b]


def el_components(expr: CandidateExpr) -> Tuple[sp.Matrix, sp.Matrix, sp.Matrix]:
    """
    Symbolic Euler-Lagrange blocks of a single term

    Returns:
        (M, N, O) with M_ij = d2phi/dqd_i dqd_j, N_ij = d2phi/dqd_i dq_j and
        O_i = dphi/dq_i
    """
    space = expr.space
    n = space.n
    grad_qd = [diff(expr, v) for v in space.velocities]
    M = sp.Matrix(n, n, lambda i, j: diff(grad_qd[i], space.velocities[j]).expr)
    N = sp.Matrix(n, n, lambda i, j: diff(grad_qd[i], space.coordinates[j]).expr)
    O = sp.Matrix([diff(expr, q).expr for q in space.coordinates])
    return M, N, O


def is_trivial_term(
    expr: CandidateExpr,
    space: Optional[CoordinateSpace] = None,
    samples: int = TRIVIAL_SAMPLES,
    seed: int = 0,
    tol: float = TRIVIAL_TOLERANCE,
) -> bool:
    """
    True when the term's Euler-Lagrange residual vanishes regardless of trajectory

    The residual M q_ddot + N q_dot - O is evaluated at random samples with
    q, q_dot and q_ddot drawn uniformly from [-2, 2].
    """
    space = space or expr.space
    if space != expr.space:
        raise ConfigError("Candidate does not belong to the given coordinate space")
    M, N, O = el_components(expr)
    residual = M * sp.Matrix(space.accelerations) + N * sp.Matrix(space.velocities) - O
    variables = space.coordinates + space.velocities + space.accelerations
    fn = sp.lambdify(variables, list(residual), "numpy")

    rng = np.random.default_rng(seed)
    draws = rng.uniform(-2.0, 2.0, size=(samples, len(variables)))
    values = np.stack([
        np.broadcast_to(np.asarray(v, dtype=float), (samples,))
        for v in fn(*draws.T)
    ])
    return bool(np.all(np.max(np.abs(values), axis=0) < tol))


@dataclass(frozen=True)
class CandidateLibrary:
    """
    Ordered candidate terms plus per-term penalty mask and scale factors

    penalty_mask[k] is False for known prior terms that are exempt from the
    L1 proximal step; every such term must be listed in known_terms.
    """
    terms: Tuple[CandidateExpr, ...]
    penalty_mask: Optional[Tuple[bool, ...]] = None
    scales: Optional[Tuple[float, ...]] = None
    known_terms: FrozenSet[str] = field(default_factory=frozenset)

    def __post_init__(self):
        terms = tuple(self.terms)
        if not terms:
            raise ConfigError("A candidate library needs at least one term")
        space = terms[0].space
        if any(t.space != space for t in terms):
            raise ConfigError("All library terms must share one coordinate space")
        keys = [t.key for t in terms]
        if len(set(keys)) != len(keys):
            duplicates = sorted({k for k in keys if keys.count(k) > 1})
            raise ConfigError(f"Duplicate library terms: {duplicates}")

        mask = tuple(bool(m) for m in self.penalty_mask) if self.penalty_mask is not None else (True,) * len(terms)
        scales = tuple(float(s) for s in self.scales) if self.scales is not None else (1.0,) * len(terms)
        if len(mask) != len(terms) or len(scales) != len(terms):
            raise ConfigError("penalty_mask and scales must have one entry per term")
        if any(not np.isfinite(s) or s <= 0 for s in scales):
            raise ConfigError("Scale factors must be positive and finite")
        known = frozenset(self.known_terms)
        for term, penalized in zip(terms, mask):
            if not penalized and term.key not in known:
                raise ConfigError(f"Unpenalized term {term.key} is not a declared known prior term")

        object.__setattr__(self, "terms", terms)
        object.__setattr__(self, "penalty_mask", mask)
        object.__setattr__(self, "scales", scales)
        object.__setattr__(self, "known_terms", known)

    @property
    def space(self) -> CoordinateSpace:
        return self.terms[0].space

    def __len__(self) -> int:
        return len(self.terms)

    def __iter__(self):
        return iter(self.terms)

    def __getitem__(self, index: int) -> CandidateExpr:
        return self.terms[index]

    def keys(self) -> List[str]:
        return [t.key for t in self.terms]

    def index_of(self, key: Union[str, CandidateExpr]) -> int:
        """Library index of a term given by key text or expression"""
        target = key if isinstance(key, CandidateExpr) else CandidateExpr.parse(key, self.space)
        for k, term in enumerate(self.terms):
            if term.expr == target.expr:
                return k
        raise ConfigError(f"Term {target.key} is not in the library")

    def with_unpenalized(self, keys: Iterable[str]) -> "CandidateLibrary":
        """Declare known prior terms and exempt them from the L1 penalty"""
        indices = {self.index_of(k) for k in keys}
        mask = tuple(False if k in indices else m for k, m in enumerate(self.penalty_mask))
        known = self.known_terms | {self.terms[k].key for k in indices}
        return replace(self, penalty_mask=mask, known_terms=known)

    def with_scales(self, scales: Sequence[float]) -> "CandidateLibrary":
        return replace(self, scales=tuple(float(s) for s in scales))

    def to_dict(self) -> Dict:
        return {
            "coordinates": list(self.space.names),
            "terms": self.keys(),
            "unpenalized": [t.key for t, m in zip(self.terms, self.penalty_mask) if not m],
            "scales": list(self.scales),
        }

    @classmethod
    def from_keys(cls, space: CoordinateSpace, keys: Sequence[str]) -> "CandidateLibrary":
        return cls(tuple(CandidateExpr.parse(k, space) for k in keys))

    @classmethod
    def from_dict(cls, data: Dict) -> "CandidateLibrary":
        space = CoordinateSpace(tuple(data["coordinates"]))
        library = cls.from_keys(space, data["terms"])
        if data.get("scales"):
            library = library.with_scales(data["scales"])
        if data.get("unpenalized"):
            library = library.with_unpenalized(data["unpenalized"])
        return library


# Library recipes for the four benchmark systems
LIBRARY_PRESETS: Dict[str, Dict] = {
    # 12 terms. theta_dot*cos(theta) and theta_dot*sin(theta) are total time
    # derivatives and stay in; drop_trivial would leave 10.
    "single_pendulum": {
        "coordinates": ["theta"],
        "groups": [{"atoms": ["theta", "theta_dot", "cos(theta)", "sin(theta)"], "max_order": 2}],
        "exclude": ["theta_dot", "theta*theta_dot"],
    },
    "cart_pendulum": {
        "coordinates": ["theta", "x"],
        "groups": [{"atoms": ["theta_dot", "cos(theta)", "sin(theta)", "x", "x_dot"], "max_order": 3}],
    },
    "double_pendulum": {
        "coordinates": ["theta1", "theta2"],
        "groups": [
            {"atoms": ["cos(theta1)", "sin(theta1)", "cos(theta2)", "sin(theta2)"], "max_order": 2},
            {"atoms": ["theta1_dot", "theta2_dot"], "max_order": 2},
        ],
        "cross": True,
    },
    "spherical_pendulum": {
        "coordinates": ["theta", "phi"],
        "groups": [
            {"atoms": ["cos(theta)", "sin(theta)"], "max_order": 2},
            {"atoms": ["theta_dot", "phi", "phi_dot"], "max_order": 2},
        ],
        "cross": True,
    },
}


def build_library(spec: Dict) -> CandidateLibrary:
    """
    Build a library from a config dict

    Keys:
        preset: name in LIBRARY_PRESETS (other keys override the preset)
        coordinates: coordinate labels
        groups: [{"atoms": [...], "max_order": k}, ...]
        cross: add cross terms between exactly two groups
        exclude: term keys to drop
        drop_trivial: drop terms detected by is_trivial_term
        unpenalized: known prior terms exempt from the L1 penalty
    """
    spec = dict(spec)
    if "preset" in spec:
        preset = spec.pop("preset")
        if preset not in LIBRARY_PRESETS:
            raise ConfigError(f"Unknown library preset {preset!r}; choose from {sorted(LIBRARY_PRESETS)}")
        merged = copy.deepcopy(LIBRARY_PRESETS[preset])
        extra_exclude = spec.pop("exclude", [])
        merged.update(spec)
        merged["exclude"] = list(merged.get("exclude", [])) + list(extra_exclude)
        spec = merged

    if "coordinates" not in spec or "groups" not in spec:
        raise ConfigError("Library spec needs 'coordinates' and 'groups' (or a 'preset')")
    space = CoordinateSpace(tuple(spec["coordinates"]))

    groups = []
    for group in spec["groups"]:
        atoms = [CandidateExpr.parse(text, space) for text in group.get("atoms", [])]
        groups.append(polynomial_combinations(atoms, int(group.get("max_order", 1))))

    terms = [t for group in groups for t in group]
    if spec.get("cross"):
        if len(groups) != 2:
            raise ConfigError(f"Cross terms need exactly two groups, got {len(groups)}")
        terms += cross_terms(groups[0], groups[1])

    excluded = [CandidateExpr.parse(text, space).expr for text in spec.get("exclude", [])]
    for expr in excluded:
        if not any(t.expr == expr for t in terms):
            raise ConfigError(f"Excluded term {expr} is not generated by this library spec")
    terms = [t for t in terms if t.expr not in excluded]

    if spec.get("drop_trivial"):
        terms = [t for t in terms if not is_trivial_term(t)]

    library = CandidateLibrary(tuple(terms))
    if spec.get("unpenalized"):
        library = library.with_unpenalized(spec["unpenalized"])
    return library


def single_pendulum_library() -> CandidateLibrary:
    return build_library({"preset": "single_pendulum"})


def cart_pendulum_library() -> CandidateLibrary:
    return build_library({"preset": "cart_pendulum"})


def double_pendulum_library(drop_linear_velocity: bool = False) -> CandidateLibrary:
    """89 terms, or 87 with the bare theta1_dot / theta2_dot terms dropped"""
    spec: Dict[str, Any] = {"preset": "double_pendulum"}
    if drop_linear_velocity:
        spec["exclude"] = ["theta1_dot", "theta2_dot"]
    return build_library(spec)


def spherical_pendulum_library() -> CandidateLibrary:
    return build_library({"preset": "spherical_pendulum"})


def render(model, precision: int = 2) -> str:
    """
    Human-readable Lagrangian, e.g. "0.50·θ̇² + 9.78·cos(θ)"

    Args:
        model: anything with .library and .full_coefficients()
        precision: digits after the decimal point

    Returns:
        Velocity-dependent terms first, then the rest, each in library
        order; terms that round to zero are omitted
    """
    coefficients = np.asarray(model.full_coefficients(), dtype=float)
    velocities = set(model.library.space.velocities)
    order = sorted(
        range(len(coefficients)),
        key=lambda k: not (model.library[k].expr.free_symbols & velocities),
    )
    pieces = []
    for k in order:
        term, c = model.library[k], coefficients[k]
        rounded = round(float(c), precision)
        if rounded == 0:
            continue
        text = f"{abs(rounded):.{precision}f}·{term.display()}"
        if not pieces:
            pieces.append(f"-{text}" if rounded < 0 else text)
        else:
            pieces.append(f"- {text}" if rounded < 0 else f"+ {text}")
    return " ".join(pieces)
