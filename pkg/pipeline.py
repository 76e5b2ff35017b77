"""
Experiment Pipeline
===================

Reproducible generate → fit → validate → report runs driven by a JSON
RunConfig:

    generate   simulate clean trajectories, write clean + noisy datasets
    fit        train the sparse Lagrangian (case I, II or III)
    validate   roll the learned model out against the true simulator
    report     rendered Lagrangian, coefficient table, rollout CSV, summary
    sweep      informational noise sweep over sigmas and seeds

Environment (.env):
    LAGRANGIA_OUTPUT_DIR   default output directory
    LAGRANGIA_WORKERS      threads for trajectory generation and rollouts
"""

import csv
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from console import console
from dynamics import (
    DatasetParams,
    Forcing,
    ForcingSpec,
    NoiseSpec,
    SystemSpec,
    TrajectoryDataset,
    add_noise,
    generate_dataset,
    load_dataset,
    rk4_batch,
    save_dataset,
)
from elgrad import LagrangianModel, ModelDynamics
from exceptions import (
    ConfigError,
    DegenerateModelError,
    EmptyModelError,
    NonFiniteGradientError,
    PriorSelectionError,
)
from optimizer import StageSchedule, TrainReport, select_prior_term, train
from symlib import build_library

VALIDATION_MODES = ("held_out", "extended")
PRESENCE_THRESHOLD = 1e-3

PathLike = Union[str, Path]


def _env_int(name: str, default: int) -> int:
    value = os.getenv(name)
    if not value:
        return default
    try:
        return int(value)
    except ValueError as e:
        raise ConfigError(f"{name} must be an integer, got {value!r}") from e


@dataclass
class NoiseConfig:
    """Noise levels written by generate; sigma 0 still gets its own file"""
    sigmas: List[float] = field(default_factory=lambda: [0.0])
    channels: List[str] = field(default_factory=lambda: ["q", "qd", "qdd"])
    seed: int = 0

    def spec(self, sigma: float) -> NoiseSpec:
        return NoiseSpec(sigma=sigma, channels=tuple(self.channels), seed=self.seed)


@dataclass
class FitConfig:
    case: int = 1
    prior_terms: List[str] = field(default_factory=list)
    sigma: float = 0.0

    def __post_init__(self):
        if self.case not in (1, 2, 3):
            raise ConfigError(f"case must be 1, 2 or 3, got {self.case}")
        if self.case == 3 and not self.prior_terms:
            raise ConfigError("Case III needs at least one entry in fit.prior_terms")


@dataclass
class ValidationParams:
    mode: str = "held_out"
    trajectories: int = 20
    duration: float = 5.0
    extension: float = 5.0
    seed_offset: int = 1000
    presence_threshold: float = PRESENCE_THRESHOLD

    def __post_init__(self):
        if self.mode not in VALIDATION_MODES:
            raise ConfigError(f"validation.mode must be one of {VALIDATION_MODES}, got {self.mode!r}")
        if self.trajectories < 1:
            raise ConfigError("validation.trajectories must be >= 1")


@dataclass
class RunConfig:
    """Everything a run needs; reproducible from this plus the seeds inside it"""
    system: SystemSpec = field(default_factory=SystemSpec)
    library: Dict[str, Any] = field(default_factory=dict)
    fit: FitConfig = field(default_factory=FitConfig)
    forcing: ForcingSpec = field(default_factory=ForcingSpec)
    dataset: DatasetParams = field(default_factory=DatasetParams)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    schedule: StageSchedule = field(default_factory=StageSchedule)
    validation: ValidationParams = field(default_factory=ValidationParams)
    output_dir: str = field(default_factory=lambda: os.getenv("LAGRANGIA_OUTPUT_DIR", "runs"))
    workers: int = field(default_factory=lambda: _env_int("LAGRANGIA_WORKERS", 1))
    name: str = "run"

    def __post_init__(self):
        if not self.library:
            self.library = {"preset": self.system.kind}
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")

    @property
    def out(self) -> Path:
        return Path(self.output_dir)

    def to_dict(self) -> Dict:
        return {
            "name": self.name,
            "system": self.system.to_dict(),
            "library": self.library,
            "fit": asdict(self.fit),
            "forcing": self.forcing.to_dict(),
            "dataset": self.dataset.to_dict(),
            "noise": asdict(self.noise),
            "schedule": self.schedule.to_dict(),
            "validation": asdict(self.validation),
            "output_dir": self.output_dir,
            "workers": self.workers,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "RunConfig":
        known = {"name", "system", "library", "fit", "forcing", "dataset", "noise",
                 "schedule", "validation", "output_dir", "workers"}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"Unknown config keys: {unknown}")
        try:
            system = SystemSpec.from_dict(data.get("system", {}))
            schedule_data = dict(data.get("schedule", {}))
            # preset (default) starts from the per-system alpha/lambda, explicit keys win
            if schedule_data.pop("preset", True):
                schedule = StageSchedule.for_system(system.kind, **schedule_data)
            else:
                schedule = StageSchedule.from_dict(schedule_data)
            kwargs: Dict[str, Any] = {
                "name": data.get("name", "run"),
                "system": system,
                "library": dict(data.get("library", {})),
                "fit": FitConfig(**data.get("fit", {})),
                "forcing": ForcingSpec.from_dict(data.get("forcing", {})),
                "dataset": DatasetParams.from_dict(data.get("dataset", {})),
                "noise": NoiseConfig(**data.get("noise", {})),
                "schedule": schedule,
                "validation": ValidationParams(**data.get("validation", {})),
            }
        except TypeError as e:
            raise ConfigError(f"Invalid config: {e}") from e
        if "output_dir" in data:
            kwargs["output_dir"] = data["output_dir"]
        if "workers" in data:
            kwargs["workers"] = int(data["workers"])
        return cls(**kwargs)

    def save(self, path: PathLike) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")
        return path


def load_config(
    path: PathLike,
    seed: Optional[int] = None,
    sigma: Optional[float] = None,
    case: Optional[int] = None,
    out: Optional[str] = None,
) -> RunConfig:
    """Read a JSON RunConfig and apply command-line overrides"""
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}: invalid JSON ({e.msg})") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")

    if seed is not None:
        for section in ("dataset", "noise", "schedule"):
            data.setdefault(section, {})["seed"] = seed
    if sigma is not None:
        data.setdefault("fit", {})["sigma"] = sigma
        sigmas = data.setdefault("noise", {}).setdefault("sigmas", [0.0])
        if sigma not in sigmas:
            sigmas.append(sigma)
    if case is not None:
        data.setdefault("fit", {})["case"] = case
    if out is not None:
        data["output_dir"] = out
    config = RunConfig.from_dict(data)
    console.info(f"📄 Loaded config {path} ({config.system.kind}, case {config.fit.case})")
    return config


def _sigma_label(sigma: float) -> str:
    return f"{sigma:g}"


def dataset_path(config: RunConfig, sigma: Optional[float] = None) -> Path:
    """data/train_clean.csv, or data/train_sigma_<sigma>.csv"""
    if sigma is None:
        return config.out / "data" / "train_clean.csv"
    return config.out / "data" / f"train_sigma_{_sigma_label(sigma)}.csv"


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------

def generate(config: RunConfig) -> Dict[str, Path]:
    """Simulate the clean training set and write it plus one file per noise level"""
    console.section("GENERATE", "🚀")
    clean = generate_dataset(config.system, config.forcing, config.dataset, config.workers)
    written = {"clean": save_dataset(clean, dataset_path(config))}
    for sigma in config.noise.sigmas:
        noisy = add_noise(clean, config.noise.spec(sigma))
        written[_sigma_label(sigma)] = save_dataset(noisy, dataset_path(config, sigma))
    return written


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------

def _check_dataset(config: RunConfig, dataset: TrajectoryDataset):
    kind = dataset.metadata.get("kind")
    if kind and kind != config.system.kind:
        raise ConfigError(f"Dataset was generated for {kind}, config is for {config.system.kind}")


def fit(config: RunConfig, dataset: Optional[TrajectoryDataset] = None) -> Tuple[LagrangianModel, TrainReport]:
    """
    Train the model the config asks for and write fit/model.json + fit/train_report.json

    Optimizer failures do not raise: they come back as a zero model whose
    report carries the error and converged = False.
    """
    console.section("FIT", "🔎")
    if dataset is None:
        dataset = load_dataset(dataset_path(config, config.fit.sigma))
    _check_dataset(config, dataset)
    library = build_library(config.library)
    case = config.fit.case
    console.info(f"📚 Library: {len(library)} candidate terms")

    try:
        if case == 3 and len(config.fit.prior_terms) > 1:
            score = lambda candidate, _: validate(candidate, config, write=False).mean_rmse
            _, model, train_report = select_prior_term(
                library, dataset, config.fit.prior_terms, config.schedule, score
            )
        else:
            prior = config.fit.prior_terms[0] if case == 3 else None
            model, train_report = train(library, dataset, case, prior, config.schedule)
    except (EmptyModelError, NonFiniteGradientError, DegenerateModelError, PriorSelectionError) as e:
        console.error(f"Training failed: {e}")
        prior = config.fit.prior_terms[0] if case == 3 else None
        r = library.index_of(prior) if prior else None
        model = LagrangianModel(library, np.zeros(len(library) - (r is not None)), r, case)
        train_report = TrainReport(
            case=case, prior_term=model.prior_key, converged=False, relaxed=False, stages_used=0,
            final_cost=float("nan"), stages=[], coefficients={}, schedule=config.schedule.to_dict(),
            seed=config.schedule.seed, wall_time=0.0, error=f"{type(e).__name__}: {e}",
        )

    fit_dir = config.out / "fit"
    save_model(model, fit_dir / "model.json")
    train_report.save(fit_dir / "train_report.json")
    console.success(f"✓ Saved model and training report to {fit_dir}")
    return model, train_report


def save_model(model: LagrangianModel, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(model.to_dict(), indent=2), encoding="utf-8")
    return path


def load_model(path: PathLike) -> LagrangianModel:
    try:
        return LagrangianModel.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
    except (json.JSONDecodeError, KeyError) as e:
        raise ConfigError(f"{path}: not a model file ({e})") from e


# ---------------------------------------------------------------------------
# validate
# ---------------------------------------------------------------------------

@dataclass
class ValidationReport:
    """Rollout errors and structure recovery of a learned model"""
    mode: str
    trajectory_ids: List[int]
    rmse: List[float]
    divergent: List[int]
    verdict: str
    extra_terms: List[str]
    missing_terms: List[str]
    reference_term: Optional[str]
    coefficients: List[Dict[str, Any]]
    t: np.ndarray = field(default=None, repr=False)
    q_true: np.ndarray = field(default=None, repr=False)
    q_pred: np.ndarray = field(default=None, repr=False)

    @property
    def mean_rmse(self) -> float:
        return float(np.mean(self.rmse)) if self.rmse else float("inf")

    def to_dict(self) -> Dict:
        return {
            "mode": self.mode,
            "trajectory_ids": self.trajectory_ids,
            "rmse": [r if np.isfinite(r) else None for r in self.rmse],
            "mean_rmse": self.mean_rmse if np.isfinite(self.mean_rmse) else None,
            "divergent": self.divergent,
            "verdict": self.verdict,
            "extra_terms": self.extra_terms,
            "missing_terms": self.missing_terms,
            "reference_term": self.reference_term,
            "coefficients": self.coefficients,
        }

    def save(self, directory: PathLike) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / "validation.json"
        path.write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")
        np.savez(directory / "rollout.npz", t=self.t, q_true=self.q_true, q_pred=self.q_pred)
        return path

    @classmethod
    def load(cls, directory: PathLike) -> "ValidationReport":
        directory = Path(directory)
        data = json.loads((directory / "validation.json").read_text(encoding="utf-8"))
        data.pop("mean_rmse", None)
        data["rmse"] = [float("inf") if r is None else r for r in data["rmse"]]
        rollout = directory / "rollout.npz"
        if rollout.exists():
            with np.load(rollout) as arrays:
                data.update(t=arrays["t"], q_true=arrays["q_true"], q_pred=arrays["q_pred"])
        return cls(**data)


def structure_verdict(learned: Sequence[str], true: Sequence[str]) -> Tuple[str, List[str], List[str]]:
    """("exact" | "extra terms" | "missing terms" | "extra and missing terms", extra, missing)"""
    extra = [k for k in learned if k not in set(true)]
    missing = [k for k in true if k not in set(learned)]
    if extra and missing:
        verdict = "extra and missing terms"
    elif extra:
        verdict = "extra terms"
    elif missing:
        verdict = "missing terms"
    else:
        verdict = "exact"
    return verdict, extra, missing


def coefficient_table(
    model: LagrangianModel, true: Dict[str, float], tol: float = PRESENCE_THRESHOLD
) -> Tuple[Optional[str], List[Dict[str, Any]]]:
    """
    Learned vs. true coefficients, both normalized by a shared reference term

    The reference is the prior term when there is one, otherwise the first
    true term the model also found.
    """
    learned = model.coefficient_map(tol)
    reference = model.prior_key
    if reference is None:
        reference = next((k for k in true if k in learned), None)

    rows = []
    for term in model.library.terms:
        key = term.key
        if key not in learned and key not in true:
            continue
        c = learned.get(key, 0.0)
        c_true = true.get(key, 0.0)
        row: Dict[str, Any] = {"term": key, "display": term.display(), "learned": c, "true": c_true}
        if reference is not None:
            row["learned_normalized"] = c / learned[reference]
            row["true_normalized"] = c_true / true[reference] if true.get(reference) else None
            if row["true_normalized"]:
                row["ratio"] = row["learned_normalized"] / row["true_normalized"]
        rows.append(row)
    return reference, rows


def _true_support(config: RunConfig) -> Dict[str, float]:
    return config.system.true_coefficients()


def _rollout(model: LagrangianModel, truth: TrajectoryDataset, config: RunConfig, duration: float):
    """Integrate the learned model from each truth initial state, chunked like generation"""
    dynamics = ModelDynamics(model)
    ids = truth.trajectory_ids
    q0, qd0 = truth.initial_states()
    chunk = config.dataset.chunk_size
    chunks = [list(range(s, min(s + chunk, len(ids)))) for s in range(0, len(ids), chunk)]

    def run(rows):
        forcing = Forcing.stack([truth.forcing(ids[i]) for i in rows]) if truth.has_tau else None
        return rk4_batch(dynamics, q0[rows], qd0[rows], forcing, duration, config.dataset.dt, config.dataset.substeps)

    with ThreadPoolExecutor(max_workers=config.workers) as pool:
        results = list(console.progress(pool.map(run, chunks), desc="rollouts", total=len(chunks)))
    q_pred = np.concatenate([r.q for r in results])
    failed = np.concatenate([r.failed for r in results])
    return results[0].t, q_pred, failed


def validate(model: LagrangianModel, config: RunConfig, write: bool = True) -> ValidationReport:
    """
    Roll the learned model out and compare with the true simulator

    held_out: fresh initial conditions from the training ranges, RMSE over
    the whole horizon. extended: training initial conditions integrated
    past the training horizon, RMSE over the extrapolation window only.
    Divergent rollouts get RMSE = inf and are listed, never raised.
    """
    if write:
        console.section("VALIDATE", "📈")
    params = config.validation
    if params.mode == "held_out":
        truth_params = replace(
            config.dataset, trajectories=params.trajectories, duration=params.duration,
            seed=config.dataset.seed + params.seed_offset,
        )
        window_start = 0.0
    else:
        truth_params = replace(
            config.dataset, trajectories=min(params.trajectories, config.dataset.trajectories),
            duration=config.dataset.duration + params.extension,
        )
        window_start = config.dataset.duration
    truth = generate_dataset(config.system, config.forcing, truth_params, config.workers)

    t, q_pred, failed = _rollout(model, truth, config, truth_params.duration)
    ids = truth.trajectory_ids
    window = t >= window_start - 1e-12
    q_true = np.stack([truth.trajectory(i).q for i in ids])

    rmse = []
    for row in range(len(ids)):
        err = q_pred[row, window] - q_true[row, window]
        value = float(np.sqrt(np.mean(err**2))) if not failed[row] else float("inf")
        rmse.append(value if np.isfinite(value) else float("inf"))
    divergent = [ids[row] for row in range(len(ids)) if not np.isfinite(rmse[row])]

    true = _true_support(config)
    verdict, extra, missing = structure_verdict(model.support(params.presence_threshold), list(true))
    reference, table = coefficient_table(model, true, params.presence_threshold)

    report = ValidationReport(
        mode=params.mode, trajectory_ids=ids, rmse=rmse, divergent=divergent, verdict=verdict,
        extra_terms=extra, missing_terms=missing, reference_term=reference, coefficients=table,
        t=t[window], q_true=q_true[:, window], q_pred=q_pred[:, window],
    )
    if divergent:
        console.warn(f"{len(divergent)} rollout(s) diverged: {divergent}")
    console.log(f"   Structure: {verdict}; mean RMSE {report.mean_rmse:.3g}")
    if write:
        path = report.save(config.out / "validation")
        console.success(f"✓ Saved validation to {path}")
    return report


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def report(
    model: LagrangianModel,
    validation: ValidationReport,
    out_dir: PathLike,
    train_report: Optional[TrainReport] = None,
    precision: int = 3,
) -> Dict[str, Path]:
    """Write lagrangian.txt, coefficients.csv, rollout.csv and summary.json"""
    console.section("REPORT", "📝")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}

    paths["lagrangian"] = out_dir / "lagrangian.txt"
    paths["lagrangian"].write_text(f"L = {model.render(precision) or '0'}\n", encoding="utf-8")

    paths["coefficients"] = out_dir / "coefficients.csv"
    columns = ["term", "display", "learned", "true", "learned_normalized", "true_normalized", "ratio"]
    with paths["coefficients"].open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, restval="")
        writer.writeheader()
        for row in validation.coefficients:
            writer.writerow({k: ("" if v is None else v) for k, v in row.items()})

    paths["rollout"] = out_dir / "rollout.csv"
    n = model.library.space.n
    with paths["rollout"].open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["traj_id", "t"] + [f"q_true_{i}" for i in range(1, n + 1)]
                        + [f"q_pred_{i}" for i in range(1, n + 1)])
        if validation.t is not None:
            for row, traj in enumerate(validation.trajectory_ids):
                for k, t in enumerate(validation.t):
                    writer.writerow([traj, repr(float(t))]
                                    + [repr(float(v)) for v in validation.q_true[row, k]]
                                    + [repr(float(v)) for v in validation.q_pred[row, k]])

    summary = {
        "lagrangian": model.render(precision),
        "model": model.to_dict(),
        "validation": validation.to_dict(),
        "training": train_report.to_dict() if train_report else None,
    }
    paths["summary"] = out_dir / "summary.json"
    paths["summary"].write_text(json.dumps(summary, indent=2), encoding="utf-8")

    for path in paths.values():
        console.success(f"✓ Wrote {path}")
    return paths


def load_summary(path: PathLike) -> Dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------

def sweep(config: RunConfig, sigmas: Sequence[float], seeds: Sequence[int]) -> Dict[str, Dict]:
    """
    Informational noise sweep: structure verdicts and mean rollout RMSE per sigma

    Nothing is asserted; whether the RMSE grows with sigma is only logged.
    """
    console.section("SWEEP", "🌪️")
    library = build_library(config.library)
    results: Dict[str, Dict] = {}
    for sigma in sigmas:
        verdicts, errors = [], []
        for seed in seeds:
            run = replace(
                config,
                dataset=replace(config.dataset, seed=seed),
                noise=replace(config.noise, seed=seed),
                schedule=replace(config.schedule, seed=seed),
            )
            clean = generate_dataset(run.system, run.forcing, run.dataset, run.workers)
            noisy = add_noise(clean, run.noise.spec(sigma))
            try:
                prior = run.fit.prior_terms[0] if run.fit.case == 3 else None
                model, _ = train(library, noisy, run.fit.case, prior, run.schedule)
                outcome = validate(model, run, write=False)
                verdicts.append(outcome.verdict)
                errors.append(outcome.mean_rmse)
            except (EmptyModelError, NonFiniteGradientError, DegenerateModelError) as e:
                verdicts.append(f"failed: {type(e).__name__}")
                errors.append(float("inf"))
        finite = [e for e in errors if np.isfinite(e)]
        results[_sigma_label(sigma)] = {
            "verdicts": verdicts,
            "mean_rmse": float(np.mean(finite)) if finite else None,
        }
        console.info(f"σ = {sigma:g}: verdicts {verdicts}, mean RMSE {results[_sigma_label(sigma)]['mean_rmse']}")

    means = [results[_sigma_label(s)]["mean_rmse"] for s in sorted(sigmas)]
    if all(m is not None for m in means):
        monotone = all(a <= b for a, b in zip(means, means[1:]))
        console.info(f"Mean RMSE {'is' if monotone else 'is not'} non-decreasing in σ")

    path = config.out / "sweep" / "sweep.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(results, indent=2), encoding="utf-8")
    console.success(f"✓ Saved sweep to {path}")
    return results
