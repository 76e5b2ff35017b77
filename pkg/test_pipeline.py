import csv
import json
from pathlib import Path

import numpy as np
import pytest

import lagrangia_main
from dynamics import DatasetParams, ForcingSpec, SystemSpec, generate_dataset, load_dataset
from elgrad import LagrangianModel
from exceptions import ConfigError
from optimizer import StageSchedule, TrainReport
from pipeline import (
    PRESENCE_THRESHOLD,
    RunConfig,
    ValidationReport,
    coefficient_table,
    dataset_path,
    fit,
    generate,
    load_config,
    load_model,
    load_summary,
    report,
    save_model,
    structure_verdict,
    sweep,
    validate,
)
from symlib import build_library

CONFIG_DIR = Path(__file__).parent / "configs"


def small_config_dict(tmp_path, kind="single_pendulum", **sections):
    data = {
        "name": "test",
        "system": {"kind": kind},
        "forcing": {"active": True},
        "dataset": {"trajectories": 3, "duration": 0.5, "chunk_size": 2, "seed": 0},
        "noise": {"sigmas": [0.0, 0.001], "seed": 0},
        "schedule": {"epochs_per_stage": 5, "max_stages": 2, "batch_size": 32},
        "validation": {"trajectories": 2, "duration": 0.5},
        "output_dir": str(tmp_path / "run"),
        "workers": 1,
    }
    data.update(sections)
    return data


def small_config(tmp_path, kind="single_pendulum", **sections):
    return RunConfig.from_dict(small_config_dict(tmp_path, kind, **sections))


def true_model(config):
    library = build_library(config.library)
    return LagrangianModel.from_coefficients(library, config.system.true_coefficients())


def write_config(tmp_path, data, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data), encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# RunConfig
# ---------------------------------------------------------------------------

def test_config_dict_round_trip(tmp_path):
    config = small_config(tmp_path, "cart_pendulum")
    assert RunConfig.from_dict(config.to_dict()) == config


def test_config_defaults_fill_library_and_preset_schedule(tmp_path):
    config = small_config(tmp_path, "cart_pendulum")
    assert config.library == {"preset": "cart_pendulum"}
    preset = StageSchedule.for_system("cart_pendulum")
    assert config.schedule.lam == preset.lam
    assert config.schedule.reduction == "sum"
    assert config.schedule.epochs_per_stage == 5


def test_config_schedule_without_preset(tmp_path):
    config = small_config(tmp_path, schedule={"preset": False, "lam": 0.5})
    assert config.schedule.lam == 0.5
    assert config.schedule.reduction == StageSchedule().reduction


def test_config_rejects_unknown_keys(tmp_path):
    with pytest.raises(ConfigError, match="Unknown config keys"):
        RunConfig.from_dict(small_config_dict(tmp_path, colour="blue"))


def test_config_rejects_unknown_section_fields(tmp_path):
    with pytest.raises(ConfigError, match="Invalid config"):
        RunConfig.from_dict(small_config_dict(tmp_path, dataset={"trajectorys": 3}))


@pytest.mark.parametrize("sections", [
    {"fit": {"case": 4}},
    {"fit": {"case": 3}},
    {"validation": {"mode": "forecast"}},
    {"workers": 0},
    {"system": {"kind": "triple_pendulum"}},
])
def test_config_validation_errors(tmp_path, sections):
    with pytest.raises(ConfigError):
        small_config(tmp_path, **sections)


def test_config_reads_environment_defaults(monkeypatch):
    monkeypatch.setenv("LAGRANGIA_OUTPUT_DIR", "elsewhere")
    monkeypatch.setenv("LAGRANGIA_WORKERS", "3")
    config = RunConfig()
    assert config.output_dir == "elsewhere"
    assert config.workers == 3


def test_config_rejects_non_integer_workers_env(monkeypatch):
    monkeypatch.setenv("LAGRANGIA_WORKERS", "many")
    with pytest.raises(ConfigError, match="LAGRANGIA_WORKERS"):
        RunConfig()


def test_load_config_applies_overrides(tmp_path):
    path = write_config(tmp_path, small_config_dict(tmp_path))
    config = load_config(path, seed=7, sigma=0.02, case=2, out=str(tmp_path / "other"))
    assert config.dataset.seed == config.noise.seed == config.schedule.seed == 7
    assert config.fit.sigma == 0.02
    assert 0.02 in config.noise.sigmas
    assert config.fit.case == 2
    assert config.out == tmp_path / "other"


def test_load_config_invalid_json(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text('{"system": {"kind": ', encoding="utf-8")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_config(path)


def test_load_config_requires_object(tmp_path):
    path = tmp_path / "list.json"
    path.write_text("[1, 2]", encoding="utf-8")
    with pytest.raises(ConfigError, match="JSON object"):
        load_config(path)


def test_dataset_paths(tmp_path):
    config = small_config(tmp_path)
    assert dataset_path(config).name == "train_clean.csv"
    assert dataset_path(config, 0.001).name == "train_sigma_0.001.csv"
    assert dataset_path(config, 0.0).name == "train_sigma_0.csv"


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------

def test_generate_writes_clean_and_noisy_files(tmp_path):
    config = small_config(tmp_path)
    written = generate(config)
    assert set(written) == {"clean", "0", "0.001"}

    clean = load_dataset(written["clean"])
    noisy = load_dataset(written["0.001"])
    assert clean.n_trajectories == 3
    assert clean.n_samples == 3 * 51
    np.testing.assert_array_equal(load_dataset(written["0"]).q, clean.q)
    assert not np.array_equal(noisy.q, clean.q)
    assert noisy.metadata["sigma"] == 0.001


def test_generate_is_reproducible(tmp_path):
    config = small_config(tmp_path)
    first = {label: path.read_bytes() for label, path in generate(config).items()}
    second = {label: path.read_bytes() for label, path in generate(config).items()}
    assert first == second


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------

def test_fit_writes_model_and_report(tmp_path):
    config = small_config(tmp_path)
    generate(config)
    model, train_report = fit(config)

    assert (config.out / "fit" / "model.json").exists()
    assert (config.out / "fit" / "train_report.json").exists()
    assert len(model.library) == 12
    loaded = load_model(config.out / "fit" / "model.json")
    np.testing.assert_array_equal(loaded.coefficients, model.coefficients)
    assert TrainReport.load(config.out / "fit" / "train_report.json").case == 1
    assert train_report.case == 1


def test_fit_reports_optimizer_failure_as_zero_model(tmp_path):
    config = small_config(tmp_path, schedule={"epochs_per_stage": 2, "threshold_stage1": 1e3})
    generate(config)
    model, train_report = fit(config)
    assert train_report.error.startswith("EmptyModelError")
    assert not train_report.converged
    assert not np.any(model.coefficients)
    assert (config.out / "fit" / "model.json").exists()


def test_spherical_config_declares_the_known_terms():
    config = load_config(CONFIG_DIR / "spherical_pendulum_desk.json")
    library = build_library(config.library)
    assert not library.penalty_mask[library.index_of("cos(theta)")]
    assert sum(not penalized for penalized in library.penalty_mask) == 1
    assert config.fit.case == 3
    assert config.fit.prior_terms == ["theta_dot**2"]


def test_fit_spherical_pendulum_with_unpenalized_gravity(tmp_path):
    config = small_config(
        tmp_path, "spherical_pendulum",
        library={"preset": "spherical_pendulum", "unpenalized": ["cos(theta)"]},
        forcing={"active": False},
        fit={"case": 3, "prior_terms": ["theta_dot**2"]},
        dataset={"trajectories": 8, "duration": 1.5, "chunk_size": 4, "seed": 1},
    )
    generate(config)
    model, train_report = fit(config)
    truth = config.system.true_coefficients()
    assert train_report.error is None
    assert structure_verdict(model.support(PRESENCE_THRESHOLD), list(truth))[0] == "exact"
    learned = model.normalized()
    for key, value in truth.items():
        assert learned[key] == pytest.approx(value / truth["theta_dot**2"], rel=1e-3)


def test_fit_case_one_needs_forcing(tmp_path):
    config = small_config(tmp_path, forcing={"active": False})
    generate(config)
    with pytest.raises(ConfigError, match="forcing"):
        fit(config)


def test_fit_rejects_dataset_of_another_system(tmp_path):
    config = small_config(tmp_path)
    cart = generate_dataset(
        SystemSpec("cart_pendulum"), ForcingSpec(active=True), DatasetParams(trajectories=1, duration=0.1)
    )
    with pytest.raises(ConfigError, match="cart_pendulum"):
        fit(config, cart)


def test_load_model_rejects_other_json(tmp_path):
    path = tmp_path / "model.json"
    path.write_text('{"weights": []}', encoding="utf-8")
    with pytest.raises(ConfigError, match="not a model file"):
        load_model(path)


def test_save_and_load_model_with_prior(tmp_path):
    config = small_config(tmp_path, "cart_pendulum")
    library = build_library(config.library)
    model = LagrangianModel.from_coefficients(
        library, config.system.true_coefficients(), prior_key="theta_dot**2", case=3
    )
    loaded = load_model(save_model(model, tmp_path / "m.json"))
    assert loaded.prior_key == "theta_dot**2"
    np.testing.assert_allclose(loaded.full_coefficients(), model.full_coefficients())


# ---------------------------------------------------------------------------
# validate
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("sections, verdict", [
    ((["a", "b"], ["a", "b"]), "exact"),
    ((["a", "b", "c"], ["a", "b"]), "extra terms"),
    ((["a"], ["a", "b"]), "missing terms"),
    ((["a", "c"], ["a", "b"]), "extra and missing terms"),
])
def test_structure_verdict(sections, verdict):
    learned, true = sections
    assert structure_verdict(learned, true)[0] == verdict


def test_structure_verdict_lists_terms():
    _, extra, missing = structure_verdict(["a", "c", "d"], ["b", "a"])
    assert extra == ["c", "d"]
    assert missing == ["b"]


def test_coefficient_table_of_scaled_true_model(tmp_path):
    config = small_config(tmp_path, "cart_pendulum")
    true = config.system.true_coefficients()
    library = build_library(config.library)
    model = LagrangianModel.from_coefficients(library, {k: -3.0 * v for k, v in true.items()})

    reference, rows = coefficient_table(model, true)
    assert reference in true
    assert {row["term"] for row in rows} == set(true)
    for row in rows:
        assert row["ratio"] == pytest.approx(1.0)


def test_coefficient_table_marks_extra_terms(tmp_path):
    config = small_config(tmp_path)
    true = config.system.true_coefficients()
    library = build_library(config.library)
    model = LagrangianModel.from_coefficients(library, {**true, "theta**2": 0.2})

    _, rows = coefficient_table(model, true)
    extra = next(row for row in rows if row["term"] == "theta**2")
    assert extra["true"] == 0.0
    assert "ratio" not in extra


@pytest.mark.parametrize("kind", ["single_pendulum", "cart_pendulum", "double_pendulum", "spherical_pendulum"])
def test_true_model_validates_exactly(tmp_path, kind):
    config = small_config(tmp_path, kind, forcing={"active": kind != "spherical_pendulum"})
    outcome = validate(true_model(config), config)

    assert outcome.verdict == "exact"
    assert outcome.divergent == []
    assert outcome.mean_rmse < 1e-6
    assert outcome.q_pred.shape == outcome.q_true.shape == (2, 51, config.system.n)
    assert (config.out / "validation" / "validation.json").exists()


def test_extended_validation_scores_only_the_extrapolation(tmp_path):
    config = small_config(tmp_path, validation={"mode": "extended", "trajectories": 5, "extension": 0.3})
    outcome = validate(true_model(config), config, write=False)

    assert outcome.trajectory_ids == [0, 1, 2]
    assert outcome.t[0] == pytest.approx(0.5)
    assert outcome.t[-1] == pytest.approx(0.8)
    assert outcome.mean_rmse < 1e-6
    assert not (config.out / "validation").exists()


def test_validation_flags_wrong_structure(tmp_path):
    config = small_config(tmp_path)
    library = build_library(config.library)
    model = LagrangianModel.from_coefficients(library, {"theta_dot**2": 0.5, "cos(theta)": 4.0, "theta**2": 0.3})
    outcome = validate(model, config, write=False)

    assert outcome.verdict == "extra terms"
    assert outcome.extra_terms == ["theta**2"]
    assert outcome.mean_rmse > 1e-3


def test_validation_report_round_trip(tmp_path):
    config = small_config(tmp_path)
    outcome = validate(true_model(config), config)
    loaded = ValidationReport.load(config.out / "validation")

    assert loaded.to_dict() == outcome.to_dict()
    np.testing.assert_array_equal(loaded.q_pred, outcome.q_pred)


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def test_report_writes_all_files(tmp_path):
    config = small_config(tmp_path)
    model = true_model(config)
    outcome = validate(model, config, write=False)
    paths = report(model, outcome, tmp_path / "report")

    assert set(paths) == {"lagrangian", "coefficients", "rollout", "summary"}
    assert paths["lagrangian"].read_text(encoding="utf-8") == "L = 0.500·θ̇² + 9.810·cos(θ)\n"

    with paths["coefficients"].open(encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    assert {row["term"] for row in rows} == {"theta_dot**2", "cos(theta)"}

    with paths["rollout"].open(encoding="utf-8") as fh:
        rollout = list(csv.reader(fh))
    assert rollout[0] == ["traj_id", "t", "q_true_1", "q_pred_1"]
    assert len(rollout) == 1 + 2 * 51

    summary = load_summary(paths["summary"])
    assert summary["validation"]["verdict"] == "exact"
    assert summary["training"] is None
    assert LagrangianModel.from_dict(summary["model"]).coefficient_map() == model.coefficient_map()


def test_report_of_empty_model(tmp_path):
    config = small_config(tmp_path)
    library = build_library(config.library)
    model = LagrangianModel(library, np.zeros(len(library)))
    outcome = ValidationReport(
        mode="held_out", trajectory_ids=[], rmse=[], divergent=[], verdict="missing terms",
        extra_terms=[], missing_terms=["theta_dot**2", "cos(theta)"], reference_term=None, coefficients=[],
    )
    paths = report(model, outcome, tmp_path / "report")
    assert paths["lagrangian"].read_text(encoding="utf-8") == "L = 0\n"
    assert load_summary(paths["summary"])["validation"]["mean_rmse"] is None


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------

def test_sweep_writes_one_entry_per_sigma(tmp_path):
    config = small_config(tmp_path)
    results = sweep(config, [0.0, 0.01], [0])

    assert set(results) == {"0", "0.01"}
    for row in results.values():
        assert len(row["verdicts"]) == 1
    saved = json.loads((config.out / "sweep" / "sweep.json").read_text(encoding="utf-8"))
    assert saved == results


# ---------------------------------------------------------------------------
# command line
# ---------------------------------------------------------------------------

def test_cli_generate(tmp_path):
    path = write_config(tmp_path, small_config_dict(tmp_path))
    assert lagrangia_main.main(["generate", "--config", str(path), "--quiet"]) == lagrangia_main.EXIT_OK
    assert (tmp_path / "run" / "data" / "train_clean.csv").exists()


def test_cli_out_override(tmp_path):
    path = write_config(tmp_path, small_config_dict(tmp_path))
    out = tmp_path / "elsewhere"
    assert lagrangia_main.main(["generate", "-c", str(path), "-o", str(out), "-q"]) == lagrangia_main.EXIT_OK
    assert (out / "data" / "train_sigma_0.001.csv").exists()


def test_cli_config_error(tmp_path):
    path = write_config(tmp_path, small_config_dict(tmp_path, colour="blue"))
    assert lagrangia_main.main(["generate", "--config", str(path), "-q"]) == lagrangia_main.EXIT_CONFIG


def test_cli_rejects_zero_workers(tmp_path):
    path = write_config(tmp_path, small_config_dict(tmp_path))
    assert lagrangia_main.main(["generate", "-c", str(path), "--workers", "0", "-q"]) == lagrangia_main.EXIT_CONFIG


def test_cli_missing_config_is_io_error(tmp_path):
    assert lagrangia_main.main(["generate", "-c", str(tmp_path / "nope.json"), "-q"]) == lagrangia_main.EXIT_IO


def test_cli_fit_without_dataset_is_io_error(tmp_path):
    path = write_config(tmp_path, small_config_dict(tmp_path))
    assert lagrangia_main.main(["fit", "-c", str(path), "-q"]) == lagrangia_main.EXIT_IO


def test_cli_fit_reports_non_convergence(tmp_path):
    data = small_config_dict(tmp_path, schedule={"epochs_per_stage": 2, "threshold_stage1": 1e3})
    path = write_config(tmp_path, data)
    assert lagrangia_main.main(["generate", "-c", str(path), "-q"]) == lagrangia_main.EXIT_OK
    assert lagrangia_main.main(["fit", "-c", str(path), "-q"]) == lagrangia_main.EXIT_NOT_CONVERGED
    assert (tmp_path / "run" / "fit" / "train_report.json").exists()


def test_cli_validate_and_report_a_saved_model(tmp_path):
    config = small_config(tmp_path)
    save_model(true_model(config), tmp_path / "true.json")
    path = write_config(tmp_path, config.to_dict())

    args = ["-c", str(path), "--model", str(tmp_path / "true.json"), "-q"]
    assert lagrangia_main.main(["validate"] + args) == lagrangia_main.EXIT_OK
    assert lagrangia_main.main(["report"] + args) == lagrangia_main.EXIT_OK
    summary = load_summary(tmp_path / "run" / "report" / "summary.json")
    assert summary["validation"]["verdict"] == "exact"


def test_cli_validate_without_model_is_io_error(tmp_path):
    path = write_config(tmp_path, small_config_dict(tmp_path))
    assert lagrangia_main.main(["validate", "-c", str(path), "-q"]) == lagrangia_main.EXIT_IO


# ---------------------------------------------------------------------------
# full runs
# ---------------------------------------------------------------------------

@pytest.mark.slow
@pytest.mark.parametrize("name", [
    "single_pendulum_desk", "cart_pendulum_desk", "double_pendulum_desk", "spherical_pendulum_desk",
])
def test_desk_configs_run_end_to_end(tmp_path, name):
    config = str(CONFIG_DIR / f"{name}.json")
    out = str(tmp_path / name)
    assert lagrangia_main.main(["generate", "-c", config, "-o", out, "-q"]) == lagrangia_main.EXIT_OK
    assert lagrangia_main.main(["fit", "-c", config, "-o", out, "-q"]) in (
        lagrangia_main.EXIT_OK, lagrangia_main.EXIT_NOT_CONVERGED,
    )
    assert lagrangia_main.main(["report", "-c", config, "-o", out, "-q"]) == lagrangia_main.EXIT_OK
    summary = load_summary(tmp_path / name / "report" / "summary.json")
    assert summary["training"] is not None


@pytest.mark.slow
@pytest.mark.parametrize("kind", ["single_pendulum", "cart_pendulum", "double_pendulum", "spherical_pendulum"])
def test_true_model_over_the_full_horizon(tmp_path, kind):
    config = small_config(tmp_path, kind, forcing={"active": False},
                          validation={"trajectories": 20, "duration": 5.0})
    outcome = validate(true_model(config), config, write=False)
    assert outcome.verdict == "exact"
    assert outcome.mean_rmse < 1e-4


@pytest.mark.slow
@pytest.mark.parametrize("sigma, rel", [(0.0, 0.02), (1e-3, 0.05)])
@pytest.mark.parametrize("name", [
    "single_pendulum_desk", "single_pendulum_case2_desk", "cart_pendulum_desk",
    "double_pendulum_desk", "spherical_pendulum_desk",
])
def test_desk_configs_recover_the_true_lagrangian(tmp_path, name, sigma, rel):
    config = load_config(CONFIG_DIR / f"{name}.json", sigma=sigma, out=str(tmp_path / name))
    generate(config)
    model, train_report = fit(config)
    truth = config.system.true_coefficients()
    assert train_report.error is None

    verdict, extra, missing = structure_verdict(model.support(PRESENCE_THRESHOLD), list(truth))
    assert verdict == "exact", f"extra {extra}, missing {missing}"

    if config.fit.case == 1:
        learned, expected = model.coefficient_map(), truth
    else:
        reference = model.prior_key or "theta_dot**2"
        learned = model.normalized(reference)
        expected = {key: value / truth[reference] for key, value in truth.items()}
    for key, value in expected.items():
        assert learned[key] == pytest.approx(value, rel=rel), key
    if config.fit.case == 2:
        assert learned["cos(theta)"] == pytest.approx(19.62, rel=0.02)
