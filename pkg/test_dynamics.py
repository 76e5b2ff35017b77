import math

import numpy as np
import pytest

from dynamics import (
    SYSTEM_KINDS,
    DatasetParams,
    Forcing,
    ForcingSpec,
    NoiseSpec,
    SystemSpec,
    TrajectoryDataset,
    add_noise,
    angular_momentum_phi,
    dataset_header,
    equations_of_motion,
    generate_dataset,
    load_dataset,
    metadata_path,
    rk4_integrate,
    sample_initial_conditions,
    save_dataset,
    total_energy,
)
from elgrad import LagrangianModel, ModelDynamics, evaluate_tensors, predict_qddot
from exceptions import ConfigError, DatasetParseError, NonFiniteStateError, SingularConfigurationError
from symlib import build_library


def random_states(kind, count, rng):
    q = rng.uniform(-math.pi, math.pi, size=(count, 2 if kind != "single_pendulum" else 1))
    qd = rng.uniform(-2, 2, size=q.shape)
    tau = rng.uniform(-2, 2, size=q.shape)
    if kind == "spherical_pendulum":
        q[:, 0] = rng.uniform(0.3, math.pi - 0.3, size=count)
    return q, qd, tau


def true_model(system):
    library = build_library({"preset": system.kind})
    return LagrangianModel.from_coefficients(library, system.true_coefficients())


# --- equations of motion --------------------------------------------------

def test_single_pendulum_horizontal_acceleration():
    qdd = equations_of_motion(SystemSpec("single_pendulum"), [math.pi / 2], [0.0])
    assert qdd == pytest.approx([-9.81])


def test_single_pendulum_rest_is_equilibrium():
    assert equations_of_motion(SystemSpec(), [0.0], [0.0]) == pytest.approx([0.0])


def test_external_input_enters_linearly():
    system = SystemSpec("single_pendulum", mass=2.0)
    base = equations_of_motion(system, [0.4], [0.1])
    pushed = equations_of_motion(system, [0.4], [0.1], tau=[3.0])
    assert pushed - base == pytest.approx([3.0 / 2.0])


@pytest.mark.parametrize("kind", SYSTEM_KINDS)
def test_eom_matches_model_prediction_with_true_coefficients(kind, rng):
    system = SystemSpec(kind)
    q, qd, tau = random_states(kind, 1000, rng)
    expected = equations_of_motion(system, q, qd, tau)

    model = true_model(system)
    tensors = evaluate_tensors(model.library, q, qd)
    np.testing.assert_allclose(predict_qddot(tensors, model.full_coefficients(), tau=tau), expected,
                               rtol=1e-6, atol=1e-6)

    qdd, bad = ModelDynamics(model)(q, qd, tau)
    assert not bad.any()
    np.testing.assert_allclose(qdd, expected, rtol=1e-6, atol=1e-6)


def test_cart_true_coefficients_use_half_length():
    coefficients = SystemSpec("cart_pendulum").true_coefficients()
    assert sorted(coefficients.values()) == pytest.approx([0.25, 0.5, 0.75, 4.905])


def test_spherical_singularity_raises():
    with pytest.raises(SingularConfigurationError):
        equations_of_motion(SystemSpec("spherical_pendulum"), [0.0, 0.3], [0.0, 1.0])


def test_non_finite_state_raises():
    with pytest.raises(NonFiniteStateError):
        equations_of_motion(SystemSpec(), [float("nan")], [0.0])


def test_eom_rejects_wrong_dimension():
    with pytest.raises(ConfigError):
        equations_of_motion(SystemSpec("double_pendulum"), [0.1], [0.0])


def test_system_rejects_bad_parameters():
    with pytest.raises(ConfigError):
        SystemSpec("triple_pendulum")
    with pytest.raises(ConfigError):
        SystemSpec(mass=-1.0)


# --- integration ----------------------------------------------------------

def test_trajectory_has_501_samples():
    traj = rk4_integrate(SystemSpec(), None, ([0.5], [0.0]), duration=5.0, dt=0.01)
    assert traj.n_samples == 501
    assert traj.t[-1] == pytest.approx(5.0)
    assert traj.q[0] == pytest.approx([0.5])


def test_single_pendulum_energy_drift_from_small_angle():
    system = SystemSpec()
    traj = rk4_integrate(system, None, ([0.1], [0.0]))
    energy = total_energy(system, traj.q, traj.qd)
    assert np.max(np.abs(energy - energy[0])) / abs(energy[0]) <= 1e-6


@pytest.mark.parametrize("kind", SYSTEM_KINDS)
def test_passive_energy_drift(kind):
    system = SystemSpec(kind)
    init = sample_initial_conditions(system, 1, seed=3)[0]
    traj = rk4_integrate(system, None, init)
    energy = total_energy(system, traj.q, traj.qd)
    scale = max(abs(energy[0]), 1.0)
    assert np.max(np.abs(energy - energy[0])) / scale <= 1e-5


def test_spherical_conserves_phi_momentum():
    system = SystemSpec("spherical_pendulum")
    traj = rk4_integrate(system, None, sample_initial_conditions(system, 1, seed=0)[0])
    momentum = angular_momentum_phi(system, traj.q, traj.qd)
    assert np.max(np.abs(momentum - momentum[0])) / abs(momentum[0]) <= 1e-5


def test_angular_momentum_only_for_spherical():
    with pytest.raises(ConfigError):
        angular_momentum_phi(SystemSpec(), [[0.1]], [[0.0]])


def test_integration_reaching_singularity_raises():
    with pytest.raises(SingularConfigurationError) as info:
        rk4_integrate(SystemSpec("spherical_pendulum"), None, ([1e-8, 0.0], [0.0, 1.0]), duration=0.1)
    assert info.value.time == pytest.approx(0.0)


def test_recorded_forcing_matches_closed_form():
    system = SystemSpec("cart_pendulum")
    forcing = Forcing("sin+cos", np.array([1.5, 0.7]), np.array([2.0, 4.0]))
    traj = rk4_integrate(system, forcing, ([0.2, 0.0], [0.0, 0.0]), duration=1.0)
    phase = np.outer(traj.t, forcing.frequencies)
    expected = forcing.amplitudes * (np.sin(phase) + np.cos(phase))
    np.testing.assert_allclose(traj.tau, expected, rtol=0, atol=1e-12)


def test_forcing_spec_draws_within_ranges(rng):
    spec = ForcingSpec(active=True, amplitude_range=(0.5, 2.0), frequency_range=(1.0, 3.0))
    forcing = spec.draw(2, rng)
    assert np.all((forcing.amplitudes >= 0.5) & (forcing.amplitudes <= 2.0))
    assert np.all((forcing.frequencies >= 1.0) & (forcing.frequencies <= 3.0))
    assert not ForcingSpec(active=False).draw(2, rng).active


def test_forcing_spec_validation():
    with pytest.raises(ConfigError):
        ForcingSpec(form="square")
    with pytest.raises(ConfigError):
        ForcingSpec(amplitude_range=(2.0, 1.0))


# --- initial conditions ---------------------------------------------------

def test_spherical_initial_conditions():
    draws = sample_initial_conditions(SystemSpec("spherical_pendulum"), 50, seed=7)
    for q0, qd0 in draws:
        assert math.pi / 3 <= q0[0] <= math.pi / 2
        assert q0[1] == 0.0
        assert qd0[0] == 0.0
        assert qd0[1] == math.pi


def test_single_pendulum_initial_conditions_start_at_rest():
    for q0, qd0 in sample_initial_conditions(SystemSpec(), 50, seed=1):
        assert -math.pi <= q0[0] <= math.pi
        assert qd0[0] == 0.0


def test_initial_conditions_are_seeded():
    system = SystemSpec("double_pendulum")
    a = sample_initial_conditions(system, 10, seed=5)
    b = sample_initial_conditions(system, 10, seed=5)
    c = sample_initial_conditions(system, 10, seed=6)
    assert all(np.array_equal(x[0], y[0]) for x, y in zip(a, b))
    assert not all(np.array_equal(x[0], y[0]) for x, y in zip(a, c))


def test_initial_conditions_are_prefix_stable():
    system = SystemSpec("cart_pendulum")
    short = sample_initial_conditions(system, 3, seed=2)
    long = sample_initial_conditions(system, 8, seed=2)
    assert all(np.array_equal(x[0], y[0]) for x, y in zip(short, long))


# --- dataset generation ---------------------------------------------------

def small_params(**overrides):
    values = dict(trajectories=5, duration=0.5, dt=0.01, seed=11, chunk_size=2)
    values.update(overrides)
    return DatasetParams(**values)


def test_generate_dataset_layout():
    data = generate_dataset(SystemSpec("cart_pendulum"), ForcingSpec(active=True), small_params())
    assert data.n == 2
    assert data.n_trajectories == 5
    assert data.n_samples == 5 * 51
    assert data.has_tau
    assert len(data.metadata["forcing_params"]) == 5
    first = data.trajectory(0)
    expected = data.forcing(0)(first.t)
    np.testing.assert_allclose(first.tau, expected, rtol=0, atol=1e-12)


def test_passive_dataset_has_zero_input():
    data = generate_dataset(SystemSpec(), ForcingSpec(active=False), small_params())
    assert not data.has_tau
    assert not data.tau.any()
    assert not data.forcing(3).active


def test_generation_does_not_depend_on_worker_count():
    system = SystemSpec("double_pendulum")
    one = generate_dataset(system, ForcingSpec(active=True), small_params(), workers=1)
    many = generate_dataset(system, ForcingSpec(active=True), small_params(), workers=3)
    for name in ("t", "q", "qd", "qdd", "tau", "traj_id"):
        assert np.array_equal(getattr(one, name), getattr(many, name)), name


def test_generation_rejects_zero_workers():
    with pytest.raises(ConfigError):
        generate_dataset(SystemSpec(), ForcingSpec(), small_params(), workers=0)


def test_dataset_params_validation():
    with pytest.raises(ConfigError):
        DatasetParams(trajectories=0)
    with pytest.raises(ConfigError):
        DatasetParams(dt=0.1, duration=0.05)


# --- noise ----------------------------------------------------------------

def synthetic_dataset(samples=50_000):
    t = np.arange(samples) * 0.01
    zeros = np.zeros((samples, 1))
    return TrajectoryDataset(t, zeros, zeros + 1.0, zeros + 2.0, zeros + 3.0, np.zeros(samples, dtype=int),
                             {"coordinates": ["theta"]})


def test_zero_noise_is_identity():
    clean = synthetic_dataset(100)
    noisy = add_noise(clean, NoiseSpec(sigma=0.0, seed=3))
    for name in ("t", "q", "qd", "qdd", "tau"):
        assert np.array_equal(getattr(clean, name), getattr(noisy, name))
    assert noisy.metadata["sigma"] == 0.0


def test_noise_std_matches_sigma():
    clean = synthetic_dataset()
    noisy = add_noise(clean, NoiseSpec(sigma=0.02, seed=4))
    for name in ("q", "qd", "qdd"):
        std = np.std(getattr(noisy, name) - getattr(clean, name))
        assert abs(std - 0.02) <= 0.02 * 0.02
    assert np.array_equal(noisy.tau, clean.tau)


def test_noise_channels_are_independent_streams():
    clean = synthetic_dataset(1000)
    only_q = add_noise(clean, NoiseSpec(sigma=0.1, channels=("q",), seed=9))
    both = add_noise(clean, NoiseSpec(sigma=0.1, channels=("q", "qd"), seed=9))
    assert np.array_equal(only_q.q, both.q)
    assert np.array_equal(only_q.qd, clean.qd)
    assert not np.array_equal(both.qd, clean.qd)


def test_noise_spec_validation():
    with pytest.raises(ConfigError):
        NoiseSpec(sigma=-0.1)
    with pytest.raises(ConfigError):
        NoiseSpec(channels=("energy",))


# --- dataset files --------------------------------------------------------

def test_dataset_header():
    assert dataset_header(2) == ["t", "q_1", "q_2", "qd_1", "qd_2", "qdd_1", "qdd_2", "tau_1", "tau_2", "traj_id"]


def test_save_and_load_preserve_every_float(tmp_path):
    data = generate_dataset(SystemSpec("spherical_pendulum"), ForcingSpec(active=True), small_params(trajectories=2))
    noisy = add_noise(data, NoiseSpec(sigma=1e-3, seed=1))
    path = save_dataset(noisy, tmp_path / "data" / "train.csv")
    assert metadata_path(path).exists()

    loaded = load_dataset(path)
    for name in ("t", "q", "qd", "qdd", "tau", "traj_id"):
        assert np.array_equal(getattr(loaded, name), getattr(noisy, name)), name
    assert loaded.metadata == noisy.metadata
    assert loaded.system == SystemSpec("spherical_pendulum")


def test_load_infers_dimension_without_sidecar(tmp_path):
    path = tmp_path / "bare.csv"
    path.write_text("t,q_1,qd_1,qdd_1,tau_1,traj_id\n0.0,0.1,0.0,-0.98,0.0,0\n")
    data = load_dataset(path)
    assert data.n == 1
    assert data.q[0, 0] == 0.1


def test_load_reports_bad_header(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("t,q_1,qd_1,qdd_1,tau_1,id\n0,0,0,0,0,0\n")
    with pytest.raises(DatasetParseError) as info:
        load_dataset(path)
    assert info.value.line == 1


def test_load_reports_line_of_bad_value(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("t,q_1,qd_1,qdd_1,tau_1,traj_id\n0,0,0,0,0,0\n0.01,abc,0,0,0,0\n")
    with pytest.raises(DatasetParseError) as info:
        load_dataset(path)
    assert info.value.line == 3
    assert str(path) in str(info.value)


def test_load_reports_wrong_column_count(tmp_path):
    path = tmp_path / "short.csv"
    path.write_text("t,q_1,qd_1,qdd_1,tau_1,traj_id\n0,0,0,0,0\n")
    with pytest.raises(DatasetParseError) as info:
        load_dataset(path)
    assert info.value.line == 2


def test_load_rejects_empty_file(tmp_path):
    path = tmp_path / "empty.csv"
    path.write_text("")
    with pytest.raises(DatasetParseError):
        load_dataset(path)
