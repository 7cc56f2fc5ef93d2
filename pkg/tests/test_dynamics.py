import numpy as np
import pytest

from exosim import dynamics as dyn
from exosim.errors import ConfigError, NonFiniteError, RankDeficientError

from oracles import gravity_from_energy, mass_matrix_from_energy

RNG = np.random.default_rng(7)


@pytest.fixture(scope="module")
def model():
    return dyn.default_arm()


@pytest.fixture(scope="module")
def frictionless(model):
    return model.replace(friction_params=np.zeros((3, 3)))


def random_q(model, rng=RNG):
    lo, hi = model.joint_limits[:, 0], model.joint_limits[:, 1]
    return lo + (hi - lo) * rng.random(5)


# ---------------------------------------------------------------- mass matrix

def test_mass_matrix_spd_at_rest(model):
    M = dyn.mass_matrix(model, np.zeros(5))
    assert np.max(np.abs(M - M.T)) == 0.0
    assert np.min(np.linalg.eigvalsh(M)) > 0.0


def test_mass_matrix_symmetric_everywhere(model):
    for _ in range(20):
        M = dyn.mass_matrix(model, random_q(model))
        assert np.max(np.abs(M - M.T)) == 0.0
        assert np.min(np.linalg.eigvalsh(M)) > 0.0


def test_mass_matrix_matches_energy_oracle(model):
    for _ in range(10):
        q = random_q(model)
        M = dyn.mass_matrix(model, q)
        M_ref = mass_matrix_from_energy(model, q)
        err = np.linalg.norm(M - M_ref) / np.linalg.norm(M_ref)
        assert err < 1e-6


# ------------------------------------------------------------ coriolis / gravity

def test_coriolis_zero_at_zero_velocity(model):
    c_dq, _ = dyn.coriolis_gravity(model, random_q(model), np.zeros(5))
    assert np.allclose(c_dq, 0.0, atol=1e-12)


def test_gravity_matches_energy_gradient(model):
    for _ in range(10):
        q = random_q(model)
        _, g = dyn.coriolis_gravity(model, q, np.zeros(5))
        g_ref = gravity_from_energy(model, q)
        assert np.allclose(g, g_ref, atol=1e-5)


def test_gravity_single_pendulum_pose(model):
    # shoulder flexed 90 deg: the whole arm is a horizontal compound pendulum
    # about joint 2, so its gravity torque equals sum(m_i * g * x_i).
    q = np.zeros(5)
    q[1] = np.pi / 2
    g = dyn.gravity_torque(model, q)
    m = model.link_masses
    L = model.link_lengths
    c = model.link_com_offsets
    # distance of each COM from the joint-2 axis, measured along the arm
    d = np.array([0.0, c[1], L[1] + c[2], L[1] + L[2] + c[3], L[1] + L[2] + L[3] + c[4]])
    expected = model.gravity * np.sum(m * d)
    assert g[1] == pytest.approx(expected, rel=1e-9)
    # elbow torque: lever arm of distal links only
    d_elbow = np.array([0.0, 0.0, 0.0, c[3], L[3] + c[4]])
    assert g[3] == pytest.approx(model.gravity * np.sum(m * d_elbow), rel=1e-9)
    # hanging arm carries no gravity torque at all
    assert np.allclose(dyn.gravity_torque(model, np.zeros(5)), 0.0, atol=1e-10)


def test_skew_symmetry_quadratic_form(model):
    h = 1e-6
    for _ in range(10):
        q = random_q(model)
        dq = RNG.standard_normal(5)
        c_dq, _ = dyn.coriolis_gravity(model, q, dq)
        M_plus = dyn.mass_matrix(model, q + h * dq)
        M_minus = dyn.mass_matrix(model, q - h * dq)
        dM = (M_plus - M_minus) / (2 * h)  # dM/dt along dq
        residual = dq @ dM @ dq - 2 * dq @ c_dq
        assert abs(residual) < 1e-8 * max(1.0, abs(dq @ dM @ dq))


def test_coriolis_times_consistent(model):
    for _ in range(10):
        q = random_q(model)
        dq = RNG.standard_normal(5)
        c_dq, _ = dyn.coriolis_gravity(model, q, dq)
        assert np.allclose(dyn.coriolis_times(model, q, dq, dq), c_dq, atol=1e-10)
        # linearity in v
        v1, v2 = RNG.standard_normal(5), RNG.standard_normal(5)
        lhs = dyn.coriolis_times(model, q, dq, v1 + 2 * v2)
        rhs = dyn.coriolis_times(model, q, dq, v1) + 2 * dyn.coriolis_times(model, q, dq, v2)
        assert np.allclose(lhs, rhs, atol=1e-9)


# ---------------------------------------------------------------------- friction

def test_friction_zero_at_rest(model):
    assert np.allclose(dyn.friction_torque(model, np.zeros(5)), 0.0)


def test_friction_reference_values(model):
    # joint-3 coefficients (0.822, -2.132, 0.557) at 1 rad/s give
    # (0.822 - 2.132 + 0.557) * tanh(100) = -0.753
    m = model.replace(friction_params=dyn.FRICTION_COEFFS_DRIVE)
    dq = np.zeros(5)
    dq[2] = 1.0
    tau = dyn.friction_torque(m, dq)
    assert tau[0] == pytest.approx(-0.753, abs=1e-3)


def test_friction_odd(model):
    for _ in range(20):
        dq = RNG.uniform(-2, 2, size=5)
        assert np.allclose(dyn.friction_torque(model, -dq), -dyn.friction_torque(model, dq), atol=1e-12)


def _friction_samples(model, rng, noise=0.0, n=500):
    samples = []
    for j in range(3):
        v = rng.uniform(0.05, 1.5, size=n) * rng.choice([-1.0, 1.0], size=n)
        dq = np.zeros((n, 5))
        dq[:, 2 + j] = v
        tau = np.array([dyn.friction_torque(model, row)[j] for row in dq])
        tau = tau + noise * rng.standard_normal(n)
        samples.append((v, tau))
    return samples


def test_fit_friction_noiseless_roundtrip(model):
    planted = model.replace(friction_params=dyn.FRICTION_COEFFS_DRIVE)
    fit = dyn.fit_friction(_friction_samples(planted, np.random.default_rng(3)))
    err = np.abs(fit.zeta_hat - planted.friction_params) / np.abs(planted.friction_params)
    assert np.max(err) < 1e-6
    # matches the planted coefficient table to two decimals
    assert np.max(np.abs(fit.zeta_hat - dyn.FRICTION_COEFFS_DRIVE)) < 5e-3


def test_fit_friction_noisy(model):
    fit = dyn.fit_friction(_friction_samples(model, np.random.default_rng(4), noise=0.05, n=500))
    err = np.abs(fit.zeta_hat - model.friction_params) / np.abs(model.friction_params)
    assert np.max(err) < 0.05
    assert np.all(fit.residual_rms < 0.1)


def test_fit_friction_rank_deficient(model):
    rng = np.random.default_rng(5)
    samples = []
    for j in range(3):
        v = np.full(200, 0.5) + 1e-12 * rng.standard_normal(200)  # no velocity spread
        dq = np.zeros((200, 5))
        dq[:, 2 + j] = v
        tau = np.array([dyn.friction_torque(model, row)[j] for row in dq])
        samples.append((v, tau))
    with pytest.raises(RankDeficientError):
        dyn.fit_friction(samples)


# -------------------------------------------------------------------- integration

def test_equilibrium_hold(model):
    q0 = np.deg2rad(np.array([-10.0, 30.0, 5.0, 45.0, 0.0]))
    state = dyn.equilibrium_state(model, q0)
    u = dyn.gravity_compensation(model, q0)
    for _ in range(1000):
        state = dyn.step(model, state, u, np.zeros(5), 1e-3)
    assert np.max(np.abs(state.q - q0)) < 1e-6


def test_free_fall_energy_conservation(frictionless):
    q0 = np.zeros(5)
    q0[1] = np.pi / 2  # horizontal
    state = dyn.SystemState(q0, np.zeros(5), q0[2:5].copy(), np.zeros(3), np.zeros(5))
    e0 = dyn.total_energy(frictionless, state)
    peak_ke = 0.0
    drift = 0.0
    for _ in range(1000):
        state = dyn.step(frictionless, state, np.zeros(5), np.zeros(5), 1e-3)
        M = dyn.mass_matrix(frictionless, state.q)
        ke = 0.5 * state.dq @ M @ state.dq
        peak_ke = max(peak_ke, ke)
        drift = max(drift, abs(dyn.total_energy(frictionless, state) - e0))
    assert peak_ke > 1.0  # it actually fell
    assert drift / peak_ke < 1e-3


def test_step_deterministic(model):
    q0 = np.deg2rad(np.array([0.0, 40.0, 0.0, 30.0, 0.0]))
    runs = []
    for _ in range(2):
        state = dyn.equilibrium_state(model, q0)
        u = dyn.gravity_compensation(model, q0) + np.array([0, 1.0, 0, 0.5, 0])
        for _ in range(200):
            state = dyn.step(model, state, u, np.zeros(5), 1e-3)
        runs.append(state)
    assert np.array_equal(runs[0].q, runs[1].q)
    assert np.array_equal(runs[0].dtheta, runs[1].dtheta)


def test_step_rejects_bad_dt(model):
    state = dyn.zero_state()
    with pytest.raises(ConfigError):
        dyn.step(model, state, np.zeros(5), np.zeros(5), 5e-3)


def test_step_nonfinite_detection(model):
    state = dyn.zero_state()
    state.dq[:] = 9e5
    state.q[:] = 9.9e5
    with pytest.raises(NonFiniteError):
        for _ in range(2000):
            state = dyn.step(model, state, np.zeros(5), np.zeros(5), 1e-3)


def test_sea_step_response_matches_linear_oracle(frictionless):
    model = frictionless
    q0 = np.zeros(5)
    state = dyn.equilibrium_state(model, q0)
    u0 = dyn.gravity_compensation(model, q0)
    du = 2.0  # extra motor torque on joint 4
    u = u0.copy()
    u[3] += du

    dt = 1e-3
    sim = []
    for _ in range(100):
        state = dyn.step(model, state, u, np.zeros(5), dt)
        sim.append(dyn.spring_torque(model, state)[1])
    sim = np.asarray(sim) - sim[0]

    # boundary-layer oracle: on the fast timescale the spring torque obeys
    # tau'' + k (1/B + 1/M44) tau = k du / B -> tau(t) = tau_qs (1 - cos(w t)),
    # tau_qs = du M44 / (M44 + B)
    M44 = dyn.mass_matrix(model, q0)[3, 3]
    k = model.spring_stiffness[1]
    B = model.motor_inertia[1]
    w_bl = np.sqrt(k * (1.0 / B + 1.0 / M44))
    tau_qs = du * M44 / (M44 + B)
    t = dt * np.arange(1, 101)
    ref = tau_qs * (1.0 - np.cos(w_bl * t))

    # early transient (first quarter period) matches the 2nd-order oracle
    n_qtr = int(np.floor(np.pi / (2 * w_bl) / dt))
    err = np.linalg.norm(sim[:n_qtr] - ref[:n_qtr]) / np.linalg.norm(ref[:n_qtr])
    assert err < 0.15

    # rise time consistent with the sqrt(B/K) boundary-layer scale
    t_sim = (np.argmax(sim >= 0.8 * tau_qs) + 1) * dt
    t_ref = np.arccos(0.2) / w_bl
    scale = np.sqrt(B / k)
    assert t_sim == pytest.approx(t_ref, rel=0.25)
    assert 0.5 * scale < t_sim < 3.0 * scale


def test_passivity_full_system(frictionless):
    # u = 0, tau_e = 0, frictionless: total energy is conserved by the flow
    rng = np.random.default_rng(11)
    q0 = np.deg2rad(np.array([-20.0, 50.0, 10.0, 60.0, -10.0]))
    state = dyn.SystemState(q0, 0.2 * rng.standard_normal(5), q0[2:5] + 0.01 * rng.standard_normal(3),
                            np.zeros(3), np.zeros(5))
    e0 = dyn.total_energy(frictionless, state)
    for _ in range(500):
        state = dyn.step(frictionless, state, np.zeros(5), np.zeros(5), 1e-3)
    e1 = dyn.total_energy(frictionless, state)
    assert abs(e1 - e0) < 1e-4 * max(1.0, abs(e0))


def test_clip_torque(model):
    u = np.array([100.0, 0, 0, 0, -60.0])
    clipped, flagged = dyn.clip_torque(model, u)
    assert flagged
    assert clipped[0] == model.torque_limits[0]
    assert clipped[4] == -model.torque_limits[4]
    _, flagged2 = dyn.clip_torque(model, np.zeros(5))
    assert not flagged2


def test_model_yaml_roundtrip(model, tmp_path):
    path = tmp_path / "arm.yaml"
    model.save_yaml(path)
    loaded = dyn.ArmModel.load_yaml(path)
    assert np.allclose(loaded.link_masses, model.link_masses)
    assert np.allclose(loaded.joint_limits, model.joint_limits)
    assert np.allclose(loaded.friction_params, model.friction_params)


def test_model_validation():
    with pytest.raises(ConfigError):
        dyn.default_arm().replace(spring_stiffness=[-1.0, 200.0, 200.0])
    with pytest.raises(ConfigError):
        dyn.ArmModel.from_dict({"bogus": 1})
