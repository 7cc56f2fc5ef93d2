"""Rigid-body and series-elastic dynamics of the 5-DoF exoskeleton arm.

The arm is a serial chain of five revolute joints. Joints 1-2 (indices 0-1)
are direct-drive; joints 3-5 (indices 2-4) are cable-driven through series
elastic actuators, so their motor shafts theta couple to the links only via
the spring stiffness K. Friction from the cable transmission acts on the
cable joints and follows a velocity polynomial with a smoothed sign function.

Coordinates: world z points up, gravity pulls along -z. At q = 0 the arm
hangs straight down; each link frame has its joint axis expressed in the
parent frame (unchanged by its own rotation) and extends to the next joint
along local -z.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, asdict

import numpy as np
import yaml
from numba import njit

from .errors import ConfigError, NonFiniteError, RankDeficientError

N_JOINTS = 5
N_CABLE = 3
CABLE = slice(2, 5)  # joints 3-5 (0-based 2..4)

# selection matrices: S1 routes direct-drive torque, S2 picks the cable joints
S1_DIAG = np.array([1.0, 1.0, 0.0, 0.0, 0.0])
S2 = np.zeros((3, 5))
S2[:, 2:] = np.eye(3)

V_EPS = 0.01  # rad/s, tanh smoothing width of sgn() in the friction model
HARD_STOP_MARGIN = np.deg2rad(15.0)  # simulation hard stops past the soft limits

# cable-transmission friction coefficients (a, b, c) per cable joint, fitted on
# the physical drives and expressed in the drive-side measurement convention.
FRICTION_COEFFS_DRIVE = np.array([
    [0.822, -2.132, 0.557],
    [1.718, 11.441, -3.028],
    [0.636, -1.212, 1.005],
])


@dataclass
class ArmModel:
    """Kinematic, inertial, SEA and friction parameters of the 5-DoF chain.

    link_inertias are scalar rotational inertias per link (isotropic diagonal
    approximation about the link COM). motor_inertia / spring_stiffness hold
    the diagonals of B and K for the three cable joints. friction_params has
    one (a, b, c) row per cable joint for tau_f = (a + b|v| + c v^2) sgn(v).
    """

    link_lengths: np.ndarray
    link_masses: np.ndarray
    link_com_offsets: np.ndarray
    link_inertias: np.ndarray
    joint_axes: np.ndarray          # (5, 3) unit vectors in the parent frame
    motor_inertia: np.ndarray       # (3,) diagonal of B, kg m^2
    spring_stiffness: np.ndarray    # (3,) diagonal of K, N m / rad
    friction_params: np.ndarray     # (3, 3) rows (a_bar, b_bar, c_bar)
    joint_limits: np.ndarray        # (5, 2) rad
    torque_limits: np.ndarray       # (5,) N m
    gravity: float = 9.81

    _kin: tuple = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        for name in ("link_lengths", "link_masses", "link_com_offsets", "link_inertias",
                     "joint_axes", "motor_inertia", "spring_stiffness", "friction_params",
                     "joint_limits", "torque_limits"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        self.validate()

    def validate(self):
        if self.link_lengths.shape != (5,) or np.any(self.link_lengths <= 0):
            raise ConfigError("link_lengths must be 5 positive values")
        if np.any(self.link_masses <= 0):
            raise ConfigError("link_masses must be positive")
        if self.joint_axes.shape != (5, 3):
            raise ConfigError("joint_axes must be (5, 3)")
        norms = np.linalg.norm(self.joint_axes, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ConfigError("joint_axes must be unit vectors")
        if np.any(self.motor_inertia <= 0) or np.any(self.spring_stiffness <= 0):
            raise ConfigError("motor inertia B and spring stiffness K must be positive definite")
        if self.joint_limits.shape != (5, 2) or np.any(self.joint_limits[:, 0] >= self.joint_limits[:, 1]):
            raise ConfigError("joint_limits must be (5, 2) with min < max")
        if self.torque_limits.shape != (5,) or np.any(self.torque_limits <= 0):
            raise ConfigError("torque_limits must be 5 positive values")
        if self.gravity <= 0:
            raise ConfigError("gravity magnitude must be positive")

    # ---- kinematic constants packed for the numba kernels ----
    def kin(self):
        if self._kin is None:
            offsets = np.zeros((5, 3))
            coms = np.zeros((5, 3))
            for i in range(1, 5):
                offsets[i] = np.array([0.0, 0.0, -self.link_lengths[i - 1]])
            for i in range(5):
                coms[i] = np.array([0.0, 0.0, -self.link_com_offsets[i]])
            inertias = np.zeros((5, 3, 3))
            for i in range(5):
                inertias[i] = np.eye(3) * self.link_inertias[i]
            self._kin = (
                np.ascontiguousarray(self.joint_axes),
                np.ascontiguousarray(offsets),
                np.ascontiguousarray(coms),
                np.ascontiguousarray(self.link_masses),
                np.ascontiguousarray(inertias),
            )
        return self._kin

    @property
    def gravity_vector(self) -> np.ndarray:
        return np.array([0.0, 0.0, -self.gravity])

    @property
    def B(self) -> np.ndarray:
        return np.diag(self.motor_inertia)

    @property
    def K(self) -> np.ndarray:
        return np.diag(self.spring_stiffness)

    @property
    def B_bar(self) -> np.ndarray:
        """Motor inertia projected onto the joint side, S2^T B S2."""
        return S2.T @ self.B @ S2

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("_kin", None)
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ArmModel":
        known = {f for f in cls.__dataclass_fields__ if f != "_kin"}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown arm parameter keys: {sorted(extra)}")
        missing = known - set(d) - {"gravity"}
        if missing:
            raise ConfigError(f"missing arm parameter keys: {sorted(missing)}")
        return cls(**d)

    def save_yaml(self, path):
        with open(path, "w") as f:
            yaml.safe_dump(self.to_dict(), f, sort_keys=False)

    @classmethod
    def load_yaml(cls, path) -> "ArmModel":
        with open(path) as f:
            d = yaml.safe_load(f)
        if not isinstance(d, dict):
            raise ConfigError(f"arm parameter file {path} is not a mapping")
        return cls.from_dict(d)

    def replace(self, **kw) -> "ArmModel":
        d = self.to_dict()
        d.update(kw)
        return ArmModel.from_dict(d)


def default_arm() -> ArmModel:
    """Canonical parameter set: 7.78 kg moving mass, 0.30 m upper arm, 0.28 m forearm.

    Axes follow the joint functions of the device: shoulder ab/adduction (x),
    shoulder flexion/extension (y), upper-arm rotation (z, along the segment),
    elbow flexion/extension (y), forearm rotation (z).
    """
    lengths = np.array([0.05, 0.05, 0.30, 0.28, 0.10])
    masses = np.array([1.50, 1.20, 2.50, 1.80, 0.78])
    inertias = masses * lengths**2 / 12.0 + 0.002
    return ArmModel(
        link_lengths=lengths,
        link_masses=masses,
        link_com_offsets=lengths / 2.0,
        link_inertias=inertias,
        joint_axes=np.array([
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0],
        ]),
        motor_inertia=np.full(3, 0.05),
        spring_stiffness=np.full(3, 200.0),
        # joint-side disturbance: the drive-side fit flipped so the plant
        # dissipates (positive static term would otherwise inject energy at rest)
        friction_params=-FRICTION_COEFFS_DRIVE,
        joint_limits=np.deg2rad(np.array([
            [-90.0, 30.0],
            [-45.0, 115.0],
            [-30.0, 30.0],
            [-5.0, 120.0],
            [-30.0, 30.0],
        ])),
        torque_limits=np.array([49.0, 49.0, 48.0, 48.0, 48.0]),
        gravity=9.81,
    )


@dataclass
class SystemState:
    """Joint positions/velocities, SEA motor shaft state, interaction torque, time."""

    q: np.ndarray
    dq: np.ndarray
    theta: np.ndarray
    dtheta: np.ndarray
    tau_e: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float).reshape(5)
        self.dq = np.asarray(self.dq, dtype=float).reshape(5)
        self.theta = np.asarray(self.theta, dtype=float).reshape(3)
        self.dtheta = np.asarray(self.dtheta, dtype=float).reshape(3)
        self.tau_e = np.asarray(self.tau_e, dtype=float).reshape(5)

    def copy(self) -> "SystemState":
        return SystemState(self.q.copy(), self.dq.copy(), self.theta.copy(),
                           self.dtheta.copy(), self.tau_e.copy(), self.t)


def zero_state() -> SystemState:
    return SystemState(np.zeros(5), np.zeros(5), np.zeros(3), np.zeros(3), np.zeros(5), 0.0)


# --------------------------------------------------------------------------
# Newton-Euler kernels
# --------------------------------------------------------------------------

@njit(cache=True)
def _rot_axis(axis, angle):
    """Rodrigues rotation matrix about a unit axis."""
    c = np.cos(angle)
    s = np.sin(angle)
    x, y, z = axis[0], axis[1], axis[2]
    R = np.empty((3, 3))
    R[0, 0] = c + x * x * (1 - c)
    R[0, 1] = x * y * (1 - c) - z * s
    R[0, 2] = x * z * (1 - c) + y * s
    R[1, 0] = y * x * (1 - c) + z * s
    R[1, 1] = c + y * y * (1 - c)
    R[1, 2] = y * z * (1 - c) - x * s
    R[2, 0] = z * x * (1 - c) - y * s
    R[2, 1] = z * y * (1 - c) + x * s
    R[2, 2] = c + z * z * (1 - c)
    return R


@njit(cache=True)
def _cross(a, b):
    out = np.empty(3)
    out[0] = a[1] * b[2] - a[2] * b[1]
    out[1] = a[2] * b[0] - a[0] * b[2]
    out[2] = a[0] * b[1] - a[1] * b[0]
    return out


@njit(cache=True)
def _rne(axes, offsets, coms, masses, inertias, q, dq, ddq, grav_accel):
    """Recursive Newton-Euler inverse dynamics for the serial chain.

    Returns joint torques for the given motion; gravity is injected as a base
    acceleration. All link quantities are expressed in the link's own frame.
    """
    n = q.shape[0]
    R = np.empty((n, 3, 3))        # parent <- link rotation
    w = np.empty((n, 3))           # angular velocity
    dw = np.empty((n, 3))          # angular acceleration
    a = np.empty((n, 3))           # linear acceleration of joint origin
    Fc = np.empty((n, 3))          # net force at COM
    Nc = np.empty((n, 3))          # net moment about COM

    w_prev = np.zeros(3)
    dw_prev = np.zeros(3)
    a_prev = -grav_accel           # base acceleration trick

    for i in range(n):
        Ri = _rot_axis(axes[i], q[i])
        R[i] = Ri
        RiT = Ri.T
        # joint axis has identical coordinates in parent and link frame
        wi = RiT @ w_prev + dq[i] * axes[i]
        dwi = RiT @ dw_prev + _cross(RiT @ w_prev, dq[i] * axes[i]) + ddq[i] * axes[i]
        ai = RiT @ (a_prev + _cross(dw_prev, offsets[i])
                    + _cross(w_prev, _cross(w_prev, offsets[i])))
        ac = ai + _cross(dwi, coms[i]) + _cross(wi, _cross(wi, coms[i]))
        w[i] = wi
        dw[i] = dwi
        a[i] = ai
        Fc[i] = masses[i] * ac
        Nc[i] = inertias[i] @ dwi + _cross(wi, inertias[i] @ wi)
        w_prev = wi
        dw_prev = dwi
        a_prev = ai

    tau = np.empty(n)
    f_child = np.zeros(3)
    n_child = np.zeros(3)
    for i in range(n - 1, -1, -1):
        if i < n - 1:
            f_down = R[i + 1] @ f_child
            n_down = R[i + 1] @ n_child + _cross(offsets[i + 1], f_down)
        else:
            f_down = np.zeros(3)
            n_down = np.zeros(3)
        fi = Fc[i] + f_down
        ni = Nc[i] + n_down + _cross(coms[i], Fc[i])
        tau[i] = ni @ axes[i]
        f_child = fi
        n_child = ni
    return tau


@njit(cache=True)
def _mass_matrix(axes, offsets, coms, masses, inertias, q):
    n = q.shape[0]
    M = np.empty((n, n))
    zero = np.zeros(n)
    g0 = np.zeros(3)
    for j in range(n):
        e = np.zeros(n)
        e[j] = 1.0
        M[:, j] = _rne(axes, offsets, coms, masses, inertias, q, zero, e, g0)
    return 0.5 * (M + M.T)


def mass_matrix(model: ArmModel, q: np.ndarray) -> np.ndarray:
    """Joint-space inertia matrix M(q), symmetric positive definite."""
    axes, offsets, coms, masses, inertias = model.kin()
    return _mass_matrix(axes, offsets, coms, masses, inertias, np.asarray(q, dtype=float))


def gravity_torque(model: ArmModel, q: np.ndarray) -> np.ndarray:
    axes, offsets, coms, masses, inertias = model.kin()
    z = np.zeros(5)
    return _rne(axes, offsets, coms, masses, inertias,
                np.asarray(q, dtype=float), z, z, model.gravity_vector)


def coriolis_gravity(model: ArmModel, q: np.ndarray, dq: np.ndarray):
    """Velocity torque C(dq, q) dq and gravity torque g(q).

    The velocity torque is the Christoffel-consistent one, so the energy
    identity dq^T (dM/dt - 2C) dq = 0 holds.
    """
    axes, offsets, coms, masses, inertias = model.kin()
    q = np.asarray(q, dtype=float)
    dq = np.asarray(dq, dtype=float)
    z = np.zeros(5)
    total = _rne(axes, offsets, coms, masses, inertias, q, dq, z, model.gravity_vector)
    g = _rne(axes, offsets, coms, masses, inertias, q, z, z, model.gravity_vector)
    return total - g, g


def coriolis_times(model: ArmModel, q: np.ndarray, dq: np.ndarray, v: np.ndarray,
                   c_dq: np.ndarray = None) -> np.ndarray:
    """C(dq, q) @ v for arbitrary v via polarization of the quadratic velocity map.

    With Christoffel symmetry, C(dq)v + C(v)dq = Q(dq+v) - Q(dq) - Q(v) and
    C(dq)v = C(v)dq, where Q(w) = C(w)w.
    """
    axes, offsets, coms, masses, inertias = model.kin()
    q = np.asarray(q, dtype=float)
    dq = np.asarray(dq, dtype=float)
    v = np.asarray(v, dtype=float)
    z = np.zeros(5)
    g0 = np.zeros(3)
    q_sum = _rne(axes, offsets, coms, masses, inertias, q, dq + v, z, g0)
    q_v = _rne(axes, offsets, coms, masses, inertias, q, v, z, g0)
    if c_dq is None:
        c_dq = _rne(axes, offsets, coms, masses, inertias, q, dq, z, g0)
    return 0.5 * (q_sum - c_dq - q_v)


# --------------------------------------------------------------------------
# Friction
# --------------------------------------------------------------------------

def friction_torque(model: ArmModel, dq: np.ndarray) -> np.ndarray:
    """Cable-transmission disturbance torque on joints 3-5.

    tau_f = (a + b|v| + c v^2) * tanh(v / V_EPS) per cable joint; the tanh
    replaces sgn to avoid chattering, and the |v| form keeps the model odd.
    """
    v = np.asarray(dq, dtype=float)[CABLE]
    p = model.friction_params
    mag = p[:, 0] + p[:, 1] * np.abs(v) + p[:, 2] * v * v
    return mag * np.tanh(v / V_EPS)


@dataclass
class FrictionFit:
    zeta_hat: np.ndarray      # (3, 3) fitted (a, b, c) per cable joint
    residual_rms: np.ndarray  # (3,)


def fit_friction(samples) -> FrictionFit:
    """Least-squares fit of the velocity polynomial per cable joint.

    samples: sequence of 3 (dq, tau_f) pairs of 1-D arrays, one per cable
    joint. Data are folded by the smoothed sign so the regression is linear
    in (a, b, c); samples with |dq| < 2*V_EPS are dropped as sign-ambiguous.
    """
    if len(samples) != N_CABLE:
        raise ConfigError("fit_friction expects one (dq, tau) sample set per cable joint")
    zeta = np.zeros((3, 3))
    rms = np.zeros(3)
    for j, (dq, tau) in enumerate(samples):
        dq = np.asarray(dq, dtype=float).ravel()
        tau = np.asarray(tau, dtype=float).ravel()
        keep = np.abs(dq) >= 2 * V_EPS
        dq, tau = dq[keep], tau[keep]
        if dq.size < 50:
            raise ConfigError(f"joint {j + 3}: need >= 50 usable samples, got {dq.size}")
        folded = tau / np.tanh(dq / V_EPS)
        X = np.column_stack([np.ones_like(dq), np.abs(dq), dq * dq])
        cond = np.linalg.cond(X)
        if cond > 1e8:
            raise RankDeficientError(
                f"joint {j + 3}: regressor condition number {cond:.3g} > 1e8; widen the velocity sweep")
        coef, *_ = np.linalg.lstsq(X, folded, rcond=None)
        zeta[j] = coef
        rms[j] = float(np.sqrt(np.mean((X @ coef - folded) ** 2)))
    return FrictionFit(zeta_hat=zeta, residual_rms=rms)


# --------------------------------------------------------------------------
# Integration
# --------------------------------------------------------------------------

def clip_torque(model: ArmModel, u: np.ndarray):
    """Clip a command to the actuator torque limits; flags whether clipping engaged."""
    u = np.asarray(u, dtype=float)
    lim = model.torque_limits
    clipped = np.clip(u, -lim, lim)
    return clipped, bool(np.any(np.abs(u) > lim))


def spring_torque(model: ArmModel, state: SystemState) -> np.ndarray:
    """SEA spring torque K (theta - S2 q) on the cable joints."""
    return model.spring_stiffness * (state.theta - state.q[CABLE])


@njit(cache=True)
def _friction_vec(fr, v):
    """(a + b|v| + c v^2) tanh(v / V_EPS) per cable joint."""
    out = np.empty(3)
    for j in range(3):
        vj = v[j]
        mag = fr[j, 0] + fr[j, 1] * abs(vj) + fr[j, 2] * vj * vj
        out[j] = mag * np.tanh(vj / V_EPS)
    return out


@njit(cache=True)
def _friction_jac(fr, v):
    out = np.empty(3)
    for j in range(3):
        vj = v[j]
        mag = fr[j, 0] + fr[j, 1] * abs(vj) + fr[j, 2] * vj * vj
        sg = 1.0 if vj > 0 else (-1.0 if vj < 0 else 0.0)
        th = np.tanh(vj / V_EPS)
        out[j] = (fr[j, 1] * sg + 2.0 * fr[j, 2] * vj) * th + mag * (1.0 - th * th) / V_EPS
    return out


@njit(cache=True)
def _smooth_accel(axes, offsets, coms, masses, inertias, grav, k_spring, b_motor,
                  q, dq, theta, dtheta, u, tau_e):
    """Accelerations of the friction-free coupled system."""
    M = _mass_matrix(axes, offsets, coms, masses, inertias, q)
    zero = np.zeros(5)
    c_dq_g = _rne(axes, offsets, coms, masses, inertias, q, dq, zero, grav)
    rhs = tau_e - c_dq_g
    rhs[0] += u[0]
    rhs[1] += u[1]
    thdd = np.empty(3)
    for j in range(3):
        spring = k_spring[j] * (theta[j] - q[2 + j])
        rhs[2 + j] += spring
        thdd[j] = (u[2 + j] - spring) / b_motor[j]
    qdd = np.linalg.solve(M, rhs)
    return qdd, thdd


@njit(cache=True)
def _step_core(axes, offsets, coms, masses, inertias, grav, k_spring, b_motor, fr,
               q0, dq0, th0, dth0, u, tau_e, dt):
    """RK4 on the smooth dynamics, then an implicit update for the stiff
    cable friction (Newton on the velocity equation). The split keeps the
    energy behaviour of the conservative part while the tanh stiction stays
    stable at 1 kHz."""
    # RK4 stages over the aggregated state
    q, dq, th, dth = q0, dq0, th0, dth0
    k1q, k1t = _smooth_accel(axes, offsets, coms, masses, inertias, grav, k_spring, b_motor,
                             q, dq, th, dth, u, tau_e)
    q_a = q + 0.5 * dt * dq
    dq_a = dq + 0.5 * dt * k1q
    th_a = th + 0.5 * dt * dth
    dth_a = dth + 0.5 * dt * k1t
    k2q, k2t = _smooth_accel(axes, offsets, coms, masses, inertias, grav, k_spring, b_motor,
                             q_a, dq_a, th_a, dth_a, u, tau_e)
    q_b = q + 0.5 * dt * dq_a
    dq_b = dq + 0.5 * dt * k2q
    th_b = th + 0.5 * dt * dth_a
    dth_b = dth + 0.5 * dt * k2t
    k3q, k3t = _smooth_accel(axes, offsets, coms, masses, inertias, grav, k_spring, b_motor,
                             q_b, dq_b, th_b, dth_b, u, tau_e)
    q_c = q + dt * dq_b
    dq_c = dq + dt * k3q
    th_c = th + dt * dth_b
    dth_c = dth + dt * k3t
    k4q, k4t = _smooth_accel(axes, offsets, coms, masses, inertias, grav, k_spring, b_motor,
                             q_c, dq_c, th_c, dth_c, u, tau_e)

    q_n = q + dt / 6.0 * (dq + 2.0 * dq_a + 2.0 * dq_b + dq_c)
    dq_n = dq + dt / 6.0 * (k1q + 2.0 * k2q + 2.0 * k3q + k4q)
    th_n = th + dt / 6.0 * (dth + 2.0 * dth_a + 2.0 * dth_b + dth_c)
    dth_n = dth + dt / 6.0 * (k1t + 2.0 * k2t + 2.0 * k3t + k4t)

    # implicit friction: solve v = dq_n + dt * M^-1 S2^T tau_f(v)
    has_friction = False
    for j in range(3):
        for c in range(3):
            if fr[j, c] != 0.0:
                has_friction = True
    if has_friction:
        M = _mass_matrix(axes, offsets, coms, masses, inertias, q_n)
        Minv = np.linalg.inv(M)
        dq_pre = dq_n
        dq_n = _implicit_friction(Minv, fr, dq_pre, dt)
        # position feels half the friction velocity correction
        q_n = q_n + 0.5 * dt * (dq_n - dq_pre)

    return q_n, dq_n, th_n, dth_n


@njit(cache=True)
def _implicit_friction(Minv, fr, dq_in, dt):
    """Newton solve of v = dq_in + dt * Minv @ S2^T tau_f(v[2:])."""
    v = dq_in.copy()
    for _ in range(12):
        tf = _friction_vec(fr, v[2:])
        F = v - dq_in
        for i in range(5):
            acc = 0.0
            for j in range(3):
                acc += Minv[i, 2 + j] * tf[j]
            F[i] -= dt * acc
        res = 0.0
        for i in range(5):
            res = max(res, abs(F[i]))
        if res < 1e-12:
            break
        dtf = _friction_jac(fr, v[2:])
        J = np.eye(5)
        for i in range(5):
            for j in range(3):
                J[i, 2 + j] -= dt * Minv[i, 2 + j] * dtf[j]
        v = v - np.linalg.solve(J, F)
    return v


def step(model: ArmModel, state: SystemState, u: np.ndarray, tau_e: np.ndarray,
         dt: float) -> SystemState:
    """Integrate the coupled joint / SEA dynamics over one control period.

    RK4 handles the smooth coupled dynamics; the stiff tanh friction on the
    cable joints is folded in implicitly so rest states stay numerically
    quiet at the 1 kHz rate.
    """
    if not (0.0 < dt <= 2e-3):
        raise ConfigError(f"dt must be in (0, 2 ms], got {dt}")
    u, _ = clip_torque(model, u)
    tau_e = np.asarray(tau_e, dtype=float)
    axes, offsets, coms, masses, inertias = model.kin()
    q_n, dq_n, th_n, dth_n = _step_core(
        axes, offsets, coms, masses, inertias, model.gravity_vector,
        model.spring_stiffness, model.motor_inertia, model.friction_params,
        state.q, state.dq, state.theta, state.dtheta, u, tau_e, dt)
    new = SystemState(q_n, dq_n, th_n, dth_n, tau_e.copy(), state.t + dt)
    vals = np.concatenate([new.q, new.dq, new.theta, new.dtheta])
    if not np.all(np.isfinite(vals)) or np.any(np.abs(vals) > 1e6):
        raise NonFiniteError(f"state diverged at t = {new.t:.4f} s")
    return new


def step_reduced(model: ArmModel, q, dq, u, tau_e, dt, friction_params=None):
    """Semi-implicit step of the quasi-steady-state (slow) subsystem.

    (M + B_bar) qdd + C dq + g = u + tau_e + S2^T tau_f, i.e. the SEA boundary
    layer collapsed onto the joints. Used for controller analysis. Friction is
    folded in implicitly as in the full integrator.
    """
    q = np.asarray(q, dtype=float)
    dq = np.asarray(dq, dtype=float)
    M = mass_matrix(model, q) + model.B_bar
    c_dq_g = np.sum(coriolis_gravity(model, q, dq), axis=0)
    rhs = np.asarray(u, dtype=float) + np.asarray(tau_e, dtype=float) - c_dq_g
    dq_n = dq + dt * np.linalg.solve(M, rhs)
    fr = model.friction_params if friction_params is None else np.asarray(friction_params, dtype=float)
    if np.any(fr != 0.0):
        dq_n = _implicit_friction(np.linalg.inv(M), np.ascontiguousarray(fr), dq_n, dt)
    q_n = q + dt * dq_n
    if not np.all(np.isfinite(q_n)) or np.any(np.abs(q_n) > 1e6):
        raise NonFiniteError("reduced state diverged")
    return q_n, dq_n


def equilibrium_state(model: ArmModel, q: np.ndarray) -> SystemState:
    """Rest state at q with spring deflections carrying the cable-joint gravity load."""
    q = np.asarray(q, dtype=float)
    g = gravity_torque(model, q)
    theta = q[CABLE] + g[CABLE] / model.spring_stiffness
    return SystemState(q.copy(), np.zeros(5), theta, np.zeros(3), np.zeros(5), 0.0)


def gravity_compensation(model: ArmModel, q: np.ndarray) -> np.ndarray:
    """Torque command holding the arm statically at q (u = g(q))."""
    return gravity_torque(model, q)


def com_heights(model: ArmModel, q: np.ndarray) -> np.ndarray:
    """World z of each link COM; used for potential energy."""
    axes, offsets, coms, masses, _ = model.kin()
    q = np.asarray(q, dtype=float)
    R_acc = np.eye(3)
    p = np.zeros(3)
    heights = np.zeros(5)
    for i in range(5):
        p = p + R_acc @ offsets[i]
        R_acc = R_acc @ np.asarray(_rot_axis(axes[i], q[i]))
        heights[i] = (p + R_acc @ coms[i])[2]
    return heights


def total_energy(model: ArmModel, state: SystemState) -> float:
    """Kinetic + spring + gravitational energy of the full SEA system."""
    M = mass_matrix(model, state.q)
    ke = 0.5 * state.dq @ M @ state.dq
    ke += 0.5 * np.sum(model.motor_inertia * state.dtheta**2)
    defl = state.theta - state.q[CABLE]
    pe_spring = 0.5 * np.sum(model.spring_stiffness * defl**2)
    pe_grav = model.gravity * np.sum(model.link_masses * com_heights(model, state.q))
    return float(ke + pe_spring + pe_grav)


def hard_stop_violation(model: ArmModel, q: np.ndarray) -> bool:
    lo = model.joint_limits[:, 0] - HARD_STOP_MARGIN
    hi = model.joint_limits[:, 1] + HARD_STOP_MARGIN
    q = np.asarray(q, dtype=float)
    return bool(np.any(q < lo) or np.any(q > hi))
