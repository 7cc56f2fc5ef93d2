"""Variable impedance control for the SEA-driven arm.

The control torque splits into a fast term that damps the SEA boundary layer
and a slow term that shapes the joint-side dynamics into a desired impedance
relation between motion error and interaction torque. An anomaly score
modulates the apparent impedance through the weighting function w(s): high
scores soften the device so conflicts are absorbed rather than fought.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np
import yaml

from . import dynamics as dyn
from .errors import ConfigError

DELTA_Z_DEFAULT = 0.05  # rad/s, saturation boundary replacing sgn(z)


@dataclass
class ImpedanceConfig:
    """Gains of the variable impedance controller (diagonals only).

    M_d is kept for documentation of the target impedance model; the
    implemented law shapes damping and stiffness (C_d, K_d) only.
    """

    M_d: np.ndarray = field(default_factory=lambda: np.ones(5))
    C_d: np.ndarray = field(default_factory=lambda: np.full(5, 10.0))
    K_d: np.ndarray = field(default_factory=lambda: np.full(5, 50.0))
    K_v: np.ndarray = field(default_factory=lambda: np.full(3, 1.1))
    K_z: np.ndarray = field(default_factory=lambda: np.array([1.5, 0.6, 0.7, 4.0, 1.8]))
    k_g: float = 0.5
    lambda1: float = 0.5
    lambda2: float = 1.5
    chi1: float = 0.04
    chi2: float = 8.75
    delta_z: float = DELTA_Z_DEFAULT
    score_scale: float = 1.0        # maps raw anomaly scores into w(s) input units
    qddr_filter_hz: float = 50.0    # cutoff of the reference-acceleration filter
    # virtual mass scale of the transparent mode, per joint. Scaling below 1
    # feeds interaction torque forward; through the SEA lag that destabilizes
    # the light cable joints, so only the direct-drive shoulder is lightened.
    gamma0: np.ndarray = field(default_factory=lambda: np.array([0.25, 0.25, 1.0, 1.0, 1.0]))

    def __post_init__(self):
        for name in ("M_d", "C_d", "K_d", "K_v", "K_z"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        self.validate()

    def validate(self):
        if np.any(self.C_d <= 0) or np.any(self.K_d <= 0) or np.any(self.M_d <= 0):
            raise ConfigError("desired impedance diagonals must be positive")
        if self.K_v.shape != (3,) or np.any(self.K_v <= 0):
            raise ConfigError("K_v must be 3 positive gains")
        if self.K_z.shape != (5,) or np.any(self.K_z <= 0):
            raise ConfigError("K_z must be 5 positive gains")
        if not (self.lambda2 > self.lambda1 > 0):
            raise ConfigError("need lambda2 > lambda1 > 0 so w(s) stays positive")
        if self.k_g < 0:
            raise ConfigError("k_g must be non-negative")
        if self.delta_z <= 0 or self.score_scale <= 0 or self.gamma0 <= 0:
            raise ConfigError("delta_z, score_scale and gamma0 must be positive")

    def to_dict(self) -> dict:
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v)
                for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ImpedanceConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown gain keys: {sorted(extra)}")
        return cls(**d)

    def save_yaml(self, path):
        with open(path, "w") as f:
            yaml.safe_dump(self.to_dict(), f, sort_keys=False)

    @classmethod
    def load_yaml(cls, path) -> "ImpedanceConfig":
        with open(path) as f:
            d = yaml.safe_load(f)
        if not isinstance(d, dict):
            raise ConfigError(f"gains file {path} is not a mapping")
        return cls.from_dict(d)

    def replace(self, **kw) -> "ImpedanceConfig":
        d = self.to_dict()
        d.update(kw)
        return ImpedanceConfig.from_dict(d)


@dataclass
class ControlDebug:
    z: np.ndarray
    u_f: np.ndarray
    u_s: np.ndarray
    w: float
    V: float


def weight(s: float, cfg: ImpedanceConfig) -> float:
    """Anomaly weighting w(s) = lambda1 tanh(-s/chi1 + chi2) + lambda2.

    Monotone non-increasing in s, ranging over (lambda2 - lambda1,
    lambda2 + lambda1); equals lambda2 at s = chi1 * chi2.
    """
    if s < 0:
        raise ConfigError("anomaly score must be non-negative")
    return float(cfg.lambda1 * np.tanh(-s / cfg.chi1 + cfg.chi2) + cfg.lambda2)


def fast_term(state: dyn.SystemState, cfg: ImpedanceConfig) -> np.ndarray:
    """Boundary-layer damping u_f = -S2^T K_v (dtheta - S2 dq)."""
    u = np.zeros(5)
    u[dyn.CABLE] = -cfg.K_v * (state.dtheta - state.dq[dyn.CABLE])
    return u


def impedance_vector(state: dyn.SystemState, q_d: np.ndarray, dq_d: np.ndarray,
                     s: float, cfg: ImpedanceConfig):
    """Impedance vector z and reference velocity dq_r = dq - z.

    z collapses to zero exactly when the apparent impedance relation
    C_a (dq - dq_d) + K_a (q - q_d) = tau_e holds, with C_a = w(s) C_d and
    K_a = w(s) K_d.
    """
    w = weight(s, cfg)
    z = (state.dq - dq_d) + (cfg.K_d / cfg.C_d) * (state.q - q_d) \
        - state.tau_e / (w * cfg.C_d)
    return z, state.dq - z


def saturation(z: np.ndarray, delta: float) -> np.ndarray:
    return np.clip(z / delta, -1.0, 1.0)


def slow_term(model: dyn.ArmModel, state: dyn.SystemState, z: np.ndarray,
              dq_r: np.ndarray, ddq_r: np.ndarray, tau_f_hat: np.ndarray,
              cfg: ImpedanceConfig, dyn_terms=None) -> np.ndarray:
    """Slow time-scale control torque.

    u_s = -K_z z - S2^T tau_f_hat - tau_e - k_g sat(z) + (M + B_bar) ddq_r
          + C(dq, q) dq_r + g(q).
    The sign function of the reaching term is replaced by a saturation with
    boundary delta_z to avoid chattering at the discrete rate.
    """
    if dyn_terms is None:
        M = dyn.mass_matrix(model, state.q)
        c_dq, g = dyn.coriolis_gravity(model, state.q, state.dq)
        c_dqr = dyn.coriolis_times(model, state.q, state.dq, dq_r, c_dq=c_dq)
    else:
        M, g, c_dqr = dyn_terms
    u = -cfg.K_z * z - state.tau_e - cfg.k_g * saturation(z, cfg.delta_z)
    u[dyn.CABLE] -= tau_f_hat
    u += (M + model.B_bar) @ ddq_r + c_dqr + g
    return u


def transparent(model: dyn.ArmModel, state: dyn.SystemState, gamma0: float,
                tau_f_hat: np.ndarray, cfg: ImpedanceConfig,
                dyn_terms=None) -> np.ndarray:
    """Transparent-mode torque: cancel dynamics and render a virtual mass.

    u0 = (M + B_bar) ddq0 + C dq + g - S2^T tau_f_hat - tau_e + u_f with
    ddq0 = (1 / gamma0) (M + B_bar)^-1 tau_e.
    """
    if gamma0 <= 0:
        raise ConfigError("gamma0 must be positive")
    if dyn_terms is None:
        M = dyn.mass_matrix(model, state.q)
        c_dq, g = dyn.coriolis_gravity(model, state.q, state.dq)
    else:
        M, g, c_dq = dyn_terms
    # (M + B_bar) ddq0 = tau_e / gamma0, so the inertia solve cancels
    u = state.tau_e / gamma0 + c_dq + g - state.tau_e
    u[dyn.CABLE] -= tau_f_hat
    return u + fast_term(state, cfg)


def lyapunov_value(model: dyn.ArmModel, q: np.ndarray, z: np.ndarray,
                   M: np.ndarray = None) -> float:
    """Candidate storage V = 0.5 z^T (M + B_bar) z for the slow subsystem."""
    if M is None:
        M = dyn.mass_matrix(model, q)
    return float(0.5 * z @ (M + model.B_bar) @ z)


@dataclass
class MonitorReport:
    n_samples: int
    n_checked: int
    violations: list          # timestamps where V increased beyond eps_V
    negative_v: list          # timestamps where V < 0 (should never happen)
    max_increase: float

    @property
    def ok(self) -> bool:
        return not self.violations and not self.negative_v


def lyapunov_monitor(times, V_series, k_g: float, kappa: float,
                     ftilde_norms=None, eps_V: float = 1e-4) -> MonitorReport:
    """Check the storage function trace of a closed-loop run.

    Flags samples where V < 0 and, on the stretch where the friction-error
    bound kappa is honoured and k_g exceeds it, samples where V increased by
    more than the integrator-noise allowance eps_V.
    """
    times = np.asarray(times, dtype=float)
    V = np.asarray(V_series, dtype=float)
    negative = [float(t) for t, v in zip(times, V) if v < -1e-12]
    violations = []
    n_checked = 0
    max_inc = 0.0
    theory_applies = k_g >= kappa
    for i in range(1, len(V)):
        if ftilde_norms is not None and ftilde_norms[i] > kappa:
            continue
        if not theory_applies:
            continue
        n_checked += 1
        inc = V[i] - V[i - 1]
        max_inc = max(max_inc, inc)
        if inc > eps_V:
            violations.append(float(times[i]))
    return MonitorReport(n_samples=len(V), n_checked=n_checked,
                         violations=violations, negative_v=negative,
                         max_increase=max_inc)


class TrackingController:
    """Stateful 1 kHz session of the variable impedance law.

    Holds the reference-acceleration filter; everything else is a pure
    function of the current state, target and score. zeta_hat carries the
    fitted friction coefficients used for compensation (None disables it).
    """

    def __init__(self, model: dyn.ArmModel, cfg: ImpedanceConfig,
                 zeta_hat: np.ndarray = None, dt: float = 1e-3):
        self.model = model
        self.cfg = cfg
        self.zeta_hat = None if zeta_hat is None else np.asarray(zeta_hat, dtype=float)
        self.dt = dt
        self._fr_model = None if zeta_hat is None else model.replace(friction_params=zeta_hat)
        self.reset()

    def reset(self):
        self._dq_r_prev = None
        self._ddq_r = np.zeros(5)

    def _filtered_ddq_r(self, dq_r):
        if self._dq_r_prev is None:
            self._dq_r_prev = dq_r.copy()
        raw = (dq_r - self._dq_r_prev) / self.dt
        tau = 1.0 / (2 * np.pi * self.cfg.qddr_filter_hz)
        alpha = self.dt / (self.dt + tau)
        self._ddq_r = self._ddq_r + alpha * (raw - self._ddq_r)
        self._dq_r_prev = dq_r.copy()
        return self._ddq_r

    def tau_f_hat(self, dq):
        if self._fr_model is None:
            return np.zeros(3)
        return dyn.friction_torque(self._fr_model, dq)

    def __call__(self, state: dyn.SystemState, q_d: np.ndarray, dq_d: np.ndarray,
                 s: float = 0.0):
        cfg = self.cfg
        z, dq_r = impedance_vector(state, q_d, dq_d, s, cfg)
        ddq_r = self._filtered_ddq_r(dq_r)
        M = dyn.mass_matrix(self.model, state.q)
        c_dq, g = dyn.coriolis_gravity(self.model, state.q, state.dq)
        c_dqr = dyn.coriolis_times(self.model, state.q, state.dq, dq_r, c_dq=c_dq)
        u_s = slow_term(self.model, state, z, dq_r, ddq_r, self.tau_f_hat(state.dq),
                        cfg, dyn_terms=(M, g, c_dqr))
        u_f = fast_term(state, cfg)
        V = lyapunov_value(self.model, state.q, z, M=M)
        return u_s + u_f, ControlDebug(z=z, u_f=u_f, u_s=u_s, w=weight(s, cfg), V=V)


class TransparentController:
    """Session wrapper of the transparent mode (gravity/dynamics cancellation)."""

    def __init__(self, model: dyn.ArmModel, cfg: ImpedanceConfig,
                 zeta_hat: np.ndarray = None, dt: float = 1e-3):
        self.model = model
        self.cfg = cfg
        self.zeta_hat = None if zeta_hat is None else np.asarray(zeta_hat, dtype=float)
        self._fr_model = None if zeta_hat is None else model.replace(friction_params=zeta_hat)
        self.dt = dt

    def reset(self):
        pass

    def tau_f_hat(self, dq):
        if self._fr_model is None:
            return np.zeros(3)
        return dyn.friction_torque(self._fr_model, dq)

    def __call__(self, state: dyn.SystemState, q_d=None, dq_d=None, s: float = 0.0):
        u = transparent(self.model, state, self.cfg.gamma0, self.tau_f_hat(state.dq), self.cfg)
        zeros = np.zeros(5)
        return u, ControlDebug(z=zeros, u_f=fast_term(state, self.cfg), u_s=u, w=weight(s, self.cfg), V=0.0)


def run_reduced_loop(model: dyn.ArmModel, cfg: ImpedanceConfig, q_d_fn,
                     duration: float, dt: float = 1e-3, q0=None,
                     zeta_hat=None, plant_friction=None, tau_e_fn=None):
    """Closed loop of the slow-subsystem model under the impedance law.

    Returns a dict of traces (t, q, z, V, ftilde_norm) used by the stability
    monitor. plant_friction overrides the true friction of the reduced plant;
    zeta_hat is what the controller believes.
    """
    n = int(round(duration / dt))
    q = np.array(q0, dtype=float) if q0 is not None else q_d_fn(0.0)[0].copy()
    dq = np.zeros(5)
    fr_true = model.friction_params if plant_friction is None else np.asarray(plant_friction, dtype=float)
    ctrl = TrackingController(model, cfg, zeta_hat=zeta_hat, dt=dt)
    t_arr = np.zeros(n)
    V_arr = np.zeros(n)
    z_arr = np.zeros((n, 5))
    q_arr = np.zeros((n, 5))
    ftilde = np.zeros(n)
    plant = model.replace(friction_params=fr_true)
    for i in range(n):
        t = i * dt
        q_d, dq_d = q_d_fn(t)
        tau_e = tau_e_fn(t, q, dq) if tau_e_fn is not None else np.zeros(5)
        state = dyn.SystemState(q, dq, q[dyn.CABLE].copy(), dq[dyn.CABLE].copy(), tau_e, t)
        u, dbg = ctrl(state, q_d, dq_d, 0.0)
        tf_true = dyn.friction_torque(plant, dq)
        ftilde[i] = np.linalg.norm(ctrl.tau_f_hat(dq) - tf_true)
        t_arr[i] = t
        V_arr[i] = dbg.V
        z_arr[i] = dbg.z
        q_arr[i] = q
        q, dq = dyn.step_reduced(model, q, dq, u, tau_e, dt, friction_params=fr_true)
    return {"t": t_arr, "q": q_arr, "z": z_arr, "V": V_arr, "ftilde": ftilde}
