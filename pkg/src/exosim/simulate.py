"""Closed-loop scenario engine.

Couples the arm dynamics to a virtual human (spring-damper toward an intent
trajectory), layers the control / planner / detector rates, records episodes,
and exports training datasets (intention windows and anomaly windows) in a
small versioned binary container.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field

import numpy as np

from . import dynamics as dyn
from .errors import ConfigError, OutOfRangeError, ShapeMismatchError
from .seeds import substream

SCENARIO_KINDS = ("free_move", "sinusoidal", "circular", "lemniscate",
                  "tremor", "boundary_violation", "balance_deviation")
INTENT_SAMPLE_HZ = 200.0
TAU_E_LIMIT = 20.0

# detector window geometry (sliding window over rows sampled at detector rate)
L_S = 100
N_C = 21
N_OBS = 5   # past steps in an intention window (plus the current sample)
N_PRED = 7  # future steps predicted

WINDOW_MAGIC = b"EXDW"
WINDOW_VERSION = 1
KIND_ANOMALY = 1
KIND_INTENT = 2

CSV_HEADER = (["t"] + [f"q{i}" for i in range(1, 6)] + [f"dq{i}" for i in range(1, 6)]
              + [f"th{i}" for i in range(1, 4)] + [f"dth{i}" for i in range(1, 4)]
              + [f"taue{i}" for i in range(1, 6)] + [f"u{i}" for i in range(1, 6)]
              + [f"qd{i}" for i in range(1, 6)] + [f"qr{i}" for i in range(1, 6)] + ["s"])


# --------------------------------------------------------------------------
# virtual human
# --------------------------------------------------------------------------

@dataclass
class HumanModel:
    """Spring-damper coupling of a human limb toward an intent trajectory."""

    intent_trajectory: np.ndarray          # (T, 5) rad, uniformly sampled
    intent_rate: float                     # Hz
    coupling_stiffness: np.ndarray = field(default_factory=lambda: np.full(5, 30.0))
    coupling_damping: np.ndarray = field(default_factory=lambda: np.full(5, 2.0))
    engagement: float = 1.0
    anomaly_intervals: list = field(default_factory=list)  # [(t0, t1)] metadata

    def __post_init__(self):
        self.intent_trajectory = np.asarray(self.intent_trajectory, dtype=float)
        self.coupling_stiffness = np.asarray(self.coupling_stiffness, dtype=float)
        self.coupling_damping = np.asarray(self.coupling_damping, dtype=float)
        if np.any(self.coupling_stiffness < 0) or np.any(self.coupling_damping < 0):
            raise ConfigError("coupling gains must be non-negative")
        if not (0.0 <= self.engagement <= 1.0):
            raise ConfigError("engagement must lie in [0, 1]")
        traj = self.intent_trajectory
        dt = 1.0 / self.intent_rate
        self._vel = np.gradient(traj, dt, axis=0)

    @property
    def span(self) -> float:
        return (self.intent_trajectory.shape[0] - 1) / self.intent_rate

    def _index(self, t: float):
        x = np.clip(t * self.intent_rate, 0.0, self.intent_trajectory.shape[0] - 1.0)
        i = int(x)
        frac = x - i
        if i >= self.intent_trajectory.shape[0] - 1:
            return self.intent_trajectory.shape[0] - 1, 0.0
        return i, frac

    def intent_position(self, t: float) -> np.ndarray:
        i, frac = self._index(t)
        if frac == 0.0:
            return self.intent_trajectory[i].copy()
        return (1 - frac) * self.intent_trajectory[i] + frac * self.intent_trajectory[i + 1]

    def intent_velocity(self, t: float) -> np.ndarray:
        i, frac = self._index(t)
        if frac == 0.0:
            return self._vel[i].copy()
        return (1 - frac) * self._vel[i] + frac * self._vel[i + 1]

    def raw_torque(self, state: dyn.SystemState, t: float) -> np.ndarray:
        q_h = self.intent_position(t)
        dq_h = self.intent_velocity(t)
        return self.engagement * (self.coupling_stiffness * (q_h - state.q)
                                  + self.coupling_damping * (dq_h - state.dq))


def human_torque(human: HumanModel, state: dyn.SystemState, t: float) -> np.ndarray:
    """Interaction torque of the virtual human, clipped to the sensor range."""
    return np.clip(human.raw_torque(state, t), -TAU_E_LIMIT, TAU_E_LIMIT)


# --------------------------------------------------------------------------
# scenarios
# --------------------------------------------------------------------------

@dataclass
class ScenarioSpec:
    kind: str
    duration: float
    seed: int
    amplitude_deg: float = None
    frequency_hz: float = None
    center_deg: np.ndarray = None
    engagement: float = 1.0
    coupling_stiffness: float = 30.0
    coupling_damping: float = 2.0
    tremor_amp_deg: float = 3.0
    tremor_freq_hz: float = 5.0

    def __post_init__(self):
        if self.kind not in SCENARIO_KINDS:
            raise ConfigError(f"unknown scenario kind {self.kind!r}")
        if self.duration <= 0:
            raise ConfigError("duration must be positive")
        if self.center_deg is not None:
            self.center_deg = np.asarray(self.center_deg, dtype=float)


def _default_center(model: dyn.ArmModel) -> np.ndarray:
    lims = model.joint_limits
    return 0.5 * (lims[:, 0] + lims[:, 1])


def _check_range(model, traj, kind):
    lo = model.joint_limits[:, 0]
    hi = model.joint_limits[:, 1]
    if np.any(traj < lo) or np.any(traj > hi):
        raise OutOfRangeError(f"{kind} scenario exceeds joint limits")


def _free_move(model, rng, ts, center, amp_scale=0.8):
    lims = model.joint_limits
    traj = np.empty((ts.size, 5))
    for j in range(5):
        room = min(center[j] - lims[j, 0], lims[j, 1] - center[j])
        weights = rng.random(3)
        weights /= weights.sum()
        total = amp_scale * room
        q = np.full(ts.size, center[j])
        for k in range(3):
            f = rng.uniform(0.05, 0.5)
            phase = rng.uniform(0, 2 * np.pi)
            q += total * weights[k] * np.sin(2 * np.pi * f * ts + phase)
        traj[:, j] = q
    return traj


def make_scenario(spec: ScenarioSpec, model: dyn.ArmModel) -> HumanModel:
    """Deterministic intent trajectory for the requested scenario kind."""
    rng = substream(spec.seed, f"scenario:{spec.kind}")
    ts = np.arange(0.0, spec.duration + 1.0 / INTENT_SAMPLE_HZ, 1.0 / INTENT_SAMPLE_HZ)
    center = np.deg2rad(spec.center_deg) if spec.center_deg is not None else _default_center(model)
    lims = model.joint_limits
    anomaly = []

    if spec.kind == "free_move":
        traj = _free_move(model, rng, ts, center)
        _check_range(model, traj, spec.kind)

    elif spec.kind == "sinusoidal":
        amp = np.deg2rad(spec.amplitude_deg if spec.amplitude_deg is not None else 15.0)
        f = spec.frequency_hz if spec.frequency_hz is not None else 0.2
        traj = np.empty((ts.size, 5))
        for j in range(5):
            room = min(center[j] - lims[j, 0], lims[j, 1] - center[j])
            a = min(amp, 0.9 * room)
            if spec.amplitude_deg is not None and amp > room:
                raise OutOfRangeError("sinusoidal amplitude exceeds joint limits")
            traj[:, j] = center[j] + a * np.sin(2 * np.pi * f * ts + j * np.pi / 5)
        _check_range(model, traj, spec.kind)

    elif spec.kind in ("circular", "lemniscate"):
        amp = np.deg2rad(spec.amplitude_deg if spec.amplitude_deg is not None else 20.0)
        f = spec.frequency_hz if spec.frequency_hz is not None else 0.15
        traj = np.tile(center, (ts.size, 1))
        for j in (1, 3):
            room = min(center[j] - lims[j, 0], lims[j, 1] - center[j])
            if amp > room:
                raise OutOfRangeError(f"{spec.kind} amplitude exceeds joint limits")
        w = 2 * np.pi * f
        if spec.kind == "circular":
            traj[:, 1] = center[1] + amp * np.sin(w * ts)
            traj[:, 3] = center[3] + amp * np.cos(w * ts)
        else:
            traj[:, 1] = center[1] + amp * np.sin(w * ts)
            traj[:, 3] = center[3] + 0.5 * amp * np.sin(2 * w * ts)
        _check_range(model, traj, spec.kind)

    elif spec.kind == "tremor":
        traj = _free_move(model, rng, ts, center, amp_scale=0.5)
        t0, t1 = 0.3 * spec.duration, 0.7 * spec.duration
        mask = (ts >= t0) & (ts <= t1)
        amp = np.deg2rad(spec.tremor_amp_deg)
        f = spec.tremor_freq_hz
        if not (4.0 <= f <= 6.0):
            raise ConfigError("tremor frequency expected in 4-6 Hz")
        ramp = np.minimum(1.0, np.minimum(ts - t0, t1 - ts) / 0.5)
        for j in range(5):
            phase = rng.uniform(0, 2 * np.pi)
            traj[mask, j] += amp * ramp[mask] * np.sin(2 * np.pi * f * ts[mask] + phase)
        anomaly = [(t0, t1)]

    elif spec.kind == "boundary_violation":
        traj = _free_move(model, rng, ts, center, amp_scale=0.3)
        # joint 2 dives 10 deg past its lower limit mid-episode and returns
        target = lims[1, 0] - np.deg2rad(10.0)
        t_mid = 0.5 * spec.duration
        half_width = min(0.2 * spec.duration, 3.0)
        bump = np.exp(-0.5 * ((ts - t_mid) / (half_width / 2.5)) ** 2)
        traj[:, 1] = center[1] + (target - center[1]) * bump
        below = ts[traj[:, 1] < lims[1, 0]]
        if below.size:
            anomaly = [(float(below[0]), float(below[-1]))]

    elif spec.kind == "balance_deviation":
        traj = np.tile(center, (ts.size, 1))
        push = np.deg2rad(15.0)
        for sign, (a, b) in ((+1, (0.25, 0.40)), (-1, (0.60, 0.75))):
            t0, t1 = a * spec.duration, b * spec.duration
            mask = (ts >= t0) & (ts <= t1)
            phase = (ts[mask] - t0) / (t1 - t0)
            for j in (1, 3):
                traj[mask, j] += sign * push * np.sin(np.pi * phase)
            anomaly.append((t0, t1))

    return HumanModel(
        intent_trajectory=traj,
        intent_rate=INTENT_SAMPLE_HZ,
        coupling_stiffness=np.full(5, spec.coupling_stiffness),
        coupling_damping=np.full(5, spec.coupling_damping),
        engagement=spec.engagement,
        anomaly_intervals=anomaly,
    )


# --------------------------------------------------------------------------
# episode recording
# --------------------------------------------------------------------------

@dataclass
class EpisodeRecord:
    t: np.ndarray
    q: np.ndarray
    dq: np.ndarray
    theta: np.ndarray
    dtheta: np.ndarray
    tau_e: np.ndarray
    u: np.ndarray
    q_d: np.ndarray
    q_r: np.ndarray
    score: np.ndarray
    rate: float
    abort: dict = None
    anomaly_intervals: list = field(default_factory=list)
    extras: dict = field(default_factory=dict)

    def __len__(self):
        return self.t.shape[0]

    def detector_channels(self) -> np.ndarray:
        """(N, 21) sensor matrix in the fixed export order."""
        return np.concatenate([self.q, self.dq, self.theta, self.dtheta, self.tau_e], axis=1)

    def to_csv(self, path):
        data = np.column_stack([self.t, self.q, self.dq, self.theta, self.dtheta,
                                self.tau_e, self.u, self.q_d, self.q_r, self.score])
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(CSV_HEADER)
            for row in data:
                writer.writerow([f"{v:.9g}" for v in row])

    @classmethod
    def from_csv(cls, path) -> "EpisodeRecord":
        with open(path) as f:
            reader = csv.reader(f)
            header = next(reader)
            if header != CSV_HEADER:
                raise ConfigError(f"unexpected episode CSV header in {path}")
            data = np.array([[float(v) for v in row] for row in reader])
        i = 0

        def take(n):
            nonlocal i
            block = data[:, i:i + n]
            i += n
            return block
        t = take(1)[:, 0]
        return cls(t=t, q=take(5), dq=take(5), theta=take(3), dtheta=take(3),
                   tau_e=take(5), u=take(5), q_d=take(5), q_r=take(5),
                   score=take(1)[:, 0], rate=1.0 / (t[1] - t[0]) if len(t) > 1 else 0.0)


@dataclass
class Rates:
    control_hz: float = 1000.0
    planner_hz: float = 50.0
    detector_hz: float = 20.0

    def divisors(self):
        pd = self.control_hz / self.planner_hz
        dd = self.control_hz / self.detector_hz
        if abs(pd - round(pd)) > 1e-9 or abs(dd - round(dd)) > 1e-9:
            raise ConfigError("planner and detector rates must divide the control rate")
        return int(round(pd)), int(round(dd))


def run_episode(model: dyn.ArmModel, human: HumanModel, controller, duration: float,
                dt: float = 1e-3, planner=None, reference=None, scorer=None,
                rates: Rates = None, state0: dyn.SystemState = None,
                record_extras: bool = True, true_friction: np.ndarray = None) -> EpisodeRecord:
    """Rate-layered closed loop: dynamics + controller each tick, planner and
    detector on their own divisors, zero-order hold in between.

    controller: callable (state, q_d, dq_d, s_scaled) -> (u, ControlDebug).
    planner:    object with .plan(state, t) -> (q_d, dq_d, q_r) at planner rate.
    reference:  fallback callable t -> (q_d, dq_d) when no planner is given.
    scorer:     object with .push(row21, t) and .smoothed / .raw properties.
    """
    rates = rates or Rates()
    planner_div, detector_div = rates.divisors()
    n = int(round(duration / dt))
    if state0 is None:
        q0 = human.intent_position(0.0)
        state = dyn.equilibrium_state(model, q0)
    else:
        state = state0.copy()

    cols = {k: np.zeros((n, d)) for k, d in
            (("q", 5), ("dq", 5), ("theta", 3), ("dtheta", 3), ("tau_e", 5),
             ("u", 5), ("q_d", 5), ("q_r", 5))}
    t_arr = np.zeros(n)
    s_arr = np.zeros(n)
    extras = {k: np.zeros(n) for k in ("w", "V", "ftilde", "clip")} if record_extras else {}
    if record_extras:
        extras["z"] = np.zeros((n, 5))

    q_d = state.q.copy()
    dq_d = np.zeros(5)
    q_r_now = state.q.copy()
    abort = None
    score_scale = getattr(getattr(controller, "cfg", None), "score_scale", 1.0)
    plant_fr = model if true_friction is None else model.replace(friction_params=true_friction)

    recorded = 0
    for i in range(n):
        t = i * dt
        raw_tau = human.raw_torque(state, t)
        tau_e = np.clip(raw_tau, -TAU_E_LIMIT, TAU_E_LIMIT)
        state.tau_e = tau_e

        if np.any(np.abs(raw_tau) >= TAU_E_LIMIT) or dyn.hard_stop_violation(model, state.q):
            abort = {"t": t, "reason": "interaction torque limit" if np.any(np.abs(raw_tau) >= TAU_E_LIMIT)
                     else "hard stop"}
            break

        if scorer is not None and i % detector_div == 0:
            row = np.concatenate([state.q, state.dq, state.theta, state.dtheta, state.tau_e])
            scorer.push(row, t)
        s_raw = scorer.raw if scorer is not None else 0.0
        s_smooth = scorer.smoothed if scorer is not None else 0.0

        if planner is not None and i % planner_div == 0:
            q_d, dq_d, q_r_now = planner.plan(state, t)
        elif planner is None and reference is not None:
            q_d, dq_d = reference(t)
            q_r_now = q_d

        u, dbg = controller(state, q_d, dq_d, s_smooth * score_scale)
        u_clipped, clipped = dyn.clip_torque(model, u)

        t_arr[i] = t
        s_arr[i] = s_raw
        cols["q"][i] = state.q
        cols["dq"][i] = state.dq
        cols["theta"][i] = state.theta
        cols["dtheta"][i] = state.dtheta
        cols["tau_e"][i] = tau_e
        cols["u"][i] = u_clipped
        cols["q_d"][i] = q_d
        cols["q_r"][i] = q_r_now
        if record_extras:
            extras["w"][i] = dbg.w
            extras["V"][i] = dbg.V
            extras["z"][i] = dbg.z
            extras["clip"][i] = float(clipped)
            tf_hat = controller.tau_f_hat(state.dq) if hasattr(controller, "tau_f_hat") else np.zeros(3)
            extras["ftilde"][i] = np.linalg.norm(tf_hat - dyn.friction_torque(plant_fr, state.dq))

        state = dyn.step(plant_fr, state, u_clipped, tau_e, dt)
        recorded = i + 1

    sl = slice(0, recorded)
    return EpisodeRecord(
        t=t_arr[sl], q=cols["q"][sl], dq=cols["dq"][sl], theta=cols["theta"][sl],
        dtheta=cols["dtheta"][sl], tau_e=cols["tau_e"][sl], u=cols["u"][sl],
        q_d=cols["q_d"][sl], q_r=cols["q_r"][sl], score=s_arr[sl],
        rate=1.0 / dt, abort=abort, anomaly_intervals=list(human.anomaly_intervals),
        extras={k: v[sl] for k, v in extras.items()},
    )


# --------------------------------------------------------------------------
# dataset containers
# --------------------------------------------------------------------------

def write_anomaly_windows(path, windows: np.ndarray):
    windows = np.ascontiguousarray(windows, dtype="<f4")
    if windows.ndim != 3:
        raise ShapeMismatchError("anomaly windows must be (count, L_s, N_c)")
    count, ls, nc = windows.shape
    with open(path, "wb") as f:
        f.write(WINDOW_MAGIC)
        f.write(struct.pack("<IIIII", WINDOW_VERSION, KIND_ANOMALY, ls, nc, count))
        f.write(windows.tobytes())


def read_anomaly_windows(path) -> np.ndarray:
    with open(path, "rb") as f:
        if f.read(4) != WINDOW_MAGIC:
            raise ConfigError(f"{path} is not a window container")
        version, kind, ls, nc, count = struct.unpack("<IIIII", f.read(20))
        if version != WINDOW_VERSION or kind != KIND_ANOMALY:
            raise ConfigError("wrong container version/kind")
        data = np.frombuffer(f.read(4 * count * ls * nc), dtype="<f4")
    return data.reshape(count, ls, nc).copy()


def write_intent_pairs(path, obs: np.ndarray, pred: np.ndarray):
    obs = np.ascontiguousarray(obs, dtype="<f4")
    pred = np.ascontiguousarray(pred, dtype="<f4")
    if obs.ndim != 3 or pred.ndim != 3 or obs.shape[0] != pred.shape[0] or obs.shape[2] != pred.shape[2]:
        raise ShapeMismatchError("intent pairs must be (count, N_o+1, n) and (count, N_p, n)")
    count = obs.shape[0]
    n_obs = obs.shape[1] - 1
    n_pred = pred.shape[1]
    nj = obs.shape[2]
    with open(path, "wb") as f:
        f.write(WINDOW_MAGIC)
        f.write(struct.pack("<IIIIII", WINDOW_VERSION, KIND_INTENT, n_obs, n_pred, nj, count))
        for i in range(count):
            f.write(obs[i].tobytes())
            f.write(pred[i].tobytes())


def read_intent_pairs(path):
    with open(path, "rb") as f:
        if f.read(4) != WINDOW_MAGIC:
            raise ConfigError(f"{path} is not a window container")
        version, kind, n_obs, n_pred, nj, count = struct.unpack("<IIIIII", f.read(24))
        if version != WINDOW_VERSION or kind != KIND_INTENT:
            raise ConfigError("wrong container version/kind")
        rec = (n_obs + 1 + n_pred) * nj
        data = np.frombuffer(f.read(4 * count * rec), dtype="<f4").reshape(count, rec)
    obs = data[:, :(n_obs + 1) * nj].reshape(count, n_obs + 1, nj).copy()
    pred = data[:, (n_obs + 1) * nj:].reshape(count, n_pred, nj).copy()
    return obs, pred


def split_indices(count: int, ratios=(8, 2, 1), gap: int = 0):
    """Contiguous train/test/validation index ranges with optional gaps."""
    total = sum(ratios)
    n_train = int(count * ratios[0] / total)
    n_test = int(count * ratios[1] / total)
    a = np.arange(0, max(n_train - gap, 0))
    b = np.arange(n_train, max(n_train + n_test - gap, n_train))
    c = np.arange(n_train + n_test, count)
    return a, b, c


def collect_dataset(specs, model: dyn.ArmModel, controller_factory, out_dir,
                    rates: Rates = None, dt: float = 1e-3, split=(8, 2, 1)):
    """Run transparent-mode episodes and write windowed training data.

    Produces {intent, anomaly}_{train, test, val}.bin plus one episode CSV per
    scenario. controller_factory() must return a fresh transparent controller.
    """
    import os

    rates = rates or Rates()
    planner_div, detector_div = rates.divisors()
    os.makedirs(out_dir, exist_ok=True)
    parts = {name: {"obs": [], "pred": [], "win": []} for name in ("train", "test", "val")}
    episodes = []

    for k, spec in enumerate(specs):
        human = make_scenario(spec, model)
        rec = run_episode(model, human, controller_factory(), spec.duration, dt=dt,
                          rates=rates, record_extras=False)
        episodes.append(rec)
        if rec.abort is not None:
            continue

        # intention windows at planner rate over the executed motion
        q_planner = rec.q[::planner_div]
        n_win = q_planner.shape[0] - (N_OBS + N_PRED)
        obs = np.stack([q_planner[i:i + N_OBS + 1] for i in range(n_win)]) if n_win > 0 else np.zeros((0, N_OBS + 1, 5))
        pred = np.stack([q_planner[i + N_OBS + 1:i + N_OBS + 1 + N_PRED] for i in range(n_win)]) if n_win > 0 else np.zeros((0, N_PRED, 5))
        tr, te, va = split_indices(n_win, split, gap=N_OBS + N_PRED)
        for name, idx in (("train", tr), ("test", te), ("val", va)):
            parts[name]["obs"].append(obs[idx])
            parts[name]["pred"].append(pred[idx])

        # anomaly windows at detector rate
        rows = rec.detector_channels()[::detector_div]
        n_awin = rows.shape[0] - (L_S - 1)
        wins = np.stack([rows[i:i + L_S] for i in range(n_awin)]) if n_awin > 0 else np.zeros((0, L_S, N_C))
        tr, te, va = split_indices(n_awin, split, gap=L_S)
        for name, idx in (("train", tr), ("test", te), ("val", va)):
            parts[name]["win"].append(wins[idx])

        rec.to_csv(os.path.join(out_dir, f"episode_{k:03d}.csv"))

    paths = {}
    for name in ("train", "test", "val"):
        if parts[name]["obs"]:
            obs = np.concatenate(parts[name]["obs"])
            pred = np.concatenate(parts[name]["pred"])
        else:
            obs = np.zeros((0, N_OBS + 1, 5))
            pred = np.zeros((0, N_PRED, 5))
        p1 = os.path.join(out_dir, f"intent_{name}.bin")
        write_intent_pairs(p1, obs, pred)
        wins = (np.concatenate(parts[name]["win"]) if parts[name]["win"]
                else np.zeros((0, L_S, N_C)))
        p2 = os.path.join(out_dir, f"anomaly_{name}.bin")
        write_anomaly_windows(p2, wins)
        paths[f"intent_{name}"] = p1
        paths[f"anomaly_{name}"] = p2
    return paths, episodes
