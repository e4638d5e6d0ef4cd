"""Reduced-order point-foot biped.

A rigid torso carries two massless legs attached at the hip, each with hip
roll, hip pitch and a prismatic length joint. Joint order per leg is
``(pitch, roll, length)``; the full vector is ``[left..., right...]``.

A stance leg pins its foot to the terrain: the length actuator pushes along
the leg and the hip torques become ground-reaction forces perpendicular to
the leg (a massless leg carries no moment at the point foot). The torso gets
the reaction torque. Swing legs are driven to their PD targets through a
small reflected actuator inertia and exert nothing on the torso.

All state arrays carry a leading environment axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

import numpy as np

from stablewalk.errors import ConfigurationError, InvalidStateError, SimulationDivergedError, TerrainError
from stablewalk.terrain import HeightmapStack

N_JOINTS = 6
PITCH, ROLL, LENGTH = 0, 1, 2
GRAVITY = 9.81
_EZ = np.array([0.0, 0.0, 1.0])


@dataclass(frozen=True)
class PdGains:
    kp: float = 40.0
    kd: float = 2.5

    def __post_init__(self):
        if not self.kp > 0 or self.kd < 0:
            raise ConfigurationError(f"invalid PD gains kp={self.kp}, kd={self.kd}")


@dataclass(frozen=True)
class SimConfig:
    mass: float = 12.0
    inertia: tuple[float, float, float] = (0.15, 0.12, 0.08)
    standing_height: float = 0.58
    leg_length_range: tuple[float, float] = (0.3, 0.7)
    hip_pitch_limit: float = 1.0
    hip_roll_limit: float = 0.5
    length_gear: float = 50.0
    torque_limits: tuple[float, float, float] = (30.0, 30.0, 10.0)
    swing_inertia: tuple[float, float, float] = (0.02, 0.02, 0.5)
    gains: PdGains = field(default_factory=PdGains)
    action_scale: tuple[float, float, float] = (0.25, 0.25, 0.05)
    action_clip: float = 5.0
    control_dt: float = 0.02
    substeps: int = 4
    gait_period: float = 0.5
    swing_clearance: float = 0.08
    gait_enabled: bool = True
    # Low-level balance reflex: capture-point style swing placement and torso levelling.
    reflex_enabled: bool = True
    reflex_placement_gain: float = 0.225
    reflex_max_step: float = 0.3
    reflex_attitude_gain: float = 1.0
    min_stance_time: float = 0.1
    touchdown_tolerance: float = 1e-3
    trip_depth: float = 0.03
    slip_damping: float = 300.0
    foot_patch_radius: float = 0.03
    torso_radius: float = 0.12
    min_height: float = 0.3
    max_gravity_deviation: float = 0.7
    episode_steps: int = 500

    def __post_init__(self):
        if self.mass <= 0 or min(self.inertia) <= 0 or self.substeps < 1 or self.control_dt <= 0:
            raise ConfigurationError("mass, inertia, substeps and control_dt must be positive")
        lo, hi = self.leg_length_range
        if not 0 < lo < self.standing_height < hi:
            raise ConfigurationError("standing_height must lie inside leg_length_range")

    @property
    def dt(self) -> float:
        return self.control_dt / self.substeps

    @property
    def preload_length(self) -> float:
        """Length target at which one stance leg carries the nominal weight at z_c."""
        return self.standing_height + self.mass * GRAVITY / (self.gains.kp * self.length_gear)

    def joint_limits(self) -> tuple[np.ndarray, np.ndarray]:
        lo_leg = np.array([-self.hip_pitch_limit, -self.hip_roll_limit, self.leg_length_range[0]])
        hi_leg = np.array([self.hip_pitch_limit, self.hip_roll_limit, self.leg_length_range[1]])
        return np.tile(lo_leg, 2), np.tile(hi_leg, 2)

    def default_pose(self) -> np.ndarray:
        return np.tile([0.0, 0.0, self.standing_height], 2)


@dataclass(frozen=True)
class Disturbance:
    force: tuple[float, float, float] = (0.0, 0.0, 0.0)
    torque: tuple[float, float, float] = (0.0, 0.0, 0.0)
    duration: float = 0.1

    def __post_init__(self):
        if not self.duration > 0:
            raise ConfigurationError(f"disturbance duration must be positive, got {self.duration}")


# Paper-reported push experiment ranges (N, N*m) for a robot of REFERENCE_MASS kg.
PUSH_REGIMES = {
    "none": (0.0, 0.0),
    "moderate": (50.0, 5.0),
    "extreme": (400.0, 20.0),
}
REFERENCE_MASS = 12.0


def push_limits(regime: str, mass: float) -> tuple[float, float]:
    """Force/torque bounds of a push regime, scaled by model mass over the reference mass."""
    if regime not in PUSH_REGIMES:
        raise ConfigurationError(f"unknown push regime {regime!r}")
    f, t = PUSH_REGIMES[regime]
    scale = mass / REFERENCE_MASS
    return f * scale, t * scale


# Uniform ranges sampled per episode.
DR_RANGES = {
    "payload_mass": (-1.0, 3.0),
    "com_shift": ((-3.0, 3.0), (-2.0, 2.0), (-3.0, 3.0)),
    "friction": (0.4, 1.2),
    "restitution": (0.25, 0.75),
    "kp_scale": (0.8, 1.2),
    "kd_scale": (0.8, 1.2),
    "motor_strength_scale": (0.8, 1.2),
    "system_delay": (0.0, 20.0),
    "camera_pos_offset": (-10.0, 10.0),
    "camera_pitch_offset": (-1.0, 1.0),
    "camera_fov_offset": (-1.0, 1.0),
}


@dataclass(frozen=True)
class DomainRandomization:
    """Per-episode physical and sensing perturbations.

    Units follow the sampling table: kg, cm, ms, mm and degrees. Restitution is
    sampled and recorded but has no effect on massless-leg contacts.
    """

    payload_mass: float = 0.0
    com_shift: tuple[float, float, float] = (0.0, 0.0, 0.0)
    friction: float = 1.0
    restitution: float = 0.5
    kp_scale: float = 1.0
    kd_scale: float = 1.0
    motor_strength_scale: float = 1.0
    system_delay: float = 0.0
    camera_pos_offset: tuple[float, float, float] = (0.0, 0.0, 0.0)
    camera_pitch_offset: float = 0.0
    camera_fov_offset: float = 0.0

    def delay_substeps(self, config: SimConfig) -> int:
        return int(round(self.system_delay * 1e-3 / config.dt))


def sample_domain_randomization(rng: np.random.Generator) -> DomainRandomization:
    """Draw every field uniformly from its range."""
    r = DR_RANGES
    return DomainRandomization(
        payload_mass=float(rng.uniform(*r["payload_mass"])),
        com_shift=tuple(float(rng.uniform(lo, hi)) for lo, hi in r["com_shift"]),
        friction=float(rng.uniform(*r["friction"])),
        restitution=float(rng.uniform(*r["restitution"])),
        kp_scale=float(rng.uniform(*r["kp_scale"])),
        kd_scale=float(rng.uniform(*r["kd_scale"])),
        motor_strength_scale=float(rng.uniform(*r["motor_strength_scale"])),
        system_delay=float(rng.uniform(*r["system_delay"])),
        camera_pos_offset=tuple(float(v) for v in rng.uniform(*r["camera_pos_offset"], size=3)),
        camera_pitch_offset=float(rng.uniform(*r["camera_pitch_offset"])),
        camera_fov_offset=float(rng.uniform(*r["camera_fov_offset"])),
    )


def pd_torques(action, nominal, q, qd, gains: PdGains = PdGains(), torque_limit=None,
               kp_scale=1.0, kd_scale=1.0, motor_strength_scale=1.0):
    """kp * ((nominal + action) - q) - kd * qd, clipped to the scaled torque limit."""
    tau = (kp_scale * gains.kp) * ((np.asarray(nominal) + np.asarray(action)) - np.asarray(q)) \
        - (kd_scale * gains.kd) * np.asarray(qd)
    if torque_limit is not None:
        limit = np.asarray(motor_strength_scale) * np.asarray(torque_limit)
        tau = np.clip(tau, -limit, limit)
    return tau


@dataclass
class RobotState:
    """Batched robot state; every array has a leading environment axis.

    Hip joint positions are in rad, leg lengths in m. ``orientation`` is a
    ``(w, x, y, z)`` quaternion and ``ang_vel`` is expressed in the world frame.
    """

    com_pos: np.ndarray
    com_vel: np.ndarray
    orientation: np.ndarray
    ang_vel: np.ndarray
    q: np.ndarray
    qd: np.ndarray
    q_dd: np.ndarray
    tau: np.ndarray
    stance: np.ndarray
    foot_pos: np.ndarray
    contact_force: np.ndarray
    phase: np.ndarray
    slipping: np.ndarray
    stance_timer: np.ndarray
    zmp: np.ndarray
    ext_wrench: np.ndarray
    push_remaining: np.ndarray
    action: np.ndarray
    last_action: np.ndarray
    prev_last_action: np.ndarray
    step_count: np.ndarray
    n_collision: np.ndarray
    n_limit: np.ndarray
    terrain_index: np.ndarray
    # Per-environment physical parameters derived from domain randomisation.
    mass: np.ndarray
    hip_offset: np.ndarray
    friction: np.ndarray
    kp_scale: np.ndarray
    kd_scale: np.ndarray
    motor_scale: np.ndarray
    delay_substeps: np.ndarray

    @property
    def n_envs(self) -> int:
        return self.com_pos.shape[0]

    def copy(self) -> "RobotState":
        return RobotState(**{f.name: getattr(self, f.name).copy() for f in fields(self)})

    def select(self, idx) -> "RobotState":
        return RobotState(**{f.name: getattr(self, f.name)[idx].copy() for f in fields(self)})

    def assign(self, idx, other: "RobotState") -> None:
        for f in fields(self):
            getattr(self, f.name)[idx] = getattr(other, f.name)

    def rotation(self) -> np.ndarray:
        return quat_to_matrix(self.orientation)

    def validate(self) -> None:
        norms = np.linalg.norm(self.orientation, axis=-1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise InvalidStateError("orientation quaternion is not unit length")
        for f in fields(self):
            arr = getattr(self, f.name)
            if arr.dtype.kind == "f" and not np.all(np.isfinite(arr)):
                raise InvalidStateError(f"state field {f.name} is not finite")


def concat_states(states: list[RobotState]) -> RobotState:
    return RobotState(**{f.name: np.concatenate([getattr(s, f.name) for s in states])
                         for f in fields(RobotState)})


# --- rotations -----------------------------------------------------------------------------

def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    out = np.empty(q.shape[:-1] + (3, 3))
    out[..., 0, 0] = 1 - 2 * (y * y + z * z)
    out[..., 0, 1] = 2 * (x * y - w * z)
    out[..., 0, 2] = 2 * (x * z + w * y)
    out[..., 1, 0] = 2 * (x * y + w * z)
    out[..., 1, 1] = 1 - 2 * (x * x + z * z)
    out[..., 1, 2] = 2 * (y * z - w * x)
    out[..., 2, 0] = 2 * (x * z - w * y)
    out[..., 2, 1] = 2 * (y * z + w * x)
    out[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return out


def quat_from_euler(roll, pitch, yaw) -> np.ndarray:
    cr, sr = np.cos(roll / 2), np.sin(roll / 2)
    cp, sp = np.cos(pitch / 2), np.sin(pitch / 2)
    cy, sy = np.cos(yaw / 2), np.sin(yaw / 2)
    return np.stack([
        cr * cp * cy + sr * sp * sy,
        sr * cp * cy - cr * sp * sy,
        cr * sp * cy + sr * cp * sy,
        cr * cp * sy - sr * sp * cy,
    ], axis=-1)


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def yaw_of(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    return np.arctan2(2 * (w * z + x * y), 1 - 2 * (y * y + z * z))


def projected_gravity(R: np.ndarray) -> np.ndarray:
    """Unit gravity direction expressed in the torso frame."""
    return -R[..., 2, :]


def leg_direction_body(pitch: np.ndarray, roll: np.ndarray) -> np.ndarray:
    """Unit hip-to-foot direction in the torso frame: Rx(roll) Ry(pitch) (0, 0, -1)."""
    cp, sp = np.cos(pitch), np.sin(pitch)
    cr, sr = np.cos(roll), np.sin(roll)
    return np.stack([-sp, sr * cp, -cr * cp], axis=-1)


def _matvec(R, v):
    return np.einsum("...ij,...j->...i", R, v)


def _matTvec(R, v):
    return np.einsum("...ji,...j->...i", R, v)


# --- gait clock ------------------------------------------------------------------------------

def nominal_pose(phase: np.ndarray, config: SimConfig) -> np.ndarray:
    """Nominal joint targets; the gait clock retracts each leg during its half cycle.

    Leg 0 swings for phase in [0, 0.5), leg 1 for [0.5, 1). The retraction
    profile is sin^2 so targets stay continuous in time.
    """
    n = phase.shape[0]
    out = np.zeros((n, N_JOINTS))
    l_pre = config.preload_length
    if not config.gait_enabled:
        out[:, LENGTH] = l_pre
        out[:, 3 + LENGTH] = l_pre
        return out
    depth = l_pre - (config.standing_height - config.swing_clearance)
    for leg, start in ((0, 0.0), (1, 0.5)):
        local = phase - start
        active = (local >= 0.0) & (local < 0.5)
        bump = np.where(active, np.sin(np.pi * local / 0.5) ** 2, 0.0)
        out[:, 3 * leg + LENGTH] = l_pre - depth * bump
    return out


def balance_reflex(state: RobotState, config: SimConfig) -> np.ndarray:
    """Hip pitch/roll targets of the low-level balance reflex, shape (N, 6).

    Swing legs aim the foot ``reflex_placement_gain * v`` ahead of the hip in the
    horizontal plane (a LIPM capture-point heuristic for zero velocity); stance
    legs add torso-levelling feedback on top of their current angles. Length
    entries are zero. The policy's offsets are added to these targets.
    """
    n = state.n_envs
    out = np.zeros((n, N_JOINTS))
    if not config.reflex_enabled:
        return out
    R = quat_to_matrix(state.orientation)
    g = projected_gravity(R)
    step = np.clip(config.reflex_placement_gain * state.com_vel[:, :2], -config.reflex_max_step,
                   config.reflex_max_step)
    for leg in (0, 1):
        sl = 3 * leg
        length = state.q[:, sl + LENGTH]
        dz = -np.sqrt(np.maximum(length ** 2 - np.sum(step ** 2, axis=-1), 1e-6))
        d_world = np.column_stack([step, dz]) / length[:, None]
        d_body = _matTvec(R, d_world)
        swing_pitch = np.arcsin(np.clip(-d_body[:, 0], -1.0, 1.0))
        swing_roll = np.arctan2(d_body[:, 1], -d_body[:, 2])
        k = config.reflex_attitude_gain
        stance_pitch = state.q[:, sl + PITCH] + k * g[:, 0]
        stance_roll = state.q[:, sl + ROLL] - k * g[:, 1]
        st = state.stance[:, leg]
        out[:, sl + PITCH] = np.where(st, stance_pitch, swing_pitch)
        out[:, sl + ROLL] = np.where(st, stance_roll, swing_roll)
    return out


# --- construction -----------------------------------------------------------------------------

def _physical_params(dr_list: list[DomainRandomization], config: SimConfig) -> dict:
    return {
        "mass": np.array([config.mass + d.payload_mass for d in dr_list]),
        # Hips sit at the geometric centre; shifting the CoM moves the hips the other way.
        "hip_offset": -0.01 * np.array([d.com_shift for d in dr_list], dtype=np.float64),
        "friction": np.array([d.friction for d in dr_list]),
        "kp_scale": np.array([d.kp_scale for d in dr_list]),
        "kd_scale": np.array([d.kd_scale for d in dr_list]),
        "motor_scale": np.array([d.motor_strength_scale for d in dr_list]),
        "delay_substeps": np.array([d.delay_substeps(config) for d in dr_list], dtype=np.int64),
    }


def reset(terrain: HeightmapStack, dr: DomainRandomization | list[DomainRandomization], seed,
          config: SimConfig = SimConfig(), terrain_index=None, spawn_xy=None,
          yaw=None) -> RobotState:
    """Place robots at valid spawn cells in the nominal standing pose.

    ``seed`` may be an int or a sequence (one per environment); it only picks
    the spawn jitter and heading when those are not given explicitly. The right
    leg starts in stance with both feet on the terrain below the hip.
    """
    dr_list = list(dr) if isinstance(dr, (list, tuple)) else [dr]
    n = len(dr_list)
    seeds = np.atleast_1d(np.asarray(seed, dtype=np.int64))
    if seeds.size == 1 and n > 1:
        seeds = np.full(n, seeds[0])
    idx = np.zeros(n, dtype=np.int64) if terrain_index is None else \
        np.broadcast_to(np.asarray(terrain_index, dtype=np.int64), (n,)).copy()
    if spawn_xy is None or yaw is None:
        draws = np.array([np.random.default_rng(int(s)).uniform(-1.0, 1.0, size=3) for s in seeds])
    xy = np.zeros((n, 2)) if spawn_xy is None else np.broadcast_to(np.asarray(spawn_xy, float), (n, 2)).copy()
    if spawn_xy is None:
        xy = 0.15 * draws[:, :2]
    heading = np.pi * draws[:, 2] if yaw is None else np.broadcast_to(np.asarray(yaw, float), (n,)).copy()
    ground = _find_spawn(terrain, idx, xy)
    params = _physical_params(dr_list, config)
    pos = np.column_stack([xy, ground + config.standing_height])
    quat = quat_from_euler(np.zeros(n), np.zeros(n), heading)
    R = quat_to_matrix(quat)
    hip = pos + _matvec(R, params["hip_offset"])
    foot = np.stack([hip.copy(), hip.copy()], axis=1)
    foot[:, :, 2] = ground[:, None]
    q = np.tile([0.0, 0.0, config.standing_height], (n, 2))
    q[:, LENGTH] = hip[:, 2] - ground
    q[:, 3 + LENGTH] = hip[:, 2] - ground
    zeros = lambda *s: np.zeros((n,) + s)
    return RobotState(
        com_pos=pos, com_vel=zeros(3), orientation=quat, ang_vel=zeros(3),
        q=q, qd=zeros(6), q_dd=zeros(6), tau=zeros(6),
        stance=np.tile([False, True], (n, 1)), foot_pos=foot, contact_force=zeros(2, 3),
        phase=zeros(), slipping=np.zeros((n, 2), dtype=bool), stance_timer=zeros(),
        zmp=foot[:, 1, :2].copy(), ext_wrench=zeros(6), push_remaining=zeros(),
        action=zeros(6), last_action=zeros(6), prev_last_action=zeros(6),
        step_count=np.zeros(n, dtype=np.int64), n_collision=zeros(), n_limit=zeros(),
        terrain_index=idx, **params,
    )


def _find_spawn(terrain: HeightmapStack, idx: np.ndarray, xy: np.ndarray) -> np.ndarray:
    """Ground height at ``xy``; moves to the flattest nearby cell when the footprint is uneven."""
    offsets = np.array([[0, 0], [0.1, 0], [-0.1, 0], [0, 0.1], [0, -0.1]])
    ground = terrain.height_at(idx, xy[:, 0], xy[:, 1])
    for k in range(len(idx)):
        pts = xy[k] + offsets
        h = terrain.height_at(np.full(5, idx[k]), pts[:, 0], pts[:, 1])
        if np.ptp(h) <= 0.05:
            continue
        found = False
        for radius in np.arange(0.1, 1.01, 0.1):
            for ang in np.linspace(0, 2 * np.pi, 16, endpoint=False):
                cand = xy[k] + radius * np.array([np.cos(ang), np.sin(ang)])
                hc = terrain.height_at(np.full(5, idx[k]), (cand + offsets)[:, 0], (cand + offsets)[:, 1])
                if np.ptp(hc) <= 0.05:
                    xy[k] = cand
                    ground[k] = hc[0]
                    found = True
                    break
            if found:
                break
        if not found:
            raise TerrainError(f"no valid spawn cell near {xy[k]} on terrain {idx[k]}")
    return ground


def apply_push(state: RobotState, d: Disturbance, regime: str = "extreme",
               envs=None) -> RobotState:
    """Attach an external wrench to the torso for ``d.duration`` seconds."""
    f_lim, t_lim = push_limits(regime, REFERENCE_MASS)
    force = np.asarray(d.force, dtype=np.float64)
    torque = np.asarray(d.torque, dtype=np.float64)
    if np.any(np.abs(force) > f_lim + 1e-9) or np.any(np.abs(torque) > t_lim + 1e-9):
        raise ConfigurationError(
            f"wrench {force}, {torque} outside the {regime} range (+-{f_lim} N, +-{t_lim} N*m)")
    out = state.copy()
    sel = slice(None) if envs is None else envs
    out.ext_wrench[sel] = np.concatenate([force, torque])
    out.push_remaining[sel] = d.duration
    return out


# --- dynamics ----------------------------------------------------------------------------------

@dataclass
class StepInfo:
    """Per control step contact bookkeeping used by rewards and diagnostics."""

    touchdowns: np.ndarray
    slip_events: np.ndarray
    trips: np.ndarray
    limit_hits: np.ndarray


def _stance_joint_state(state: RobotState, R, hip, hip_vel, leg: int):
    L = hip - state.foot_pos[:, leg]
    length = np.linalg.norm(L, axis=-1)
    u = L / length[:, None]
    d_body = _matTvec(R, -u)
    pitch = -np.arcsin(np.clip(d_body[:, 0], -1.0, 1.0))
    roll = np.arctan2(d_body[:, 1], -d_body[:, 2])
    foot_vel = np.zeros_like(hip_vel)
    rel = hip_vel - foot_vel
    ldot = np.sum(u * rel, axis=-1)
    d_world_dot = -(rel - u * ldot[:, None]) / length[:, None]
    d_body_dot = _matTvec(R, d_world_dot - np.cross(state.ang_vel, -u))
    pitch_dot = -d_body_dot[:, 0] / np.maximum(np.cos(pitch), 1e-6)
    denom = d_body[:, 1] ** 2 + d_body[:, 2] ** 2
    roll_dot = (-d_body_dot[:, 1] * d_body[:, 2] + d_body[:, 1] * d_body_dot[:, 2]) / np.maximum(denom, 1e-12)
    q = np.stack([pitch, roll, length], axis=-1)
    qd = np.stack([pitch_dot, roll_dot, ldot], axis=-1)
    return q, qd, u, length


def _hip_axes(R, roll):
    a_roll = R[..., :, 0]
    a_pitch = _matvec(R, np.stack([np.zeros_like(roll), np.cos(roll), np.sin(roll)], axis=-1))
    return a_roll, a_pitch


def substep(state: RobotState, target: np.ndarray, terrain: HeightmapStack, config: SimConfig,
            info: StepInfo) -> None:
    """Advance ``state`` in place by one physics substep of ``config.dt``."""
    dt = config.dt
    n = state.n_envs
    R = quat_to_matrix(state.orientation)
    hip_arm = _matvec(R, state.hip_offset)
    hip = state.com_pos + hip_arm
    hip_vel = state.com_vel + np.cross(state.ang_vel, hip_arm)
    gains = config.gains
    lim = np.tile(config.torque_limits, 2)[None, :] * state.motor_scale[:, None]
    kp = gains.kp * state.kp_scale
    kd = gains.kd * state.kd_scale
    q_lo, q_hi = config.joint_limits()
    J = np.array(config.swing_inertia)
    # The length actuator acts through the gear, so its swing dynamics are in force units.
    gear = np.array([1.0, 1.0, config.length_gear])[None, :]

    force = np.zeros((n, 3))
    torque = np.zeros((n, 3))
    force[:, 2] -= state.mass * GRAVITY
    active = state.push_remaining > 0
    force += np.where(active[:, None], state.ext_wrench[:, :3], 0.0)
    torque += np.where(active[:, None], state.ext_wrench[:, 3:], 0.0)
    state.contact_force[:] = 0.0
    state.slipping[:] = False

    for leg in (0, 1):
        sl = slice(3 * leg, 3 * leg + 3)
        st = state.stance[:, leg]
        # Stance legs: joint coordinates follow from geometry.
        q_st, qd_st, u, length = _stance_joint_state(state, R, hip, hip_vel, leg)
        tau = kp[:, None] * (target[:, sl] - q_st) - kd[:, None] * qd_st
        tau = np.clip(tau, -lim[:, sl], lim[:, sl])
        a_roll, a_pitch = _hip_axes(R, q_st[:, ROLL])
        tau_w = tau[:, ROLL, None] * a_roll + tau[:, PITCH, None] * a_pitch
        tau_perp = tau_w - u * np.sum(tau_w * u, axis=-1, keepdims=True)
        f_ground = (config.length_gear * tau[:, LENGTH])[:, None] * u \
            + np.cross(tau_perp, u) / length[:, None]
        normal = f_ground[:, 2]
        # A leg that would pull on the ground lifts off.
        lift = st & (normal <= 0.0)
        # Over-extended legs cannot push further.
        lift |= st & (length > config.leg_length_range[1])
        st_eff = st & ~lift
        tangential = f_ground.copy()
        tangential[:, 2] = 0.0
        t_norm = np.linalg.norm(tangential, axis=-1)
        max_t = state.friction * np.maximum(normal, 0.0)
        slip = st_eff & (t_norm > max_t)
        shrink = np.where(slip, max_t / np.maximum(t_norm, 1e-12), 1.0)
        f_contact = tangential * shrink[:, None]
        f_contact[:, 2] = np.maximum(normal, 0.0)
        f_contact = np.where(st_eff[:, None], f_contact, 0.0)
        # Length-limit compression is a hard stop counted as a joint-limit hit.
        info.limit_hits[:, leg] |= st_eff & (length < config.leg_length_range[0])
        force += f_contact
        torque += np.cross(hip_arm, f_contact) - np.where(st_eff[:, None], tau_w, 0.0)
        state.contact_force[:, leg] = f_contact
        state.slipping[:, leg] = slip
        if np.any(slip):
            excess = np.where(slip, t_norm - max_t, 0.0)
            direction = tangential / np.maximum(t_norm, 1e-12)[:, None]
            state.foot_pos[:, leg, :2] -= (dt * excess / config.slip_damping)[:, None] * direction[:, :2]
            fp = state.foot_pos[:, leg]
            fz = terrain.height_at(state.terrain_index, fp[:, 0], fp[:, 1])
            state.foot_pos[:, leg, 2] = np.where(slip, fz, fp[:, 2])

        # Swing legs: implicit PD on the reflected inertia, then clamp to joint limits.
        q_sw = state.q[:, sl]
        qd_sw = np.where(lift[:, None], 0.0, state.qd[:, sl])
        q_sw = np.where(lift[:, None], q_st, q_sw)
        h = dt * gear / J[None, :]
        qd_new = (qd_sw + h * kp[:, None] * (target[:, sl] - q_sw)) / (1.0 + h * (kd[:, None] + dt * kp[:, None]))
        q_new = q_sw + dt * qd_new
        lo, hi = q_lo[sl], q_hi[sl]
        hit = (q_new < lo) | (q_new > hi)
        q_new = np.clip(q_new, lo, hi)
        qd_new = np.where(hit, 0.0, qd_new)
        tau_sw = np.clip(kp[:, None] * (target[:, sl] - q_new) - kd[:, None] * qd_new,
                         -lim[:, sl], lim[:, sl])
        swing_now = ~st_eff
        state.q[:, sl] = np.where(swing_now[:, None], q_new, q_st)
        state.qd[:, sl] = np.where(swing_now[:, None], qd_new, qd_st)
        state.tau[:, sl] = np.where(swing_now[:, None], tau_sw, tau)
        state.stance[:, leg] = st_eff

    # Rigid torso integration, semi-implicit Euler.
    acc = force / state.mass[:, None]
    state.com_vel += dt * acc
    state.com_pos += dt * state.com_vel
    I_body = np.array(config.inertia)
    I_world = np.einsum("nij,j,nkj->nik", R, I_body, R)
    # Torsional friction of the foot patches: stops yaw spin up to mu * N * r.
    yaw_cap = state.friction * config.foot_patch_radius * state.contact_force[:, :, 2].sum(axis=1)
    yaw_stop = -(I_world[:, 2, 2] * state.ang_vel[:, 2] / dt + torque[:, 2])
    torque[:, 2] += np.clip(yaw_stop, -yaw_cap, yaw_cap)
    L = np.einsum("nij,nj->ni", I_world, state.ang_vel)
    ang_acc = np.linalg.solve(I_world, (torque - np.cross(state.ang_vel, L))[..., None])[..., 0]
    state.ang_vel += dt * ang_acc
    angle = np.linalg.norm(state.ang_vel, axis=-1) * dt
    axis = state.ang_vel / np.maximum(np.linalg.norm(state.ang_vel, axis=-1), 1e-12)[:, None]
    dq = np.column_stack([np.cos(angle / 2), axis * np.sin(angle / 2)[:, None]])
    quat = quat_mul(dq, state.orientation)
    state.orientation = quat / np.linalg.norm(quat, axis=-1, keepdims=True)
    state.push_remaining = np.maximum(state.push_remaining - dt, 0.0)
    state.stance_timer += dt

    # Swing feet follow the legs; check touchdown against the terrain.
    R = quat_to_matrix(state.orientation)
    hip = state.com_pos + _matvec(R, state.hip_offset)
    for leg in (0, 1):
        sl = slice(3 * leg, 3 * leg + 3)
        sw = ~state.stance[:, leg]
        d_body = leg_direction_body(state.q[:, sl][:, PITCH], state.q[:, sl][:, ROLL])
        new_foot = hip + state.q[:, sl][:, LENGTH, None] * _matvec(R, d_body)
        old_z = state.foot_pos[:, leg, 2]
        ground = terrain.height_at(state.terrain_index, new_foot[:, 0], new_foot[:, 1])
        depth = ground - new_foot[:, 2]
        descending = new_foot[:, 2] < old_z
        any_stance = state.stance.any(axis=1)
        allowed = (state.stance_timer >= config.min_stance_time) | ~any_stance
        touch = sw & descending & (depth >= -config.touchdown_tolerance) & allowed \
            & (depth <= config.trip_depth)
        trip = sw & (depth > config.trip_depth)
        info.trips[:, leg] |= trip
        new_foot[:, 2] = np.where(touch, ground, new_foot[:, 2])
        state.foot_pos[:, leg] = np.where(sw[:, None], new_foot, state.foot_pos[:, leg])
        state.stance[:, leg] |= touch
        state.stance_timer = np.where(touch, 0.0, state.stance_timer)
        info.touchdowns[:, leg] |= touch
        info.slip_events[:, leg] |= state.slipping[:, leg]

    # Zero-moment point proxy: normal-force weighted contact point.
    normals = state.contact_force[:, :, 2]
    total_n = normals.sum(axis=1)
    cop = np.einsum("nk,nkj->nj", normals, state.foot_pos[:, :, :2]) / np.maximum(total_n, 1e-12)[:, None]
    state.zmp = np.where((total_n > 0)[:, None], cop, state.zmp)
    if config.gait_enabled:
        state.phase = np.mod(state.phase + dt / config.gait_period, 1.0)


def physics_step(state: RobotState, action: np.ndarray, terrain: HeightmapStack,
                 config: SimConfig, snapshot=None) -> tuple[RobotState, StepInfo]:
    """Advance one control period; returns a new state and contact bookkeeping.

    ``action`` is the raw policy output (clipped to ``action_clip``). With a
    system delay of ``k`` substeps the previous action stays active for the
    first ``k`` substeps. ``snapshot(state, substep)`` is called after every
    substep when given.
    """
    action = np.clip(np.asarray(action, dtype=np.float64), -config.action_clip, config.action_clip)
    if not np.all(np.isfinite(action)):
        raise InvalidStateError("action contains non-finite values")
    s = state.copy()
    n = s.n_envs
    scale = np.tile(config.action_scale, 2)
    qd_before = s.qd.copy()
    flags = lambda: np.zeros((n, 2), dtype=bool)
    info = StepInfo(touchdowns=flags(), slip_events=flags(), trips=flags(), limit_hits=flags())
    for k in range(config.substeps):
        applied = np.where((k < s.delay_substeps)[:, None], s.action, action)
        target = nominal_pose(s.phase, config) + balance_reflex(s, config) + scale * applied
        substep(s, target, terrain, config, info)
        if snapshot is not None:
            snapshot(s, k)
        if not (np.all(np.isfinite(s.com_pos)) and np.all(np.isfinite(s.orientation))
                and np.all(np.isfinite(s.q))):
            raise SimulationDivergedError(f"non-finite state after substep {k}")
    s.q_dd = (s.qd - qd_before) / config.control_dt
    q_lo, q_hi = config.joint_limits()
    at_limit = (s.q <= q_lo + 1e-9) | (s.q >= q_hi - 1e-9)
    at_limit[:, [LENGTH, 3 + LENGTH]] |= info.limit_hits
    s.n_limit = np.sum(at_limit, axis=1).astype(np.float64)
    s.n_collision = np.sum(info.trips, axis=1).astype(np.float64)
    s.prev_last_action = s.last_action
    s.last_action = s.action
    s.action = action.copy()
    s.step_count = s.step_count + 1
    return s, info


def mechanical_energy(state: RobotState, config: SimConfig) -> np.ndarray:
    """Kinetic + gravitational + stored PD spring energy (zero-action targets).

    Swing legs also contribute their reflected-inertia kinetic energy. Used
    by the passive-dissipation property checks.
    """
    R = quat_to_matrix(state.orientation)
    I_world = np.einsum("nij,j,nkj->nik", R, np.array(config.inertia), R)
    ke = 0.5 * state.mass * np.sum(state.com_vel ** 2, axis=-1)
    ke += 0.5 * np.einsum("ni,nij,nj->n", state.ang_vel, I_world, state.ang_vel)
    pe = state.mass * GRAVITY * state.com_pos[:, 2]
    target = nominal_pose(state.phase, config)
    kp = config.gains.kp * state.kp_scale
    spring = np.tile([1.0, 1.0, config.length_gear], 2)
    err = target - state.q
    pe += 0.5 * kp * np.sum(spring * err * err, axis=-1)
    J = np.tile(config.swing_inertia, 2)
    swing = np.repeat(~state.stance, 3, axis=1)
    ke += 0.5 * np.sum(np.where(swing, J * state.qd ** 2, 0.0), axis=-1)
    return ke + pe


def with_config(config: SimConfig, **changes) -> SimConfig:
    return replace(config, **changes)
