"""Stability-prioritised reward system.

All functions accept scalars/vectors or arrays with a leading batch axis; the
last axis holds vector components.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from stablewalk.errors import ConfigurationError

DIRECTION_EPS = 1e-3

REG_TERMS = (
    "ang_vel_tracking",
    "lin_vel_z",
    "joint_accel",
    "joint_power",
    "joint_torque",
    "action_rate",
    "action_smoothness",
    "collision",
    "joint_limit",
)


@dataclass(frozen=True)
class RewardConfig:
    """Term weights and formulation switches.

    ``velocity_form`` selects the linear tracking reward: ``"decoupled"``
    (direction + magnitude) or ``"l2"`` (single exp of the squared error,
    fused with the stable reward). ``fusion`` is ``"rfm"`` (magnitude term
    scaled by the stable reward), ``"strict"`` (whole linear reward scaled)
    or ``"additive"`` (no scaling). ``use_stable_reward=False`` replaces the
    stability group with ``stable_constant`` and leaves tracking unscaled.
    """

    stable: float = 1.0
    lin_direction: float = 0.5
    lin_magnitude: float = 0.5
    lin_l2: float = 1.0
    tracking_scale: float = 4.0
    ang_vel_tracking: float = 0.5
    lin_vel_z: float = -2.0
    joint_accel: float = -2.5e-7
    joint_power: float = -2e-5
    joint_torque: float = -1e-4
    action_rate: float = -0.01
    action_smoothness: float = -0.01
    collision: float = -1.0
    joint_limit: float = -2.0
    velocity_form: str = "decoupled"
    fusion: str = "rfm"
    use_stable_reward: bool = True
    stable_constant: float = 0.01
    conventional_smoothness: bool = False

    def __post_init__(self):
        for name in ("stable", "lin_direction", "lin_magnitude", "lin_l2", "ang_vel_tracking",
                     "tracking_scale"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"tracking weight {name} must be >= 0")
        for name in ("lin_vel_z", "joint_accel", "joint_power", "joint_torque", "action_rate",
                     "action_smoothness", "collision", "joint_limit"):
            if getattr(self, name) > 0:
                raise ConfigurationError(f"penalty weight {name} must be <= 0")
        if self.velocity_form not in ("decoupled", "l2"):
            raise ConfigurationError(f"unknown velocity_form {self.velocity_form!r}")
        if self.fusion not in ("rfm", "strict", "additive"):
            raise ConfigurationError(f"unknown fusion {self.fusion!r}")


@dataclass
class RewardBreakdown:
    r_stable: np.ndarray
    p_e: np.ndarray
    z_e: np.ndarray
    omega_e: np.ndarray
    d_e: np.ndarray
    m_e: np.ndarray
    r_lin: np.ndarray
    r_reg: np.ndarray
    reg_terms: dict[str, np.ndarray] = field(default_factory=dict)
    group_stability: np.ndarray = 0.0
    group_locomotion: np.ndarray = 0.0
    total: np.ndarray = 0.0

    def columns(self) -> dict[str, np.ndarray]:
        """Flat per-term view used for CSV logging."""
        out = {
            "r_stable": self.r_stable,
            "r_lin": self.r_lin,
            "d_e": self.d_e,
            "m_e": self.m_e,
            "r_reg": self.r_reg,
            "group_stability": self.group_stability,
            "group_locomotion": self.group_locomotion,
            "total": self.total,
        }
        out.update({f"reg_{k}": v for k, v in self.reg_terms.items()})
        return out


def stable_reward(p_e, z_e, omega_e):
    """exp(-||p_e||_2 - |z_e| - ||omega_e||_1), always in (0, 1]."""
    p_e = np.asarray(p_e, dtype=np.float64)
    omega_e = np.asarray(omega_e, dtype=np.float64)
    err = np.linalg.norm(p_e, axis=-1) + np.abs(z_e) + np.sum(np.abs(omega_e), axis=-1)
    return np.exp(-err)


def direction_similarity(v_cmd_xy, v_xy, eps: float = DIRECTION_EPS):
    """Cosine similarity with defined values for near-zero vectors.

    A near-zero command counts as directionally satisfied (1); a near-zero
    actual velocity under a real command gives 0.
    """
    v_cmd_xy = np.asarray(v_cmd_xy, dtype=np.float64)
    v_xy = np.asarray(v_xy, dtype=np.float64)
    n_cmd = np.linalg.norm(v_cmd_xy, axis=-1)
    n_v = np.linalg.norm(v_xy, axis=-1)
    dot = np.sum(v_cmd_xy * v_xy, axis=-1)
    degenerate = (n_cmd < eps) | (n_v < eps)
    cos = dot / np.where(degenerate, 1.0, n_cmd * n_v)
    cos = np.clip(cos, -1.0, 1.0)
    return np.where(degenerate, np.where(n_cmd < eps, 1.0, 0.0), cos)


def decoupled_lin_vel_reward(v_cmd_xy, v_xy, r_stable, config: RewardConfig = RewardConfig()):
    """Direction/magnitude tracking reward; returns ``(r_lin, d_e, m_e)``.

    The magnitude term is weighted by ``r_stable`` under RFM fusion; the
    direction term never is.
    """
    v_cmd_xy = np.asarray(v_cmd_xy, dtype=np.float64)
    v_xy = np.asarray(v_xy, dtype=np.float64)
    d_e = direction_similarity(v_cmd_xy, v_xy) - 1.0
    m_e = -(np.linalg.norm(v_cmd_xy, axis=-1) - np.linalg.norm(v_xy, axis=-1)) ** 2
    k = config.tracking_scale
    mag_weight = config.lin_magnitude * (r_stable if config.fusion == "rfm" else 1.0)
    r_lin = config.lin_direction * np.exp(k * d_e) + mag_weight * np.exp(k * m_e)
    return r_lin, d_e, m_e


def l2_lin_vel_reward(v_cmd_xy, v_xy, config: RewardConfig = RewardConfig()):
    """exp(-k ||v_cmd - v||^2) before any fusion or weighting."""
    diff = np.asarray(v_cmd_xy, dtype=np.float64) - np.asarray(v_xy, dtype=np.float64)
    return np.exp(-config.tracking_scale * np.sum(diff * diff, axis=-1))


def fuse_rewards(r_stable, r_vel):
    """r_stable + r_stable * r_vel: tracking only pays off once the robot is stable."""
    return r_stable + r_stable * r_vel


def regularization_rewards(*, omega_z_cmd, omega_z, v_z, qdd, tau, qd, action, last_action,
                           prev_last_action, n_collision, n_limit,
                           config: RewardConfig = RewardConfig()):
    """Weighted locomotion regularisers; returns ``(terms, total)``."""
    qdd = np.asarray(qdd, dtype=np.float64)
    tau = np.asarray(tau, dtype=np.float64)
    qd = np.asarray(qd, dtype=np.float64)
    a0 = np.asarray(action, dtype=np.float64)
    a1 = np.asarray(last_action, dtype=np.float64)
    a2 = np.asarray(prev_last_action, dtype=np.float64)
    k = config.tracking_scale
    if config.conventional_smoothness:
        second = a0 - 2.0 * a1 + a2
    else:
        # Sign pattern as tabulated for the action-smoothness term.
        second = a0 - 2.0 * a1 - a2
    terms = {
        "ang_vel_tracking": config.ang_vel_tracking
        * np.exp(-k * (np.asarray(omega_z_cmd) - np.asarray(omega_z)) ** 2),
        "lin_vel_z": config.lin_vel_z * np.asarray(v_z, dtype=np.float64) ** 2,
        "joint_accel": config.joint_accel * np.sum(qdd * qdd, axis=-1),
        "joint_power": config.joint_power * np.sum(np.abs(tau) * np.abs(qd), axis=-1),
        "joint_torque": config.joint_torque * np.sum(tau * tau, axis=-1),
        "action_rate": config.action_rate * np.sum((a0 - a1) ** 2, axis=-1),
        "action_smoothness": config.action_smoothness * np.sum(second * second, axis=-1),
        "collision": config.collision * np.asarray(n_collision, dtype=np.float64),
        "joint_limit": config.joint_limit * np.asarray(n_limit, dtype=np.float64),
    }
    total = sum(terms[name] for name in REG_TERMS)
    return terms, total


def grouped_step_rewards(*, p_e, z_e, omega_e, v_cmd_xy, v_xy, reg_inputs: dict,
                         config: RewardConfig = RewardConfig()) -> RewardBreakdown:
    """Evaluate every term and split them into the stability and locomotion groups.

    ``total`` is computed as ``group_stability + group_locomotion`` so the
    groups reconstruct it exactly.
    """
    r_stable = stable_reward(p_e, z_e, omega_e)
    scale = r_stable if config.use_stable_reward else np.ones_like(r_stable)
    if config.velocity_form == "decoupled":
        lin_cfg = config if config.use_stable_reward else replace(config, fusion="additive")
        r_lin, d_e, m_e = decoupled_lin_vel_reward(v_cmd_xy, v_xy, scale, lin_cfg)
        if config.fusion == "strict" and config.use_stable_reward:
            unscaled, _, _ = decoupled_lin_vel_reward(v_cmd_xy, v_xy, 1.0, replace(config, fusion="additive"))
            r_lin = r_stable * unscaled
    else:
        _, d_e, m_e = decoupled_lin_vel_reward(v_cmd_xy, v_xy, 1.0, config)
        r_vel = config.lin_l2 * l2_lin_vel_reward(v_cmd_xy, v_xy, config)
        r_lin = r_vel if (config.fusion == "additive" or not config.use_stable_reward) else scale * r_vel
    terms, r_reg = regularization_rewards(config=config, **reg_inputs)
    if config.use_stable_reward:
        group_stability = config.stable * r_stable
    else:
        group_stability = np.full_like(r_stable, config.stable_constant)
    group_locomotion = r_lin + r_reg
    return RewardBreakdown(
        r_stable=r_stable,
        p_e=np.asarray(p_e, dtype=np.float64),
        z_e=np.asarray(z_e, dtype=np.float64),
        omega_e=np.asarray(omega_e, dtype=np.float64),
        d_e=d_e,
        m_e=m_e,
        r_lin=r_lin,
        r_reg=r_reg,
        reg_terms=terms,
        group_stability=group_stability,
        group_locomotion=group_locomotion,
        total=group_stability + group_locomotion,
    )

