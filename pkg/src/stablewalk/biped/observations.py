"""Observation vectors for the student and teacher groups.

Student proprioception (27): base angular velocity (3), projected gravity (3),
joint positions relative to the default pose (6), joint velocities (6),
velocity command (3), last action (6).

Teacher privileged state (51): the noise-free student vector (27), base linear
velocity (3), joint torques (6), joint accelerations (6), feet contact forces
(6) and the external force (3).

Channels carry fixed scale factors so that every entry is O(1).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from stablewalk.biped.model import GRAVITY, DomainRandomization, RobotState, SimConfig, \
    projected_gravity, quat_to_matrix, yaw_of
from stablewalk.terrain import SCAN_SIDE, SCAN_SPACING, HeightmapStack, scan_offsets

PROPRIO_DIM = 27
PRIVILEGED_DIM = 51
HEIGHTMAP_DIM = SCAN_SIDE * SCAN_SIDE
STUDENT_SCAN_SHAPE = (15, 20)
STUDENT_SCAN_DIM = STUDENT_SCAN_SHAPE[0] * STUDENT_SCAN_SHAPE[1]


@dataclass(frozen=True)
class ObsConfig:
    ang_vel_scale: float = 0.25
    joint_pos_scale: tuple[float, float, float] = (1.0, 1.0, 5.0)
    joint_vel_scale: float = 0.05
    command_scale: tuple[float, float, float] = (2.0, 2.0, 0.25)
    lin_vel_scale: float = 2.0
    torque_scale: float = 0.1
    joint_acc_scale: float = 0.002
    # Uniform noise half-widths per student channel group.
    noise_ang_vel: float = 0.05
    noise_gravity: float = 0.02
    noise_joint_pos: float = 0.01
    noise_joint_vel: float = 0.1
    noise_scan: float = 0.02
    # Forward height scan standing in for the depth camera.
    camera_offset: tuple[float, float, float] = (0.12, 0.0, 0.05)
    camera_fov_deg: float = 70.0
    scan_near: float = 0.3
    scan_far: float = 1.7


def _scales(config: ObsConfig) -> np.ndarray:
    return np.concatenate([
        np.full(3, config.ang_vel_scale),
        np.ones(3),
        np.tile(config.joint_pos_scale, 2),
        np.full(6, config.joint_vel_scale),
        np.asarray(config.command_scale),
        np.ones(6),
    ])


def proprioception(state: RobotState, command: np.ndarray, sim: SimConfig,
                   config: ObsConfig = ObsConfig()) -> np.ndarray:
    """Noise-free 27-entry proprioceptive vector for every environment."""
    R = quat_to_matrix(state.orientation)
    ang_vel_b = np.einsum("nji,nj->ni", R, state.ang_vel)
    raw = np.concatenate([
        ang_vel_b,
        projected_gravity(R),
        state.q - sim.default_pose(),
        state.qd,
        command,
        state.action,
    ], axis=1)
    return raw * _scales(config)


def proprio_noise_scale(config: ObsConfig = ObsConfig()) -> np.ndarray:
    return np.concatenate([
        np.full(3, config.noise_ang_vel * config.ang_vel_scale),
        np.full(3, config.noise_gravity),
        np.full(6, config.noise_joint_pos),
        np.full(6, config.noise_joint_vel * config.joint_vel_scale),
        np.zeros(9),
    ])


def privileged(state: RobotState, proprio_gt: np.ndarray, config: ObsConfig = ObsConfig()) -> np.ndarray:
    """Teacher privileged vector (51) built on top of the noise-free proprioception."""
    R = quat_to_matrix(state.orientation)
    lin_vel_b = np.einsum("nji,nj->ni", R, state.com_vel)
    weight = (state.mass * GRAVITY)[:, None]
    contact_b = np.einsum("nji,nkj->nki", R, state.contact_force).reshape(-1, 6) / weight
    ext = np.where((state.push_remaining > 0)[:, None], state.ext_wrench[:, :3], 0.0) / weight
    return np.concatenate([
        proprio_gt,
        lin_vel_b * config.lin_vel_scale,
        state.tau * config.torque_scale,
        state.q_dd * config.joint_acc_scale,
        contact_b,
        ext,
    ], axis=1)


_HEIGHT_OFFSETS = scan_offsets(SCAN_SIDE, SCAN_SPACING)


def heightmap_scan(state: RobotState, terrain: HeightmapStack) -> np.ndarray:
    """Yaw-aligned 21 x 21 scan relative to the terrain under the base, per environment."""
    yaw = yaw_of(state.orientation)
    c, s = np.cos(yaw)[:, None], np.sin(yaw)[:, None]
    x, y = state.com_pos[:, 0:1], state.com_pos[:, 1:2]
    px = x + c * _HEIGHT_OFFSETS[None, :, 0] - s * _HEIGHT_OFFSETS[None, :, 1]
    py = y + s * _HEIGHT_OFFSETS[None, :, 0] + c * _HEIGHT_OFFSETS[None, :, 1]
    idx = state.terrain_index[:, None]
    ref = terrain.height_at(state.terrain_index, state.com_pos[:, 0], state.com_pos[:, 1])
    return terrain.height_at(idx, px, py) - ref[:, None]


def student_scan_points(state: RobotState, sim: SimConfig, dr: list[DomainRandomization],
                        config: ObsConfig = ObsConfig()) -> np.ndarray:
    """World xy sample points of the forward scan, shape (N, 15, 20, 2).

    Each row is a camera ray at a fixed depression angle; columns spread over the
    horizontal field of view. Camera position, pitch and field-of-view offsets
    from domain randomisation perturb the rays.
    """
    n = state.n_envs
    rows, cols = STUDENT_SCAN_SHAPE
    cam_off = np.array(config.camera_offset)[None, :] + 1e-3 * np.array([d.camera_pos_offset for d in dr])
    cam_h = sim.standing_height + cam_off[:, 2]
    nominal_dist = np.linspace(config.scan_near, config.scan_far, rows)
    depression = np.arctan2(sim.standing_height + config.camera_offset[2], nominal_dist)
    R = quat_to_matrix(state.orientation)
    torso_pitch = np.arcsin(np.clip(-R[:, 2, 0], -1.0, 1.0))
    pitch_off = np.deg2rad([d.camera_pitch_offset for d in dr])
    beta = depression[None, :] + (torso_pitch + pitch_off)[:, None]
    beta = np.clip(beta, 0.05, np.pi / 2 - 1e-3)
    fwd = cam_h[:, None] / np.tan(beta)
    half_fov = np.deg2rad(config.camera_fov_deg / 2.0)
    fov_gain = np.tan(np.deg2rad((config.camera_fov_deg + np.array([d.camera_fov_offset for d in dr])) / 2.0)) \
        / np.tan(half_fov)
    lat_dir = np.tan(np.linspace(-half_fov, half_fov, cols))
    lat = fwd[:, :, None] * lat_dir[None, None, :] * fov_gain[:, None, None]
    fwd = np.broadcast_to(fwd[:, :, None] + cam_off[:, 0, None, None], (n, rows, cols))
    lat = lat + cam_off[:, 1, None, None]
    yaw = yaw_of(state.orientation)
    c, s = np.cos(yaw)[:, None, None], np.sin(yaw)[:, None, None]
    px = state.com_pos[:, 0, None, None] + c * fwd - s * lat
    py = state.com_pos[:, 1, None, None] + s * fwd + c * lat
    return np.stack([px, py], axis=-1)


def student_scan(state: RobotState, terrain: HeightmapStack, sim: SimConfig,
                 dr: list[DomainRandomization], config: ObsConfig = ObsConfig()) -> np.ndarray:
    """Forward scan (300) of elevations relative to the nominal ground under the camera."""
    pts = student_scan_points(state, sim, dr, config)
    idx = state.terrain_index[:, None, None]
    h = terrain.height_at(idx, pts[..., 0], pts[..., 1])
    ground = state.com_pos[:, 2] - sim.standing_height
    return (h - ground[:, None, None]).reshape(state.n_envs, -1)


def build_observations(state: RobotState, command: np.ndarray, terrain: HeightmapStack,
                       dr: list[DomainRandomization], sim: SimConfig,
                       config: ObsConfig = ObsConfig(), noise: np.ndarray | None = None,
                       delayed_proprio: np.ndarray | None = None):
    """Assemble ``(student, teacher)`` observation dicts.

    ``noise`` holds per-environment uniform draws in [-1, 1] of width
    ``27 + 300``; ``None`` gives noise-free student observations.
    ``delayed_proprio`` replaces the student's proprioception with a lagged copy.
    """
    gt = proprioception(state, command, sim, config)
    student_p = gt.copy() if delayed_proprio is None else delayed_proprio.copy()
    scan = student_scan(state, terrain, sim, dr, config)
    if noise is not None:
        student_p += noise[:, :PROPRIO_DIM] * proprio_noise_scale(config)
        scan = scan + noise[:, PROPRIO_DIM:] * config.noise_scan
    teacher = {
        "privileged": privileged(state, gt, config),
        "heightmap": heightmap_scan(state, terrain),
    }
    student = {"proprio": student_p, "scan": scan}
    return student, teacher
