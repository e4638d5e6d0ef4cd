"""Vectorised locomotion environment: commands, rewards, termination and auto-reset."""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from stablewalk.biped import observations as obs
from stablewalk.biped.model import (
    DomainRandomization, RobotState, SimConfig, StepInfo, concat_states, physics_step,
    projected_gravity, quat_to_matrix, reset, sample_domain_randomization, yaw_of,
)
from stablewalk.errors import InvalidStateError, SimulationDivergedError
from stablewalk.lipm import LipmParams, desired_com_position_batch
from stablewalk.rewards import RewardBreakdown, RewardConfig, grouped_step_rewards
from stablewalk.terrain import HeightmapStack

# Termination reasons.
ALIVE, FALL, LOW_HEIGHT, COLLISION, TIMEOUT, DIVERGED = range(6)
REASONS = ("alive", "fall", "low_height", "collision", "timeout", "diverged")


@dataclass(frozen=True)
class CommandRanges:
    lin_x: tuple[float, float] = (-0.5, 1.0)
    lin_y: tuple[float, float] = (-0.5, 0.5)
    yaw: tuple[float, float] = (-1.0, 1.0)
    standing_fraction: float = 0.1


@dataclass(frozen=True)
class EnvConfig:
    sim: SimConfig = field(default_factory=SimConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    obs: obs.ObsConfig = field(default_factory=obs.ObsConfig)
    commands: CommandRanges = field(default_factory=CommandRanges)
    k_p: float = 2.0
    domain_randomization: bool = True
    observation_noise: bool = True
    history_length: int = 10
    init_noise: float = 0.1

    @property
    def lipm(self) -> LipmParams:
        return LipmParams(z_c=self.sim.standing_height, k_p=self.k_p)


def check_termination(state: RobotState, terrain: HeightmapStack, config: SimConfig):
    """Return ``(done, reason)`` arrays; timeouts count as survivals."""
    R = quat_to_matrix(state.orientation)
    g = projected_gravity(R)
    deviation = np.linalg.norm(g - np.array([0.0, 0.0, -1.0]), axis=-1)
    x, y, z = state.com_pos[:, 0], state.com_pos[:, 1], state.com_pos[:, 2]
    under = terrain.height_at(state.terrain_index, x, y)
    r = config.torso_radius
    around = np.stack([terrain.height_at(state.terrain_index, x + dx, y + dy)
                       for dx, dy in ((r, 0), (-r, 0), (0, r), (0, -r))], axis=1)
    reason = np.full(state.n_envs, ALIVE)
    reason = np.where(state.step_count >= config.episode_steps, TIMEOUT, reason)
    reason = np.where(np.maximum(around.max(axis=1), under) > z - r, COLLISION, reason)
    reason = np.where(z - under < config.min_height, LOW_HEIGHT, reason)
    reason = np.where(deviation > config.max_gravity_deviation, FALL, reason)
    return reason != ALIVE, reason


def body_frame_xy(yaw: np.ndarray, v_xy: np.ndarray) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.stack([c * v_xy[:, 0] + s * v_xy[:, 1], -s * v_xy[:, 0] + c * v_xy[:, 1]], axis=-1)


def world_frame_xy(yaw: np.ndarray, v_xy: np.ndarray) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.stack([c * v_xy[:, 0] - s * v_xy[:, 1], s * v_xy[:, 0] + c * v_xy[:, 1]], axis=-1)


def compute_rewards(state: RobotState, command: np.ndarray, lipm: LipmParams,
                    reward: RewardConfig) -> RewardBreakdown:
    """Reward breakdown for the state reached after a control step."""
    R = quat_to_matrix(state.orientation)
    yaw = yaw_of(state.orientation)
    v_cmd_w = world_frame_xy(yaw, command[:, :2])
    v_xy = state.com_vel[:, :2]
    desired = desired_com_position_batch(state.zmp, v_cmd_w, v_xy, lipm.z_c, lipm.g, lipm.k_p)
    p_e = desired - state.com_pos[:, :2]
    normals = state.contact_force[:, :, 2]
    total_n = normals.sum(axis=1)
    contact_z = np.einsum("nk,nk->n", normals, state.foot_pos[:, :, 2]) / np.maximum(total_n, 1e-12)
    # In flight the last stance height stands in for the contact height.
    fallback = np.min(state.foot_pos[:, :, 2], axis=1)
    contact_z = np.where(total_n > 0, contact_z, fallback)
    z_e = lipm.z_c - (state.com_pos[:, 2] - contact_z)
    ang_b = np.einsum("nji,nj->ni", R, state.ang_vel)
    reg_inputs = dict(
        omega_z_cmd=command[:, 2], omega_z=ang_b[:, 2], v_z=state.com_vel[:, 2],
        qdd=state.q_dd, tau=state.tau, qd=state.qd, action=state.action,
        last_action=state.last_action, prev_last_action=state.prev_last_action,
        n_collision=state.n_collision, n_limit=state.n_limit,
    )
    return grouped_step_rewards(p_e=p_e, z_e=z_e, omega_e=ang_b[:, :2],
                                v_cmd_xy=command[:, :2],
                                v_xy=body_frame_xy(yaw, v_xy), reg_inputs=reg_inputs, config=reward)


@dataclass
class EpisodeEnd:
    env: int
    success: bool
    reason: int
    length: int


class BipedEnv:
    """A batch of independent robots sharing a terrain stack.

    Every environment owns an RNG stream derived from ``(seed, env index)``;
    terrain selection on reset is delegated to ``terrain_selector(env, rng)``.
    With ``workers > 1`` physics is stepped in contiguous chunks on a thread
    pool; the arithmetic per environment is unchanged, so results match the
    serial path.
    """

    def __init__(self, terrain: HeightmapStack, n_envs: int, config: EnvConfig = EnvConfig(),
                 seed: int = 0, terrain_selector: Callable[[int, np.random.Generator], int] | None = None,
                 workers: int = 1, fixed_command: np.ndarray | None = None,
                 randomize_start: bool = False,
                 episode_callback: Callable[["EpisodeEnd"], None] | None = None):
        self.terrain = terrain
        self.n_envs = n_envs
        self.config = config
        self.seed = seed
        self.workers = workers
        self.fixed_command = None if fixed_command is None else np.asarray(fixed_command, dtype=np.float64)
        self.terrain_selector = terrain_selector or (lambda env, rng: 0)
        self.episode_callback = episode_callback
        self.rngs = [np.random.default_rng([seed, i]) for i in range(n_envs)]
        self.dr: list[DomainRandomization] = [DomainRandomization()] * n_envs
        self.command = np.zeros((n_envs, 3))
        self.pending_push: list = []
        self._pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
        self.state = self._fresh_states(np.arange(n_envs))
        if randomize_start:
            self.state.step_count = np.array(
                [int(self.rngs[i].integers(0, config.sim.episode_steps)) for i in range(n_envs)])
        self.history = np.zeros((n_envs, config.history_length, obs.PROPRIO_DIM))
        self.student, self.teacher = self._observe(np.arange(n_envs), None)
        self.history[:] = self.student["proprio"][:, None, :]

    # -- resets ---------------------------------------------------------------------------------

    def _sample_command(self, rng: np.random.Generator) -> np.ndarray:
        c = self.config.commands
        cmd = np.array([rng.uniform(*c.lin_x), rng.uniform(*c.lin_y), rng.uniform(*c.yaw)])
        if rng.uniform() < c.standing_fraction:
            cmd[:] = 0.0
        return cmd

    def _fresh_states(self, envs: np.ndarray) -> RobotState:
        states = []
        for i in envs:
            rng = self.rngs[i]
            dr = sample_domain_randomization(rng) if self.config.domain_randomization else DomainRandomization()
            self.dr[i] = dr
            idx = self.terrain_selector(int(i), rng)
            spawn_seed = int(rng.integers(2**31))
            s = reset(self.terrain, dr, spawn_seed, self.config.sim, terrain_index=idx)
            noise = self.config.init_noise
            if noise > 0:
                s.com_vel[0, :2] = rng.uniform(-noise, noise, size=2)
                s.ang_vel[0] = rng.uniform(-noise, noise, size=3)
            self.command[i] = self.fixed_command if self.fixed_command is not None else self._sample_command(rng)
            states.append(s)
        return concat_states(states)

    # -- observation --------------------------------------------------------------------------

    def _noise(self, envs) -> np.ndarray | None:
        if not self.config.observation_noise:
            return None
        width = obs.PROPRIO_DIM + obs.STUDENT_SCAN_DIM
        return np.stack([self.rngs[i].uniform(-1.0, 1.0, size=width) for i in envs])

    def _observe(self, envs: np.ndarray, delayed: np.ndarray | None):
        state = self.state if len(envs) == self.n_envs else self.state.select(envs)
        dr = [self.dr[i] for i in envs]
        return obs.build_observations(state, self.command[envs], self.terrain, dr, self.config.sim,
                                      self.config.obs, noise=self._noise(envs), delayed_proprio=delayed)

    # -- stepping -----------------------------------------------------------------------------

    def step(self, action: np.ndarray):
        """Advance all environments by one control period.

        Returns ``(rewards, done, reason, episode_ends)``; observations are on
        ``self.student`` / ``self.teacher`` and already refer to reset
        environments where an episode ended.
        """
        action = np.asarray(action, dtype=np.float64)
        self._apply_pending_pushes()
        if not np.all(np.isfinite(action)):
            raise InvalidStateError("action contains non-finite values")
        if self._pool is None:
            new, info, lag, diverged = self._chunk(np.arange(self.n_envs), action)
        else:
            chunks = np.array_split(np.arange(self.n_envs), self.workers)
            results = list(self._pool.map(lambda c: self._chunk(c, action), chunks))
            new = concat_states([r[0] for r in results])
            info = _concat_info([r[1] for r in results])
            lag = np.concatenate([r[2] for r in results])
            diverged = np.concatenate([r[3] for r in results])
        self.state = new
        self.last_info = info
        breakdown = compute_rewards(new, self.command, self.config.lipm, self.config.reward)
        done, reason = check_termination(new, self.terrain, self.config.sim)
        done = done | diverged
        reason = np.where(diverged, DIVERGED, reason)
        # Student proprioception lags by the sampled system delay (in substeps).
        pick = self.config.sim.substeps - new.delay_substeps
        delayed = lag[np.arange(self.n_envs), pick]
        self.student, self.teacher = self._observe(np.arange(self.n_envs), delayed)
        fresh = self.student["proprio"]
        fresh[:, 18:] = obs.proprioception(new, self.command, self.config.sim, self.config.obs)[:, 18:]
        self.history = np.concatenate([self.history[:, 1:], fresh[:, None, :]], axis=1)
        ends = [EpisodeEnd(int(i), bool(reason[i] == TIMEOUT), int(reason[i]), int(new.step_count[i]))
                for i in np.flatnonzero(done)]
        # Pre-reset copy so callers can measure the states that ended episodes.
        self.last_state_before_reset = new.copy() if ends else new
        if ends:
            if self.episode_callback is not None:
                for end in ends:
                    self.episode_callback(end)
            self.reset_envs(np.flatnonzero(done))
        return breakdown, done, reason, ends

    def _chunk(self, envs: np.ndarray, action: np.ndarray):
        """Step a contiguous block of environments.

        Returns the new states, contact info, proprioception snapshots before and
        after every substep and a per-environment divergence flag. A diverged
        environment keeps its pre-step state and is terminated by the caller.
        """
        local = self.state if len(envs) == self.n_envs else self.state.select(envs)
        cmd = self.command[envs]
        sim, oc = self.config.sim, self.config.obs

        def run(st, act, c):
            lag = [obs.proprioception(st, c, sim, oc)]
            new, info = physics_step(st, act, self.terrain, sim,
                                     snapshot=lambda s, k: lag.append(obs.proprioception(s, c, sim, oc)))
            return new, info, np.stack(lag, axis=1)

        try:
            new, info, lag = run(local, action[envs], cmd)
            return new, info, lag, np.zeros(len(envs), dtype=bool)
        except SimulationDivergedError:
            pass
        parts, diverged = [], np.zeros(len(envs), dtype=bool)
        for j in range(len(envs)):
            one = local.select([j])
            try:
                parts.append(run(one, action[envs][[j]], cmd[[j]]))
            except SimulationDivergedError:
                diverged[j] = True
                flags = np.zeros((1, 2), dtype=bool)
                stale = np.repeat(obs.proprioception(one, cmd[[j]], sim, oc)[:, None], sim.substeps + 1, axis=1)
                parts.append((one, StepInfo(flags, flags.copy(), flags.copy(), flags.copy()), stale))
        new = concat_states([p[0] for p in parts])
        info = _concat_info([p[1] for p in parts])
        return new, info, np.concatenate([p[2] for p in parts]), diverged

    def reset_envs(self, envs: np.ndarray) -> None:
        envs = np.asarray(envs, dtype=np.int64)
        fresh = self._fresh_states(envs)
        self.state.assign(envs, fresh)
        student, teacher = self._observe(envs, None)
        for key in self.student:
            self.student[key][envs] = student[key]
        for key in self.teacher:
            self.teacher[key][envs] = teacher[key]
        self.history[envs] = student["proprio"][:, None, :]

    # -- disturbances ----------------------------------------------------------------------------

    def schedule_push(self, env: int, wrench: np.ndarray, duration: float) -> None:
        self.pending_push.append((env, np.asarray(wrench, dtype=np.float64), duration))

    def _apply_pending_pushes(self) -> None:
        for env, wrench, duration in self.pending_push:
            self.state.ext_wrench[env] = wrench
            self.state.push_remaining[env] = duration
        self.pending_push = []

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown()


def _concat_info(infos: list[StepInfo]) -> StepInfo:
    return StepInfo(*(np.concatenate([getattr(i, f) for i in infos])
                      for f in ("touchdowns", "slip_events", "trips", "limit_hits")))


def write_trajectory_csv(path, rows: list[dict]) -> None:
    """Debug dump of a rollout: one row per control step."""
    if not rows:
        return
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)


def trajectory_row(t: float, state: RobotState, env: int, action: np.ndarray,
                   breakdown: RewardBreakdown) -> dict:
    row = {"time": t}
    for name, arr in (("com_pos", state.com_pos), ("com_vel", state.com_vel),
                      ("orientation", state.orientation), ("ang_vel", state.ang_vel),
                      ("q", state.q), ("qd", state.qd), ("tau", state.tau)):
        for k, v in enumerate(arr[env]):
            row[f"{name}_{k}"] = float(v)
    for k, v in enumerate(action[env]):
        row[f"action_{k}"] = float(v)
    for name, arr in breakdown.columns().items():
        row[name] = float(np.asarray(arr)[env])
    return row
