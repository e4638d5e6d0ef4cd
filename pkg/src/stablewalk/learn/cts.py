"""Concurrent teacher-student training loop."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from stablewalk.biped.env import BipedEnv, TIMEOUT, body_frame_xy
from stablewalk.biped.model import yaw_of
from stablewalk.biped.observations import HEIGHTMAP_DIM, PRIVILEGED_DIM, PROPRIO_DIM
from stablewalk.errors import ConfigurationError, TrainingDivergedError
from stablewalk.learn.networks import ACTION_DIM, CTSModel, NetworkConfig, gaussian_log_prob, \
    reconstruction_loss
from stablewalk.learn.ppo import PPOConfig, RolloutBuffer, ppo_update


@dataclass(frozen=True)
class CTSConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    ppo: PPOConfig = field(default_factory=PPOConfig)
    rollout_steps: int = 24
    teacher_fraction: float = 0.5
    estimator_lr: float = 1e-3
    estimator_epochs: int = 4

    def __post_init__(self):
        if not 0.0 <= self.teacher_fraction <= 1.0:
            raise ConfigurationError("teacher_fraction must lie in [0, 1]")
        if self.rollout_steps < 1 or self.estimator_lr < 0 or self.estimator_epochs < 0:
            raise ConfigurationError("rollout_steps must be positive, estimator settings non-negative")


def _t(x) -> torch.Tensor:
    return torch.as_tensor(np.asarray(x), dtype=torch.float32)


class CTSTrainer:
    """Owns the model, both optimisers, the sampling RNG and the student recurrent state.

    The first ``teacher_fraction`` of the environments form the teacher group;
    the rest form the student group.
    """

    def __init__(self, env: BipedEnv, config: CTSConfig = CTSConfig(), seed: int = 0,
                 model: CTSModel | None = None, dump_dir: Path | None = None):
        torch.manual_seed(seed)
        self.env = env
        self.config = config
        self.model = model if model is not None else CTSModel(config.network)
        if self.model.config.history != env.config.history_length:
            raise ConfigurationError("network history length differs from the environment's")
        self.generator = torch.Generator().manual_seed(seed)
        self.policy_opt = torch.optim.Adam(self.model.policy_parameters(), lr=config.ppo.lr)
        self.estimator_opt = torch.optim.Adam(self.model.student.parameters(), lr=config.estimator_lr)
        n_teacher = int(round(config.teacher_fraction * env.n_envs))
        self.teacher_mask = np.arange(env.n_envs) < n_teacher
        self.student_idx = np.flatnonzero(~self.teacher_mask)
        self.hidden = self.model.student.initial_state(env.n_envs)
        self.dump_dir = dump_dir
        self.iteration = 0

    # -- acting --------------------------------------------------------------------------------

    def _inputs(self):
        e = self.env
        return {
            "proprio": _t(e.student["proprio"]),
            "history": _t(e.history.reshape(e.n_envs, -1)),
            "scan": _t(e.student["scan"]),
            "privileged": _t(e.teacher["privileged"]),
            "heightmap": _t(e.teacher["heightmap"]),
        }

    @torch.no_grad()
    def _latents(self, x: dict, hidden: torch.Tensor):
        m = self.model
        l_te, l_th = m.teacher(x["privileged"], x["heightmap"])
        l_se, _, l_sh, h_hat, new_hidden = m.student(x["history"], x["scan"], hidden)
        teacher = torch.cat([l_te, l_th], dim=-1)
        student = torch.cat([l_se, l_sh], dim=-1)
        mask = torch.as_tensor(self.teacher_mask)[:, None]
        self.last_height_estimate = h_hat
        return torch.where(mask, teacher, student), student, new_hidden

    @torch.no_grad()
    def act(self, deterministic: bool = False):
        """Sample actions for every environment; advances the student recurrent state."""
        x = self._inputs()
        latent, student_latent, self.hidden = self._latents(x, self.hidden)
        mean, log_std = self.model.actor(latent, x["proprio"])
        if deterministic:
            action = mean
        else:
            noise = torch.randn(mean.shape, generator=self.generator)
            action = mean + torch.exp(log_std) * noise
        log_prob = gaussian_log_prob(action, mean, log_std)
        v_loco, v_stable = self.model.critic(x["privileged"], x["heightmap"], latent)
        return x, action, log_prob, student_latent, (v_loco, v_stable)

    # -- training ------------------------------------------------------------------------------

    def collect(self):
        """Run one rollout; returns the buffer, the estimator replay data and rollout statistics."""
        env, T = self.env, self.config.rollout_steps
        buf = RolloutBuffer(T, env.n_envs, PROPRIO_DIM, PRIVILEGED_DIM, HEIGHTMAP_DIM,
                            self.model.config.latent_dim, ACTION_DIM, self.teacher_mask)
        s = self.student_idx
        replay = {"hidden0": self.hidden[s].clone(), "history": [], "scan": [], "privileged": [],
                  "heightmap": [], "dones": []}
        stats = {"reward_total": 0.0, "reward_stability": 0.0, "reward_locomotion": 0.0, "r_stable": 0.0,
                 "vel_error": 0.0}
        ended, survived, lengths = 0, 0, []
        for _ in range(T):
            x, action, log_prob, student_latent, (v_loco, v_stable) = self.act()
            for k in ("history", "scan", "privileged", "heightmap"):
                replay[k].append(x[k][s])
            cmd = env.command.copy()
            br, done, reason, ends = env.step(action.numpy().astype(np.float64))
            st = env.last_state_before_reset
            v_b = body_frame_xy(yaw_of(st.orientation), st.com_vel[:, :2])
            stats["vel_error"] += float(np.mean(np.linalg.norm(cmd[:, :2] - v_b, axis=-1)))
            buf.add(proprio=x["proprio"].numpy(), privileged=x["privileged"].numpy(),
                    heightmap=x["heightmap"].numpy(), student_latent=student_latent.numpy(),
                    actions=action.numpy(), log_probs=log_prob.numpy(),
                    reward_locomotion=br.group_locomotion, reward_stability=br.group_stability,
                    reward_total=br.total, value_locomotion=v_loco.numpy(), value_stability=v_stable.numpy(),
                    dones=done)
            replay["dones"].append(torch.as_tensor(done[s]))
            self.hidden = torch.where(torch.as_tensor(done)[:, None], torch.zeros_like(self.hidden), self.hidden)
            stats["reward_total"] += float(np.mean(br.total))
            stats["reward_stability"] += float(np.mean(br.group_stability))
            stats["reward_locomotion"] += float(np.mean(br.group_locomotion))
            stats["r_stable"] += float(np.mean(br.r_stable))
            for e in ends:
                ended += 1
                survived += e.reason == TIMEOUT
                lengths.append(e.length)
        stats = {k: v / T for k, v in stats.items()}
        stats["episodes"] = ended
        stats["success_rate"] = survived / ended if ended else float("nan")
        stats["episode_length"] = float(np.mean(lengths)) if lengths else float("nan")
        with torch.no_grad():
            x = self._inputs()
            h = self.hidden.clone()
            latent, _, _ = self._latents(x, h)
            v_loco, v_stable = self.model.critic(x["privileged"], x["heightmap"], latent)
        bootstrap = {"locomotion": v_loco.numpy(), "stability": v_stable.numpy()}
        return buf, bootstrap, replay, stats

    def estimator_loss(self, replay: dict) -> torch.Tensor:
        """Mean reconstruction loss over the student group's rollout, with recurrent replay."""
        m = self.model
        h = replay["hidden0"]
        total = 0.0
        for t in range(len(replay["history"])):
            with torch.no_grad():
                l_te, l_th = m.teacher(replay["privileged"][t], replay["heightmap"][t])
            l_se, e_hat, l_sh, h_hat, h = m.student(replay["history"][t], replay["scan"][t], h)
            total = total + reconstruction_loss(l_se, l_te, l_sh, l_th, h_hat, replay["heightmap"][t],
                                                e_hat, replay["privileged"][t])
            h = torch.where(replay["dones"][t][:, None], torch.zeros_like(h), h)
        return total / len(replay["history"])

    def estimator_update(self, replay: dict) -> dict:
        if len(self.student_idx) == 0:
            return {"rec_loss": float("nan"), "rec_loss_before": float("nan")}
        with torch.no_grad():
            before = float(self.estimator_loss(replay))
        for _ in range(self.config.estimator_epochs):
            loss = self.estimator_loss(replay)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"non-finite reconstruction loss ({float(loss)})", None)
            self.estimator_opt.zero_grad()
            loss.backward()
            self.estimator_opt.step()
        return {"rec_loss": before}

    def train_iteration(self) -> dict:
        buf, bootstrap, replay, stats = self.collect()
        diag = ppo_update(self.model, self.policy_opt, buf, bootstrap, self.config.ppo, self.generator,
                          self.dump_dir)
        rec = self.estimator_update(replay)
        self.iteration += 1
        return {"iteration": self.iteration, **stats, **diag, **rec,
                "action_std": float(torch.exp(self.model.actor.log_std.detach()).mean())}


def cts_train_iteration(trainer: CTSTrainer) -> dict:
    """One policy-gradient update on both groups and one supervised estimator update."""
    return trainer.train_iteration()
