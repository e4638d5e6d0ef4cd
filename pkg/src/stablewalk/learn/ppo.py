"""Per-group advantage estimation and the clipped-surrogate update."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from stablewalk.errors import ConfigurationError, RolloutBufferError, TrainingDivergedError
from stablewalk.learn.networks import CTSModel, gaussian_entropy, gaussian_log_prob

GROUPS = ("locomotion", "stability")


@dataclass(frozen=True)
class PPOConfig:
    gamma: float = 0.99
    lam: float = 0.95
    clip: float = 0.2
    epochs: int = 5
    minibatches: int = 4
    lr: float = 1e-3
    value_coef: float = 1.0
    entropy_coef: float = 0.005
    max_grad_norm: float = 1.0
    double_critic: bool = True
    # Rewards are scaled before advantage estimation so value targets stay O(1).
    reward_scale: float = 0.05

    def __post_init__(self):
        if not (0.0 <= self.gamma <= 1.0 and 0.0 <= self.lam <= 1.0):
            raise ConfigurationError("gamma and lambda must lie in [0, 1]")
        if self.reward_scale <= 0:
            raise ConfigurationError("reward_scale must be positive")
        if self.clip <= 0 or self.epochs < 1 or self.minibatches < 1 or self.lr < 0:
            raise ConfigurationError("clip, epochs, minibatches must be positive and lr non-negative")


def gae(rewards, values, bootstrap, dones, gamma: float, lam: float):
    """Generalised advantage estimation over a ``(T, N)`` rollout.

    ``dones[t]`` marks that the episode ended after step ``t``; no value is
    propagated across it. Returns ``(advantages, returns)``.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=bool)
    if rewards.shape != values.shape or rewards.shape != dones.shape:
        raise RolloutBufferError(
            f"rollout arrays misaligned: rewards {rewards.shape}, values {values.shape}, dones {dones.shape}")
    if not (0.0 <= gamma <= 1.0 and 0.0 <= lam <= 1.0):
        raise ConfigurationError("gamma and lambda must lie in [0, 1]")
    next_value = np.asarray(bootstrap, dtype=np.float64)
    if next_value.shape != rewards.shape[1:]:
        raise RolloutBufferError(f"bootstrap shape {next_value.shape} does not match {rewards.shape[1:]}")
    adv = np.zeros_like(rewards)
    running = np.zeros(rewards.shape[1:])
    for t in reversed(range(rewards.shape[0])):
        live = 1.0 - dones[t]
        delta = rewards[t] + gamma * live * next_value - values[t]
        running = delta + gamma * lam * live * running
        adv[t] = running
        next_value = values[t]
    return adv, adv + values


def gae_per_group(rewards, values, bootstrap, dones, gamma: float, lam: float):
    """Run :func:`gae` independently for every reward group (leading axis)."""
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    bootstrap = np.asarray(bootstrap, dtype=np.float64)
    if rewards.shape[0] != values.shape[0] or rewards.shape[0] != bootstrap.shape[0]:
        raise RolloutBufferError("reward, value and bootstrap group counts differ")
    out = [gae(r, v, b, dones, gamma, lam) for r, v, b in zip(rewards, values, bootstrap)]
    return np.stack([a for a, _ in out]), np.stack([r for _, r in out])


def normalize(x: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    return (x - x.mean()) / (x.std() + eps)


def combine_advantages(advantages: np.ndarray) -> np.ndarray:
    """Normalise each group's advantages over the batch, then sum them."""
    return sum(normalize(a) for a in advantages)


@dataclass
class RolloutBuffer:
    """Fixed-length storage for one rollout of ``n_envs`` environments.

    Observations needed by the update are stored per step: proprioception,
    the teacher inputs (privileged state, heightmap) and the detached student
    latent. ``teacher_mask`` selects which environments condition the policy on
    teacher-encoder latents.
    """

    steps: int
    n_envs: int
    proprio_dim: int
    privileged_dim: int
    heightmap_dim: int
    latent_dim: int
    action_dim: int
    teacher_mask: np.ndarray
    data: dict = field(default_factory=dict)
    cursor: int = 0

    def __post_init__(self):
        T, N = self.steps, self.n_envs
        if self.teacher_mask.shape != (N,):
            raise RolloutBufferError("teacher mask must have one entry per environment")
        shapes = {
            "proprio": (T, N, self.proprio_dim),
            "privileged": (T, N, self.privileged_dim),
            "heightmap": (T, N, self.heightmap_dim),
            "student_latent": (T, N, self.latent_dim),
            "actions": (T, N, self.action_dim),
            "log_probs": (T, N),
            "reward_locomotion": (T, N),
            "reward_stability": (T, N),
            "reward_total": (T, N),
            "value_locomotion": (T, N),
            "value_stability": (T, N),
            "dones": (T, N),
        }
        self.data = {k: np.zeros(s, dtype=bool if k == "dones" else np.float64) for k, s in shapes.items()}

    def add(self, **step) -> None:
        if self.cursor >= self.steps:
            raise RolloutBufferError(f"buffer full ({self.steps} steps)")
        missing = set(self.data) - set(step)
        if missing:
            raise RolloutBufferError(f"step is missing fields {sorted(missing)}")
        for k, v in step.items():
            if k not in self.data:
                raise RolloutBufferError(f"unknown buffer field {k!r}")
            self.data[k][self.cursor] = v
        self.cursor += 1

    @property
    def full(self) -> bool:
        return self.cursor == self.steps

    def check_reward_groups(self) -> None:
        d = self.data
        if not np.array_equal(d["reward_locomotion"] + d["reward_stability"], d["reward_total"]):
            raise RolloutBufferError("group rewards do not sum to the stored total")

    def advantages(self, bootstrap: dict, config: PPOConfig):
        """Per-group (or single-stream) advantages and returns for the stored rollout.

        Returns ``(combined_advantage, returns)`` where ``returns`` maps each
        trained value head to its targets, both of shape ``(T, N)``.
        """
        if not self.full:
            raise RolloutBufferError(f"buffer incomplete: {self.cursor}/{self.steps} steps")
        self.check_reward_groups()
        d = self.data
        k = config.reward_scale
        if config.double_critic:
            rewards = k * np.stack([d["reward_locomotion"], d["reward_stability"]])
            values = np.stack([d["value_locomotion"], d["value_stability"]])
            boot = np.stack([bootstrap["locomotion"], bootstrap["stability"]])
            adv, ret = gae_per_group(rewards, values, boot, d["dones"], config.gamma, config.lam)
            return combine_advantages(adv), {"locomotion": ret[0], "stability": ret[1]}
        adv, ret = gae(k * d["reward_total"], d["value_locomotion"], bootstrap["locomotion"], d["dones"],
                       config.gamma, config.lam)
        return normalize(adv), {"locomotion": ret}


def _flat(x: np.ndarray) -> torch.Tensor:
    return torch.as_tensor(x.reshape(-1, *x.shape[2:]), dtype=torch.float32)


def policy_latent(model: CTSModel, privileged, heightmap, student_latent, teacher_mask):
    """Teacher rows use the (trainable) teacher encoders; student rows use stored latents."""
    l_e, l_h = model.teacher(privileged, heightmap)
    teacher_latent = torch.cat([l_e, l_h], dim=-1)
    return torch.where(teacher_mask[:, None], teacher_latent, student_latent)


def ppo_loss(model: CTSModel, batch: dict, config: PPOConfig):
    """Clipped surrogate plus per-head value losses and entropy bonus for one minibatch."""
    latent = policy_latent(model, batch["privileged"], batch["heightmap"], batch["student_latent"],
                           batch["teacher_mask"])
    mean, log_std = model.actor(latent, batch["proprio"])
    log_prob = gaussian_log_prob(batch["actions"], mean, log_std)
    ratio = torch.exp(log_prob - batch["log_probs"])
    adv = batch["advantages"]
    surrogate = torch.min(ratio * adv, torch.clamp(ratio, 1.0 - config.clip, 1.0 + config.clip) * adv)
    policy_loss = -surrogate.mean()
    v_loco, v_stable = model.critic(batch["privileged"], batch["heightmap"], latent.detach())
    value_losses = {"locomotion": torch.mean((v_loco - batch["return_locomotion"]) ** 2)}
    if config.double_critic:
        value_losses["stability"] = torch.mean((v_stable - batch["return_stability"]) ** 2)
    value_loss = sum(value_losses.values())
    entropy = gaussian_entropy(log_std).mean()
    loss = policy_loss + config.value_coef * value_loss - config.entropy_coef * entropy
    with torch.no_grad():
        log_ratio = log_prob - batch["log_probs"]
        stats = {
            "policy_loss": float(policy_loss),
            "value_loss": float(value_loss),
            "entropy": float(entropy),
            "approx_kl": float(((ratio - 1.0) - log_ratio).mean()),
            "clip_fraction": float((torch.abs(ratio - 1.0) > config.clip).float().mean()),
        }
        stats.update({f"value_loss_{k}": float(v) for k, v in value_losses.items()})
    return loss, stats


def _dump_state(model: CTSModel, dump_dir: Path | None) -> Path | None:
    if dump_dir is None:
        return None
    dump_dir.mkdir(parents=True, exist_ok=True)
    path = dump_dir / "diverged_state.npz"
    np.savez(path, **{k: v.detach().cpu().numpy() for k, v in model.state_dict().items()})
    return path


def ppo_update(model: CTSModel, optimizer: torch.optim.Optimizer, buffer: RolloutBuffer,
               bootstrap: dict, config: PPOConfig, generator: torch.Generator,
               dump_dir: Path | None = None) -> dict:
    """Several epochs of minibatch clipped-surrogate updates on the stored rollout.

    Raises :class:`TrainingDivergedError` on a non-finite loss after writing the
    current parameters to ``dump_dir``.
    """
    advantages, returns = buffer.advantages(bootstrap, config)
    d = buffer.data
    T, N = buffer.steps, buffer.n_envs
    batch = {k: _flat(d[k]) for k in ("proprio", "privileged", "heightmap", "student_latent", "actions")}
    batch["log_probs"] = _flat(d["log_probs"])
    batch["advantages"] = _flat(advantages)
    batch["teacher_mask"] = torch.as_tensor(np.broadcast_to(buffer.teacher_mask, (T, N)).reshape(-1))
    for k, v in returns.items():
        batch[f"return_{k}"] = _flat(v)
    total = T * N
    size = total // config.minibatches
    params = [p for group in optimizer.param_groups for p in group["params"]]
    history = []
    for _ in range(config.epochs):
        perm = torch.randperm(total, generator=generator)
        for m in range(config.minibatches):
            idx = perm[m * size:(m + 1) * size]
            loss, stats = ppo_loss(model, {k: v[idx] for k, v in batch.items()}, config)
            if not torch.isfinite(loss):
                path = _dump_state(model, dump_dir)
                raise TrainingDivergedError(f"non-finite PPO loss ({loss.item()})", path)
            optimizer.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(params, config.max_grad_norm)
            optimizer.step()
            history.append(stats)
    return {k: float(np.mean([h[k] for h in history])) for k in history[0]}
