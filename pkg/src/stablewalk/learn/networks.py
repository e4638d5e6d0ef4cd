"""Actor, double critic and the concurrent teacher/student estimators."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from stablewalk.biped.observations import HEIGHTMAP_DIM, PRIVILEGED_DIM, PROPRIO_DIM, STUDENT_SCAN_DIM
from stablewalk.errors import ConfigurationError

ACTION_DIM = 6


@dataclass(frozen=True)
class NetworkConfig:
    actor_hidden: tuple[int, ...] = (128, 128, 128)
    critic_hidden: tuple[int, ...] = (128, 128, 128)
    encoder_hidden: tuple[int, ...] = (128, 128)
    privileged_latent: int = 16
    height_latent: int = 32
    gru_hidden: int = 64
    history: int = 10
    init_log_std: float = -1.2
    log_std_range: tuple[float, float] = (-3.0, 0.5)

    def __post_init__(self):
        if self.history < 1 or self.gru_hidden < 1:
            raise ConfigurationError("history length and recurrent size must be positive")
        lo, hi = self.log_std_range
        if not lo < hi:
            raise ConfigurationError("log_std_range must be increasing")

    @property
    def latent_dim(self) -> int:
        return self.privileged_latent + self.height_latent


def mlp(in_dim: int, hidden: tuple[int, ...], out_dim: int, zero_last: bool = False) -> nn.Sequential:
    layers: list[nn.Module] = []
    prev = in_dim
    for h in hidden:
        layers += [nn.Linear(prev, h), nn.ELU()]
        prev = h
    last = nn.Linear(prev, out_dim)
    if zero_last:
        nn.init.zeros_(last.weight)
        nn.init.zeros_(last.bias)
    layers.append(last)
    return nn.Sequential(*layers)


def _check_dim(x: torch.Tensor, dim: int, name: str) -> None:
    if x.shape[-1] != dim:
        raise ConfigurationError(f"{name} has trailing dimension {x.shape[-1]}, expected {dim}")


class Actor(nn.Module):
    """Gaussian policy over the 6-D joint offset action; the log-std is state-independent."""

    def __init__(self, config: NetworkConfig = NetworkConfig()):
        super().__init__()
        self.config = config
        self.in_dim = config.latent_dim + PROPRIO_DIM
        self.body = mlp(self.in_dim, config.actor_hidden, ACTION_DIM, zero_last=True)
        self.log_std = nn.Parameter(torch.full((ACTION_DIM,), config.init_log_std))

    def forward(self, latent: torch.Tensor, proprio: torch.Tensor):
        x = torch.cat([latent, proprio], dim=-1)
        _check_dim(x, self.in_dim, "actor input")
        mean = self.body(x)
        lo, hi = self.config.log_std_range
        log_std = self.log_std.clamp(lo, hi).expand_as(mean)
        return mean, log_std


class DoubleCritic(nn.Module):
    """Two independent value heads on identical inputs: locomotion and stability."""

    def __init__(self, config: NetworkConfig = NetworkConfig()):
        super().__init__()
        self.in_dim = PRIVILEGED_DIM + HEIGHTMAP_DIM + config.latent_dim
        self.loco = mlp(self.in_dim, config.critic_hidden, 1)
        self.stable = mlp(self.in_dim, config.critic_hidden, 1)

    def forward(self, privileged: torch.Tensor, heightmap: torch.Tensor, latent: torch.Tensor):
        x = torch.cat([privileged, heightmap, latent], dim=-1)
        _check_dim(x, self.in_dim, "critic input")
        return self.loco(x).squeeze(-1), self.stable(x).squeeze(-1)


class TeacherEncoders(nn.Module):
    """Ground-truth privileged state and heightmap to the teacher latents."""

    def __init__(self, config: NetworkConfig = NetworkConfig()):
        super().__init__()
        self.privileged = mlp(PRIVILEGED_DIM, config.encoder_hidden, config.privileged_latent)
        self.height = mlp(HEIGHTMAP_DIM, config.encoder_hidden, config.height_latent)

    def forward(self, privileged: torch.Tensor, heightmap: torch.Tensor):
        _check_dim(privileged, PRIVILEGED_DIM, "privileged state")
        _check_dim(heightmap, HEIGHTMAP_DIM, "heightmap")
        return self.privileged(privileged), self.height(heightmap)


class StudentEstimators(nn.Module):
    """Privileged estimator (history MLP) and heightmap estimator (features, GRU)."""

    def __init__(self, config: NetworkConfig = NetworkConfig()):
        super().__init__()
        self.config = config
        hist_dim = config.history * PROPRIO_DIM
        self.hist_dim = hist_dim
        self.priv_encoder = mlp(hist_dim, config.encoder_hidden, config.privileged_latent)
        self.priv_decoder = mlp(config.privileged_latent, config.encoder_hidden, PRIVILEGED_DIM)
        self.proprio_features = mlp(hist_dim, config.encoder_hidden[:1], config.gru_hidden)
        self.scan_features = nn.Linear(STUDENT_SCAN_DIM, config.gru_hidden)
        self.gru = nn.GRUCell(2 * config.gru_hidden, config.gru_hidden)
        self.height_head = nn.Linear(config.gru_hidden, config.height_latent)
        self.height_decoder = mlp(config.height_latent, config.encoder_hidden, HEIGHTMAP_DIM)

    def initial_state(self, n: int) -> torch.Tensor:
        p = next(self.parameters())
        return torch.zeros(n, self.config.gru_hidden, dtype=p.dtype)

    def forward(self, history: torch.Tensor, scan: torch.Tensor, hidden: torch.Tensor):
        """One estimator step; returns ``(l_e, e_hat, l_h, h_hat, new_hidden)``.

        ``history`` is the flattened proprioception history ``(N, H * 27)``.
        """
        _check_dim(history, self.hist_dim, "proprioception history")
        _check_dim(scan, STUDENT_SCAN_DIM, "exteroception")
        _check_dim(hidden, self.config.gru_hidden, "recurrent state")
        l_e = self.priv_encoder(history)
        feats = torch.cat([torch.relu(self.proprio_features(history)), torch.relu(self.scan_features(scan))], dim=-1)
        new_hidden = self.gru(feats, hidden)
        l_h = self.height_head(new_hidden)
        return l_e, self.priv_decoder(l_e), l_h, self.height_decoder(l_h), new_hidden


class CTSModel(nn.Module):
    """Everything trained jointly: shared policy, critics and both estimator groups."""

    def __init__(self, config: NetworkConfig = NetworkConfig()):
        super().__init__()
        self.config = config
        self.actor = Actor(config)
        self.critic = DoubleCritic(config)
        self.teacher = TeacherEncoders(config)
        self.student = StudentEstimators(config)

    def policy_parameters(self):
        """Parameters optimised by the policy-gradient objective."""
        return [*self.actor.parameters(), *self.critic.parameters(), *self.teacher.parameters()]


def policy_forward(actor: Actor, latent: torch.Tensor, proprio: torch.Tensor):
    return actor(latent, proprio)


def critic_forward(critic: DoubleCritic, privileged: torch.Tensor, heightmap: torch.Tensor,
                   latent: torch.Tensor):
    return critic(privileged, heightmap, latent)


def estimator_forward(estimators: StudentEstimators, history: torch.Tensor, scan: torch.Tensor,
                      hidden: torch.Tensor):
    return estimators(history, scan, hidden)


def gaussian_log_prob(action: torch.Tensor, mean: torch.Tensor, log_std: torch.Tensor) -> torch.Tensor:
    var = torch.exp(2.0 * log_std)
    lp = -0.5 * ((action - mean) ** 2 / var + 2.0 * log_std + torch.log(torch.tensor(2.0 * torch.pi, dtype=mean.dtype)))
    return lp.sum(-1)


def gaussian_entropy(log_std: torch.Tensor) -> torch.Tensor:
    return (0.5 + 0.5 * torch.log(torch.tensor(2.0 * torch.pi, dtype=log_std.dtype)) + log_std).sum(-1)


def mse(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return torch.mean((a - b) ** 2)


def reconstruction_loss(l_se, l_te, l_sh, l_th, h_hat, h, e_hat, e) -> torch.Tensor:
    """Student/teacher latent alignment plus both decoder reconstructions.

    Teacher latents are treated as constants so this loss never trains the
    teacher encoders.
    """
    for a, b, name in ((l_se, l_te, "privileged latent"), (l_sh, l_th, "height latent"),
                       (h_hat, h, "heightmap"), (e_hat, e, "privileged state")):
        if a.shape != b.shape:
            raise ConfigurationError(f"{name} shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    return mse(l_se, l_te.detach()) + mse(l_sh, l_th.detach()) + mse(h_hat, h) + mse(e_hat, e)
