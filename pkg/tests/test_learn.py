from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest
import torch
from torch import nn

from oracles import gae_reference, max_relative_gradient_error
from stablewalk.biped.env import BipedEnv, EnvConfig
from stablewalk.biped.observations import HEIGHTMAP_DIM, PRIVILEGED_DIM, PROPRIO_DIM, STUDENT_SCAN_DIM
from stablewalk.errors import ConfigurationError, RolloutBufferError, TrainingDivergedError
from stablewalk.learn.cts import CTSConfig, CTSTrainer
from stablewalk.learn.networks import (
    ACTION_DIM,
    Actor,
    CTSModel,
    DoubleCritic,
    NetworkConfig,
    StudentEstimators,
    gaussian_log_prob,
    reconstruction_loss,
)
from stablewalk.learn.ppo import PPOConfig, RolloutBuffer, gae, gae_per_group, ppo_loss, ppo_update
from stablewalk.terrain import HeightmapStack, TerrainSpec, generate_terrain

TINY = NetworkConfig(actor_hidden=(8,), critic_hidden=(8,), encoder_hidden=(8,), privileged_latent=4,
                     height_latent=4, gru_hidden=6)
FLAT = HeightmapStack([generate_terrain(TerrainSpec(kind="flat", size=(6.0, 6.0)))])


def inputs(n, latent_dim, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    r = lambda *s: torch.randn(*s, generator=g, dtype=dtype)
    return {"latent": r(n, latent_dim), "proprio": r(n, PROPRIO_DIM), "privileged": r(n, PRIVILEGED_DIM),
            "heightmap": r(n, HEIGHTMAP_DIM), "history": r(n, 10 * PROPRIO_DIM), "scan": r(n, STUDENT_SCAN_DIM)}


# -- networks --------------------------------------------------------------------------------------

def test_actor_zero_init_mean_and_purity():
    actor = Actor()
    x = inputs(5, actor.config.latent_dim)
    mean, log_std = actor(x["latent"], x["proprio"])
    assert mean.shape == (5, ACTION_DIM) and not mean.any()
    assert torch.equal(actor(x["latent"], x["proprio"])[1], log_std)
    with torch.no_grad():
        actor.body[-1].weight.normal_()
    a, b = actor(x["latent"], x["proprio"])[0], actor(x["latent"], x["proprio"])[0]
    assert torch.equal(a, b)
    with pytest.raises(ConfigurationError):
        actor(x["latent"][:, :3], x["proprio"])


def test_critic_zero_heads_and_independence():
    critic = DoubleCritic()
    x = inputs(4, critic.in_dim - PRIVILEGED_DIM - HEIGHTMAP_DIM)
    for head in (critic.loco, critic.stable):
        nn.init.zeros_(head[-1].weight)
        nn.init.zeros_(head[-1].bias)
    v1, v2 = critic(x["privileged"], x["heightmap"], x["latent"])
    assert not v1.any() and not v2.any()
    with torch.no_grad():
        for p in critic.loco.parameters():
            p.add_(0.3)
    w1, w2 = critic(x["privileged"], x["heightmap"], x["latent"])
    assert torch.equal(w2, v2) and not torch.equal(w1, v1)


def test_critic_fuzz_finite():
    critic = DoubleCritic()
    x = inputs(10_000, critic.in_dim - PRIVILEGED_DIM - HEIGHTMAP_DIM, seed=3)
    with torch.no_grad():
        v1, v2 = critic(x["privileged"], x["heightmap"], x["latent"])
    assert torch.isfinite(v1).all() and torch.isfinite(v2).all()


def test_estimator_dimensions_and_recurrent_purity():
    est = StudentEstimators()
    x = inputs(3, 0, seed=1)
    h0 = est.initial_state(3)
    l_e, e_hat, l_h, h_hat, h1 = est(x["history"], x["scan"], h0)
    assert e_hat.shape == (3, 51) and h_hat.shape == (3, 441)
    assert l_e.shape == (3, 16) and l_h.shape == (3, 32) and h1.shape == (3, 64)
    seq = [inputs(3, 0, seed=s) for s in range(5)]

    def replay():
        h, states = est.initial_state(3), []
        for step in seq:
            *_, h = est(step["history"], step["scan"], h)
            states.append(h)
        return states

    for a, b in zip(replay(), replay()):
        assert torch.equal(a, b)
    with pytest.raises(ConfigurationError):
        est(x["history"][:, :27], x["scan"], h0)


def test_reconstruction_loss_examples():
    z = lambda *s: torch.zeros(*s)
    args = [z(2, 16), z(2, 16), z(2, 32), z(2, 32), z(2, 441), z(2, 441)]
    assert float(reconstruction_loss(*args, z(2, 51), z(2, 51))) == 0.0
    assert float(reconstruction_loss(*args, torch.full((2, 51), 0.1, dtype=torch.float64),
                                     torch.zeros(2, 51, dtype=torch.float64))) == pytest.approx(0.01, abs=1e-15)
    with pytest.raises(ConfigurationError):
        reconstruction_loss(*args, z(2, 50), z(2, 51))


def test_reconstruction_loss_does_not_train_teacher():
    model = CTSModel(TINY)
    x = inputs(4, 0)
    l_te, l_th = model.teacher(x["privileged"], x["heightmap"])
    l_se, e_hat, l_sh, h_hat, _ = model.student(x["history"], x["scan"], model.student.initial_state(4))
    reconstruction_loss(l_se, l_te, l_sh, l_th, h_hat, x["heightmap"], e_hat, x["privileged"]).backward()
    assert all(p.grad is None for p in model.teacher.parameters())
    assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in model.student.parameters())


# -- advantage estimation --------------------------------------------------------------------------

def test_gae_examples():
    adv, ret = gae([[1.0]], [[0.0]], [5.0], [[True]], 0.99, 0.95)
    assert adv[0, 0] == 1.0 and ret[0, 0] == 1.0
    rng = np.random.default_rng(0)
    r, v = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
    adv, _ = gae(r, v, rng.normal(size=3), np.zeros((6, 3), bool), 0.0, 0.95)
    assert np.array_equal(adv, r - v)


def test_gae_three_step_matches_recursion():
    r = [[1.0, -0.5], [0.2, 0.3], [-0.7, 1.1]]
    v = [[0.4, 0.1], [-0.2, 0.6], [0.9, -0.3]]
    dones = [[False, False], [False, True], [False, False]]
    boot = [0.25, -0.8]
    adv, ret = gae(r, v, boot, dones, 0.99, 0.95)
    ref = gae_reference(r, v, boot, dones, 0.99, 0.95)
    assert np.max(np.abs(adv - ref)) < 1e-9
    assert np.max(np.abs(ret - (ref + np.array(v)))) < 1e-9


def test_gae_errors():
    with pytest.raises(RolloutBufferError):
        gae(np.zeros((3, 2)), np.zeros((2, 2)), np.zeros(2), np.zeros((3, 2), bool), 0.99, 0.95)
    with pytest.raises(ConfigurationError):
        gae(np.zeros((3, 2)), np.zeros((3, 2)), np.zeros(2), np.zeros((3, 2), bool), 1.5, 0.95)


def test_group_returns_sum_to_merged_stream():
    rng = np.random.default_rng(1)
    for _ in range(20):
        r, v = rng.normal(size=(2, 16, 5)), rng.normal(size=(2, 16, 5))
        boot = rng.normal(size=(2, 5))
        dones = rng.random((16, 5)) < 0.1
        _, ret = gae_per_group(r, v, boot, dones, 0.99, 0.95)
        _, merged = gae(r.sum(0), v.sum(0), boot.sum(0), dones, 0.99, 0.95)
        assert np.max(np.abs(ret.sum(0) - merged)) < 1e-9


# -- PPO -------------------------------------------------------------------------------------------

def filled_buffer(model, T=6, N=4, seed=0, double=True):
    rng = np.random.default_rng(seed)
    mask = np.arange(N) < N // 2
    buf = RolloutBuffer(T, N, PROPRIO_DIM, PRIVILEGED_DIM, HEIGHTMAP_DIM, model.config.latent_dim, ACTION_DIM, mask)
    for _ in range(T):
        loco, stab = rng.normal(size=N), rng.normal(size=N)
        if not double:
            loco, stab = loco + stab, np.zeros(N)
        buf.add(proprio=rng.normal(size=(N, PROPRIO_DIM)), privileged=rng.normal(size=(N, PRIVILEGED_DIM)),
                heightmap=rng.normal(size=(N, HEIGHTMAP_DIM)),
                student_latent=rng.normal(size=(N, model.config.latent_dim)),
                actions=rng.normal(scale=0.3, size=(N, ACTION_DIM)), log_probs=rng.normal(size=N),
                reward_locomotion=loco, reward_stability=stab, reward_total=loco + stab,
                value_locomotion=rng.normal(size=N), value_stability=np.zeros(N) if not double else rng.normal(size=N),
                dones=rng.random(N) < 0.2)
    return buf


def test_buffer_errors():
    model = CTSModel(TINY)
    buf = filled_buffer(model, T=2)
    with pytest.raises(RolloutBufferError):
        buf.add(**{k: v[0] for k, v in buf.data.items()})
    short = RolloutBuffer(3, 4, PROPRIO_DIM, PRIVILEGED_DIM, HEIGHTMAP_DIM, 8, 6, np.ones(4, bool))
    with pytest.raises(RolloutBufferError):
        short.advantages({"locomotion": np.zeros(4), "stability": np.zeros(4)}, PPOConfig())


def _batch_from(buf, model, advantages=None, returns=None):
    d, T, N = buf.data, buf.steps, buf.n_envs
    flat = lambda x: torch.as_tensor(x.reshape(-1, *x.shape[2:]), dtype=torch.float32)
    batch = {k: flat(d[k]) for k in ("proprio", "privileged", "heightmap", "student_latent", "actions", "log_probs")}
    batch["teacher_mask"] = torch.as_tensor(np.broadcast_to(buf.teacher_mask, (T, N)).reshape(-1))
    batch["advantages"] = flat(advantages if advantages is not None else np.zeros((T, N)))
    for k in ("locomotion", "stability"):
        batch[f"return_{k}"] = flat(returns[k]) if returns and k in returns else torch.zeros(T * N)
    return batch


def test_zero_advantage_leaves_policy_unchanged():
    torch.manual_seed(0)
    model = CTSModel(TINY)
    with torch.no_grad():
        model.actor.body[-1].weight.normal_(std=0.1)
    buf = filled_buffer(model)
    batch = _batch_from(buf, model)
    with torch.no_grad():
        latent = torch.where(batch["teacher_mask"][:, None],
                             torch.cat(model.teacher(batch["privileged"], batch["heightmap"]), -1),
                             batch["student_latent"])
        mean, log_std = model.actor(latent, batch["proprio"])
        batch["log_probs"] = gaussian_log_prob(batch["actions"], mean, log_std)
        v1, v2 = model.critic(batch["privileged"], batch["heightmap"], latent)
        batch["return_locomotion"], batch["return_stability"] = v1.clone(), v2.clone()
    loss, stats = ppo_loss(model, batch, PPOConfig(entropy_coef=0.0))
    assert stats["value_loss"] == 0.0
    loss.backward()
    for p in model.actor.parameters():
        assert p.grad is None or not p.grad.any()


def test_importance_ratio_is_one_at_collection():
    env = BipedEnv(FLAT, 4, EnvConfig(), seed=0)
    trainer = CTSTrainer(env, CTSConfig(network=TINY, rollout_steps=5), seed=0)
    with torch.no_grad():
        trainer.model.actor.body[-1].weight.normal_(std=0.1)
    buf, _, _, _ = trainer.collect()
    env.close()
    batch = _batch_from(buf, trainer.model)
    model = trainer.model
    with torch.no_grad():
        latent = torch.where(batch["teacher_mask"][:, None],
                             torch.cat(model.teacher(batch["privileged"], batch["heightmap"]), -1),
                             batch["student_latent"])
        mean, log_std = model.actor(latent, batch["proprio"])
        ratio = torch.exp(gaussian_log_prob(batch["actions"], mean, log_std) - batch["log_probs"])
    assert torch.max(torch.abs(ratio - 1.0)) < 1e-9


def test_single_critic_matches_merged_double_critic():
    torch.manual_seed(1)
    model = CTSModel(TINY)
    buf = filled_buffer(model, double=False)
    boot = {"locomotion": np.linspace(-1, 1, 4), "stability": np.zeros(4)}
    adv_s, ret_s = buf.advantages(boot, PPOConfig(double_critic=False))
    adv_d, ret_d = buf.advantages(boot, PPOConfig(double_critic=True))
    assert np.allclose(adv_s, adv_d, atol=1e-12, rtol=0)
    assert np.array_equal(ret_s["locomotion"], ret_d["locomotion"])
    _, s_single = ppo_loss(model, _batch_from(buf, model, adv_s, ret_s), PPOConfig(double_critic=False))
    _, s_double = ppo_loss(model, _batch_from(buf, model, adv_d, ret_d), PPOConfig(double_critic=True))
    assert s_single["policy_loss"] == s_double["policy_loss"]
    assert s_single["value_loss_locomotion"] == s_double["value_loss_locomotion"]


def test_ppo_loss_gradient_matches_finite_differences():
    torch.manual_seed(2)
    cfg = NetworkConfig(actor_hidden=(2,), critic_hidden=(2,), encoder_hidden=(2,), privileged_latent=1,
                        height_latent=1, gru_hidden=2)
    model = CTSModel(cfg).double()
    with torch.no_grad():
        model.actor.body[-1].weight.normal_(std=0.5)
    buf = filled_buffer(model, seed=4)
    adv, ret = buf.advantages({"locomotion": np.zeros(4), "stability": np.zeros(4)}, PPOConfig())
    batch = {k: v.double() if v.is_floating_point() else v for k, v in _batch_from(buf, model, adv, ret).items()}
    # The actor's last layer has 2x6 weights, 6 biases and 6 log-stds; probe ten entries in total.
    params = [model.actor.body[-1].weight, model.actor.log_std]
    err = max_relative_gradient_error(lambda: ppo_loss(model, batch, PPOConfig())[0], params,
                                      np.random.default_rng(0), coords=5)
    assert err < 1e-4


def test_ppo_update_diagnostics_and_divergence(tmp_path):
    torch.manual_seed(3)
    model = CTSModel(TINY)
    buf = filled_buffer(model)
    opt = torch.optim.Adam(model.policy_parameters(), lr=1e-3)
    boot = {"locomotion": np.zeros(4), "stability": np.zeros(4)}
    diag = ppo_update(model, opt, buf, boot, PPOConfig(epochs=1, minibatches=2), torch.Generator().manual_seed(0))
    assert {"policy_loss", "value_loss", "entropy", "approx_kl", "clip_fraction"} <= set(diag)
    buf.data["proprio"][0, 0, 0] = np.nan
    with pytest.raises(TrainingDivergedError) as info:
        ppo_update(model, opt, buf, boot, PPOConfig(epochs=1, minibatches=1), torch.Generator().manual_seed(0),
                   dump_dir=tmp_path)
    assert info.value.dump_path is not None and info.value.dump_path.exists()


# -- gradient checks per layer type ----------------------------------------------------------------

@pytest.mark.parametrize("layer", ["affine", "elu", "relu", "gru"])
def test_layer_gradients(layer):
    torch.manual_seed(0)
    rng = np.random.default_rng(0)
    x = torch.randn(5, 4, dtype=torch.float64)
    if layer == "gru":
        module = nn.GRUCell(4, 3).double()
        h = torch.randn(5, 3, dtype=torch.float64)
        fn = lambda: (module(x, h) ** 2).sum()
    else:
        act = {"affine": nn.Identity(), "elu": nn.ELU(), "relu": nn.ReLU()}[layer]
        module = nn.Sequential(nn.Linear(4, 3), act).double()
        fn = lambda: (module(x) ** 2).sum()
    assert max_relative_gradient_error(fn, list(module.parameters()), rng) < 1e-4


# -- concurrent teacher-student iteration ----------------------------------------------------------

def small_trainer(seed=0, **changes):
    env = BipedEnv(FLAT, 4, EnvConfig(), seed=seed)
    return CTSTrainer(env, replace(CTSConfig(network=TINY, rollout_steps=4), **changes), seed=seed)


def test_zero_estimator_lr_freezes_student():
    trainer = small_trainer(estimator_lr=0.0)
    before = {k: v.clone() for k, v in trainer.model.student.state_dict().items()}
    metrics = trainer.train_iteration()
    trainer.env.close()
    for k, v in trainer.model.student.state_dict().items():
        assert torch.equal(v, before[k])
    assert {"reward_locomotion", "reward_stability", "rec_loss", "policy_loss"} <= set(metrics)


def test_iteration_determinism():
    runs = []
    for _ in range(2):
        trainer = small_trainer(seed=5)
        runs.append([trainer.train_iteration() for _ in range(2)])
        trainer.env.close()
    for a, b in zip(*runs):
        assert a.keys() == b.keys()
        assert all(np.array_equal(a[k], b[k], equal_nan=True) for k in a)


def test_teacher_split_and_config_errors():
    trainer = small_trainer()
    assert trainer.teacher_mask.tolist() == [True, True, False, False]
    trainer.env.close()
    with pytest.raises(ConfigurationError):
        CTSConfig(teacher_fraction=1.5)
    with pytest.raises(ConfigurationError):
        PPOConfig(gamma=2.0)
