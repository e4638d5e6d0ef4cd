from __future__ import annotations

import struct
from dataclasses import replace

import numpy as np
import pytest
import torch

from stablewalk.errors import (
    CheckpointIntegrityError,
    CheckpointShapeError,
    CheckpointVersionError,
    ConfigurationError,
)
from stablewalk.harness import cli
from stablewalk.harness.checkpoint import load_checkpoint, model_tensors, restore_model, save_checkpoint
from stablewalk.harness.config import ExperimentConfig, from_dict, load_config
from stablewalk.harness.experiments import (
    EpisodeMetrics,
    evaluate_policy,
    load_policy,
    push_recovery_experiment,
    read_csv,
    run_ablation,
    run_evaluation,
    run_training,
    single_terrain,
    speed_sweep,
)
from stablewalk.learn.networks import CTSModel, NetworkConfig

TINY_NET = {"actor_hidden": [16], "critic_hidden": [16], "encoder_hidden": [16], "privileged_latent": 4,
            "height_latent": 4, "gru_hidden": 8}
TINY = from_dict(ExperimentConfig, {
    "seeds": [3],
    "network": TINY_NET,
    "training": {"iterations": 1, "n_envs": 4, "rollout_steps": 4, "checkpoint_every": 1},
    "evaluation": {"episodes": 3, "steps": 15},
    "push": {"episodes": 4, "earliest": 0.05, "latest": 0.2},
    "sweep": {"speeds": [0.5], "terrains": ["flat"]},
})


# -- config ----------------------------------------------------------------------------------------

def test_config_strict_keys(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("training:\n  iterations: 3\n  bogus: 1\n")
    with pytest.raises(ConfigurationError, match="training.bogus"):
        load_config(path)
    path.write_text("training:\n  iterations: 3\nseeds: [4, 5]\n")
    cfg = load_config(path)
    assert cfg.training.iterations == 3 and cfg.seeds == (4, 5)
    with pytest.raises(ConfigurationError):
        from_dict(ExperimentConfig, {"variant": "nope"})
    with pytest.raises(ConfigurationError):
        from_dict(ExperimentConfig, {"training": {"iterations": "many"}})


def test_config_hash_stable_and_sensitive():
    assert ExperimentConfig().hash() == ExperimentConfig().hash()
    assert ExperimentConfig().hash() != ExperimentConfig().with_variant("no_rfm").hash()
    assert from_dict(ExperimentConfig, ExperimentConfig().to_dict()) == ExperimentConfig()


def test_variant_wiring():
    base = ExperimentConfig()
    assert not base.with_variant("no_stable_reward").variant_reward().use_stable_reward
    assert base.with_variant("no_rfm").variant_reward().fusion == "additive"
    assert base.with_variant("l2_velocity_reward").variant_reward().velocity_form == "l2"
    assert not base.with_variant("no_stable_critic").cts_config().ppo.double_critic
    assert base.cts_config().ppo.double_critic


# -- checkpoints -----------------------------------------------------------------------------------

@pytest.fixture
def saved(tmp_path):
    torch.manual_seed(0)
    model = CTSModel(NetworkConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in TINY_NET.items()}))
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model_tensors(model), TINY.to_dict(), {"seed": 3})
    return model, path


def test_checkpoint_round_trip_bitwise(saved):
    model, path = saved
    tensors, cfg, extra = load_checkpoint(path)
    for k, v in model_tensors(model).items():
        assert tensors[k].dtype == v.dtype and tensors[k].tobytes() == v.tobytes()
    assert cfg == TINY.to_dict() and extra == {"seed": 3}
    clone = CTSModel(model.config)
    restore_model(clone, tensors)
    for a, b in zip(model.state_dict().values(), clone.state_dict().values()):
        assert torch.equal(a, b)


def test_checkpoint_truncated(saved, tmp_path):
    _, path = saved
    blob = path.read_bytes()
    for cut in (5, 40, len(blob) // 2, len(blob) - 2):
        bad = tmp_path / f"cut{cut}.ckpt"
        bad.write_bytes(blob[:cut])
        with pytest.raises(CheckpointIntegrityError) as info:
            load_checkpoint(bad)
        assert "offset" in str(info.value)


def test_checkpoint_corrupt_payload_reports_offset(saved, tmp_path):
    _, path = saved
    blob = bytearray(path.read_bytes())
    pos = len(blob) - 100
    blob[pos] ^= 0xFF
    bad = tmp_path / "flip.ckpt"
    bad.write_bytes(bytes(blob))
    with pytest.raises(CheckpointIntegrityError) as info:
        load_checkpoint(bad)
    assert info.value.offset <= pos


def test_checkpoint_version_mismatch(saved, tmp_path):
    _, path = saved
    blob = bytearray(path.read_bytes())
    blob[8:12] = struct.pack("<I", 99)
    bad = tmp_path / "v99.ckpt"
    bad.write_bytes(bytes(blob))
    with pytest.raises(CheckpointVersionError, match="99"):
        load_checkpoint(bad)


def test_checkpoint_network_size_mismatch_names_tensor(saved):
    _, path = saved
    tensors, _, _ = load_checkpoint(path)
    with pytest.raises(CheckpointShapeError) as info:
        restore_model(CTSModel(), tensors)
    assert info.value.tensor in str(info.value)
    wider = CTSModel(replace(CTSModel(NetworkConfig()).config, actor_hidden=(32,), critic_hidden=(16,),
                             encoder_hidden=(16,), privileged_latent=4, height_latent=4, gru_hidden=8))
    with pytest.raises(CheckpointShapeError) as info:
        restore_model(wider, tensors)
    assert info.value.tensor == "actor.body.0.weight" and "actor.body.0.weight" in str(info.value)


# -- training and evaluation -----------------------------------------------------------------------

def test_zero_budget_checkpoint_is_initialization(tmp_path):
    cfg = replace(TINY, training=replace(TINY.training, iterations=0))
    result = run_training(cfg, 3, tmp_path)
    torch.manual_seed(3)
    fresh = CTSModel(cfg.network)
    model, _, extra = load_policy(result.checkpoint)
    assert extra["iteration"] == 0
    for a, b in zip(fresh.state_dict().values(), model.state_dict().values()):
        assert torch.equal(a, b)


def test_training_repeatable_and_csvs_tagged(tmp_path):
    a = run_training(TINY, 3, tmp_path / "a")
    b = run_training(TINY, 3, tmp_path / "b")
    rows_a, rows_b = read_csv(tmp_path / "a" / "metrics.csv"), read_csv(tmp_path / "b" / "metrics.csv")
    assert rows_a == rows_b and len(rows_a) == 1
    assert rows_a[0]["config_hash"] == TINY.hash() and rows_a[0]["seed"] == "3"
    assert (tmp_path / "a" / "ckpt" / "iter_00001.ckpt").exists()
    summary = run_evaluation(a.checkpoint, TINY, 3, tmp_path / "eval", debug=True)
    assert len(summary) == 1 and summary[0]["episodes"] == 3
    for name in ("eval.csv", "summary.csv", "trajectory_flat.csv"):
        rows = read_csv(tmp_path / "eval" / name)
        assert rows and all(r["config_hash"] == TINY.hash() and r["seed"] == "3" for r in rows)


def test_rec_error_recomputed_from_trajectory(tmp_path):
    model = run_training(TINY, 3).model
    traj: list = []
    metrics = evaluate_policy(model, TINY, single_terrain("rough", 0.5, 0), seed=11, episodes=2, steps=10,
                              command=(0.5, 0.0, 0.0), trajectory=traj)
    assert len(traj) == metrics[0].length
    per_step = []
    for row in traj:
        h = np.array([row[f"h_{k}"] for k in range(441)])
        h_hat = np.array([row[f"h_hat_{k}"] for k in range(441)])
        per_step.append(100.0 * np.mean(np.abs(h_hat - h)))
    assert metrics[0].rec_error == pytest.approx(np.mean(per_step), rel=1e-12)


def test_upright_metrics_and_validation():
    with pytest.raises(ConfigurationError):
        EpisodeMetrics(success=2, orientation_error=0, ang_vel_error=0, vel_tracking_error=0, rec_error=0, length=1)
    with pytest.raises(ConfigurationError):
        EpisodeMetrics(success=1, orientation_error=-1, ang_vel_error=0, vel_tracking_error=0, rec_error=0, length=1)


def test_survival_counts_as_success():
    model = CTSModel(TINY.network)
    metrics = evaluate_policy(model, TINY, single_terrain("flat", 0.5, 0), seed=1, episodes=2, steps=5,
                              command=(0.0, 0.0, 0.0))
    assert [m.success for m in metrics] == [1, 1] and all(m.length == 5 for m in metrics)


def test_eval_rejects_mismatched_network(tmp_path):
    result = run_training(TINY, 3, tmp_path)
    with pytest.raises(CheckpointShapeError):
        run_evaluation(result.checkpoint, ExperimentConfig(), 3)


# -- comparisons -----------------------------------------------------------------------------------

def test_ablation_rows_and_identical_variants(tmp_path):
    cfg = replace(TINY, ablation=replace(TINY.ablation, variants=("full", "full")),
                  training=replace(TINY.training, checkpoint_every=0))
    result = run_ablation(cfg, tmp_path)
    assert len(result.table) == 2 * len(cfg.evaluation.terrains)
    a, b = result.table
    assert {k: v for k, v in a.items()} == {k: v for k, v in b.items()}
    rows = read_csv(tmp_path / "ablation.csv")
    assert len(rows) == 2 and all(r["config_hash"] == cfg.hash() for r in rows)
    with pytest.raises(ConfigurationError):
        run_ablation(replace(cfg, ablation=replace(cfg.ablation, variants=("full",))))


def test_push_none_matches_undisturbed_and_sweep_single_row(tmp_path):
    model = run_training(TINY, 3).model
    policies = {("full", 3): model}
    rows = push_recovery_experiment(policies, "none", TINY, tmp_path)
    overall = next(r for r in rows if r["axis"] == "all" and r["bin"] == "all")
    base = evaluate_policy(model, TINY, single_terrain("flat", 0.5, TINY.terrain.terrain_seed + 7919),
                           1_000_003 + 3, TINY.push.episodes, TINY.evaluation.steps, TINY.evaluation.command)
    assert overall["survival"] == np.mean([m.success for m in base])
    assert read_csv(tmp_path / "push_none.csv")[0]["config_hash"] == TINY.hash()
    sweep = speed_sweep(policies, TINY, out_dir=tmp_path)
    assert len(sweep) == 1
    assert sweep == speed_sweep(policies, TINY)
    with pytest.raises(ConfigurationError):
        speed_sweep(policies, TINY, speeds=())


# -- CLI -------------------------------------------------------------------------------------------

def test_cli_train_and_eval(tmp_path, capsys):
    cfg_path = tmp_path / "tiny.yaml"
    from stablewalk.harness.config import dump_config
    dump_config(TINY, cfg_path)
    assert cli.main(["train", "--config", str(cfg_path), "--seed", "3", "--out", str(tmp_path / "run")]) == 0
    ckpt = tmp_path / "run" / "ckpt" / "final.ckpt"
    assert ckpt.exists()
    assert cli.main(["eval", "--config", str(cfg_path), "--out", str(tmp_path / "ev"),
                     "--checkpoint", str(ckpt)]) == 0
    assert (tmp_path / "ev" / "summary.csv").exists()
    bad = tmp_path / "bad.yaml"
    bad.write_text("nonsense: 1\n")
    assert cli.main(["train", "--config", str(bad), "--out", str(tmp_path / "x")]) == 2
    assert "unknown key" in capsys.readouterr().err
