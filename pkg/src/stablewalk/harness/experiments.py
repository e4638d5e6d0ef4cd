"""Training, evaluation and the comparison experiments built on top of them."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
import torch

from stablewalk.biped.env import TIMEOUT, BipedEnv, body_frame_xy, trajectory_row
from stablewalk.biped.model import push_limits, projected_gravity, quat_to_matrix, yaw_of
from stablewalk.errors import ConfigurationError
from stablewalk.harness.checkpoint import load_checkpoint, model_tensors, restore_model, save_checkpoint
from stablewalk.harness.config import ExperimentConfig, from_dict
from stablewalk.learn.cts import CTSTrainer
from stablewalk.learn.networks import CTSModel
from stablewalk.terrain import HeightmapStack, TerrainCurriculum, TerrainSpec, generate_terrain

log = logging.getLogger(__name__)

METRICS = ("success", "orientation_error", "ang_vel_error", "vel_tracking_error", "rec_error")
PUSH_AXES = ("force_x", "force_y", "force_z", "torque_x", "torque_y", "torque_z")


# -- CSV -------------------------------------------------------------------------------------------

def write_csv(path: str | Path, rows: list[dict], config_hash: str, seed) -> Path:
    """Write ``rows`` with leading ``config_hash`` and ``seed`` columns."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    seed_text = ";".join(str(s) for s in seed) if isinstance(seed, (list, tuple)) else str(seed)
    full = [{"config_hash": config_hash, "seed": row.get("seed", seed_text),
             **{k: v for k, v in row.items() if k != "seed"}} for row in rows]
    names: list[str] = []
    for row in full:
        names += [k for k in row if k not in names]
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=names or ["config_hash", "seed"])
        writer.writeheader()
        writer.writerows(full)
    return path


def read_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


# -- terrain setup ---------------------------------------------------------------------------------

class TrainingTerrain:
    """Maps (terrain kind, curriculum level) to a heightmap in one shared stack.

    Environment ``i`` trains on ``kinds[i % len(kinds)]``; flat ground has a
    single map regardless of level.
    """

    def __init__(self, config: ExperimentConfig, n_envs: int):
        setup = config.terrain
        levels = setup.curriculum.levels
        self.curriculum = TerrainCurriculum(n_envs, setup.curriculum)
        maps, self.slots = [], {}
        for k, kind in enumerate(setup.kinds):
            if kind in self.slots:
                continue
            count = 1 if kind == "flat" else levels
            self.slots[kind] = []
            for level in range(count):
                difficulty = float(self.curriculum.difficulty(level))
                maps.append(generate_terrain(TerrainSpec(kind=kind, difficulty=difficulty,
                                                         seed=setup.terrain_seed + 100 * k + level)))
                self.slots[kind].append(len(maps) - 1)
        self.stack = HeightmapStack(maps)
        self.env_kind = [setup.kinds[i % len(setup.kinds)] for i in range(n_envs)]

    def select(self, env: int, rng: np.random.Generator) -> int:
        slots = self.slots[self.env_kind[env]]
        return slots[min(int(self.curriculum.levels[env]), len(slots) - 1)]

    def record(self, end) -> None:
        self.curriculum.record(end.env, end.success)


def single_terrain(kind: str, difficulty: float, seed: int) -> HeightmapStack:
    return HeightmapStack([generate_terrain(TerrainSpec(kind=kind, difficulty=difficulty, seed=seed))])


# -- training --------------------------------------------------------------------------------------

@dataclass
class TrainingResult:
    model: CTSModel
    metrics: list[dict]
    checkpoint: Path | None


def checkpoint_payload(config: ExperimentConfig, seed: int, iteration: int) -> tuple[dict, dict]:
    return config.to_dict(), {"seed": seed, "iteration": iteration, "variant": config.variant,
                              "config_hash": config.hash()}


def run_training(config: ExperimentConfig, seed: int, out_dir: str | Path | None = None) -> TrainingResult:
    """Train one policy with the configured variant; logs a row per iteration.

    With ``out_dir`` set, writes ``metrics.csv`` and checkpoints under ``ckpt/``.
    """
    out = Path(out_dir) if out_dir is not None else None
    t = config.training
    terrain = TrainingTerrain(config, t.n_envs)
    env = BipedEnv(terrain.stack, t.n_envs, config.env_config(), seed=seed, terrain_selector=terrain.select,
                   workers=t.workers, randomize_start=t.randomize_start, episode_callback=terrain.record)
    trainer = CTSTrainer(env, config.cts_config(), seed=seed, dump_dir=None if out is None else out / "dump")
    rows = []
    h = config.hash()

    def save(name: str, iteration: int) -> Path | None:
        if out is None:
            return None
        cfg, extra = checkpoint_payload(config, seed, iteration)
        path = out / "ckpt" / name
        save_checkpoint(path, model_tensors(trainer.model), cfg, extra)
        return path

    if t.checkpoint_every:
        save("iter_00000.ckpt", 0)
    try:
        for it in range(t.iterations):
            m = trainer.train_iteration()
            m["curriculum_level"] = float(np.mean(terrain.curriculum.levels))
            rows.append({"variant": config.variant, "seed": seed, **m})
            log.info("iter %d reward %.3f success %.2f vel_err %.3f rec %.4f", m["iteration"], m["reward_total"],
                     m["success_rate"], m["vel_error"], m["rec_loss"])
            if t.checkpoint_every and (it + 1) % t.checkpoint_every == 0:
                save(f"iter_{it + 1:05d}.ckpt", it + 1)
    finally:
        env.close()
    path = save("final.ckpt", t.iterations)
    if out is not None:
        write_csv(out / "metrics.csv", rows, h, seed)
    return TrainingResult(trainer.model, rows, path)


def load_policy(path: str | Path, config: ExperimentConfig | None = None) -> tuple[CTSModel, ExperimentConfig, dict]:
    """Rebuild the model stored in a checkpoint.

    The network section of ``config`` (when given) must match the snapshot;
    tensor shape mismatches raise a shape error naming the tensor.
    """
    tensors, cfg, extra = load_checkpoint(path)
    stored = from_dict(ExperimentConfig, cfg)
    net = stored.network if config is None else config.network
    model = CTSModel(net)
    restore_model(model, tensors)
    return model, stored, extra


def reconstruction_reduction(initial: CTSModel, trained: CTSModel, config: ExperimentConfig, seed: int,
                             n_envs: int = 64) -> dict:
    """Estimator loss of the initial versus the trained student on one shared rollout.

    The rollout is collected by the trained policy with every environment in the
    student group, and both losses use the trained teacher encoders as latent
    targets, so the comparison isolates what the estimators learned from the
    drift of the teacher latents.
    """
    env = BipedEnv(single_terrain("flat", 0.5, config.terrain.terrain_seed + 7919), n_envs, config.env_config(),
                   seed=eval_seed(seed), fixed_command=np.asarray(config.evaluation.command, dtype=np.float64))
    try:
        runner = CTSTrainer(env, replace(config.cts_config(), teacher_fraction=0.0), seed=seed, model=trained)
        _, _, replay, _ = runner.collect()
    finally:
        env.close()
    mixed = CTSModel(trained.config)
    mixed.load_state_dict(trained.state_dict())
    mixed.student.load_state_dict(initial.student.state_dict())
    with torch.no_grad():
        after = float(runner.estimator_loss(replay))
        runner.model = mixed
        before = float(runner.estimator_loss(replay))
    return {"initial": before, "trained": after, "reduction": 1.0 - after / before}


# -- evaluation ------------------------------------------------------------------------------------

@dataclass(frozen=True)
class EpisodeMetrics:
    """Per-episode quality metrics; errors are time averages over the alive steps."""

    success: int
    orientation_error: float
    ang_vel_error: float
    vel_tracking_error: float
    rec_error: float
    length: int

    def __post_init__(self):
        if self.success not in (0, 1):
            raise ConfigurationError("success must be 0 or 1")
        for name in METRICS[1:]:
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be non-negative")


def evaluate_policy(model: CTSModel, config: ExperimentConfig, terrain: HeightmapStack, seed: int,
                    episodes: int, steps: int, command, pushes: list | None = None,
                    trajectory: list | None = None) -> list[EpisodeMetrics]:
    """Roll out ``episodes`` independent student-policy episodes of up to ``steps`` steps.

    ``pushes`` optionally holds one ``(step, wrench, duration)`` tuple (or ``None``)
    per episode. Each environment's first episode is scored; later auto-reset
    episodes are ignored.
    """
    env = BipedEnv(terrain, episodes, config.env_config(), seed=seed, workers=config.evaluation.workers,
                   fixed_command=np.asarray(command, dtype=np.float64))
    runner = CTSTrainer(env, replace(config.cts_config(), teacher_fraction=0.0), seed=seed, model=model)
    cmd = np.asarray(command, dtype=np.float64)
    alive = np.ones(episodes, dtype=bool)
    length = np.zeros(episodes, dtype=np.int64)
    failed = np.zeros(episodes, dtype=bool)
    sums = {k: np.zeros(episodes) for k in METRICS[1:]}
    try:
        for t in range(steps):
            if pushes is not None:
                for i, p in enumerate(pushes):
                    if p is not None and p[0] == t and alive[i]:
                        env.schedule_push(i, p[1], p[2])
            _, action, _, _, _ = runner.act(deterministic=True)
            h_hat = runner.last_height_estimate.numpy()
            h_true = env.teacher["heightmap"]
            br, done, reason, _ = env.step(action.numpy().astype(np.float64))
            s = env.last_state_before_reset
            R = quat_to_matrix(s.orientation)
            g = projected_gravity(R)
            ang_b = np.einsum("nji,nj->ni", R, s.ang_vel)
            v_b = body_frame_xy(yaw_of(s.orientation), s.com_vel[:, :2])
            step_vals = {
                "orientation_error": np.linalg.norm(g - np.array([0.0, 0.0, -1.0]), axis=-1),
                "ang_vel_error": np.abs(ang_b[:, 0]) + np.abs(ang_b[:, 1]),
                "vel_tracking_error": np.linalg.norm(cmd[:2] - v_b, axis=-1),
                "rec_error": 100.0 * np.mean(np.abs(h_hat - h_true), axis=-1),
            }
            if trajectory is not None and alive[0]:
                row = trajectory_row(t * config.sim.control_dt, s, 0, action.numpy(), br)
                row.update({f"h_{k}": float(v) for k, v in enumerate(h_true[0])})
                row.update({f"h_hat_{k}": float(v) for k, v in enumerate(h_hat[0])})
                row["rec_error_cm"] = float(step_vals["rec_error"][0])
                trajectory.append(row)
            for k, v in step_vals.items():
                sums[k] += np.where(alive, v, 0.0)
            length += alive
            ended = alive & done
            failed |= ended & (reason != TIMEOUT)
            alive &= ~done
            if not alive.any():
                break
    finally:
        env.close()
    n = np.maximum(length, 1)
    return [EpisodeMetrics(success=int(not failed[i]), length=int(length[i]),
                           **{k: float(sums[k][i] / n[i]) for k in METRICS[1:]})
            for i in range(episodes)]


def summarize(metrics: list[EpisodeMetrics]) -> dict:
    out = {}
    for k in METRICS:
        vals = np.array([getattr(m, k) for m in metrics], dtype=np.float64)
        out[f"{k}_mean"] = float(vals.mean())
        out[f"{k}_std"] = float(vals.std())
    out["episodes"] = len(metrics)
    return out


def eval_seed(seed: int) -> int:
    """Evaluation rollouts use a stream disjoint from training."""
    return 1_000_003 + seed


def run_evaluation(checkpoint: str | Path, config: ExperimentConfig, seed: int,
                   out_dir: str | Path | None = None, debug: bool = False) -> list[dict]:
    """Evaluate a checkpoint on every configured terrain; one summary row per terrain.

    With ``debug`` and ``out_dir`` set, episode 0 of each terrain is dumped to
    ``trajectory_<terrain>.csv``.
    """
    model, stored, extra = load_policy(checkpoint, config)
    variant = extra.get("variant", stored.variant)
    ev = config.evaluation
    episode_rows, summary_rows = [], []
    for kind in ev.terrains:
        terrain = single_terrain(kind, ev.difficulty, config.terrain.terrain_seed + 7919)
        traj = [] if debug and out_dir is not None else None
        metrics = evaluate_policy(model, config, terrain, eval_seed(seed), ev.episodes, ev.steps, ev.command,
                                  trajectory=traj)
        if traj is not None:
            write_csv(Path(out_dir) / f"trajectory_{kind}.csv", traj, config.hash(), seed)
        for i, m in enumerate(metrics):
            episode_rows.append({"terrain": kind, "variant": variant, "seed": seed, "episode": i, **asdict(m)})
        summary_rows.append({"terrain": kind, "variant": variant, "seed": seed, **summarize(metrics)})
    if out_dir is not None:
        out = Path(out_dir)
        write_csv(out / "eval.csv", episode_rows, config.hash(), seed)
        write_csv(out / "summary.csv", summary_rows, config.hash(), seed)
    return summary_rows


# -- comparisons -----------------------------------------------------------------------------------

def _mean_std(values) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


@dataclass
class AblationResult:
    table: list[dict]
    per_seed: list[dict]
    checkpoints: dict


def run_ablation(config: ExperimentConfig, out_dir: str | Path | None = None) -> AblationResult:
    """Train and evaluate every ablation variant on shared seeds, terrains and budgets.

    Returns the variant x terrain table (mean and std over seeds of each metric's
    per-seed mean), the per-seed rows and the checkpoint (or model) per run.
    """
    variants = config.ablation.variants
    if len(variants) < 2:
        raise ConfigurationError("an ablation needs at least two variants")
    out = Path(out_dir) if out_dir is not None else None
    per_seed, checkpoints = [], {}
    for variant in variants:
        vcfg = config.with_variant(variant)
        for seed in config.seeds:
            run_dir = None if out is None else out / variant / f"seed_{seed}"
            result = run_training(vcfg, seed, run_dir)
            checkpoints[(variant, seed)] = result.checkpoint if result.checkpoint is not None else result.model
            for kind in config.evaluation.terrains:
                terrain = single_terrain(kind, config.evaluation.difficulty, config.terrain.terrain_seed + 7919)
                metrics = evaluate_policy(result.model, vcfg, terrain, eval_seed(seed), config.evaluation.episodes,
                                          config.evaluation.steps, config.evaluation.command)
                per_seed.append({"variant": variant, "terrain": kind, "seed": seed,
                                 "config_hash_variant": vcfg.hash(), **summarize(metrics)})
    table = []
    for variant in variants:
        for kind in config.evaluation.terrains:
            rows = [r for r in per_seed if r["variant"] == variant and r["terrain"] == kind]
            entry = {"variant": variant, "terrain": kind}
            for k in METRICS:
                entry[f"{k}_mean"], entry[f"{k}_std"] = _mean_std([r[f"{k}_mean"] for r in rows])
            table.append(entry)
    if out is not None:
        write_csv(out / "ablation_per_seed.csv", per_seed, config.hash(), list(config.seeds))
        write_csv(out / "ablation.csv", table, config.hash(), list(config.seeds))
    return AblationResult(table, per_seed, checkpoints)


def _as_model(policy, config: ExperimentConfig) -> CTSModel:
    if isinstance(policy, CTSModel):
        return policy
    return load_policy(policy, config)[0]


def sample_pushes(config: ExperimentConfig, regime: str, episodes: int, seed: int, mass: float):
    """One random single-axis push per episode: ``(step, wrench, duration, axis, fraction)``."""
    p = config.push
    f_max, t_max = push_limits(regime, mass)
    rng = np.random.default_rng([seed, 77])
    dt = config.sim.control_dt
    out = []
    for _ in range(episodes):
        axis = int(rng.integers(len(PUSH_AXES)))
        frac = float(rng.uniform(-1.0, 1.0))
        step = int(rng.integers(int(p.earliest / dt), int(p.latest / dt) + 1))
        wrench = np.zeros(6)
        wrench[axis] = frac * (f_max if axis < 3 else t_max)
        out.append((step, wrench, p.duration, PUSH_AXES[axis], abs(frac)))
    return out


def push_recovery_experiment(policies: dict, regime: str, config: ExperimentConfig,
                             out_dir: str | Path | None = None) -> list[dict]:
    """Survival under random pushes, per policy, axis and magnitude bin.

    ``policies`` maps ``(variant, seed)`` to a checkpoint path or model. Push
    magnitudes are binned by their fraction of the regime maximum; the row with
    ``axis == "all"`` and ``bin == "all"`` is the overall survival rate.
    """
    p = config.push
    terrain = single_terrain(p.terrain, config.evaluation.difficulty, config.terrain.terrain_seed + 7919)
    edges = np.linspace(0.0, 1.0, p.bins + 1)
    rows = []
    for (variant, seed), policy in policies.items():
        model = _as_model(policy, config)
        vcfg = config.with_variant(variant)
        pushes = sample_pushes(config, regime, p.episodes, seed, config.sim.mass)
        metrics = evaluate_policy(model, vcfg, terrain, eval_seed(seed), p.episodes, config.evaluation.steps,
                                  config.evaluation.command, pushes=[q[:3] for q in pushes])
        success = np.array([m.success for m in metrics], dtype=np.float64)
        axes = np.array([q[3] for q in pushes])
        bins = np.clip(np.digitize([q[4] for q in pushes], edges[1:-1]), 0, p.bins - 1)
        rows.append({"variant": variant, "seed": seed, "regime": regime, "axis": "all", "bin": "all",
                     "episodes": len(success), "survival": float(success.mean())})
        for b in range(p.bins):
            sel = bins == b
            rows.append({"variant": variant, "seed": seed, "regime": regime, "axis": "all", "bin": b,
                         "lo": float(edges[b]), "hi": float(edges[b + 1]), "episodes": int(sel.sum()),
                         "survival": float(success[sel].mean()) if sel.any() else float("nan")})
        for axis in PUSH_AXES:
            for b in ("all", *range(p.bins)):
                sel = (axes == axis) & ((bins == b) if b != "all" else True)
                rows.append({"variant": variant, "seed": seed, "regime": regime, "axis": axis, "bin": b,
                             "episodes": int(sel.sum()),
                             "survival": float(success[sel].mean()) if sel.any() else float("nan")})
    if out_dir is not None:
        write_csv(Path(out_dir) / f"push_{regime}.csv", rows, config.hash(), list(config.seeds))
    return rows


def speed_sweep(policies: dict, config: ExperimentConfig, terrains=None, speeds=None,
                out_dir: str | Path | None = None) -> list[dict]:
    """Success rate per (terrain, commanded forward speed, variant, seed)."""
    terrains = tuple(terrains if terrains is not None else config.sweep.terrains)
    speeds = tuple(speeds if speeds is not None else config.sweep.speeds)
    if not speeds or not terrains:
        raise ConfigurationError("speed sweep needs at least one speed and one terrain")
    ev = config.evaluation
    rows = []
    for kind in terrains:
        terrain = single_terrain(kind, ev.difficulty, config.terrain.terrain_seed + 7919)
        for speed in speeds:
            for (variant, seed), policy in policies.items():
                model = _as_model(policy, config)
                metrics = evaluate_policy(model, config.with_variant(variant), terrain, eval_seed(seed),
                                          ev.episodes, ev.steps, (float(speed), 0.0, 0.0))
                s = summarize(metrics)
                rows.append({"terrain": kind, "speed": float(speed), "variant": variant, "seed": seed,
                             "success_rate": s["success_mean"], "vel_tracking_error": s["vel_tracking_error_mean"]})
    if out_dir is not None:
        write_csv(Path(out_dir) / "sweep.csv", rows, config.hash(), list(config.seeds))
    return rows
