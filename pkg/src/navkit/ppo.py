"""Clipped-surrogate PPO with GAE, curriculum stages, and fine-tuning.

The trainer wires the world, codec, reward, perturbations, and policy
into the collect/estimate/update loop. Obstacle density follows an
ordered curriculum; a stage advances when the rolling success rate over
recent episodes clears the threshold (stages never skip or regress).
Fine-tuning loads a pretrained checkpoint, enables the perturbation
layer, and drops the learning rate.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import subprocess
import time
from dataclasses import dataclass, asdict
from collections import deque
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import codec as C
from . import rewards as R
from . import tensor as T
from . import world as W
from .perturb import PerturbSpec, ObservationPerturber, ActionDelayLine
from .policy import BetaPolicy, PolicyConfig, pack_observations, beta_log_prob, beta_entropy


@dataclass
class TrainConfig:
    lr: float = 2e-4
    finetune_lr: float = 5e-5
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_eps: float = 0.2
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    epochs: int = 4
    minibatch: int = 4096
    horizon: int = 32
    n_envs: int = 64
    total_frames: int = 2_000_000
    seed: int = 0
    sr_window: int = 500  # episodes in the rolling success-rate window
    advance_sr: float = 0.70  # stage advances at this rolling SR
    checkpoint_every: int = 200  # updates
    log_every: int = 1


# obstacle counts per curriculum stage (static, dynamic)
FULL_STAGES = [(300, 60), (350, 80), (400, 100), (400, 120), (400, 140)]


@dataclass
class CurriculumSchedule:
    stages: list  # ordered (n_static, n_dynamic) pairs

    @classmethod
    def pretrain(cls):
        return cls(stages=FULL_STAGES[:4])

    @classmethod
    def finetune(cls):
        return cls(stages=FULL_STAGES[:3])

    @classmethod
    def fixed(cls, n_static, n_dynamic):
        return cls(stages=[(n_static, n_dynamic)])


def compute_gae(rewards, values, dones, bootstrap, gamma, lam):
    """Generalized advantage estimation over (T, E) arrays.

    delta_t = r_t + gamma * V_{t+1} * (1 - done_t) - V_t
    A_t     = delta_t + gamma * lam * (1 - done_t) * A_{t+1}
    Returns (advantages, returns) with returns = A + V.
    """
    rewards = np.asarray(rewards)
    t_len = rewards.shape[0]
    adv = np.zeros_like(rewards)
    next_value = np.asarray(bootstrap)
    carry = np.zeros_like(next_value)
    for t in range(t_len - 1, -1, -1):
        not_done = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_value * not_done - values[t]
        carry = delta + gamma * lam * not_done * carry
        adv[t] = carry
        next_value = values[t]
    return adv, adv + values


def normalize_advantages(adv):
    """Zero-mean, unit-std normalization applied once per update."""
    adv = np.asarray(adv)
    return (adv - adv.mean()) / (adv.std() + 1e-8)


def clipped_surrogate(logp_new: T.Tensor, logp_old, advantages, clip_eps):
    """Pessimistic clipped policy objective (as a loss, to minimize)."""
    ratio = T.exp(T.sub(logp_new, logp_old))
    unclipped = T.mul(ratio, advantages)
    clipped = T.mul(T.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps), advantages)
    return -T.mean(T.minimum(unclipped, clipped))


def ppo_loss(policy: BetaPolicy, batch, cfg: TrainConfig, train=True, rng=None):
    """Total loss (actor + critic + entropy) on one minibatch dict."""
    alpha, beta, value = policy.forward(batch["obs"], train=train, rng=rng)
    logp = beta_log_prob(alpha, beta, batch["actions"])
    actor = clipped_surrogate(logp, batch["logp"], batch["advantages"], cfg.clip_eps)
    err = T.sub(value, batch["returns"])
    critic = T.mean(T.square(err)) * cfg.value_coef
    entropy = T.mean(beta_entropy(alpha, beta))
    total = T.add(T.add(actor, critic), entropy * (-cfg.entropy_coef))
    stats = {
        "actor_loss": float(actor.data),
        "critic_loss": float(critic.data),
        "entropy": float(entropy.data),
        "loss": float(total.data),
    }
    return total, stats


class RolloutBuffer:
    """Fixed-horizon storage, (T, E, ...) per field."""

    def __init__(self, horizon, n_envs, policy_cfg: PolicyConfig):
        t, e = horizon, n_envs
        k = policy_cfg.history
        self.static = np.zeros((t, e, C.N_AZIMUTH, C.N_ELEVATION))
        self.dyn = np.zeros((t, e, policy_cfg.n_slots, k, C.DYN_FEATURES))
        self.dyn_mask = np.zeros((t, e, policy_cfg.n_slots, k))
        self.internal = np.zeros((t, e, k, policy_cfg.internal_token_in))
        self.actions = np.zeros((t, e, policy_cfg.dim))
        self.logp = np.zeros((t, e))
        self.values = np.zeros((t, e))
        self.rewards = np.zeros((t, e))
        self.dones = np.zeros((t, e))
        self.bootstrap = np.zeros(e)

    def store(self, t, packed, actions, logp, values):
        self.static[t] = packed["static"]
        self.dyn[t] = packed["dyn"]
        self.dyn_mask[t] = packed["dyn_mask"]
        self.internal[t] = packed["internal"]
        self.actions[t] = actions
        self.logp[t] = logp
        self.values[t] = values

    def flat_obs(self, idx):
        return {
            "static": self.static.reshape(-1, *self.static.shape[2:])[idx],
            "dyn": self.dyn.reshape(-1, *self.dyn.shape[2:])[idx],
            "dyn_mask": self.dyn_mask.reshape(-1, *self.dyn_mask.shape[2:])[idx],
            "internal": self.internal.reshape(-1, *self.internal.shape[2:])[idx],
        }


def ppo_update(policy, adam, buffer: RolloutBuffer, cfg: TrainConfig, shuffle_rng, dropout_rng):
    """Epochs of minibatch updates; advantages normalized once per update."""
    adv, ret = compute_gae(buffer.rewards, buffer.values, buffer.dones,
                           buffer.bootstrap, cfg.gamma, cfg.gae_lambda)
    flat_adv = normalize_advantages(adv.reshape(-1))
    flat_ret = ret.reshape(-1)
    flat_act = buffer.actions.reshape(-1, buffer.actions.shape[-1])
    flat_logp = buffer.logp.reshape(-1)
    n = flat_adv.shape[0]
    params = policy.parameters()
    last_stats = {}
    for _ in range(cfg.epochs):
        order = shuffle_rng.permutation(n)
        for lo in range(0, n, cfg.minibatch):
            idx = order[lo:lo + cfg.minibatch]
            batch = {
                "obs": buffer.flat_obs(idx),
                "actions": flat_act[idx],
                "logp": flat_logp[idx],
                "advantages": flat_adv[idx],
                "returns": flat_ret[idx],
            }
            loss, stats = ppo_loss(policy, batch, cfg, train=True, rng=dropout_rng)
            if not np.isfinite(stats["loss"]):
                raise T.PoisonedUpdateError("non-finite PPO loss; update aborted, parameters preserved")
            T.zero_grads(params)
            loss.backward()
            T.adam_step(adam)
            last_stats = stats
    return last_stats


class Trainer:
    """Collect -> GAE -> update loop with curriculum scheduling."""

    def __init__(self, world_cfg: W.EpisodeConfig, train_cfg: TrainConfig,
                 policy_cfg: PolicyConfig = None, schedule: CurriculumSchedule = None,
                 perturb: PerturbSpec = None, out_dir=None, finetune_from=None):
        self.world_cfg = world_cfg
        self.cfg = train_cfg
        self.policy_cfg = policy_cfg or PolicyConfig(dim=world_cfg.dim, v_max=world_cfg.v_max)
        self.schedule = schedule or CurriculumSchedule.fixed(world_cfg.n_static, world_cfg.n_dynamic)
        self.perturb = perturb
        self.out_dir = Path(out_dir) if out_dir else None
        self.finetune_from = finetune_from

        ss = np.random.SeedSequence(train_cfg.seed)
        (init_seed, self.sample_seed, self.shuffle_seed, self.world_seed,
         self.perturb_seed, self.dropout_seed) = [int(s.generate_state(1)[0]) for s in ss.spawn(6)]

        self.policy = BetaPolicy(self.policy_cfg, seed=init_seed)
        lr = train_cfg.lr
        if finetune_from is not None:
            if perturb is None or not perturb.any_enabled:
                raise ValueError("fine-tuning requires an enabled perturbation spec")
            params, _, _ = ckpt.load_checkpoint(finetune_from)
            ckpt.restore_into(self.policy.named_parameters(), params)
            lr = train_cfg.finetune_lr
        self.lr = lr
        self.adam = T.AdamState(self.policy.parameters(), lr=lr)

        self.sample_rng = np.random.default_rng(self.sample_seed)
        self.shuffle_rng = np.random.default_rng(self.shuffle_seed)
        self.dropout_rng = np.random.default_rng(self.dropout_seed)

        self.stage = 0
        self.frames = 0
        self.updates = 0
        self.episodes = deque(maxlen=train_cfg.sr_window)
        self.metrics_rows = []
        self._enter_stage(0)

    # -- environment plumbing -------------------------------------------
    def _stage_world_cfg(self, stage):
        n_static, n_dynamic = self.schedule.stages[stage]
        gain_range = None
        if self.perturb is not None and self.perturb.gain:
            gain_range = self.perturb.gain_range
        return dataclasses.replace(self.world_cfg, n_static=n_static, n_dynamic=n_dynamic,
                                   seed=self.world_seed + stage, gain_range=gain_range)

    def _enter_stage(self, stage):
        self.stage = stage
        cfg = self._stage_world_cfg(stage)
        self.state = W.reset(cfg, self.cfg.n_envs)
        self.builder = C.ObservationBuilder(self.state)
        self.prev_vel = self.state.robot_vel.copy()
        spec = self.perturb if self.perturb is not None else PerturbSpec()
        self.obs_perturb = ObservationPerturber(spec, self.cfg.n_envs,
                                                seed=self.perturb_seed + 2 * stage)
        self.act_delay = ActionDelayLine(spec, self.cfg.n_envs, self.world_cfg.dim,
                                         seed=self.perturb_seed + 2 * stage + 1)
        self.episodes.clear()

    def _reset_done_envs(self):
        done = np.flatnonzero(~self.state.active)
        if done.size == 0:
            return
        for e in done:
            self.episodes.append(1.0 if self.state.termination[e] == W.REACHED_GOAL else 0.0)
        W.reset_envs(self.state, done)
        self.builder.reset(done)
        self.obs_perturb.reset(done)
        self.act_delay.reset(done)
        self.prev_vel[done] = 0.0

    @property
    def rolling_sr(self):
        if not self.episodes:
            return 0.0
        return float(np.mean(self.episodes))

    # -- main loop --------------------------------------------------------
    def collect(self, buffer: RolloutBuffer):
        cfg = self.state.config
        for t in range(self.cfg.horizon):
            obs = self.builder.observe()
            seen = self.obs_perturb(obs, self.state.time)
            packed = pack_observations(seen)
            v_hat, logp, value = self.policy.act(packed, self.sample_rng)
            buffer.store(t, packed, v_hat, logp, value)

            # policy velocities live in the goal frame; the world integrates world-frame
            command = self.builder.to_world_velocity(self.policy.executable_velocity(v_hat))
            self.act_delay.push(command, self.state.time)
            for _ in range(cfg.substeps):
                W.step(self.state, self.act_delay.matured(self.state.time))

            # reward always reads the simulator truth, never the perturbed view
            dyn_pos, dyn_mask = C.visible_dynamic(self.state)
            raw = np.clip(
                self.builder.static_fn(self.state.robot_pos, self.builder.beam_dirs),
                self.builder.d_min, self.builder.sensing_range,
            ).reshape(self.state.n_envs, C.N_AZIMUTH, C.N_ELEVATION)
            breakdown = R.compute_reward(self.prev_vel, self.state.robot_pos, self.state.robot_vel,
                                         self.state.goal, self.state.start, raw, dyn_pos, dyn_mask,
                                         dim=cfg.dim)
            buffer.rewards[t] = breakdown.total
            buffer.dones[t] = (~self.state.active).astype(float)
            self.prev_vel = self.state.robot_vel.copy()
            self.frames += self.cfg.n_envs
            self._reset_done_envs()

        final_obs = self.builder.observe()
        final_seen = self.obs_perturb(final_obs, self.state.time)
        _, _, value = self.policy.act(pack_observations(final_seen), self.sample_rng)
        buffer.bootstrap[:] = value

    def train(self, max_updates=None):
        buffer = RolloutBuffer(self.cfg.horizon, self.cfg.n_envs, self.policy_cfg)
        start = time.time()
        self._write_manifest()
        while self.frames < self.cfg.total_frames:
            if max_updates is not None and self.updates >= max_updates:
                break
            self.collect(buffer)
            stats = ppo_update(self.policy, self.adam, buffer, self.cfg,
                               self.shuffle_rng, self.dropout_rng)
            self.updates += 1
            row = {
                "update": self.updates,
                "frames": self.frames,
                "stage": self.stage + 1,
                "sr": round(self.rolling_sr, 6),
                "mean_reward": round(float(buffer.rewards.mean()), 6),
                "actor_loss": round(stats.get("actor_loss", 0.0), 6),
                "critic_loss": round(stats.get("critic_loss", 0.0), 6),
                "entropy": round(stats.get("entropy", 0.0), 6),
            }
            self.metrics_rows.append(row)
            if self.out_dir and self.updates % self.cfg.log_every == 0:
                self._flush_metrics()
            if self.out_dir and self.updates % self.cfg.checkpoint_every == 0:
                self.save_checkpoint(self.out_dir / f"ckpt_update{self.updates}.nvkt")

            full_window = len(self.episodes) == self.episodes.maxlen
            if (full_window and self.rolling_sr >= self.cfg.advance_sr
                    and self.stage + 1 < len(self.schedule.stages)):
                if self.out_dir:
                    self.save_checkpoint(self.out_dir / f"ckpt_stage{self.stage + 1}.nvkt")
                self._enter_stage(self.stage + 1)

        if self.out_dir:
            self.save_checkpoint(self.out_dir / "final.nvkt")
            self._flush_metrics()
        return {
            "updates": self.updates,
            "frames": self.frames,
            "stage": self.stage + 1,
            "sr": self.rolling_sr,
            "wall_time": time.time() - start,
        }

    # -- artifacts ---------------------------------------------------------
    def save_checkpoint(self, path):
        meta = {
            "policy_config": asdict(self.policy_cfg),
            "world_dim": self.world_cfg.dim,
            "frames": self.frames,
            "stage": self.stage + 1,
            "seed": self.cfg.seed,
        }
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        ckpt.save_checkpoint(path, self.policy.named_parameters(), adam=self.adam, meta=meta)

    def _flush_metrics(self):
        path = self.out_dir / "metrics.csv"
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(self.metrics_rows[0].keys()))
            writer.writeheader()
            writer.writerows(self.metrics_rows)

    def _write_manifest(self):
        if not self.out_dir:
            return
        self.out_dir.mkdir(parents=True, exist_ok=True)
        manifest = {
            "train_config": asdict(self.cfg),
            "world_config": asdict(self.world_cfg),
            "policy_config": asdict(self.policy_cfg),
            "stages": self.schedule.stages,
            "perturbations": self.perturb.to_dict() if self.perturb else None,
            "finetune_from": str(self.finetune_from) if self.finetune_from else None,
            "learning_rate": self.lr,
            "git_hash": _git_hash(),
            "seed": self.cfg.seed,
        }
        with open(self.out_dir / "manifest.json", "w") as fh:
            json.dump(manifest, fh, indent=2, default=str)


def _git_hash():
    try:
        return subprocess.check_output(["git", "rev-parse", "HEAD"],
                                       stderr=subprocess.DEVNULL, text=True).strip()
    except Exception:
        return "unknown"
