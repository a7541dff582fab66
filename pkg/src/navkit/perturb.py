"""Deployment-gap perturbations wrapped around the env/policy interface.

Five factors, individually switchable: Gaussian input noise per channel
group, Bernoulli dropout of dynamic-obstacle slots, input latency, action
latency, and velocity-controller gain randomization. Latencies are
sampled once per episode and held constant (a per-step resample mode
exists behind a flag). The all-off spec is a bitwise identity.

Factors apply in the fixed order: latency, then dropout, then noise.
Queues and RNG streams are per environment, cleared on episode reset; at
episode start, before anything has aged enough, the oldest available
observation (or a zero command) is used.
"""
from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from .codec import ObservationSet

FACTOR_NAMES = ("noise", "dropout", "in-latency", "act-latency", "gain")


@dataclass
class PerturbSpec:
    noise: bool = False
    dropout: bool = False
    input_latency: bool = False
    action_latency: bool = False
    gain: bool = False
    # zero-mean Gaussian noise, one sigma per channel group
    sigma_static: float = 0.01
    sigma_dyn_pos: float = 0.05
    sigma_dyn_vel: float = 0.1
    sigma_robot_vel: float = 0.05
    p_drop: float = 0.3
    input_latency_range: tuple = (0.0, 0.1)
    action_latency_range: tuple = (0.0, 0.04)
    gain_range: tuple = (0.6, 1.4)
    per_step_latency: bool = False  # resample latency every step instead of per episode

    def __post_init__(self):
        if not 0.0 <= self.p_drop <= 1.0:
            raise ValueError("p_drop must lie in [0, 1]")
        for s in (self.sigma_static, self.sigma_dyn_pos, self.sigma_dyn_vel, self.sigma_robot_vel):
            if s < 0:
                raise ValueError("noise sigmas must be non-negative")
        if self.input_latency_range[0] < 0 or self.action_latency_range[0] < 0:
            raise ValueError("latency ranges must be non-negative")

    @property
    def any_enabled(self):
        return self.noise or self.dropout or self.input_latency or self.action_latency or self.gain

    def to_dict(self):
        return asdict(self)

    @classmethod
    def all_on(cls, **kw):
        return cls(noise=True, dropout=True, input_latency=True, action_latency=True, gain=True, **kw)

    @classmethod
    def from_factors(cls, factors, **kw):
        """Build a spec from factor names: none|noise|dropout|in-latency|act-latency|gain|all."""
        if isinstance(factors, str):
            factors = [f.strip() for f in factors.split(",") if f.strip()]
        spec = cls(**kw)
        for f in factors:
            if f == "none":
                continue
            elif f == "all":
                spec.noise = spec.dropout = spec.input_latency = spec.action_latency = spec.gain = True
            elif f == "noise":
                spec.noise = True
            elif f == "dropout":
                spec.dropout = True
            elif f == "in-latency":
                spec.input_latency = True
            elif f == "act-latency":
                spec.action_latency = True
            elif f == "gain":
                spec.gain = True
            else:
                raise ValueError(f"unknown perturbation factor {f!r}; "
                                 f"expected none, all, or one of {FACTOR_NAMES}")
        return spec


def sample_gain(spec: PerturbSpec, rng) -> float:
    """Per-episode controller-gain multiplier (1.0 when the factor is off)."""
    if not spec.gain:
        return 1.0
    return float(rng.uniform(*spec.gain_range))


def _env_rows(obs: ObservationSet, e):
    return {
        "closeness": obs.static.closeness[e].copy(),
        "raw": obs.static.raw[e].copy(),
        "dyn": obs.dyn[e].copy(),
        "dyn_mask": obs.dyn_mask[e].copy(),
        "internal": obs.internal[e].copy(),
        "internal_raw": obs.internal_raw_dist[e].copy(),
    }


def _put_rows(obs: ObservationSet, e, rows):
    obs.static.closeness[e] = rows["closeness"]
    obs.static.raw[e] = rows["raw"]
    obs.dyn[e] = rows["dyn"]
    obs.dyn_mask[e] = rows["dyn_mask"]
    obs.internal[e] = rows["internal"]
    obs.internal_raw_dist[e] = rows["internal_raw"]


class ObservationPerturber:
    """Applies input latency, slot dropout, and input noise to observations."""

    def __init__(self, spec: PerturbSpec, n_envs: int, seed=0):
        self.spec = spec
        self.n_envs = n_envs
        self.rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n_envs)]
        self.latency = np.zeros(n_envs)
        self.queues = [[] for _ in range(n_envs)]
        self.reset(np.arange(n_envs))

    def reset(self, env_ids):
        for e in np.atleast_1d(env_ids):
            e = int(e)
            self.queues[e] = []
            if self.spec.input_latency:
                self.latency[e] = self.rngs[e].uniform(*self.spec.input_latency_range)
            else:
                self.latency[e] = 0.0

    def __call__(self, obs: ObservationSet, times) -> ObservationSet:
        """Perturb a batch observation; ``times`` is the per-env clock (E,)."""
        spec = self.spec
        if not (spec.input_latency or spec.dropout or spec.noise):
            return obs  # identity, bit for bit

        times = np.broadcast_to(np.asarray(times, dtype=float), (self.n_envs,))
        out = obs.copy()

        if spec.input_latency:
            horizon = spec.input_latency_range[1] + 1e-6
            for e in range(self.n_envs):
                if spec.per_step_latency:
                    self.latency[e] = self.rngs[e].uniform(*spec.input_latency_range)
                q = self.queues[e]
                q.append((times[e], _env_rows(obs, e)))
                while len(q) > 1 and q[0][0] < times[e] - horizon - 1e-9:
                    q.pop(0)
                chosen = q[0][1]  # underflow: oldest available
                for t_entry, rows in q:
                    if t_entry <= times[e] - self.latency[e] + 1e-9:
                        chosen = rows
                    else:
                        break
                _put_rows(out, e, chosen)

        if spec.dropout:
            for e in range(self.n_envs):
                present = np.flatnonzero(out.dyn_mask[e, :, -1])
                if present.size == 0:
                    continue
                drop = self.rngs[e].random(present.size) < spec.p_drop
                for slot in present[drop]:
                    out.dyn[e, slot] = 0.0
                    out.dyn_mask[e, slot] = False

        if spec.noise:
            dim = (out.internal.shape[2] - 1) // 2
            for e in range(self.n_envs):
                rng = self.rngs[e]
                out.static.closeness[e] = np.clip(
                    out.static.closeness[e]
                    + rng.normal(0.0, spec.sigma_static, out.static.closeness[e].shape),
                    0.0, 1.0)
                live = out.dyn_mask[e][..., None]
                out.dyn[e, :, :, 0:2] += live * rng.normal(0.0, spec.sigma_dyn_pos,
                                                           out.dyn[e].shape[:2] + (2,))
                out.dyn[e, :, :, 2:4] += live * rng.normal(0.0, spec.sigma_dyn_vel,
                                                           out.dyn[e].shape[:2] + (2,))
                out.internal[e, :, dim + 1:] += rng.normal(
                    0.0, spec.sigma_robot_vel, out.internal[e, :, dim + 1:].shape)
        return out


class ActionDelayLine:
    """Per-env queue of timestamped commands with per-episode latency.

    ``matured(times)`` returns the newest command per env whose age is at
    least that env's latency; until one matures, the previously matured
    command is held (zero at episode start).
    """

    def __init__(self, spec: PerturbSpec, n_envs: int, dim: int, seed=0):
        self.spec = spec
        self.n_envs = n_envs
        self.dim = dim
        self.rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n_envs)]
        self.latency = np.zeros(n_envs)
        self.queues = [[] for _ in range(n_envs)]
        self.held = np.zeros((n_envs, dim))
        self.reset(np.arange(n_envs))

    def reset(self, env_ids):
        for e in np.atleast_1d(env_ids):
            e = int(e)
            self.queues[e] = []
            self.held[e] = 0.0
            if self.spec.action_latency:
                self.latency[e] = self.rngs[e].uniform(*self.spec.action_latency_range)
            else:
                self.latency[e] = 0.0

    def push(self, commands: np.ndarray, times):
        if not self.spec.action_latency:
            self.held = np.array(commands, copy=True)
            return
        times = np.broadcast_to(np.asarray(times, dtype=float), (self.n_envs,))
        for e in range(self.n_envs):
            if self.spec.per_step_latency:
                self.latency[e] = self.rngs[e].uniform(*self.spec.action_latency_range)
            self.queues[e].append((times[e], commands[e].copy()))

    def matured(self, times) -> np.ndarray:
        if not self.spec.action_latency:
            return self.held
        times = np.broadcast_to(np.asarray(times, dtype=float), (self.n_envs,))
        for e in range(self.n_envs):
            q = self.queues[e]
            while q and q[0][0] <= times[e] - self.latency[e] + 1e-9:
                self.held[e] = q.pop(0)[1]
        return self.held
