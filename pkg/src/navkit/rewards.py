"""Per-step reward: six weighted terms computed from world snapshots.

Terms: goal-directed velocity, survival, static clearance (mean log of the
raycast distances), dynamic clearance (mean log distance to visible
movers), command smoothness, and altitude deviation (3D only). Inputs are
batched (E, ...) arrays; the function is pure and stateless.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MIN_CLEARANCE = 0.1  # meters; log() singularity guard, matches the ray floor

DEFAULT_WEIGHTS = (1.0, 1.0, 2.0, 2.0, 0.1, 8.0)


@dataclass
class RewardBreakdown:
    r_v: np.ndarray
    r_s: np.ndarray
    r_sc: np.ndarray
    r_dc: np.ndarray
    r_sm: np.ndarray
    r_h: np.ndarray
    total: np.ndarray

    def stack(self):
        return np.stack([self.r_v, self.r_s, self.r_sc, self.r_dc, self.r_sm, self.r_h], axis=1)


def compute_reward(prev_vel, pos, vel, goal, start, static_raw, dyn_pos, dyn_mask,
                   dim=2, weights=DEFAULT_WEIGHTS):
    """Reward breakdown for one transition.

    prev_vel, pos, vel, goal, start: (E, d) robot quantities after the step.
    static_raw: (E, 36, 4) raycast distances already clamped to [0.1, 4].
    dyn_pos: (E, N, 2) planar positions of visible movers, dyn_mask: (E, N).
    """
    pos = np.asarray(pos)
    e = pos.shape[0]

    rel = goal - pos
    dist = np.linalg.norm(rel, axis=1)
    unit = np.where(dist[:, None] > 1e-9, rel / np.maximum(dist[:, None], 1e-30), 0.0)
    r_v = np.sum(unit * vel, axis=1)

    r_s = np.ones(e)

    r_sc = np.mean(np.log(static_raw.reshape(e, -1)), axis=1)

    if dyn_pos.shape[1]:
        d = np.linalg.norm(pos[:, None, :2] - dyn_pos, axis=2)
        d = np.maximum(d, MIN_CLEARANCE)
        logs = np.where(dyn_mask, np.log(d), 0.0)
        count = dyn_mask.sum(axis=1)
        r_dc = np.where(count > 0, logs.sum(axis=1) / np.maximum(count, 1), 0.0)
    else:
        r_dc = np.zeros(e)

    r_sm = -np.linalg.norm(vel - prev_vel, axis=1)

    if dim == 3:
        dz = np.minimum(np.abs(pos[:, 2] - start[:, 2]), np.abs(pos[:, 2] - goal[:, 2]))
        r_h = -(dz**2)
    else:
        r_h = np.zeros(e)

    w = weights
    total = (w[0] * r_v + w[1] * r_s + w[2] * r_sc + w[3] * r_dc + w[4] * r_sm + w[5] * r_h)
    return RewardBreakdown(r_v=r_v, r_s=r_s, r_sc=r_sc, r_dc=r_dc, r_sm=r_sm, r_h=r_h, total=total)
