"""Policy observation encoding in the goal-aligned frame.

Produces the observation triplet per environment:

* static state: 36 azimuth x 4 elevation raycast distances, truncated at
  the sensing range and encoded as closeness values (raw clamped metric
  distances are kept alongside for the reward),
* dynamic state: up to 5 obstacle slots, each with a 2 s history sampled
  every 0.5 s of planar position/velocity/radius relative to the robot,
* internal state: the same history cadence of goal direction, goal
  distance, and robot velocity.

Histories hold frozen samples on the 0.5 s tick grid plus a live newest
sample, so after each tick sample j becomes sample j-1 exactly.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import world as W

N_AZIMUTH = 36
N_ELEVATION = 4
ELEVATION_DEG = (-10.0, 0.0, 10.0, 20.0)
SENSING_RANGE = 4.0
MIN_RAY_DISTANCE = 0.1
SAMPLE_INTERVAL = 0.5
HISTORY_SAMPLES = 5  # K+1: four frozen ticks plus the live sample
MAX_DYN_SLOTS = 5
DYN_FEATURES = 5  # [px, py, vx, vy, r] in the goal frame, planar


def goal_frames(start, goal):
    """World-to-goal rotation matrices (rows are the frame axes)."""
    start = np.atleast_2d(start)
    goal = np.atleast_2d(goal)
    e, d = start.shape
    dxy = goal[:, :2] - start[:, :2]
    norm = np.linalg.norm(dxy, axis=1)
    x = np.where(norm[:, None] > 1e-9, dxy / np.maximum(norm[:, None], 1e-30),
                 np.array([1.0, 0.0]))
    frames = np.zeros((e, d, d))
    frames[:, 0, :2] = x
    frames[:, 1, 0] = -x[:, 1]
    frames[:, 1, 1] = x[:, 0]
    if d == 3:
        frames[:, 2, 2] = 1.0
    return frames


def beam_directions(frames, dim):
    """World-frame unit vectors for the 36x4 beam fan, (E, 144, d).

    Beams are laid out azimuth-major: beam index b = azimuth * 4 + elevation.
    In 2D all four elevation rows collapse to the horizontal plane.
    """
    az = np.deg2rad(np.arange(N_AZIMUTH) * 10.0)
    el = np.deg2rad(np.asarray(ELEVATION_DEG)) if dim == 3 else np.zeros(N_ELEVATION)
    az_grid = np.repeat(az, N_ELEVATION)
    el_grid = np.tile(el, N_AZIMUTH)
    if dim == 3:
        local = np.stack([np.cos(el_grid) * np.cos(az_grid),
                          np.cos(el_grid) * np.sin(az_grid),
                          np.sin(el_grid)], axis=1)
    else:
        local = np.stack([np.cos(az_grid), np.sin(az_grid)], axis=1)
    # dirs are defined in the goal frame; rotate into the world frame
    return np.einsum("edk,bk->ebd", np.transpose(frames, (0, 2, 1)), local)


def _ray_boxes(origin, dirs, lo, hi):
    """Slab intersection; returns (E, B) nearest positive t (inf if none)."""
    o = origin[:, None, None, :]
    d = dirs[:, :, None, :]
    safe = np.where(np.abs(d) < 1e-12, 1e-12, d)
    t1 = (lo[:, None, :, :] - o) / safe
    t2 = (hi[:, None, :, :] - o) / safe
    tmin = np.max(np.minimum(t1, t2), axis=3)
    tmax = np.min(np.maximum(t1, t2), axis=3)
    hit = (tmax >= np.maximum(tmin, 0.0)) & (tmax > 0)
    t_hit = np.where(tmin > 0, tmin, 0.0)  # origin inside the box hits at 0
    t_hit = np.where(hit, t_hit, np.inf)
    return np.min(t_hit, axis=2)


def _ray_cylinders(origin, dirs, center, radius, height, dim):
    """Nearest positive t against vertical cylinders (side and caps in 3D)."""
    o_xy = origin[:, None, None, :2]
    d_xy = dirs[:, :, None, :2]
    f = o_xy - center[:, None, :, :]
    a = np.sum(d_xy * d_xy, axis=3)
    b = 2.0 * np.sum(f * d_xy, axis=3)
    c0 = np.sum(f * f, axis=3) - radius[:, None, :] ** 2
    disc = b * b - 4.0 * a * c0
    sq = np.sqrt(np.maximum(disc, 0.0))
    safe_a = np.where(a < 1e-12, 1e-12, a)
    t_lo = (-b - sq) / (2.0 * safe_a)
    t_hi = (-b + sq) / (2.0 * safe_a)
    valid = (disc >= 0) & (a >= 1e-12)
    # nearest non-negative side root
    t_side = np.where(t_lo >= 0, t_lo, np.where(t_hi >= 0, np.where(c0 < 0, 0.0, t_hi), np.inf))
    t_side = np.where(valid, t_side, np.inf)

    if dim == 3:
        oz = origin[:, None, None, 2]
        dz = dirs[:, :, None, 2]
        zs = oz + np.where(np.isfinite(t_side), t_side, 0.0) * dz
        in_band = (zs >= 0.0) & (zs <= height[:, None, :])
        t_side = np.where(np.isfinite(t_side) & in_band, t_side, np.inf)
        # caps at z = 0 and z = height
        safe_dz = np.where(np.abs(dz) < 1e-12, 1e-12, dz)
        for z_cap in (np.zeros_like(height[:, None, :]), height[:, None, :]):
            t_cap = (z_cap - oz) / safe_dz
            px = o_xy + t_cap[..., None] * d_xy
            on_disk = np.sum((px - center[:, None, :, :]) ** 2, axis=3) <= radius[:, None, :] ** 2
            ok = (t_cap >= 0) & on_disk & (np.abs(dz) >= 1e-12)
            t_side = np.minimum(t_side, np.where(ok, t_cap, np.inf))
    return np.min(t_side, axis=2)


def raycast_scene(state: W.WorldState, origins, dirs):
    """Nearest static-obstacle hit distance per beam, (E, B), inf if none."""
    cfg = state.config
    e, b = dirs.shape[0], dirs.shape[1]
    best = np.full((e, b), np.inf)
    if state.box_center.shape[1]:
        lo_xy = state.box_center - state.box_half
        hi_xy = state.box_center + state.box_half
        if cfg.dim == 3:
            lo = np.concatenate([lo_xy, np.zeros_like(state.box_height[..., None])], axis=2)
            hi = np.concatenate([hi_xy, state.box_height[..., None]], axis=2)
        else:
            lo, hi = lo_xy, hi_xy
        best = np.minimum(best, _ray_boxes(origins, dirs, lo, hi))
    if state.cyl_center.shape[1]:
        best = np.minimum(best, _ray_cylinders(origins, dirs, state.cyl_center,
                                               state.cyl_radius, state.cyl_height, cfg.dim))
    return best


@dataclass
class StaticState:
    closeness: np.ndarray  # (E, 36, 4) in [0, 1]
    raw: np.ndarray  # (E, 36, 4) metric distances clamped to [d_min, range]


@dataclass
class ObservationSet:
    """The full policy input for a batch, all in goal-aligned frames."""

    static: StaticState
    dyn: np.ndarray  # (E, slots, samples, 5)
    dyn_mask: np.ndarray  # (E, slots, samples) validity
    internal: np.ndarray  # (E, samples, 2d+1) with scaled goal distance
    internal_raw_dist: np.ndarray  # (E, samples) metric goal distance

    def copy(self):
        return ObservationSet(
            static=StaticState(self.static.closeness.copy(), self.static.raw.copy()),
            dyn=self.dyn.copy(), dyn_mask=self.dyn_mask.copy(),
            internal=self.internal.copy(), internal_raw_dist=self.internal_raw_dist.copy())


def closeness_from_distance(raw, sensing_range=SENSING_RANGE):
    return 1.0 - np.minimum(raw, sensing_range) / sensing_range


def visible_dynamic(state: W.WorldState, sensing_range=SENSING_RANGE, n_slots=MAX_DYN_SLOTS):
    """Planar positions and presence mask of the nearest in-range movers.

    Selection matches the codec slot rule: horizontal distance within the
    sensing range, nearest first, ties broken by lower obstacle index.
    """
    e = state.n_envs
    nd = state.dyn_pos.shape[1]
    pos = np.zeros((e, n_slots, 2))
    mask = np.zeros((e, n_slots), dtype=bool)
    if nd == 0:
        return pos, mask
    rel = state.dyn_pos - state.robot_pos[:, None, :2]
    dist = np.linalg.norm(rel, axis=2)
    order = np.argsort(dist, axis=1, kind="stable")[:, :n_slots]
    k = order.shape[1]
    d_sel = np.take_along_axis(dist, order, axis=1)
    p_sel = np.take_along_axis(state.dyn_pos, order[:, :, None], axis=1)
    pos[:, :k] = p_sel
    mask[:, :k] = d_sel <= sensing_range
    pos[:, :k][~mask[:, :k]] = 0.0
    return pos, mask


class GroundTruthDynamics:
    """Dynamic-obstacle source that reads the simulator state directly."""

    def __init__(self, state: W.WorldState):
        self.state = state

    def current(self, env):
        s = self.state
        n = s.dyn_pos.shape[1]
        return (list(range(n)), s.dyn_pos[env], s.dyn_vel[env], s.dyn_radius[env])


class ObservationBuilder:
    """Builds ObservationSets for a world batch, owning the history buffers.

    ``static_fn(origins, dirs) -> (E, B) hit distances`` can be swapped to
    feed the codec from an occupancy grid instead of ground-truth geometry;
    ``dynamics`` likewise for perception tracks instead of simulator state.
    """

    def __init__(self, state: W.WorldState, static_fn=None, dynamics=None,
                 sensing_range=SENSING_RANGE, d_min=MIN_RAY_DISTANCE,
                 sample_interval=SAMPLE_INTERVAL, n_slots=MAX_DYN_SLOTS):
        self.state = state
        cfg = state.config
        self.dim = cfg.dim
        self.sensing_range = sensing_range
        self.d_min = d_min
        self.sample_interval = sample_interval
        self.n_slots = n_slots
        self.arena_diag = float(np.linalg.norm([cfg.arena[0], cfg.arena[1], cfg.arena_height]
                                               if cfg.dim == 3 else cfg.arena))
        self.static_fn = static_fn or (lambda origins, dirs: raycast_scene(state, origins, dirs))
        self.dynamics = dynamics or GroundTruthDynamics(state)
        e = state.n_envs
        k = HISTORY_SAMPLES - 1
        self.frames = np.zeros((e, self.dim, self.dim))
        self.beam_dirs = np.zeros((e, N_AZIMUTH * N_ELEVATION, self.dim))
        self.next_tick = np.zeros(e)
        idim = 2 * self.dim + 1
        self.int_hist = np.zeros((e, k, idim))
        self.int_hist_raw = np.zeros((e, k))
        # per-env dynamic history, keyed by obstacle/track id
        self.dyn_cols = [dict() for _ in range(e)]
        self.dyn_hist = [np.zeros((k, 0, DYN_FEATURES)) for _ in range(e)]
        self.dyn_valid = [np.zeros((k, 0), dtype=bool) for _ in range(e)]
        self.reset(np.arange(e))

    def to_world_velocity(self, v_goal):
        """Rotate per-env velocity commands from the goal frame to the world."""
        return np.einsum("ekd,ek->ed", self.frames, np.asarray(v_goal))

    def reset(self, env_ids):
        """Recompute goal frames and clear histories for new episodes."""
        env_ids = np.atleast_1d(env_ids)
        frames = goal_frames(self.state.start[env_ids], self.state.goal[env_ids])
        self.frames[env_ids] = frames
        self.beam_dirs[env_ids] = beam_directions(frames, self.dim)
        self.next_tick[env_ids] = self.state.time[env_ids] + self.sample_interval
        self.int_hist[env_ids] = 0.0
        self.int_hist_raw[env_ids] = 0.0
        k = HISTORY_SAMPLES - 1
        for e in env_ids:
            self.dyn_cols[int(e)] = {}
            self.dyn_hist[int(e)] = np.zeros((k, 0, DYN_FEATURES))
            self.dyn_valid[int(e)] = np.zeros((k, 0), dtype=bool)

    # -- live sample computation -------------------------------------
    def _internal_sample(self, env):
        s = self.state
        rel = s.goal[env] - s.robot_pos[env]
        dist = float(np.linalg.norm(rel))
        frame = self.frames[env]
        if dist < 1e-6:
            unit = np.zeros(self.dim)
        else:
            unit = frame @ (rel / dist)
        vel = frame @ s.robot_vel[env]
        return np.concatenate([unit, [dist / self.arena_diag], vel]), dist

    def _dyn_samples(self, env):
        ids, pos, vel, radius = self.dynamics.current(env)
        if len(ids) == 0:
            return [], np.zeros((0, DYN_FEATURES)), np.zeros(0)
        robot_xy = self.state.robot_pos[env, :2]
        rel = np.asarray(pos)[:, :2] - robot_xy
        dist = np.linalg.norm(rel, axis=1)
        frame2 = self.frames[env, :2, :2]
        rel_g = rel @ frame2.T
        vel_g = np.asarray(vel)[:, :2] @ frame2.T
        feats = np.concatenate([rel_g, vel_g, np.asarray(radius)[:, None]], axis=1)
        return list(ids), feats, dist

    def _ensure_columns(self, env, ids):
        cols = self.dyn_cols[env]
        new = [i for i in ids if i not in cols]
        if new:
            k, n, f = self.dyn_hist[env].shape
            grow = len(new)
            self.dyn_hist[env] = np.concatenate([self.dyn_hist[env], np.zeros((k, grow, f))], axis=1)
            self.dyn_valid[env] = np.concatenate([self.dyn_valid[env], np.zeros((k, grow), dtype=bool)], axis=1)
            for i in new:
                cols[i] = n
                n += 1
        return cols

    # -- main entry ----------------------------------------------------
    def observe(self) -> ObservationSet:
        s = self.state
        e = s.n_envs
        k = HISTORY_SAMPLES - 1

        # static: raycast every call (no history)
        hits = self.static_fn(s.robot_pos, self.beam_dirs)
        raw = np.clip(hits, self.d_min, self.sensing_range)
        raw = raw.reshape(e, N_AZIMUTH, N_ELEVATION)
        closeness = closeness_from_distance(raw.copy(), self.sensing_range)
        # make truncated beams exact: distance >= range encodes to exactly 0
        closeness[raw >= self.sensing_range - 1e-12] = 0.0
        static = StaticState(closeness=closeness, raw=raw)

        idim = 2 * self.dim + 1
        internal = np.zeros((e, HISTORY_SAMPLES, idim))
        internal_raw = np.zeros((e, HISTORY_SAMPLES))
        dyn = np.zeros((e, self.n_slots, HISTORY_SAMPLES, DYN_FEATURES))
        dyn_mask = np.zeros((e, self.n_slots, HISTORY_SAMPLES), dtype=bool)

        for env in range(e):
            live_int, live_dist = self._internal_sample(env)
            ids, feats, dist = self._dyn_samples(env)
            tick = s.time[env] >= self.next_tick[env] - 1e-9

            internal[env, :k] = self.int_hist[env]
            internal[env, k] = live_int
            internal_raw[env, :k] = self.int_hist_raw[env]
            internal_raw[env, k] = live_dist

            cols = self._ensure_columns(env, ids)
            in_range = [j for j, i in enumerate(ids) if dist[j] <= self.sensing_range]
            order = sorted(in_range, key=lambda j: (dist[j], ids[j]))[:self.n_slots]
            for slot, j in enumerate(order):
                col = cols[ids[j]]
                dyn[env, slot, :k] = self.dyn_hist[env][:, col]
                dyn_mask[env, slot, :k] = self.dyn_valid[env][:, col]
                dyn[env, slot, k] = feats[j]
                dyn_mask[env, slot, k] = True

            if tick:
                # freeze the live samples onto the tick grid
                self.int_hist[env] = np.roll(self.int_hist[env], -1, axis=0)
                self.int_hist[env][-1] = live_int
                self.int_hist_raw[env] = np.roll(self.int_hist_raw[env], -1)
                self.int_hist_raw[env][-1] = live_dist
                self.dyn_hist[env] = np.roll(self.dyn_hist[env], -1, axis=0)
                self.dyn_valid[env] = np.roll(self.dyn_valid[env], -1, axis=0)
                self.dyn_hist[env][-1] = 0.0
                self.dyn_valid[env][-1] = False
                for j, i in enumerate(ids):
                    if dist[j] <= self.sensing_range:
                        col = cols[i]
                        self.dyn_hist[env][-1, col] = feats[j]
                        self.dyn_valid[env][-1, col] = True
                self.next_tick[env] += self.sample_interval

        return ObservationSet(static=static, dyn=dyn, dyn_mask=dyn_mask,
                              internal=internal, internal_raw_dist=internal_raw)
