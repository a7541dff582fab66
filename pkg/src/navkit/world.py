"""Batched kinematic simulation of robots and obstacle fields.

Every environment in a batch is an independent state machine backed by its
own RNG stream; all state lives in (envs, ...) numpy arrays so a batch
steps in one vectorized call. The robot tracks commanded velocity through
a first-order lag (exact exponential integration), dynamic obstacles move
at piecewise-constant velocity and reflect off the arena walls, and
static obstacles are axis-aligned boxes and vertical cylinders.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# termination codes recorded per env
RUNNING = 0
REACHED_GOAL = 1
COLLIDED = 2
TIMED_OUT = 3
FAILED = 4

TERMINATION_NAMES = {
    RUNNING: "running",
    REACHED_GOAL: "goal",
    COLLIDED: "collision",
    TIMED_OUT: "timeout",
    FAILED: "failed",
}


class SceneTooDenseError(RuntimeError):
    """Could not place a collision-free robot start after many attempts."""


@dataclass
class EpisodeConfig:
    arena: tuple = (40.0, 40.0)
    arena_height: float = 5.0
    n_static: int = 300
    n_dynamic: int = 60
    v_max: float = 2.0
    dt: float = 0.02
    policy_period: float = 0.1
    timeout: float | None = None  # None: 3x straight-line time at v_max, floor 30 s
    dim: int = 2
    seed: int = 0
    robot_radius: float = 0.3
    goal_threshold: float = 0.5
    gain: float = 3.0
    gain_range: tuple | None = None  # e.g. (0.6, 1.4) multiplier; None disables randomization
    perfect_tracking: bool = False
    dyn_speed_range: tuple = (0.0, 1.5)
    dyn_radius_range: tuple = (0.2, 0.5)
    dyn_redirect_range: tuple = (0.0, 2.0)
    static_half_extent_range: tuple = (0.2, 0.55)
    static_height_range: tuple = (1.0, 4.5)
    obstacle_region: tuple | None = None  # defaults to the arena
    fixed_start: tuple | None = None
    fixed_goal: tuple | None = None
    z_band: tuple = (0.5, 2.5)  # start/goal altitude range in 3D

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        ratio = self.policy_period / self.dt
        if abs(ratio - round(ratio)) > 1e-9:
            raise ValueError("policy_period must be an integer multiple of dt")
        if self.n_static < 0 or self.n_dynamic < 0:
            raise ValueError("obstacle counts must be non-negative")
        if self.dim not in (2, 3):
            raise ValueError("dim must be 2 or 3")

    @property
    def substeps(self):
        return int(round(self.policy_period / self.dt))

    def timeout_for(self, start, goal):
        if self.timeout is not None:
            return self.timeout
        straight = np.linalg.norm(np.asarray(goal) - np.asarray(start), axis=-1)
        return np.maximum(3.0 * straight / self.v_max, 30.0)


@dataclass
class WorldState:
    """Mutable batch state; arrays are (envs, ...) unless noted."""

    config: EpisodeConfig
    rngs: list  # one numpy Generator per env
    # static obstacles: first half boxes, second half cylinders
    box_center: np.ndarray  # (E, nb, 2)
    box_half: np.ndarray  # (E, nb, 2)
    box_height: np.ndarray  # (E, nb)
    cyl_center: np.ndarray  # (E, nc, 2)
    cyl_radius: np.ndarray  # (E, nc)
    cyl_height: np.ndarray  # (E, nc)
    dyn_pos: np.ndarray  # (E, nd, 2) horizontal plane
    dyn_vel: np.ndarray  # (E, nd, 2)
    dyn_radius: np.ndarray  # (E, nd)
    dyn_timer: np.ndarray  # (E, nd) seconds until direction resample
    robot_pos: np.ndarray  # (E, d)
    robot_vel: np.ndarray  # (E, d)
    robot_cmd: np.ndarray  # (E, d)
    start: np.ndarray  # (E, d)
    goal: np.ndarray  # (E, d)
    gain: np.ndarray  # (E,)
    time: np.ndarray  # (E,)
    timeout: np.ndarray  # (E,)
    termination: np.ndarray  # (E,) int codes
    episode_seeds: np.ndarray  # (E,) seed recorded per episode for replay
    steps: np.ndarray = field(default=None)

    @property
    def n_envs(self):
        return self.robot_pos.shape[0]

    @property
    def active(self):
        return self.termination == RUNNING


def _uniform_in(rng, low, high, size=None):
    return rng.uniform(low, high, size=size)


def _sample_scene(cfg: EpisodeConfig, rng):
    """Obstacle field for one env (box/cylinder split is half and half)."""
    region = cfg.obstacle_region or cfg.arena
    hx, hy = region[0] / 2.0, region[1] / 2.0
    nb = cfg.n_static // 2
    nc = cfg.n_static - nb
    box_center = rng.uniform([-hx, -hy], [hx, hy], size=(nb, 2))
    box_half = rng.uniform(*cfg.static_half_extent_range, size=(nb, 2))
    box_height = rng.uniform(*cfg.static_height_range, size=nb)
    cyl_center = rng.uniform([-hx, -hy], [hx, hy], size=(nc, 2))
    cyl_radius = rng.uniform(*cfg.static_half_extent_range, size=nc)
    cyl_height = rng.uniform(*cfg.static_height_range, size=nc)
    dyn_pos = rng.uniform([-hx, -hy], [hx, hy], size=(cfg.n_dynamic, 2))
    speed = rng.uniform(*cfg.dyn_speed_range, size=cfg.n_dynamic)
    heading = rng.uniform(0.0, 2 * np.pi, size=cfg.n_dynamic)
    dyn_vel = speed[:, None] * np.stack([np.cos(heading), np.sin(heading)], axis=1)
    dyn_radius = rng.uniform(*cfg.dyn_radius_range, size=cfg.n_dynamic)
    dyn_timer = rng.uniform(*cfg.dyn_redirect_range, size=cfg.n_dynamic)
    return (box_center, box_half, box_height, cyl_center, cyl_radius, cyl_height,
            dyn_pos, dyn_vel, dyn_radius, dyn_timer)


def point_obstacle_distances(cfg, point, box_center, box_half, box_height,
                             cyl_center, cyl_radius, cyl_height, dyn_pos, dyn_radius):
    """Distances from one point to every obstacle surface (negative inside)."""
    p = np.asarray(point)
    xy = p[:2]
    out = []
    if box_center.shape[0]:
        d_out = np.abs(xy - box_center) - box_half  # (nb, 2) signed per-axis excess
        if cfg.dim == 3:
            dz = np.maximum(p[2] - box_height, -p[2])
            d_out = np.concatenate([d_out, dz[:, None]], axis=1)
        outside = np.linalg.norm(np.maximum(d_out, 0.0), axis=1)
        inside = np.minimum(np.max(d_out, axis=1), 0.0)
        out.append(outside + inside)
    if cyl_center.shape[0]:
        dr = np.linalg.norm(xy - cyl_center, axis=1) - cyl_radius
        if cfg.dim == 3:
            dz = np.maximum(p[2] - cyl_height, -p[2])
            dist = np.where(dz <= 0.0, dr, np.where(dr <= 0.0, dz, np.hypot(dr, dz)))
        else:
            dist = dr
        out.append(dist)
    if dyn_pos.shape[0]:
        out.append(np.linalg.norm(xy - dyn_pos, axis=1) - dyn_radius)
    if not out:
        return np.empty(0)
    return np.concatenate(out)


def check_collision(state: WorldState, positions=None):
    """True per env iff the robot disc/sphere intersects any obstacle."""
    cfg = state.config
    p = state.robot_pos if positions is None else positions
    e = p.shape[0]
    hit = np.zeros(e, dtype=bool)
    xy = p[:, :2]

    if state.box_center.shape[1]:
        d_out = np.abs(xy[:, None, :] - state.box_center) - state.box_half  # (E, nb, 2)
        if cfg.dim == 3:
            z = p[:, 2][:, None]
            dz = np.maximum(z - state.box_height, -z)
            d_out = np.concatenate([d_out, dz[..., None]], axis=2)
        outside = np.linalg.norm(np.maximum(d_out, 0.0), axis=2)
        inside = np.minimum(np.max(d_out, axis=2), 0.0)
        hit |= np.any(outside + inside < cfg.robot_radius, axis=1)

    if state.cyl_center.shape[1]:
        dr = np.linalg.norm(xy[:, None, :] - state.cyl_center, axis=2) - state.cyl_radius
        if cfg.dim == 3:
            z = p[:, 2][:, None]
            dz = np.maximum(z - state.cyl_height, -z)
            dist = np.where(dz <= 0.0, dr, np.where(dr <= 0.0, dz, np.hypot(np.maximum(dr, 0.0), np.maximum(dz, 0.0))))
        else:
            dist = dr
        hit |= np.any(dist < cfg.robot_radius, axis=1)

    if state.dyn_pos.shape[1]:
        dd = np.linalg.norm(xy[:, None, :] - state.dyn_pos, axis=2) - state.dyn_radius
        hit |= np.any(dd < cfg.robot_radius, axis=1)
    return hit


def _sample_free_point(cfg, rng, scene, max_attempts=1000):
    hx, hy = cfg.arena[0] / 2.0, cfg.arena[1] / 2.0
    (box_center, box_half, box_height, cyl_center, cyl_radius, cyl_height,
     dyn_pos, _v, dyn_radius, _t) = scene
    for _ in range(max_attempts):
        p = rng.uniform([-hx, -hy], [hx, hy])
        if cfg.dim == 3:
            p = np.append(p, rng.uniform(*cfg.z_band))
        dists = point_obstacle_distances(cfg, p, box_center, box_half, box_height,
                                         cyl_center, cyl_radius, cyl_height, dyn_pos, dyn_radius)
        if dists.size == 0 or np.min(dists) > cfg.robot_radius:
            return p
    raise SceneTooDenseError(
        f"no collision-free start after {max_attempts} attempts "
        f"({cfg.n_static} static + {cfg.n_dynamic} dynamic in {cfg.arena})")


def _sample_goal(cfg, rng):
    hx, hy = cfg.arena[0] / 2.0, cfg.arena[1] / 2.0
    g = rng.uniform([-hx, -hy], [hx, hy])
    if cfg.dim == 3:
        g = np.append(g, rng.uniform(*cfg.z_band))
    return g


def reset(cfg: EpisodeConfig, n_envs: int) -> WorldState:
    """Fresh batch: obstacles placed uniformly, collision-free starts,
    goals sampled uniformly regardless of collision."""
    seeds = np.random.SeedSequence(cfg.seed).spawn(n_envs)
    rngs = [np.random.default_rng(s) for s in seeds]
    state = WorldState(
        config=cfg, rngs=rngs,
        box_center=np.zeros((n_envs, cfg.n_static // 2, 2)),
        box_half=np.zeros((n_envs, cfg.n_static // 2, 2)),
        box_height=np.zeros((n_envs, cfg.n_static // 2)),
        cyl_center=np.zeros((n_envs, cfg.n_static - cfg.n_static // 2, 2)),
        cyl_radius=np.zeros((n_envs, cfg.n_static - cfg.n_static // 2)),
        cyl_height=np.zeros((n_envs, cfg.n_static - cfg.n_static // 2)),
        dyn_pos=np.zeros((n_envs, cfg.n_dynamic, 2)),
        dyn_vel=np.zeros((n_envs, cfg.n_dynamic, 2)),
        dyn_radius=np.zeros((n_envs, cfg.n_dynamic)),
        dyn_timer=np.zeros((n_envs, cfg.n_dynamic)),
        robot_pos=np.zeros((n_envs, cfg.dim)),
        robot_vel=np.zeros((n_envs, cfg.dim)),
        robot_cmd=np.zeros((n_envs, cfg.dim)),
        start=np.zeros((n_envs, cfg.dim)),
        goal=np.zeros((n_envs, cfg.dim)),
        gain=np.full(n_envs, cfg.gain),
        time=np.zeros(n_envs),
        timeout=np.zeros(n_envs),
        termination=np.zeros(n_envs, dtype=int),
        episode_seeds=np.array([s.generate_state(1)[0] for s in seeds], dtype=np.uint64),
        steps=np.zeros(n_envs, dtype=int),
    )
    reset_envs(state, np.arange(n_envs))
    return state


def reset_envs(state: WorldState, env_ids):
    """Re-sample scenes and episodes for a subset of environments."""
    cfg = state.config
    for e in np.atleast_1d(env_ids):
        rng = state.rngs[e]
        scene = _sample_scene(cfg, rng)
        (state.box_center[e], state.box_half[e], state.box_height[e],
         state.cyl_center[e], state.cyl_radius[e], state.cyl_height[e],
         state.dyn_pos[e], state.dyn_vel[e], state.dyn_radius[e], state.dyn_timer[e]) = scene
        start = np.asarray(cfg.fixed_start, dtype=float) if cfg.fixed_start is not None \
            else _sample_free_point(cfg, rng, scene)
        goal = np.asarray(cfg.fixed_goal, dtype=float) if cfg.fixed_goal is not None \
            else _sample_goal(cfg, rng)
        state.start[e] = start
        state.goal[e] = goal
        state.robot_pos[e] = start
        state.robot_vel[e] = 0.0
        state.robot_cmd[e] = 0.0
        state.time[e] = 0.0
        state.steps[e] = 0
        state.timeout[e] = cfg.timeout_for(start, goal)
        state.termination[e] = RUNNING
        if cfg.gain_range is not None:
            state.gain[e] = cfg.gain * rng.uniform(*cfg.gain_range)
        else:
            state.gain[e] = cfg.gain
    return state


def _advance_dynamic(state: WorldState):
    cfg = state.config
    if state.dyn_pos.shape[1] == 0:
        return
    state.dyn_pos += state.dyn_vel * cfg.dt
    state.dyn_timer -= cfg.dt

    # wall reflection keeps movers inside the arena
    hx, hy = cfg.arena[0] / 2.0, cfg.arena[1] / 2.0
    for axis, half in ((0, hx), (1, hy)):
        coord = state.dyn_pos[:, :, axis]
        low = coord < -half
        high = coord > half
        coord[low] = -2 * half - coord[low]
        coord[high] = 2 * half - coord[high]
        state.dyn_vel[:, :, axis][low | high] *= -1.0

    expired = state.dyn_timer <= 0.0
    if np.any(expired):
        for e in range(state.n_envs):
            idx = np.flatnonzero(expired[e])
            if idx.size == 0:
                continue
            rng = state.rngs[e]
            speed = rng.uniform(*cfg.dyn_speed_range, size=idx.size)
            heading = rng.uniform(0.0, 2 * np.pi, size=idx.size)
            state.dyn_vel[e, idx, 0] = speed * np.cos(heading)
            state.dyn_vel[e, idx, 1] = speed * np.sin(heading)
            state.dyn_timer[e, idx] = rng.uniform(*cfg.dyn_redirect_range, size=idx.size)


def step(state: WorldState, command: np.ndarray):
    """Advance one physics tick of ``dt`` holding ``command`` (E, d).

    Returns the (E,) array of termination codes after the tick. Inactive
    (already terminated) envs are frozen until reset. NaN commands mark
    the env as failed instead of propagating.
    """
    cfg = state.config
    active = state.active

    bad = np.any(~np.isfinite(command), axis=1) & active
    if np.any(bad):
        state.termination[bad] = FAILED
        active = state.active

    cmd = np.where(np.isfinite(command), command, 0.0)
    state.robot_cmd[active] = cmd[active]

    if cfg.perfect_tracking:
        new_vel = cmd
        new_pos = state.robot_pos + cmd * cfg.dt
    else:
        k = state.gain[:, None]
        decay = np.exp(-k * cfg.dt)
        new_vel = cmd + (state.robot_vel - cmd) * decay
        new_pos = state.robot_pos + cmd * cfg.dt + (state.robot_vel - cmd) * (1.0 - decay) / k

    state.robot_vel[active] = new_vel[active]
    state.robot_pos[active] = new_pos[active]
    state.time[active] += cfg.dt
    state.steps[active] += 1

    _advance_dynamic(state)

    collided = check_collision(state) & active
    reached = (np.linalg.norm(state.robot_pos - state.goal, axis=1) < cfg.goal_threshold) & active
    timed_out = (state.time >= state.timeout - 1e-12) & active

    state.termination[collided] = COLLIDED
    state.termination[reached & ~collided] = REACHED_GOAL
    state.termination[timed_out & ~collided & ~reached] = TIMED_OUT
    return state.termination.copy()


def scene_to_dict(state: WorldState, env: int) -> dict:
    """Replayable scene description for one env (written on reset)."""
    cfg = state.config
    return {
        "arena": list(cfg.arena),
        "arena_height": cfg.arena_height,
        "dim": cfg.dim,
        "seed": int(state.episode_seeds[env]),
        "start": state.start[env].tolist(),
        "goal": state.goal[env].tolist(),
        "gain": float(state.gain[env]),
        "boxes": [
            {"center": state.box_center[env, i].tolist(),
             "half_extents": state.box_half[env, i].tolist(),
             "height": float(state.box_height[env, i])}
            for i in range(state.box_center.shape[1])
        ],
        "cylinders": [
            {"center": state.cyl_center[env, i].tolist(),
             "radius": float(state.cyl_radius[env, i]),
             "height": float(state.cyl_height[env, i])}
            for i in range(state.cyl_center.shape[1])
        ],
        "dynamic": [
            {"position": state.dyn_pos[env, i].tolist(),
             "velocity": state.dyn_vel[env, i].tolist(),
             "radius": float(state.dyn_radius[env, i])}
            for i in range(state.dyn_pos.shape[1])
        ],
    }
