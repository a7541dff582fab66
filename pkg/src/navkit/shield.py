"""Velocity-obstacle safety shield: minimum-deviation command projection.

Each obstacle within range induces a truncated velocity-obstacle cone in
relative velocity space: the set of relative velocities that reach the
combined-radius disc within the horizon tau. For commands inside a cone
the minimum adjustment to the cone boundary defines a half-space
constraint; the safe command minimizes deviation from the policy output
subject to every half-space and the per-axis velocity box, solved exactly
by active-set enumeration (dimension <= 3). If no feasible velocity
exists the shield returns zero velocity.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations

import numpy as np


@dataclass
class ShieldConfig:
    tau: float = 2.0  # collision horizon truncating each cone
    point_radius: float = 0.1  # radius assigned to static ray endpoints
    range_limit: float = 8.0  # obstacles beyond 2x sensing range are ignored
    static_range: float = 4.0  # rays at or beyond this never become obstacles
    feasibility_tol: float = 1e-9


@dataclass
class VelocityObstacle:
    offset: np.ndarray  # obstacle center minus robot position
    velocity: np.ndarray  # obstacle velocity (zero for static points)
    radius: float  # combined radius (obstacle + robot)
    tau: float

    @property
    def distance(self):
        return float(np.linalg.norm(self.offset))


@dataclass
class ShieldResult:
    v_safe: np.ndarray
    feasible: bool
    deltas: list  # nonzero minimum adjustments, one per violated cone
    normals: list  # half-space normals actually used
    active_set: tuple  # indices of constraints active at the solution
    already_in_collision: bool
    fallback: bool


def _ray_distance_to_point(v, c, tau):
    """min over t in (0, tau] of ||t v - c||, and the minimizing t."""
    vv = float(np.dot(v, v))
    if vv < 1e-16:
        return float(np.linalg.norm(c)), tau
    t = float(np.dot(v, c)) / vv
    t = min(max(t, 1e-12), tau)
    return float(np.linalg.norm(t * np.asarray(v) - c)), t


def vo_contains(vo: VelocityObstacle, v_rel, tol=0.0) -> bool:
    dist, _ = _ray_distance_to_point(np.asarray(v_rel), vo.offset, vo.tau)
    return dist <= vo.radius + tol


def min_adjustment(v_pi, vo: VelocityObstacle):
    """Minimum velocity adjustment moving the relative velocity onto the
    truncated cone boundary; zero when the relative velocity is outside."""
    v_rel = np.asarray(v_pi, dtype=float) - vo.velocity
    d = v_rel.shape[0]
    if not vo_contains(vo, v_rel):
        return np.zeros(d)

    c = vo.offset.astype(float)
    norm_c = np.linalg.norm(c)
    if norm_c <= vo.radius:
        return np.zeros(d)  # already overlapping; cone undefined, caller flags it

    # reduce to the plane spanned by the cone axis and the relative velocity
    e1 = c / norm_c
    perp = v_rel - np.dot(v_rel, e1) * e1
    if np.linalg.norm(perp) < 1e-12:
        perp = np.zeros(d)
        perp[np.argmin(np.abs(e1))] = 1.0
        perp = perp - np.dot(perp, e1) * e1
    e2 = perp / np.linalg.norm(perp)
    u = np.array([np.dot(v_rel, e1), np.dot(v_rel, e2)])  # 2D coords
    c2 = np.array([norm_c, 0.0])

    sin_t = vo.radius / norm_c
    cos_t = np.sqrt(1.0 - sin_t * sin_t)
    candidates = []
    for sign in (1.0, -1.0):
        side = np.array([cos_t, sign * sin_t])  # unit direction of a cone edge
        s_min = float(np.dot(side, c2)) / vo.tau  # edge meets the truncation arc here
        s = max(float(np.dot(u, side)), s_min)
        candidates.append(s * side)
    arc_center = c2 / vo.tau
    arc_radius = vo.radius / vo.tau
    to_u = u - arc_center
    n = np.linalg.norm(to_u)
    if n > 1e-12:
        candidates.append(arc_center + to_u / n * arc_radius)
    else:
        candidates.append(arc_center - np.array([arc_radius, 0.0]))

    best = None
    tmp = VelocityObstacle(offset=c2, velocity=np.zeros(2), radius=vo.radius, tau=vo.tau)
    for cand in candidates:
        if vo_contains(tmp, cand, tol=-1e-12):
            continue  # strictly inside: not a boundary point of the region
        dist = np.linalg.norm(cand - u)
        if best is None or dist < best[0]:
            best = (dist, cand)
    if best is None:  # numerical corner: fall back to nearest candidate
        best = min(((np.linalg.norm(cand - u), cand) for cand in candidates), key=lambda x: x[0])
    delta2 = best[1] - u
    return delta2[0] * e1 + delta2[1] * e2


def build_vos(robot_pos, robot_radius, dyn_pos, dyn_vel, dyn_radius,
              static_points=None, cfg: ShieldConfig = None):
    """Velocity obstacles for dynamic tracks and static ray-endpoint points.

    Returns (vos, already_in_collision). Obstacles whose combined radius
    already overlaps the robot are skipped and flagged.
    """
    cfg = cfg or ShieldConfig()
    robot_pos = np.asarray(robot_pos, dtype=float)
    d = robot_pos.shape[0]
    vos = []
    in_collision = False

    def add(center, velocity, radius):
        nonlocal in_collision
        offset = np.asarray(center, dtype=float) - robot_pos
        dist = np.linalg.norm(offset)
        if dist > cfg.range_limit:
            return
        combined = radius + robot_radius
        if dist <= combined:
            in_collision = True
            return
        vos.append(VelocityObstacle(offset=offset, velocity=np.asarray(velocity, dtype=float),
                                    radius=combined, tau=cfg.tau))

    for i in range(len(dyn_pos)):
        vel = np.zeros(d)
        vel[:2] = np.asarray(dyn_vel[i])[:2]
        center = np.zeros(d)
        center[:2] = np.asarray(dyn_pos[i])[:2]
        if d == 3:
            center[2] = robot_pos[2]  # movers are vertical cylinders: planar geometry
        add(center, vel, float(dyn_radius[i]))

    if static_points is not None:
        for p in static_points:
            add(np.asarray(p, dtype=float), np.zeros(d), cfg.point_radius)
    return vos, in_collision


def static_points_from_rays(robot_pos, beam_dirs, raw_distances, dim,
                            static_range=4.0):
    """Convert in-range ray hits to point obstacles (position-radius form)."""
    pts = []
    raw = raw_distances.reshape(-1)
    dirs = beam_dirs.reshape(-1, beam_dirs.shape[-1])
    if dim == 2:
        raw = raw_distances.reshape(-1, 4)[:, 0]
        dirs = dirs.reshape(-1, 4, dirs.shape[-1])[:, 0]
    for dist, direction in zip(raw, dirs):
        if dist < static_range - 1e-9:
            pts.append(np.asarray(robot_pos) + dist * direction)
    return np.asarray(pts) if pts else np.zeros((0, len(robot_pos)))


def _subset_candidates(a, b, v_pi, subsets):
    """Equality-projection solutions v = v_pi + A^T (A A^T)^-1 (b - A v_pi)
    for a (m, k) batch of constraint subsets; singular subsets are dropped."""
    a_s = a[subsets]  # (m, k, d)
    b_s = b[subsets]  # (m, k)
    gram = np.einsum("mkd,mjd->mkj", a_s, a_s)
    resid = b_s - np.einsum("mkd,d->mk", a_s, v_pi)
    k = a_s.shape[1]
    if k == 1:
        det_ok = gram[:, 0, 0] > 1e-14
        lam = np.zeros_like(resid)
        lam[det_ok, 0] = resid[det_ok, 0] / gram[det_ok, 0, 0]
    else:
        det = np.linalg.det(gram)
        det_ok = np.abs(det) > 1e-14
        lam = np.zeros_like(resid)
        if np.any(det_ok):
            lam[det_ok] = np.linalg.solve(gram[det_ok], resid[det_ok][..., None])[..., 0]
    cand = v_pi + np.einsum("mkd,mk->md", a_s, lam)
    return cand[det_ok], [tuple(s) for s, ok in zip(subsets, det_ok) if ok]


def project(v_pi, deltas, v_min, v_max, tol=1e-9):
    """Exact minimum-deviation projection onto the half-spaces and box.

    Half-spaces: (v - (v_pi + delta_i)) . delta_i >= 0 for each nonzero
    delta_i. Solved by enumerating active subsets of size <= d (exact for
    this strictly convex QP). Returns (v_safe, feasible, active_set);
    infeasible problems return zeros.
    """
    v_pi = np.asarray(v_pi, dtype=float)
    d = v_pi.shape[0]
    rows = []
    offsets = []
    for delta in deltas:
        delta = np.asarray(delta, dtype=float)
        if np.linalg.norm(delta) < 1e-12:
            continue  # degenerate constraint: command already outside this cone
        rows.append(delta)
        offsets.append(float(np.dot(delta, v_pi + delta)))
    v_min = np.broadcast_to(np.asarray(v_min, dtype=float), (d,))
    v_max = np.broadcast_to(np.asarray(v_max, dtype=float), (d,))
    for j in range(d):
        e = np.zeros(d)
        e[j] = 1.0
        rows.append(e.copy())
        offsets.append(float(v_min[j]))
        rows.append(-e)
        offsets.append(float(-v_max[j]))
    a = np.asarray(rows)
    b = np.asarray(offsets)

    if np.all(a @ v_pi - b >= -tol):
        return v_pi.copy(), True, ()

    n = len(rows)
    best = None
    best_set = ()
    idx = np.arange(n)
    for k in range(1, d + 1):
        subsets = np.asarray(list(combinations(idx, k)))
        if subsets.size == 0:
            continue
        for lo in range(0, len(subsets), 65536):
            chunk = subsets[lo:lo + 65536]
            cand, sets = _subset_candidates(a, b, v_pi, chunk)
            if len(cand) == 0:
                continue
            ok = np.all(cand @ a.T - b >= -tol, axis=1)
            if not np.any(ok):
                continue
            cost = np.sum((cand - v_pi) ** 2, axis=1)
            cost[~ok] = np.inf
            j = int(np.argmin(cost))
            if best is None or cost[j] < best[0] - 1e-15:
                best = (cost[j], cand[j])
                best_set = sets[j]
    if best is None:
        return np.zeros(d), False, ()
    return best[1], True, best_set


def apply_shield(v_pi, robot_pos, robot_radius, dyn_pos, dyn_vel, dyn_radius,
                 static_points=None, v_limit=2.0, cfg: ShieldConfig = None) -> ShieldResult:
    """Full shield pass: build cones, compute adjustments, project."""
    cfg = cfg or ShieldConfig()
    v_pi = np.asarray(v_pi, dtype=float)
    vos, already = build_vos(robot_pos, robot_radius, dyn_pos, dyn_vel, dyn_radius,
                             static_points, cfg)
    deltas = []
    for vo in vos:
        delta = min_adjustment(v_pi, vo)
        if np.linalg.norm(delta) > 1e-12:
            deltas.append(delta)
    v_safe, feasible, active = project(v_pi, deltas, -v_limit, v_limit, cfg.feasibility_tol)
    return ShieldResult(v_safe=v_safe, feasible=feasible, deltas=deltas,
                        normals=[d_.copy() for d_ in deltas], active_set=active,
                        already_in_collision=already, fallback=not feasible)
