"""Simulated deployment perception: mapping, detection, tracking, labels.

Operates on synthetic range returns raycast against the ground-truth
scene: a log-odds occupancy grid accumulates static structure, DBSCAN
clusters the returns into axis-aligned detections, a constant-velocity
Kalman filter tracks them through greedy cosine-similarity association,
and tracks faster than a threshold (or flagged by the optional
ground-truth label oracle) are classified dynamic. The result feeds the
observation codec in place of simulator ground truth.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.cluster import DBSCAN

from . import codec as C
from . import world as W

LOG_ODDS_HIT = float(np.log(0.7 / 0.3))
LOG_ODDS_MISS = float(np.log(0.35 / 0.65))
LOG_ODDS_CLAMP = 10.0


class OccupancyGrid:
    """Arena-aligned log-odds grid with O(1) cell access.

    2D grids cover the arena footprint; cells start at the 0.5 prior
    (log-odds zero) and are clamped to +-LOG_ODDS_CLAMP.
    """

    def __init__(self, arena, resolution=0.1, hit=LOG_ODDS_HIT, miss=LOG_ODDS_MISS,
                 clamp=LOG_ODDS_CLAMP):
        self.resolution = float(resolution)
        self.origin = np.array([-arena[0] / 2.0, -arena[1] / 2.0])
        self.shape = (int(np.ceil(arena[0] / resolution)), int(np.ceil(arena[1] / resolution)))
        self.log_odds = np.zeros(self.shape)
        self.hit = hit
        self.miss = miss
        self.clamp = clamp

    def cell_of(self, point):
        idx = np.floor((np.asarray(point)[..., :2] - self.origin) / self.resolution).astype(int)
        return np.clip(idx, 0, np.array(self.shape) - 1)

    def center_of(self, cell):
        return self.origin + (np.asarray(cell) + 0.5) * self.resolution

    def occupied(self, point):
        i, j = self.cell_of(point)
        return self.log_odds[i, j] > 0.0

    def probability(self, point):
        i, j = self.cell_of(point)
        return 1.0 / (1.0 + np.exp(-self.log_odds[i, j]))

    def _cells_along(self, start, end):
        """Cells crossed from start to just before end (half-resolution steps)."""
        delta = np.asarray(end) - np.asarray(start)
        length = np.linalg.norm(delta)
        if length < 1e-12:
            return []
        n = max(int(np.ceil(length / (self.resolution * 0.5))), 1)
        ts = np.linspace(0.0, 1.0, n + 1)[:-1]
        pts = np.asarray(start) + ts[:, None] * delta
        cells = self.cell_of(pts)
        # dedupe consecutive duplicates, preserving order
        keep = np.ones(len(cells), dtype=bool)
        keep[1:] = np.any(cells[1:] != cells[:-1], axis=1)
        return cells[keep]

    def integrate_scan(self, robot_pos, hit_points, max_range=None):
        """Recursive Bayesian update along each beam.

        Cells crossed before the hit receive the miss update, the hit cell
        the hit update (the prior term is zero for a 0.5 prior). Endpoints
        at or beyond ``max_range`` count as a full-beam miss with no hit.
        """
        origin = np.asarray(robot_pos)[:2]
        for end in np.atleast_2d(hit_points):
            dist = np.linalg.norm(end[:2] - origin)
            is_hit = max_range is None or dist < max_range - 1e-9
            hit_cell = self.cell_of(end[:2]) if is_hit else None
            for i, j in self._cells_along(origin, end[:2]):
                if is_hit and i == hit_cell[0] and j == hit_cell[1]:
                    continue
                self.log_odds[i, j] = max(self.log_odds[i, j] + self.miss, -self.clamp)
            if is_hit:
                i, j = hit_cell
                self.log_odds[i, j] = min(self.log_odds[i, j] + self.hit, self.clamp)

    def occupied_cells(self):
        return np.argwhere(self.log_odds > 0.0)


def grid_raycast_fn(grid: OccupancyGrid, max_range=C.SENSING_RANGE):
    """Static-distance callback for the codec backed by the occupancy grid."""

    def static_fn(origins, dirs):
        e, b = dirs.shape[0], dirs.shape[1]
        out = np.full((e, b), np.inf)
        step = grid.resolution * 0.5
        n = int(np.ceil(max_range / step))
        ts = (np.arange(n) + 1.0) * step
        for env in range(e):
            pts = origins[env, None, None, :2] + ts[None, :, None] * dirs[env, :, None, :2]
            cells = grid.cell_of(pts.reshape(-1, 2)).reshape(b, n, 2)
            occ = grid.log_odds[cells[..., 0], cells[..., 1]] > 0.0
            hit_any = occ.any(axis=1)
            first = np.argmax(occ, axis=1)
            out[env, hit_any] = ts[first[hit_any]]
        return out

    return static_fn


# -- detection --------------------------------------------------------------

@dataclass
class Detection:
    center: np.ndarray  # (2,) or (3,)
    extents: np.ndarray  # full sizes per axis

    @property
    def radius(self):
        return float(np.max(self.extents[:2]) / 2.0)


def synthetic_scan(state: W.WorldState, env: int, n_beams=720, rng=None, noise_sigma=0.0,
                   max_range=C.SENSING_RANGE, include_dynamic=True):
    """Planar 360-degree range sweep against the ground-truth scene.

    Returns (hit_points (B,2), distances (B,)); misses are clamped to
    max_range. Dynamic obstacles are included so detection can see them.
    """
    ang = np.arange(n_beams) * (2 * np.pi / n_beams)
    dirs = np.stack([np.cos(ang), np.sin(ang)], axis=1)
    if state.config.dim == 3:
        dirs3 = np.concatenate([dirs, np.zeros((n_beams, 1))], axis=1)
    else:
        dirs3 = dirs
    dist = C.raycast_scene(state, state.robot_pos[env:env + 1], dirs3[None, ...])[0]
    if include_dynamic and state.dyn_pos.shape[1]:
        origin = state.robot_pos[env, :2]
        f = origin[None, :] - state.dyn_pos[env]
        b_coef = 2.0 * np.einsum("bd,nd->bn", dirs, f)
        c_coef = np.sum(f * f, axis=1)[None, :] - state.dyn_radius[env][None, :] ** 2
        disc = b_coef**2 - 4.0 * c_coef
        ok = disc >= 0
        sq = np.sqrt(np.maximum(disc, 0.0))
        t0 = (-b_coef - sq) / 2.0
        t1 = (-b_coef + sq) / 2.0
        t = np.where(t0 >= 0, t0, np.where(t1 >= 0, 0.0, np.inf))
        t = np.where(ok, t, np.inf)
        dist = np.minimum(dist, t.min(axis=1))
    dist = np.minimum(dist, max_range)
    if noise_sigma > 0 and rng is not None:
        hit = dist < max_range
        dist = np.where(hit, np.clip(dist + rng.normal(0, noise_sigma, dist.shape), 0.05, max_range), dist)
    pts = state.robot_pos[env, :2] + dist[:, None] * dirs
    return pts, dist


def detect(points, eps=0.3, min_samples=5, max_points=4096, rng=None):
    """Density-based clustering into axis-aligned boxes.

    points: (N, 2) or (N, 3) surface samples; downsampled to max_points.
    """
    points = np.asarray(points)
    if len(points) == 0:
        return []
    if len(points) > max_points:
        idx = (rng or np.random.default_rng(0)).choice(len(points), size=max_points, replace=False)
        points = points[idx]
    labels = DBSCAN(eps=eps, min_samples=min_samples).fit(points).labels_
    detections = []
    for label in sorted(set(labels) - {-1}):
        cluster = points[labels == label]
        lo, hi = cluster.min(axis=0), cluster.max(axis=0)
        detections.append(Detection(center=(lo + hi) / 2.0, extents=hi - lo))
    return detections


# -- tracking ---------------------------------------------------------------

@dataclass
class Track:
    track_id: int
    state: np.ndarray  # [px, py, vx, vy]
    covariance: np.ndarray  # 4x4
    radius: float
    age: float = 0.0
    time_since_update: float = 0.0
    confirmed: bool = False
    label: str = "static"

    @property
    def position(self):
        return self.state[:2]

    @property
    def velocity(self):
        return self.state[2:]

    @property
    def feature(self):
        return np.concatenate([self.state[:2], self.state[2:], [self.radius]])


def _feature_of(position, velocity, radius):
    return np.concatenate([position, velocity, [radius]])


def _normalized_feature(feat, robot_pos, pos_scale=C.SENSING_RANGE, vel_scale=1.5, rad_scale=0.5):
    """Robot-centered, per-group scaled feature for cosine matching."""
    out = np.empty(5)
    out[0:2] = (feat[0:2] - robot_pos[:2]) / pos_scale
    out[2:4] = feat[2:4] / vel_scale
    out[4] = feat[4] / rad_scale
    return out


def cosine_similarity(a, b):
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < 1e-12 or nb < 1e-12:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


class Tracker:
    """Constant-velocity Kalman tracker with greedy cosine association."""

    def __init__(self, similarity_threshold=0.8, process_accel=1.0, meas_sigma=0.1,
                 max_coast=0.5, speed_threshold=0.3):
        self.similarity_threshold = similarity_threshold
        self.process_accel = process_accel
        self.meas_sigma = meas_sigma
        self.max_coast = max_coast
        self.speed_threshold = speed_threshold
        self.tracks: list[Track] = []
        self._next_id = 0

    # Kalman matrices for step dt
    def _fq(self, dt):
        f = np.eye(4)
        f[0, 2] = f[1, 3] = dt
        q = self.process_accel**2 * np.array([
            [dt**4 / 4, 0, dt**3 / 2, 0],
            [0, dt**4 / 4, 0, dt**3 / 2],
            [dt**3 / 2, 0, dt**2, 0],
            [0, dt**3 / 2, 0, dt**2],
        ])
        return f, q

    def predict(self, dt):
        f, q = self._fq(dt)
        for tr in self.tracks:
            tr.state = f @ tr.state
            tr.covariance = f @ tr.covariance @ f.T + q
            tr.age += dt
            tr.time_since_update += dt

    def _kalman_update(self, tr: Track, measurement):
        h = np.zeros((2, 4))
        h[0, 0] = h[1, 1] = 1.0
        r = (self.meas_sigma**2) * np.eye(2)
        y = measurement - h @ tr.state
        s = h @ tr.covariance @ h.T + r
        k = tr.covariance @ h.T @ np.linalg.inv(s)
        tr.state = tr.state + k @ y
        ikh = np.eye(4) - k @ h
        # Joseph form keeps the covariance symmetric positive-definite
        tr.covariance = ikh @ tr.covariance @ ikh.T + k @ r @ k.T

    def step(self, detections, dt, robot_pos=None):
        """Predict, associate greedily by cosine similarity, update, spawn, retire."""
        robot_pos = np.zeros(2) if robot_pos is None else np.asarray(robot_pos)[:2]
        self.predict(dt)

        pairs = []
        for ti, tr in enumerate(self.tracks):
            tf = _normalized_feature(tr.feature, robot_pos)
            for di, det in enumerate(detections):
                # a detection continuing this track would share its velocity
                df = _normalized_feature(_feature_of(det.center[:2], tr.velocity, det.radius),
                                         robot_pos)
                score = cosine_similarity(tf, df)
                if score >= self.similarity_threshold:
                    pairs.append((score, ti, di))
        pairs.sort(key=lambda p: (-p[0], self.tracks[p[1]].track_id))

        used_tracks, used_dets = set(), set()
        for score, ti, di in pairs:
            if ti in used_tracks or di in used_dets:
                continue
            used_tracks.add(ti)
            used_dets.add(di)
            tr = self.tracks[ti]
            det = detections[di]
            if not tr.confirmed:
                # newborn: finite-difference initial velocity, then full state
                velocity = (det.center[:2] - tr.position) / dt
                tr.state = np.concatenate([det.center[:2], velocity])
                tr.confirmed = True
            else:
                self._kalman_update(tr, det.center[:2])
            tr.radius = det.radius
            tr.time_since_update = 0.0

        for di, det in enumerate(detections):
            if di in used_dets:
                continue
            cov = np.diag([self.meas_sigma**2, self.meas_sigma**2, 4.0, 4.0])
            self.tracks.append(Track(track_id=self._next_id, radius=det.radius,
                                     state=np.concatenate([det.center[:2], [0.0, 0.0]]),
                                     covariance=cov))
            self._next_id += 1

        self.tracks = [tr for tr in self.tracks if tr.time_since_update <= self.max_coast + 1e-9]
        return self.tracks

    def classify(self, label_oracle=None):
        """Label tracks dynamic when fast enough or when the oracle says so."""
        for tr in self.tracks:
            is_dynamic = np.linalg.norm(tr.velocity) > self.speed_threshold
            if label_oracle is not None and label_oracle(tr):
                is_dynamic = True
            tr.label = "dynamic" if is_dynamic else "static"
        return self.tracks

    def dynamic_tracks(self):
        return [tr for tr in self.tracks if tr.label == "dynamic" and tr.confirmed]


class GroundTruthLabelOracle:
    """Stand-in for a learned image detector: flags tracks overlapping a
    true dynamic obstacle (position within the combined radius)."""

    def __init__(self, state: W.WorldState, env: int, margin=0.3):
        self.state = state
        self.env = env
        self.margin = margin

    def __call__(self, track: Track) -> bool:
        dyn = self.state.dyn_pos[self.env]
        if dyn.shape[0] == 0:
            return False
        dist = np.linalg.norm(dyn - track.position[None, :], axis=1)
        return bool(np.any(dist <= self.state.dyn_radius[self.env] + self.margin))


class TrackDynamics:
    """Adapter exposing per-env tracker output to the observation codec."""

    def __init__(self, trackers):
        self.trackers = trackers

    def current(self, env):
        tracks = self.trackers[env].dynamic_tracks()
        ids = [tr.track_id for tr in tracks]
        pos = np.array([tr.position for tr in tracks]) if tracks else np.zeros((0, 2))
        vel = np.array([tr.velocity for tr in tracks]) if tracks else np.zeros((0, 2))
        rad = np.array([tr.radius for tr in tracks]) if tracks else np.zeros(0)
        return ids, pos, vel, rad


@dataclass
class PerceptionConfig:
    n_beams: int = 720
    range_noise: float = 0.0
    dbscan_eps: float = 0.3
    dbscan_min_samples: int = 5
    max_points: int = 4096
    similarity_threshold: float = 0.8
    process_accel: float = 1.0
    meas_sigma: float = 0.1
    max_coast: float = 0.5
    speed_threshold: float = 0.3
    use_label_oracle: bool = False
    grid_resolution: float = 0.1


class PerceptionPipeline:
    """Per-env scan -> occupancy -> detect -> track -> classify cycle."""

    def __init__(self, state: W.WorldState, cfg: PerceptionConfig = None, seed=0):
        self.state = state
        self.cfg = cfg or PerceptionConfig()
        e = state.n_envs
        self.rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(e)]
        self.grids = [OccupancyGrid(state.config.arena, self.cfg.grid_resolution) for _ in range(e)]
        self.trackers = [Tracker(self.cfg.similarity_threshold, self.cfg.process_accel,
                                 self.cfg.meas_sigma, self.cfg.max_coast,
                                 self.cfg.speed_threshold) for _ in range(e)]
        self.last_time = state.time.copy()

    def reset_env(self, env):
        self.grids[env] = OccupancyGrid(self.state.config.arena, self.cfg.grid_resolution)
        self.trackers[env] = Tracker(self.cfg.similarity_threshold, self.cfg.process_accel,
                                     self.cfg.meas_sigma, self.cfg.max_coast,
                                     self.cfg.speed_threshold)
        self.last_time[env] = self.state.time[env]

    def update(self):
        """One perception cycle per env; returns per-env track lists."""
        out = []
        for env in range(self.state.n_envs):
            dt = float(self.state.time[env] - self.last_time[env])
            self.last_time[env] = self.state.time[env]
            pts, dist = synthetic_scan(self.state, env, self.cfg.n_beams,
                                       rng=self.rngs[env], noise_sigma=self.cfg.range_noise)
            self.grids[env].integrate_scan(self.state.robot_pos[env], pts,
                                           max_range=C.SENSING_RANGE)
            hits = pts[dist < C.SENSING_RANGE - 1e-9]
            detections = detect(hits, self.cfg.dbscan_eps, self.cfg.dbscan_min_samples,
                                self.cfg.max_points, rng=self.rngs[env])
            if dt > 0:
                self.trackers[env].step(detections, dt, robot_pos=self.state.robot_pos[env])
            oracle = GroundTruthLabelOracle(self.state, env) if self.cfg.use_label_oracle else None
            self.trackers[env].classify(oracle)
            out.append(self.trackers[env].tracks)
        return out

    def codec_sources(self):
        """(static_fn, dynamics) pair to plug into the ObservationBuilder."""
        grids = self.grids

        def static_fn(origins, dirs):
            parts = []
            for env in range(len(grids)):
                fn = grid_raycast_fn(grids[env])
                parts.append(fn(origins[env:env + 1], dirs[env:env + 1])[0])
            return np.stack(parts, axis=0)

        return static_fn, TrackDynamics(self.trackers)


def save_grid(path, grid: OccupancyGrid):
    """Binary snapshot: header (resolution, origin, shape) + log-odds array."""
    with open(path, "wb") as fh:
        fh.write(b"NVGRID01")
        np.array([grid.resolution], dtype="<f8").tofile(fh)
        np.asarray(grid.origin, dtype="<f8").tofile(fh)
        np.array(grid.shape, dtype="<i8").tofile(fh)
        grid.log_odds.astype("<f8").tofile(fh)


def load_grid(path):
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != b"NVGRID01":
            raise ValueError(f"{path}: not a grid snapshot")
        resolution = np.fromfile(fh, dtype="<f8", count=1)[0]
        origin = np.fromfile(fh, dtype="<f8", count=2)
        shape = np.fromfile(fh, dtype="<i8", count=2)
        data = np.fromfile(fh, dtype="<f8").reshape(tuple(shape))
    grid = OccupancyGrid((shape[0] * resolution, shape[1] * resolution), resolution)
    grid.origin = origin
    grid.log_odds = data
    return grid
