import numpy as np
import pytest

from navkit import shield as S


def head_on_vo(dist=3.0, combined=0.6, tau=2.0):
    return S.VelocityObstacle(offset=np.array([dist, 0.0]), velocity=np.zeros(2),
                              radius=combined, tau=tau)


def test_no_obstacles_shield_is_identity():
    res = S.apply_shield(np.array([1.0, 0.5]), np.zeros(2), 0.3,
                         np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0))
    assert np.array_equal(res.v_safe, [1.0, 0.5])
    assert res.feasible and not res.fallback
    assert res.deltas == []


def test_head_on_cone_half_angle():
    vo = head_on_vo()
    half_angle = np.arcsin(0.6 / 3.0)  # about 11.54 degrees
    assert abs(np.degrees(half_angle) - 11.54) < 0.01
    speed = 1.8
    inside = speed * np.array([np.cos(half_angle * 0.9), np.sin(half_angle * 0.9)])
    outside = speed * np.array([np.cos(half_angle * 1.1), np.sin(half_angle * 1.1)])
    assert S.vo_contains(vo, inside)
    assert not S.vo_contains(vo, outside)


def test_receding_obstacle_leaves_goal_velocity_untouched():
    # obstacle behind the robot, moving away; forward command is outside its cone
    res = S.apply_shield(np.array([2.0, 0.0]), np.zeros(2), 0.3,
                         np.array([[-3.0, 0.0]]), np.array([[-1.0, 0.0]]), np.array([0.4]))
    assert np.array_equal(res.v_safe, [2.0, 0.0])
    assert res.deltas == []


def test_outside_cone_adjustment_is_zero():
    vo = head_on_vo()
    delta = S.min_adjustment(np.array([0.0, 1.5]), vo)  # sideways: no collision course
    assert np.allclose(delta, 0.0)


def test_axis_velocity_adjustment_magnitude():
    vo = head_on_vo()
    theta = np.arcsin(0.6 / 3.0)
    v = np.array([1.8, 0.0])  # along the cone axis, in the untruncated region
    delta = S.min_adjustment(v, vo)
    assert abs(np.linalg.norm(delta) - 1.8 * np.sin(theta)) < 1e-9


def test_slow_approach_outside_truncated_cone():
    vo = head_on_vo()  # tau = 2: slower than (3 - 0.6)/2 never collides in time
    assert not S.vo_contains(vo, np.array([0.5, 0.0]))
    assert np.allclose(S.min_adjustment(np.array([0.5, 0.0]), vo), 0.0)


def test_adjusted_velocity_lands_on_boundary():
    rng = np.random.default_rng(0)
    for _ in range(200):
        offset = rng.uniform(-4, 4, size=2)
        dist = np.linalg.norm(offset)
        if dist < 1.0:
            continue
        vo = S.VelocityObstacle(offset=offset, velocity=rng.uniform(-1, 1, size=2),
                                radius=rng.uniform(0.3, min(0.9, dist - 0.05)), tau=2.0)
        v_pi = rng.uniform(-2, 2, size=2)
        delta = S.min_adjustment(v_pi, vo)
        if np.linalg.norm(delta) == 0.0:
            continue
        v_rel = v_pi + delta - vo.velocity
        boundary_dist, _ = S._ray_distance_to_point(v_rel, vo.offset, vo.tau)
        assert abs(boundary_dist - vo.radius) < 1e-9


def test_all_zero_deltas_passthrough():
    v, feasible, active = S.project(np.array([0.7, -0.2]), [np.zeros(2)], -2.0, 2.0)
    assert feasible and np.array_equal(v, [0.7, -0.2]) and active == ()


def test_single_halfspace_projection_matches_closed_form():
    v_pi = np.array([1.0, 0.0])
    delta = np.array([-0.5, 0.5])
    v, feasible, _ = S.project(v_pi, [delta], -2.0, 2.0)
    # constraint plane passes through v_pi + delta with normal delta
    boundary = v_pi + delta
    expected = v_pi + delta * (np.dot(delta, boundary - v_pi) / np.dot(delta, delta))
    assert feasible
    assert np.allclose(v, expected, atol=1e-12)
    assert np.dot(v - boundary, delta) >= -1e-9


def test_box_clipping_applies():
    v_pi = np.array([1.9, 0.0])
    delta = np.array([0.4, 0.0])  # pushes v_x to 2.3, beyond the box
    v, feasible, active = S.project(v_pi, [delta], -2.0, 2.0)
    assert not feasible or v[0] <= 2.0 + 1e-12
    if feasible:
        assert np.dot(v - (v_pi + delta), delta) >= -1e-9 or not feasible


def test_infeasible_problem_falls_back_to_zero():
    # two opposing half-spaces that exclude the entire box
    d1 = np.array([3.0, 0.0])
    d2 = np.array([-3.0, 0.0])
    v, feasible, _ = S.project(np.zeros(2), [d1, d2], -2.0, 2.0)
    assert not feasible
    assert np.array_equal(v, np.zeros(2))


def random_problem(rng, n_obstacles=4, v_limit=2.0):
    robot = np.zeros(2)
    pos, vel, rad = [], [], []
    for _ in range(n_obstacles):
        p = rng.uniform(-4, 4, size=2)
        while np.linalg.norm(p) < 1.1:
            p = rng.uniform(-4, 4, size=2)
        pos.append(p)
        vel.append(rng.uniform(-1.2, 1.2, size=2))
        rad.append(rng.uniform(0.3, 0.7))
    # aim roughly at one obstacle so cones are regularly violated
    target = pos[rng.integers(n_obstacles)]
    aim = target / np.linalg.norm(target) * rng.uniform(0.8, v_limit)
    v_pi = np.clip(aim + rng.normal(0, 0.3, size=2), -v_limit, v_limit)
    return v_pi, robot, np.array(pos), np.array(vel), np.array(rad)


def grid_oracle(v_pi, deltas, v_limit, n=1000):
    xs = np.linspace(-v_limit, v_limit, n)
    gx, gy = np.meshgrid(xs, xs)
    pts = np.stack([gx.reshape(-1), gy.reshape(-1)], axis=1)
    ok = np.ones(len(pts), dtype=bool)
    for delta in deltas:
        ok &= (pts - (v_pi + delta)) @ delta >= 0
    if not np.any(ok):
        return None, None
    cost = np.linalg.norm(pts[ok] - v_pi, axis=1)
    j = np.argmin(cost)
    return pts[ok][j], cost[j]


def test_projection_matches_grid_oracle():
    rng = np.random.default_rng(42)
    pitch = 4.0 / 999
    checked = 0
    for _ in range(40):
        v_pi, robot, pos, vel, rad = random_problem(rng)
        res = S.apply_shield(v_pi, robot, 0.3, pos, vel, rad, v_limit=2.0)
        if not res.deltas:
            assert np.array_equal(res.v_safe, v_pi)
            continue
        g_pt, g_cost = grid_oracle(v_pi, res.deltas, 2.0)
        if res.feasible:
            own = np.linalg.norm(res.v_safe - v_pi)
            assert g_cost is None or own <= g_cost + 2 * pitch
            # feasibility of our own answer
            for delta in res.deltas:
                assert np.dot(res.v_safe - (v_pi + delta), delta) >= -1e-9
            assert np.all(np.abs(res.v_safe) <= 2.0 + 1e-12)
        else:
            assert g_cost is None or g_cost > 0  # oracle found nothing on the grid either
        checked += 1
    assert checked >= 20


def test_forward_simulation_never_overlaps():
    rng = np.random.default_rng(7)
    sims = 0
    for _ in range(60):
        v_pi, robot, pos, vel, rad = random_problem(rng, n_obstacles=3)
        res = S.apply_shield(v_pi, robot, 0.3, pos, vel, rad, v_limit=2.0)
        if not res.feasible:
            continue
        ts = np.arange(0.0, 2.0 + 1e-9, 0.001)
        rp = robot[None, :] + ts[:, None] * res.v_safe[None, :]
        for i in range(len(pos)):
            op = pos[i][None, :] + ts[:, None] * vel[i][None, :]
            dist = np.linalg.norm(rp - op, axis=1)
            assert np.min(dist) >= rad[i] + 0.3 - 1e-6, "disc overlap within the horizon"
        sims += 1
    assert sims >= 40


def test_projection_idempotent_on_single_constraint():
    v_pi = np.array([1.5, 0.2])
    vo = head_on_vo()
    delta = S.min_adjustment(v_pi, vo)
    v1, _, _ = S.project(v_pi, [delta], -2.0, 2.0)
    delta2 = S.min_adjustment(v1, vo)
    v2, _, _ = S.project(v1, [delta2], -2.0, 2.0)
    assert np.allclose(v1, v2, atol=1e-9)


def test_already_in_collision_flag_and_skip():
    res = S.apply_shield(np.array([1.0, 0.0]), np.zeros(2), 0.3,
                         np.array([[0.2, 0.0]]), np.zeros((1, 2)), np.array([0.3]))
    assert res.already_in_collision
    assert res.deltas == []  # overlapping obstacle contributes no cone


def test_static_ray_points_constrain_command():
    # a wall of ray hits dead ahead must deflect or stop a forward command
    robot = np.zeros(2)
    dirs = np.stack([np.cos(np.arange(36) * np.pi / 18), np.sin(np.arange(36) * np.pi / 18)], axis=1)
    raw = np.full((36, 4), 4.0)
    raw[0, :] = 0.8  # hit straight ahead
    pts = S.static_points_from_rays(robot, np.repeat(dirs, 4, axis=0).reshape(36, 4, 2), raw, dim=2)
    assert pts.shape == (1, 2)
    res = S.apply_shield(np.array([2.0, 0.0]), robot, 0.3,
                         np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0),
                         static_points=pts, v_limit=2.0)
    assert res.feasible
    assert not S.vo_contains(S.VelocityObstacle(offset=pts[0], velocity=np.zeros(2),
                                                radius=0.4, tau=2.0), res.v_safe, tol=-1e-9)


def test_3d_shield_projection():
    v_pi = np.array([1.5, 0.0, 0.3])
    res = S.apply_shield(v_pi, np.zeros(3), 0.3,
                         np.array([[2.0, 0.0]]), np.zeros((1, 2)), np.array([0.4]),
                         v_limit=2.0)
    assert res.v_safe.shape == (3,)
    if res.deltas:
        for delta in res.deltas:
            assert np.dot(res.v_safe - (v_pi + delta), delta) >= -1e-9
