import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stlplan.sdf import OccupancyMask, load_mask
from stlplan.sim import (Action, BatchSim, EnvConfig, MapGenerationError, RobotState,
                         TransitionCounter, World, control_reward, generate_map, observe,
                         raycast, sample_free_points, save_world, step, wrap_angle,
                         write_episode_log)


def empty_world(extent=(3.0, 3.0), res=96):
    return World(OccupancyMask(np.zeros((res, res), bool), extent))


def wall_world(x_from=1.5, extent=(3.0, 3.0), res=96):
    g = np.zeros((res, res), bool)
    g[:, int(round(x_from / (extent[0] / res))):] = True  # columns whose cells start at x_from
    return World(OccupancyMask(g, extent))


def test_zero_action_keeps_state():
    cfg = EnvConfig()
    s = RobotState(1.0, 1.0, 0.3)
    s2, _, col = step(s, Action(0.0, 0.0), empty_world(), cfg)
    assert (s2.x, s2.y, s2.theta) == (s.x, s.y, s.theta) and not col
    assert s2.clock == 1


def test_euler_step_advances():
    cfg = EnvConfig(v_max=1.0)
    s2, obs, _ = step(RobotState(1.0, 1.0, 0.0), Action(1.0, 0.0), empty_world(), cfg)
    assert s2.x == pytest.approx(1.1) and s2.y == 1.0
    assert obs.as_array().shape == (4 + cfg.n_rays,)


def test_actions_are_clipped():
    cfg = EnvConfig()
    s2, _, _ = step(RobotState(1.0, 1.0, 0.0), Action(5.0, 100.0), empty_world(), cfg)
    assert s2.x == pytest.approx(1.0 + cfg.v_max * cfg.dt)
    assert s2.theta == pytest.approx(cfg.w_max * cfg.dt)


def test_collision_reverts_position_but_turns():
    cfg = EnvConfig(v_max=1.0)
    w = wall_world(1.5)
    s = RobotState(1.45, 1.0, 0.0)
    s2, _, col = step(s, Action(1.0, 1.0), w, cfg)
    assert col
    assert (s2.x, s2.y) == (s.x, s.y)
    assert s2.theta == pytest.approx(0.1)


def test_collision_sound_against_sdf():
    cfg = EnvConfig(v_max=1.0)
    world = generate_map(EnvConfig(n_obstacles=8), seed=3)
    rng = np.random.default_rng(0)
    for _ in range(300):
        s = RobotState(*rng.uniform(0.05, 2.37, size=2), rng.uniform(-math.pi, math.pi))
        a = Action(*rng.uniform(-1, 1, size=2))
        _, _, col = step(s, a, world, cfg)
        attempted = np.array([s.x + max(-1, min(1, a.v)) * math.cos(s.theta) * cfg.dt,
                              s.y + max(-1, min(1, a.v)) * math.sin(s.theta) * cfg.dt])
        assert col == bool(world.sdf(attempted) <= 0)


def test_empty_map_rays_hit_range():
    cfg = EnvConfig(ray_range=1.0)
    rays = raycast(RobotState(1.5, 1.5, 0.2), empty_world(), cfg.n_rays, cfg.ray_range)
    np.testing.assert_array_equal(rays, 1.0)


def test_wall_straight_ahead():
    w = wall_world(1.5)
    rays = raycast(RobotState(0.5, 1.5, 0.0), w, 36, 2.0)
    assert abs(rays[0] - 1.0) <= 0.5 * w.transform.pitch
    # straight behind, the map edge 0.5 m away counts as obstacle
    assert abs(rays[18] - 0.5) <= 0.5 * w.transform.pitch


def test_rays_never_understate_distance():
    world = generate_map(EnvConfig(n_obstacles=8), seed=1)
    rng = np.random.default_rng(2)
    pitch = world.transform.pitch
    for _ in range(30):
        p = sample_free_points(world, 1, rng, margin=0.05)[0]
        th = rng.uniform(-math.pi, math.pi)
        rays = raycast(RobotState(p[0], p[1], th), world, 12, 1.0)
        assert np.all(rays <= 1.0) and np.all(rays >= 0)
        for k, r in enumerate(rays):
            b = th + 2 * math.pi * k / 12
            # every point strictly before the reported hit (minus one march step) is free
            s = np.arange(0.0, max(r - pitch, 0.0), pitch / 8)
            pts = np.stack([p[0] + s * math.cos(b), p[1] + s * math.sin(b)], axis=1)
            assert not world.occupied(pts).any()


def test_rotational_symmetry_is_cyclic_shift():
    res = 64
    g = np.zeros((res, res), bool)
    g[8:56, 8:12] = g[8:56, 52:56] = g[8:12, 8:56] = g[52:56, 8:56] = True
    g[20:24, 40:44] = g[40:44, 40:44] = g[40:44, 20:24] = g[20:24, 20:24] = True
    w = World(OccupancyMask(g, (2.0, 2.0)))
    c = 1.0
    th = 0.3
    r0 = raycast(RobotState(c, c, th), w, 4, 1.5)
    r1 = raycast(RobotState(c, c, th + math.pi / 2), w, 4, 1.5)
    np.testing.assert_allclose(np.roll(r0, -1), r1, atol=0.25 * w.transform.pitch + 1e-12)


def test_control_reward_examples():
    assert control_reward(np.array([0.0, 0.0]), np.array([0.1, 0.0]), [1.0, 0.0]) == pytest.approx(0.1)
    assert control_reward(np.array([0.3, 0.4]), np.array([0.3, 0.4]), [1.0, 0.0]) == 0.0
    g = np.array([1.0, 1.0])
    for a in np.linspace(0, 2 * math.pi, 12):
        p0 = g + 0.5 * np.array([math.cos(a), math.sin(a)])
        p1 = g + 0.5 * np.array([math.cos(a + 0.1), math.sin(a + 0.1)])
        assert control_reward(p0, p1, g) == pytest.approx(0.0, abs=1e-15)


def test_reward_telescopes():
    cfg = EnvConfig()
    world = generate_map(cfg, seed=4)
    rng = np.random.default_rng(0)
    s = RobotState(1.21, 1.21, 0.0)
    o = observe(s, world, cfg)
    o0 = o
    goal = np.array([2.0, 0.4])
    total = 0.0
    for _ in range(200):
        s, o2, _ = step(s, Action(*rng.uniform(-1, 1, 2) * [cfg.v_max, cfg.w_max]), world, cfg)
        total += control_reward(o, o2, goal)
        o = o2
    expected = np.linalg.norm(goal - o0.pos) - np.linalg.norm(goal - o.pos)
    assert total == pytest.approx(expected, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.floats(-50, 50))
def test_wrap_angle_range(a):
    w = float(wrap_angle(a))
    assert -math.pi < w <= math.pi
    assert math.isclose(math.cos(w), math.cos(a), abs_tol=1e-9)
    assert math.isclose(math.sin(w), math.sin(a), abs_tol=1e-9)


def test_generate_map_examples():
    cfg0 = EnvConfig(n_obstacles=0)
    assert generate_map(cfg0, 1).mask.n_obstacle == 0
    cfg = EnvConfig(n_obstacles=10)
    a, b = generate_map(cfg, 7), generate_map(cfg, 7)
    assert a.mask == b.mask and a.rects == b.rects
    assert generate_map(cfg, 8).mask != a.mask
    for seed in range(20):
        w = generate_map(cfg, seed)
        assert len(w.rects) == 10
        assert w.mask.n_obstacle / w.mask.grid.size < 0.5
        # start disc stays free
        pts = sample_free_points(w, 1, np.random.default_rng(0), 0.0)
        assert pts.shape == (1, 2)
        assert w.sdf(np.array(cfg.start_center)) > cfg.start_radius


def test_generate_map_keeps_regions_free():
    cfg = EnvConfig(n_obstacles=6)
    regions = [((0.5, 0.5), 0.25), ((1.9, 1.9), 0.25)]
    for seed in range(10):
        w = generate_map(cfg, seed, keep_free=regions)
        for c, r in regions:
            ang = np.linspace(0, 2 * math.pi, 32)
            ring = np.stack([c[0] + r * np.cos(ang), c[1] + r * np.sin(ang)], axis=1)
            assert not w.occupied(ring).any()
            assert not w.occupied(np.array(c)).any()


def test_generate_map_fails_when_overcrowded():
    cfg = EnvConfig(n_obstacles=3, obstacle_size=(1.0, 1.2), start_radius=1.0)
    with pytest.raises(MapGenerationError):
        generate_map(cfg, 0, max_tries=20)


def test_border_walls():
    w = generate_map(EnvConfig(n_obstacles=0, border_walls=True), 0)
    g = w.mask.grid
    assert g[0].all() and g[-1].all() and g[:, 0].all() and g[:, -1].all()
    assert not g[1:-1, 1:-1].any()


def test_save_world_sidecar(tmp_path):
    cfg = EnvConfig()
    w = generate_map(cfg, 5)
    save_world(tmp_path / "map5", w, cfg)
    assert load_mask(tmp_path / "map5.pgm", cfg.extent) == w.mask
    side = json.loads((tmp_path / "map5.json").read_text())
    assert side["rectangles"] == [list(r) for r in w.rects]


def test_config_validation():
    with pytest.raises(ValueError):
        EnvConfig(dt=0.0)
    with pytest.raises(ValueError):
        EnvConfig(goal_tol=0.5)


def test_batch_matches_scalar_and_counts_steps():
    cfg = EnvConfig()
    worlds = [generate_map(cfg, s) for s in range(3)]
    counter = TransitionCounter()
    sim = BatchSim(worlds, cfg, counter)
    rng = np.random.default_rng(0)
    states = []
    for i in range(3):
        p = sample_free_points(worlds[i], 1, rng, 0.1)[0]
        sim.set_state(i, p[0], p[1], 0.5 * i)
        states.append(RobotState(p[0], p[1], float(wrap_angle(0.5 * i))))
    active = np.array([True, False, True])
    for _ in range(50):
        v = rng.uniform(-0.3, 0.3, 3)
        w = rng.uniform(-3, 3, 3)
        col = sim.step(v, w, active)
        obs = sim.observe()
        for i in range(3):
            if active[i]:
                states[i], o, c = step(states[i], Action(v[i], w[i]), worlds[i], cfg)
                assert c == col[i]
                np.testing.assert_array_equal(o.as_array(), obs[i])
    assert counter.count == 100
    assert (sim.x[1], sim.theta[1]) == (states[1].x, states[1].theta)


def test_determinism_of_action_sequences():
    cfg = EnvConfig()

    def run():
        world = generate_map(cfg, 11)
        rng = np.random.default_rng(5)
        s = RobotState(1.21, 1.21, 0.0)
        out = []
        for _ in range(100):
            s, o, _ = step(s, Action(*rng.uniform(-1, 1, 2)), world, cfg)
            out.append(o.as_array())
        return np.stack(out)

    assert run().tobytes() == run().tobytes()


def test_episode_log(tmp_path):
    recs = [{"t": 0, "x": 1.0, "y": 2.0, "theta": 0.0, "v": 0.1, "omega": 0.0,
             "reward": 0.01, "collided": np.bool_(False)}]
    write_episode_log(tmp_path / "ep.jsonl", recs)
    line = json.loads((tmp_path / "ep.jsonl").read_text().strip())
    assert line["collided"] is False and line["x"] == 1.0
