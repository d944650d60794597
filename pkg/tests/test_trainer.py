import itertools
import math
from dataclasses import replace

import numpy as np
import pytest

from stlplan import controller as ctl
from stlplan import planner as pl
from stlplan import stl
from stlplan import trainer as tr
from stlplan.config import RunConfig, ScheduleConfig, TaskConfig
from stlplan.sdf import OccupancyMask, WorldTransform, avoid_predicate
from stlplan.sim import EnvConfig
from stlplan.tasks import TaskSpec, hard_robustness

EXT = (2.4, 2.4)


def tiny_config(**sched) -> RunConfig:
    T = 6
    env = EnvConfig(n_obstacles=3, border_walls=True)
    planner = pl.PlannerConfig(grid=8, embed=8, enc_hidden=16, hidden=16, depth=2, T=T, batch=4, pg_batch=2,
                               extent=env.extent)
    ccfg = ctl.ControllerConfig(hidden=16, n_envs=2, rollout_len=32, epochs=1, minibatches=2)
    base = dict(controller_steps=128, planner_updates=3, budget=2000, map_pool=4, probe_episodes=4,
                eval_episodes=4)
    base.update(sched)
    return RunConfig(task=TaskConfig("Cover", T, 1), env=env, planner=planner, controller=ccfg,
                     schedule=ScheduleConfig(**base))


# -- oracle -----------------------------------------------------------------------

def _mask(obstacles=(), res=48):
    grid = np.zeros((res, res), bool)
    for (r0, r1, c0, c1) in obstacles:
        grid[r0:r1, c0:c1] = True
    return OccupancyMask(grid, EXT)


def _formula(text, regions, mask):
    b = {k: stl.region(k, c, r) for k, (c, r) in regions.items()}
    b["avoid_map"] = avoid_predicate(mask)
    return stl.parse_spec(text, b)


def _brute(formula, x0, n_grid, T):
    s = EXT[0] / n_grid
    cells = np.array([((i + 0.5) * s, (j + 0.5) * s) for j in range(n_grid) for i in range(n_grid)])
    c0 = int(np.argmin(np.hypot(*(cells - x0).T)))
    moves = [(di, dj) for dj in (-1, 0, 1) for di in (-1, 0, 1)]
    best = -np.inf
    paths = []
    for seq in itertools.product(moves, repeat=T):
        i, j = c0 % n_grid, c0 // n_grid
        idx = [c0]
        ok = True
        for di, dj in seq:
            i, j = i + di, j + dj
            if not (0 <= i < n_grid and 0 <= j < n_grid):
                ok = False
                break
            idx.append(i + j * n_grid)
        if ok:
            paths.append(cells[idx])
    rho = hard_robustness(formula, np.stack(paths))
    best = rho.max()
    return best


def test_oracle_free_single_region():
    mask = _mask()
    f = _formula("F[0,8] A & G[0,8] avoid_map", {"A": ((2.0, 2.0), 0.3)}, mask)
    path = tr.oracle_plan(f, (0.3, 0.3), EXT, 12, 8)
    assert path is not None and hard_robustness(f, path) > 0
    # straight diagonal: each step moves at most one cell
    assert np.all(np.abs(np.diff(path, axis=0)) <= EXT[0] / 12 + 1e-12)


def test_oracle_enclosed_region_none():
    # a closed ring of obstacle around the region, 0.4 m thick so no grid
    # move (at most 0.28 m) can hop over it
    ring = [(14, 22, 14, 46), (38, 46, 14, 46), (14, 46, 14, 22), (14, 46, 38, 46)]
    mask = _mask(ring)
    # region centred on the ring's middle pixel
    centre = tuple(WorldTransform.for_mask(mask).to_world(np.array([[30, 30]]))[0])
    f = _formula("F[0,12] A & G[0,12] avoid_map", {"A": (centre, 0.15)}, mask)
    assert tr.oracle_plan(f, (0.3, 0.3), EXT, 12, 12) is None


def test_oracle_size_cap():
    f = _formula("F[0,4] A", {"A": ((1, 1), 0.2)}, _mask())
    with pytest.raises(tr.InstanceTooLarge):
        tr.oracle_plan(f, (0.3, 0.3), EXT, 13, 4)
    with pytest.raises(tr.InstanceTooLarge):
        tr.oracle_plan(f, (0.3, 0.3), EXT, 12, 13)


@pytest.mark.parametrize("seed", range(4))
def test_oracle_matches_enumeration(seed):
    rng = np.random.default_rng(seed)
    n_grid, T = 4, 4
    mask = _mask([(r, r + 10, c, c + 10) for r, c in rng.integers(0, 38, size=(2, 2))])
    regions = {"A": (tuple(rng.uniform(0.2, 2.2, 2)), 0.35), "B": (tuple(rng.uniform(0.2, 2.2, 2)), 0.35)}
    f = _formula("F[0,4] A & F[1,3] B & G[0,4] avoid_map", regions, mask)
    x0 = rng.uniform(0.2, 2.2, 2)
    best = _brute(f, x0, n_grid, T)
    path = tr.oracle_plan(f, x0, EXT, n_grid, T)
    if best > 0:
        assert path is not None
        assert hard_robustness(f, path) == pytest.approx(best, abs=1e-12)
    else:
        assert path is None


def test_oracle_beam_fallback_for_disjunction():
    mask = _mask()
    f = _formula("(F[0,4] A | F[0,4] B) & G[0,4] avoid_map",
                 {"A": ((2.1, 2.1), 0.3), "B": ((0.9, 0.3), 0.3)}, mask)
    best = _brute(f, np.array([0.3, 0.3]), 4, 4)
    path = tr.oracle_plan(f, (0.3, 0.3), EXT, 4, 4)
    assert best > 0 and path is not None
    assert hard_robustness(f, path) == pytest.approx(best)


def test_gradient_plan_simple():
    f = _formula("F[0,8] A & F[0,8] B & G[0,8] avoid_map",
                 {"A": ((1.8, 0.6), 0.25), "B": ((0.6, 1.8), 0.25)}, _mask([(20, 28, 20, 28)]))
    path, rho = tr.gradient_plan(f, (0.3, 0.3), 8, steps=600)
    assert rho > 0 and hard_robustness(f, path) == pytest.approx(rho)
    assert np.array_equal(path[0], [0.3, 0.3])


# -- metrics --------------------------------------------------------------------------

def test_wilson_interval():
    lo, hi = tr.wilson_interval(170, 200)
    # reference values from the closed-form score interval
    p, n, z = 0.85, 200, 1.96
    c = (p + z * z / (2 * n)) / (1 + z * z / n)
    h = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / (1 + z * z / n)
    assert (lo, hi) == pytest.approx((c - h, c + h))
    assert tr.wilson_interval(0, 10)[0] == 0.0 and tr.wilson_interval(10, 10)[1] == pytest.approx(1.0)
    with pytest.raises(ValueError):
        tr.wilson_interval(0, 0)


def test_convergence_rule():
    probes = [[1, 0.0], [2, 0.0], [3, 0.0], [4, 0.0]]
    assert not tr.converged(probes, 3, 0.05, 0.85)  # a plateau at zero is not convergence
    probes = [[1, 0.5], [2, 0.86], [3, 0.9], [4, 0.88], [5, 0.9]]
    assert tr.converged(probes, 3, 0.05, 0.85)
    assert not tr.converged(probes[:3], 3, 0.05, 0.85)
    assert tr.transitions_to_threshold(probes, 0.85) == 2.0
    assert tr.transitions_to_threshold(probes, 0.95) == math.inf


def _trivial_task(cfg):
    regions = {"A": (cfg.env.start_center, 0.3)}
    T = cfg.task.T
    return TaskSpec("Cover", f"(F[0,{T}] A) & G[0,{T}] avoid_map", regions, T, 1, ("A",))


def test_evaluate_perfect_pair_on_trivial_task():
    cfg = replace(tiny_config(), env=EnvConfig(n_obstacles=0))
    state = tr.init_state(cfg, 0)
    planner = {k: np.zeros_like(v) for k, v in state.planner.items()}  # mode path stays at x0
    rep = tr.evaluate(planner, state.controller, _trivial_task(cfg), cfg, 20, 0)
    assert rep.SR == 1.0 and rep.TtR == 0.0 and rep.n == 20


def test_evaluate_paths_through_obstacles_fail():
    cfg = tiny_config()
    state = tr.init_state(cfg, 0)
    planner = {k: np.zeros_like(v) for k, v in state.planner.items()}
    planner[f"dec/b{pl.nn.n_layers(planner, 'dec/') - 1}"][:] = 20.0  # drive off the map
    rep = tr.evaluate(planner, state.controller, _trivial_task(cfg), cfg, 10, 0)
    assert rep.SR == 0.0 and rep.TtR is None
    assert all(e["robustness"] < 0 for e in rep.episodes)
    with pytest.raises(ValueError):
        tr.evaluate(planner, state.controller, _trivial_task(cfg), cfg, 0, 0)


# -- training loop ----------------------------------------------------------------------

def test_budget_zero_returns_initial_params():
    cfg = tiny_config(budget=0)
    init = tr.init_state(cfg, 3)
    st = tr.train_alternating(tr.task_for(cfg), cfg, "dscrl", 3)
    assert all(np.array_equal(init.planner[k], st.planner[k]) for k in init.planner)
    assert all(np.array_equal(init.controller[k], st.controller[k]) for k in init.controller)
    assert st.counter.count == 0


@pytest.mark.parametrize("mode", tr.MODES)
def test_training_is_deterministic(mode):
    cfg = tiny_config()
    task = tr.task_for(cfg)
    a = tr.train_alternating(task, cfg, mode, 1)
    b = tr.train_alternating(task, cfg, mode, 1)
    assert a.counter.count >= cfg.schedule.budget
    strip = lambda rows: [{k: v for k, v in r.items() if k != "seconds"} for r in rows]  # noqa: E731
    assert strip(a.log.rows) == strip(b.log.rows)
    assert all(np.array_equal(a.planner[k], b.planner[k]) for k in a.planner)
    assert all(np.array_equal(a.controller[k], b.controller[k]) for k in a.controller)


def test_unaligned_planner_never_tracks():
    cfg = tiny_config(budget=300)
    st = tr.train_alternating(tr.task_for(cfg), cfg, "unaligned", 0)
    assert all(r.get("r_h") is None for r in st.log.rows)


def test_resume_matches_uninterrupted(tmp_path):
    cfg = tiny_config(budget=3000)
    task = tr.task_for(cfg)
    full = tr.train_alternating(task, cfg, "dscrl", 2)
    ck = tmp_path / "alt1.ckpt"

    def save_first(state):
        if state.alternations == 1:
            tr.save_state(ck, state)

    tr.train_alternating(task, cfg, "dscrl", 2, on_phase=save_first)
    resumed, _ = tr.load_state(ck, cfg)
    resumed = tr.train_alternating(task, cfg, "dscrl", 2, state=resumed)
    assert resumed.counter.count == full.counter.count
    assert all(np.array_equal(full.planner[k], resumed.planner[k]) for k in full.planner)
    assert all(np.array_equal(full.controller[k], resumed.controller[k]) for k in full.controller)
    assert resumed.log.probes == full.log.probes


def test_load_state_rejects_mismatched_config(tmp_path):
    cfg = tiny_config()
    st = tr.init_state(cfg, 0)
    tr.save_state(tmp_path / "c.ckpt", st)
    other = replace(cfg, planner=replace(cfg.planner, hidden=32))
    with pytest.raises(ValueError):
        tr.load_state(tmp_path / "c.ckpt", other)


def test_non_finite_loss_aborts():
    cfg = tiny_config()
    st = tr.init_state(cfg, 0)
    st.planner["log_sigma"][:] = np.inf
    pool = tr.MapPool.generate(cfg, tr.task_for(cfg), 2, 0, 1)
    with pytest.raises((tr.TrainingAbort, FloatingPointError)):
        tr.planner_update(st, cfg, tr.task_for(cfg), pool, "dscrl")


def test_phases_freeze_the_other_network():
    cfg = tiny_config()
    st = tr.init_state(cfg, 0)
    pool = tr.MapPool.generate(cfg, tr.task_for(cfg), 2, 0, 1)
    before = {k: v.copy() for k, v in st.planner.items()}
    tr.controller_phase(st, cfg, pool, "planner", 64)
    assert all(np.array_equal(before[k], st.planner[k]) for k in before)
    cbefore = {k: v.copy() for k, v in st.controller.items()}
    tr.planner_update(st, cfg, tr.task_for(cfg), pool, "dscrl")
    assert all(np.array_equal(cbefore[k], st.controller[k]) for k in cbefore)


def test_latency_stats_shape():
    cfg = pl.PlannerConfig()
    params = pl.init_planner(np.random.default_rng(0), cfg)
    masks = [_mask(), _mask([(0, 10, 0, 10)])]
    stats = tr.measure_plan_latency(params, masks, [(1.2, 1.2)] * 2, cfg, repeats=2)
    assert stats["n"] == 4 and 0 < stats["p50"] <= stats["p95"] <= stats["max"]


def test_latency_sublinear_in_horizon():
    masks = [_mask([(0, 10, 0, 10)])] * 10
    p50 = {}
    for T in (10, 20, 40):
        cfg = pl.PlannerConfig(T=T)
        params = pl.init_planner(np.random.default_rng(0), cfg)
        p50[T] = tr.measure_plan_latency(params, masks, [(1.2, 1.2)] * 10, cfg, repeats=10)["p50"]
    # quadrupling T costs less than four times as much (map ingestion is shared)
    assert p50[40] < 4 * p50[10]


def test_normalized_score():
    assert tr.normalized_score(0.9, 0.8, 0.9) == pytest.approx(1.0)
    assert tr.normalized_score(0.8, 0.8, 0.9) == pytest.approx(0.0)
    np.testing.assert_allclose(tr.normalized_score([0.85, 0.7], 0.8, 0.9), [0.5, -1.0])
    with pytest.raises(ValueError):
        tr.normalized_score(0.5, 0.8, 0.8)
