"""Drive the controller through waypoint sequences (batched)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import controller as ctl
from .sim import BatchSim, EnvConfig, TransitionCounter


@dataclass
class TrackResult:
    reached: np.ndarray    # (B,) final waypoint reached within budget
    collided: np.ndarray   # (B,) any collision while tracking
    steps: np.ndarray      # (B,) env steps taken
    traces: list | None = None

    @property
    def success(self) -> np.ndarray:
        return self.reached & ~self.collided


def track_paths(paths: np.ndarray, worlds: list, headings: np.ndarray, ctrl_params: dict,
                env: EnvConfig, ccfg: ctl.ControllerConfig, counter: TransitionCounter | None = None,
                max_steps: int | None = None, stop_on_collision: bool = True,
                record: bool = False) -> TrackResult:
    """Follow each path from its first waypoint with the deterministic (mean)
    controller.  The active target advances when the robot is within
    ``goal_tol`` of it or after its per-waypoint budget runs out; exhausting
    the budget of the final waypoint, or the overall ``max_steps``, fails."""
    paths = np.asarray(paths, float)
    B, Tp1 = paths.shape[:2]
    T = Tp1 - 1
    max_steps = max_steps or env.max_steps
    sim = BatchSim(list(worlds), env, counter)
    for i in range(B):
        sim.set_state(i, paths[i, 0, 0], paths[i, 0, 1], headings[i])
    k = np.ones(B, np.int64)
    steps = np.zeros(B, np.int64)
    on_wp = np.zeros(B, np.int64)
    reached = np.zeros(B, bool)
    collided = np.zeros(B, bool)
    active = np.ones(B, bool)
    rows = np.arange(B)
    traces = [[(sim.x[i], sim.y[i], sim.theta[i])] for i in range(B)] if record else None
    budget = np.zeros(B, np.int64)
    need_budget = np.ones(B, bool)

    def advance():
        # move past every target already within tolerance
        nonlocal k, on_wp
        for _ in range(T + 1):
            tgt = paths[rows, np.minimum(k, T)]
            near = active & (np.hypot(*(tgt - sim.pos).T) < env.goal_tol)
            if not near.any():
                return
            done_now = near & (k >= T)
            reached[done_now] = True
            active[done_now] = False
            k = np.where(near & ~done_now, k + 1, k)
            on_wp = np.where(near, 0, on_wp)
            need_budget[near] = True

    if T == 0:
        reached[:] = True
        active[:] = False
    advance()
    while active.any():
        tgt = paths[rows, np.minimum(k, T)]
        if need_budget.any():
            nb = ctl.waypoint_budget(sim.pos, sim.theta, tgt, env, ccfg)
            budget = np.where(need_budget, nb, budget)
            need_budget[:] = False
        obs = sim.observe()
        a, _, _ = ctl.act(ctrl_params, obs, tgt, None, env, ccfg, deterministic=True)
        hit = sim.step(a[:, 0], a[:, 1], active)
        steps += active
        on_wp += active
        if record:
            for i in np.flatnonzero(active):
                traces[i].append((sim.x[i], sim.y[i], sim.theta[i]))
        collided |= hit
        if stop_on_collision:
            active &= ~hit
        advance()
        over = active & (on_wp >= budget)
        active &= ~(over & (k >= T))
        forced = over & (k < T)
        k = np.where(forced, k + 1, k)
        on_wp = np.where(forced, 0, on_wp)
        need_budget |= forced
        if forced.any():
            advance()
        active &= steps < max_steps
    return TrackResult(reached, collided, steps, traces)


def plan_return(paths: np.ndarray, worlds: list, headings: np.ndarray, ctrl_params: dict,
                env: EnvConfig, ccfg: ctl.ControllerConfig, counter: TransitionCounter | None = None,
                max_steps: int | None = None) -> np.ndarray:
    """Negative steps to reach the final waypoint; ``-max_steps`` when the
    robot collides or runs out of budget."""
    max_steps = max_steps or env.max_steps
    res = track_paths(paths, worlds, headings, ctrl_params, env, ccfg, counter, max_steps)
    return np.where(res.success, -res.steps, -max_steps).astype(float)
