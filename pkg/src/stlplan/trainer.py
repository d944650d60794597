"""Alternating planner/controller training, evaluation, the grid search
oracle and latency measurement."""
from __future__ import annotations

import heapq
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import controller as ctl
from . import nn, stl
from . import planner as pl
from .config import RunConfig
from .sim import EnvConfig, TransitionCounter, World, generate_map, sample_free_points
from .tasks import TaskSpec, hard_robustness, make_task
from .tracking import plan_return, track_paths

log = logging.getLogger(__name__)

MODES = ("dscrl", "rs", "rm", "unaligned")


class TrainingAbort(RuntimeError):
    """Raised on a non-finite loss; ``state`` holds the last finite state."""

    def __init__(self, msg, state=None):
        super().__init__(msg)
        self.state = state


def _seed(*parts) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def task_for(cfg: RunConfig) -> TaskSpec:
    return make_task(cfg.task.name, cfg.task.T, cfg.task.M)


def start_region(env: EnvConfig):
    return (env.start_center, env.start_radius)


class MapPool:
    """Generated worlds plus their cached encoder grids."""

    def __init__(self, worlds: list[World], pcfg: pl.PlannerConfig):
        self.worlds = worlds
        self.grids = np.stack([pl.map_grid(w.mask, pcfg) for w in worlds])

    @classmethod
    def generate(cls, cfg: RunConfig, task: TaskSpec, n: int, *seed_parts) -> "MapPool":
        worlds = [generate_map(cfg.env, _seed(*seed_parts, i), task.keep_free) for i in range(n)]
        return cls(worlds, cfg.planner)

    def __len__(self):
        return len(self.worlds)


def sample_starts(worlds, rng, env: EnvConfig) -> np.ndarray:
    return np.stack([sample_free_points(w, 1, rng, env.goal_tol, region=start_region(env))[0]
                     for w in worlds])


# -- training state -------------------------------------------------------------

@dataclass
class TrainLog:
    rows: list = field(default_factory=list)      # per-phase metrics
    probes: list = field(default_factory=list)    # (transitions, SR)

    def to_dict(self):
        return {"rows": self.rows, "probes": self.probes}


@dataclass
class TrainState:
    planner: dict
    controller: dict
    planner_opt: nn.Adam
    controller_opt: nn.Adam
    lagrange: pl.LagrangeState
    baseline: pl.RunningBaseline
    counter: TransitionCounter
    rng: np.random.Generator
    planner_updates: int = 0
    alternations: int = 0
    converged: bool = False
    log: TrainLog = field(default_factory=TrainLog)

    def arrays(self) -> dict:
        out = {f"planner/{k}": v for k, v in self.planner.items()}
        out.update({f"controller/{k}": v for k, v in self.controller.items()})
        out.update(self.planner_opt.arrays("planner_opt/"))
        out.update(self.controller_opt.arrays("controller_opt/"))
        return out

    def meta(self) -> dict:
        return {"lagrange": asdict(self.lagrange),
                "baseline": self.baseline.value,
                "transitions": self.counter.count,
                "rng": self.rng.bit_generator.state,
                "planner_updates": self.planner_updates,
                "alternations": self.alternations,
                "converged": self.converged,
                "log": self.log.to_dict()}


def init_state(cfg: RunConfig, seed: int) -> TrainState:
    rng = np.random.default_rng(_seed(seed, 0))
    pp = pl.init_planner(rng, cfg.planner)
    cp = ctl.init_controller(rng, cfg.env, cfg.controller)
    p = cfg.planner
    return TrainState(pp, cp, nn.Adam(pp, p.lr, p.max_grad_norm),
                      nn.Adam(cp, cfg.controller.lr, cfg.controller.max_grad_norm),
                      pl.LagrangeState(p.lambda0, p.eta_lambda, p.delta, p.lambda_min, p.lambda_max),
                      pl.RunningBaseline(p.baseline_decay), TransitionCounter(), rng)


def save_state(path, state: TrainState, extra: dict | None = None) -> None:
    meta = state.meta()
    meta.update(extra or {})
    ad.save_checkpoint(path, state.arrays(), meta)


def load_state(path, cfg: RunConfig) -> tuple[TrainState, dict]:
    arrays, meta = ad.load_checkpoint(path)
    state = init_state(cfg, 0)
    for k in state.planner:
        if f"planner/{k}" not in arrays or arrays[f"planner/{k}"].shape != state.planner[k].shape:
            raise ValueError(f"checkpoint does not match the planner config ({k})")
        state.planner[k] = arrays[f"planner/{k}"].copy()
    for k in state.controller:
        if f"controller/{k}" not in arrays or arrays[f"controller/{k}"].shape != state.controller[k].shape:
            raise ValueError(f"checkpoint does not match the controller config ({k})")
        state.controller[k] = arrays[f"controller/{k}"].copy()
    if "planner_opt/step" in arrays:
        state.planner_opt.load_arrays(arrays, "planner_opt/")
        state.controller_opt.load_arrays(arrays, "controller_opt/")
    if "lagrange" in meta:
        state.lagrange = pl.LagrangeState(**meta["lagrange"])
        state.baseline.value = meta["baseline"]
        state.counter.count = int(meta["transitions"])
        state.rng.bit_generator.state = meta["rng"]
        state.planner_updates = int(meta["planner_updates"])
        state.alternations = int(meta["alternations"])
        state.converged = bool(meta["converged"])
        state.log = TrainLog(**meta["log"])
    return state, meta


# -- phases --------------------------------------------------------------------

def controller_phase(state: TrainState, cfg: RunConfig, pool: MapPool, goal_mode: str, steps: int) -> dict:
    """PPO on goals from the frozen planner (or uniform goals)."""
    pparams = {k: v.copy() for k, v in state.planner.items()}  # read-only snapshot

    def path_fn(idx, x0, rng):
        wps, _, _ = pl.sample_paths(pparams, pool.grids[idx], x0, rng, cfg.planner)
        return wps

    sampler = ctl.GoalSampler(goal_mode, pool.worlds, cfg.env, start_region(cfg.env),
                              path_fn if goal_mode == "planner" else None)
    envs = ctl.GoalEnvs(sampler, cfg.env, cfg.controller, state.counter, state.rng)
    ccfg = cfg.controller
    per_rollout = ccfg.n_envs * ccfg.rollout_len
    n_updates = max(1, int(math.ceil(steps / per_rollout)))
    stats = ctl.EpisodeStats([], [], [])
    for _ in range(n_updates):
        buf, st = envs.collect(state.controller, ccfg.rollout_len)
        state.controller, _ = ctl.ppo_update(state.controller, state.controller_opt, buf, ccfg, state.rng)
        stats.returns += st.returns
        stats.lengths += st.lengths
        stats.successes += st.successes
    return stats.summary()


def planner_update(state: TrainState, cfg: RunConfig, task: TaskSpec, pool: MapPool, mode: str) -> dict:
    """One planner step; tracking rollouts (if any) use the frozen controller."""
    p = cfg.planner
    rng = state.rng
    idx = rng.integers(len(pool), size=p.batch)
    worlds = [pool.worlds[i] for i in idx]
    x0 = sample_starts(worlds, rng, cfg.env)
    eps = rng.standard_normal((p.batch, p.T, 2))
    P = nn.as_params(state.planner)
    wps, logp, _ = pl.path_graph(P, pool.grids[idx], x0, eps, p)
    formula = task.batch_formula([w.field for w in worlds])
    beta = p.beta_at(state.planner_updates)
    rho = stl.soft_robustness(formula, wps, 0, beta)
    rho_hard = hard_robustness(formula, wps.value)

    use_pg = mode != "unaligned" and p.pg_batch > 0
    logp_pg, adv, r = None, np.zeros(0), None
    if use_pg:
        k = p.pg_batch
        headings = rng.uniform(-math.pi, math.pi, size=k)
        r = plan_return(wps.value[:k], worlds[:k], headings, state.controller, cfg.env,
                        cfg.controller, state.counter) / cfg.env.max_steps
        adv = state.baseline.advantages(r)
        state.baseline.update(r)
        logp_pg = ad.getitem(logp, slice(0, k))
    lam = state.lagrange.lam
    if mode in ("dscrl", "unaligned"):
        loss = pl.dscrl_loss(logp_pg, adv, rho, lam)
    elif mode == "rs":
        loss = pl.rs_loss(logp_pg, adv, logp, rho.value, lam)
    elif mode == "rm":
        miles = task.milestone_regions()
        # hard avoid robustness per path: the closest approach to any obstacle
        clear = np.array([w.field(wps.value[i]).min() for i, w in enumerate(worlds)])
        shaped = np.array([pl.rm_reward(wps.value[i], miles, scale=max(cfg.env.extent))
                           for i in range(p.batch)]) - (clear <= 0)
        loss = pl.rs_loss(logp_pg, adv, logp, shaped, lam)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    if not np.isfinite(loss.value):
        raise TrainingAbort(f"non-finite planner loss at update {state.planner_updates}", state)
    ad.backward(loss)
    state.planner = state.planner_opt.step(state.planner, nn.grads_of(P))
    state.lagrange = pl.update_lambda(state.lagrange, float(rho_hard.mean()))
    state.planner_updates += 1
    return {"loss": float(loss.value), "rho_soft": float(rho.value.mean()),
            "rho_hard": float(rho_hard.mean()), "sat_frac": float((rho_hard > 0).mean()),
            "lambda": state.lagrange.lam, "beta": beta,
            "r_h": None if r is None else float(np.mean(r))}


# -- evaluation ----------------------------------------------------------------

@dataclass
class EvalReport:
    SR: float
    TtR: float | None
    n: int
    episodes: list

    def wilson(self, z: float = 1.96) -> tuple[float, float]:
        return wilson_interval(int(round(self.SR * self.n)), self.n, z)

    def to_dict(self) -> dict:
        lo, hi = self.wilson()
        return {"SR": self.SR, "TtR": self.TtR, "n": self.n, "SR_wilson95": [lo, hi],
                "episodes": self.episodes}


def wilson_interval(k: int, n: int, z: float = 1.96) -> tuple[float, float]:
    if n <= 0:
        raise ValueError("n must be positive")
    p = k / n
    den = 1 + z * z / n
    centre = (p + z * z / (2 * n)) / den
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / den
    return max(0.0, centre - half), min(1.0, centre + half)


def evaluate(planner_params: dict, ctrl_params: dict, task: TaskSpec, cfg: RunConfig, n: int,
             seed: int, chunk: int = 100, worlds: list | None = None, record: bool = False) -> EvalReport:
    """Fresh map and start per episode; the mode path must satisfy the task
    and be tracked without collision to the final waypoint."""
    if n <= 0:
        raise ValueError("need at least one evaluation episode")
    rng = np.random.default_rng(_seed(seed, 7))
    episodes = []
    for s in range(0, n, chunk):
        m = min(chunk, n - s)
        ws = worlds[s:s + m] if worlds is not None else \
            [generate_map(cfg.env, _seed(seed, 2, s + i), task.keep_free) for i in range(m)]
        x0 = sample_starts(ws, rng, cfg.env)
        headings = rng.uniform(-math.pi, math.pi, size=m)
        grids = np.stack([pl.map_grid(w.mask, cfg.planner) for w in ws])
        wps, _, _ = pl.sample_paths(planner_params, grids, x0, None, cfg.planner, mode=True)
        rho = hard_robustness(task.batch_formula([w.field for w in ws]), wps)
        res = track_paths(wps, ws, headings, ctrl_params, cfg.env, cfg.controller, None,
                          cfg.env.max_steps, record=record)
        for i in range(m):
            ok = bool(rho[i] > 0 and res.reached[i] and not res.collided[i])
            ep = {"episode": s + i, "robustness": float(rho[i]), "reached": bool(res.reached[i]),
                  "collided": bool(res.collided[i]), "steps": int(res.steps[i]), "success": ok,
                  "waypoints": wps[i].tolist()}
            if record:
                ep["trace"] = [list(map(float, p)) for p in res.traces[i]]
            episodes.append(ep)
    succ = [e for e in episodes if e["success"]]
    ttr = float(np.mean([e["steps"] for e in succ]) * cfg.env.dt) if succ else None
    return EvalReport(len(succ) / n, ttr, n, episodes)


# -- alternating training -----------------------------------------------------------

def converged(probes: list, window: int, tol: float, threshold: float) -> bool:
    """SR within ``tol`` of its value ``window`` probes earlier, and at the
    target level (so an early plateau at zero does not count)."""
    if len(probes) <= window:
        return False
    cur, old = probes[-1][1], probes[-1 - window][1]
    return abs(cur - old) <= tol and cur >= threshold


def train_alternating(task: TaskSpec, cfg: RunConfig, mode: str, seed: int,
                      state: TrainState | None = None, on_phase=None,
                      pool: MapPool | None = None) -> TrainState:
    """Alternate controller and planner phases until the transition budget
    is spent or the probe success rate converges.

    ``mode`` is one of dscrl, rs, rm (planner loss; controller trained on
    planner goals) or unaligned (constraint-only planner, uniform goals).
    ``on_phase(state)`` is called after every alternation (checkpointing).
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    sc = cfg.schedule
    state = state or init_state(cfg, seed)
    if sc.budget == 0:
        return state
    pool = pool or MapPool.generate(cfg, task, sc.map_pool, seed, 1)
    goal_mode = "uniform" if mode == "unaligned" else "planner"
    while state.counter.count < sc.budget and not state.converged:
        t0 = time.perf_counter()
        before = {k: v.copy() for k, v in state.planner.items()}
        c_stats = controller_phase(state, cfg, pool, goal_mode,
                                   min(sc.controller_steps, sc.budget - state.counter.count))
        assert all(np.array_equal(before[k], state.planner[k]) for k in before)
        frozen = {k: v.copy() for k, v in state.controller.items()}
        p_stats = []
        for _ in range(sc.planner_updates):
            if state.counter.count >= sc.budget:
                break
            p_stats.append(planner_update(state, cfg, task, pool, mode))
        assert all(np.array_equal(frozen[k], state.controller[k]) for k in frozen)
        state.alternations += 1
        row = {"alternation": state.alternations, "transitions": state.counter.count,
               "planner_updates": state.planner_updates, **{f"ctrl_{k}": v for k, v in c_stats.items()}}
        if p_stats:
            for key in ("rho_soft", "rho_hard", "sat_frac", "lambda", "beta", "loss"):
                row[key] = float(np.mean([s[key] for s in p_stats]))
            rh = [s["r_h"] for s in p_stats if s["r_h"] is not None]
            row["r_h"] = float(np.mean(rh)) if rh else None
        if state.alternations % sc.probe_every == 0:
            rep = evaluate(state.planner, state.controller, task, cfg, sc.probe_episodes, _seed(seed, 3))
            state.log.probes.append([state.counter.count, rep.SR])
            row["probe_SR"] = rep.SR
            state.converged = sc.stop_on_convergence and converged(
                state.log.probes, sc.converge_window, sc.converge_tol, sc.threshold)
        row["seconds"] = time.perf_counter() - t0
        state.log.rows.append(row)
        log.info("alt %d: %s", state.alternations, json.dumps(row))
        if on_phase is not None:
            on_phase(state)
    return state


def transitions_to_threshold(probes: list, threshold: float) -> float:
    """First transition count whose probe SR reaches ``threshold`` (inf if never)."""
    for n, sr in probes:
        if sr >= threshold:
            return float(n)
    return math.inf


def normalized_score(sr, sr_unaligned: float, sr_aligned: float):
    """SR rescaled so the unaligned reference maps to 0 and the aligned one to 1."""
    if sr_aligned == sr_unaligned:
        raise ValueError("reference success rates must differ")
    return (np.asarray(sr, float) - sr_unaligned) / (sr_aligned - sr_unaligned)


# -- oracle ---------------------------------------------------------------------

class InstanceTooLarge(ValueError):
    pass


def _reach_avoid_parts(f: stl.Formula):
    """Split a conjunction into eventually-terms and always-terms over
    predicates; None if the formula has another shape."""
    ev, al = [], []
    for c in _conjuncts(f):
        if isinstance(c, stl.Eventually) and isinstance(c.child, stl.Predicate):
            ev.append(c)
        elif isinstance(c, stl.Globally) and isinstance(c.child, stl.Predicate):
            al.append(c)
        elif isinstance(c, stl.Predicate):
            al.append(stl.Globally(stl.Interval(0, 0), c))
        else:
            return None
    return ev, al


def _conjuncts(f):
    if isinstance(f, stl.And):
        return _conjuncts(f.left) + _conjuncts(f.right)
    return [f]


def oracle_plan(formula: stl.Formula, x0, extent, n_grid: int, T: int, max_grid: int = 12,
                max_T: int = 12, beam: int = 2000):
    """Best grid-waypoint path by hard robustness, or None when no grid path
    has positive robustness.

    Waypoints sit on an ``n_grid`` x ``n_grid`` lattice of cell centres and
    move to one of the 8 neighbouring cells (or stay) each step; ``x0`` is
    snapped to its cell.  Conjunctions of ``F[a,b] p`` and ``G[a,b] p`` terms
    are solved exactly (bisection over robustness levels with a reachability
    search over (cell, time, visited set)); other formulas fall back to a
    beam search without the completeness guarantee.
    """
    if n_grid > max_grid or T > max_T:
        raise InstanceTooLarge(f"oracle limited to grid <= {max_grid} and T <= {max_T}")
    m, n = extent
    sx, sy = m / n_grid, n / n_grid
    cells = np.array([((i + 0.5) * sx, (j + 0.5) * sy) for j in range(n_grid) for i in range(n_grid)])
    nc = len(cells)
    c0 = int(np.argmin(np.hypot(*(cells - np.asarray(x0, float)).T)))
    nbrs = []
    for c in range(nc):
        i, j = c % n_grid, c // n_grid
        nbrs.append([(i + di) + (j + dj) * n_grid for dj in (-1, 0, 1) for di in (-1, 0, 1)
                     if 0 <= i + di < n_grid and 0 <= j + dj < n_grid])
    parts = _reach_avoid_parts(formula)
    if parts is not None and len(parts[0]) <= 3:
        return _oracle_exact(formula, parts, cells, c0, nbrs, T)
    return _oracle_beam(formula, cells, c0, nbrs, T, beam)


def _oracle_exact(formula, parts, cells, c0, nbrs, T):
    ev, al = parts
    nc = len(cells)
    # windows are clamped to the path end, as in the semantics
    win = {}
    for term in ev + al:
        if term.interval.a > T:
            raise stl.EmptyWindowError(f"window {term.interval} starts after the horizon {T}")
        win[id(term)] = (term.interval.a, min(term.interval.b, T) + 1)
    ev_val = [term.child.binding.fn(cells, 0) for term in ev]       # (nc,) each
    al_val = [term.child.binding.fn(cells, 0) for term in al]
    levels = np.unique(np.concatenate(ev_val + al_val))
    full = (1 << len(ev)) - 1

    def feasible(level):
        # every waypoint at time t must clear the always-terms active at t
        ok_at = np.ones((T + 1, nc), bool)
        for term, v in zip(al, al_val):
            a, b = win[id(term)]
            ok_at[a:b] &= v >= level
        hit = np.zeros((T + 1, nc), np.int64)
        for k, (term, v) in enumerate(zip(ev, ev_val)):
            a, b = win[id(term)]
            hit[a:b] |= np.where(v >= level, 1 << k, 0)
        if not ok_at[0, c0]:
            return None
        layer = {(c0, int(hit[0, c0])): None}
        parents = [layer]
        for t in range(1, T + 1):
            nxt = {}
            for (c, mask) in layer:
                for d in nbrs[c]:
                    if ok_at[t, d]:
                        key = (d, mask | int(hit[t, d]))
                        if key not in nxt:
                            nxt[key] = (c, mask)
            layer = nxt
            parents.append(layer)
        goal = next((k for k in layer if k[1] == full), None)
        if goal is None:
            return None
        seq = [goal]
        for t in range(T, 0, -1):
            seq.append(parents[t][seq[-1]])
        return [c for c, _ in reversed(seq)]

    lo, hi, best = 0, len(levels) - 1, None
    while lo <= hi:  # largest level that is still feasible
        mid = (lo + hi) // 2
        seq = feasible(levels[mid])
        if seq is not None:
            best, lo = seq, mid + 1
        else:
            hi = mid - 1
    if best is None:
        return None
    path = cells[best]
    return path if hard_robustness(formula, path) > 0 else None


def _oracle_beam(formula, cells, c0, nbrs, T, beam):
    paths = [[c0]]
    for _ in range(T):
        ext = [p + [d] for p in paths for d in nbrs[p[-1]]]
        if len(ext) > beam:
            # rank partial paths by robustness of the path padded with its last cell
            padded = np.stack([cells[p + [p[-1]] * (T + 1 - len(p))] for p in ext])
            score = hard_robustness(formula, padded)
            keep = heapq.nlargest(beam, range(len(ext)), key=lambda i: score[i])
            ext = [ext[i] for i in keep]
        paths = ext
    full = np.stack([cells[p] for p in paths])
    score = hard_robustness(formula, full)
    i = int(np.argmax(score))
    return full[i] if score[i] > 0 else None


def gradient_plan(formula: stl.Formula, x0, T: int, steps: int = 2000, lr: float = 0.05,
                  beta0: float = 10.0, beta_max: float = 160.0, rng=None):
    """Direct waypoint optimisation of the smoothed robustness (g0 fixed).
    Returns (best path, best hard robustness)."""
    rng = rng or np.random.default_rng(0)
    x0 = np.asarray(x0, float)
    free = {"w": x0 + 0.01 * rng.standard_normal((T, 2))}
    opt = nn.Adam(free, lr)
    best, best_rho = None, -np.inf
    for k in range(steps):
        beta = min(beta0 * 2.0 ** (k // 250), beta_max)
        w = ad.param(free["w"])
        path = ad.concat([ad.as_var(x0[None]), w], axis=0)
        val = stl.soft_robustness(formula, path, 0, beta)
        ad.backward(ad.neg(val))
        rho = stl.robustness(formula, path.value, 0)
        if rho > best_rho:
            best, best_rho = path.value.copy(), rho
        free = opt.step(free, {"w": w.grad})
    return best, best_rho


# -- latency --------------------------------------------------------------------

def measure_plan_latency(planner_params: dict, masks, x0s, pcfg: pl.PlannerConfig, repeats: int = 1,
                         rng=None) -> dict:
    """Wall-clock of map ingestion + embedding + one path sample per mask."""
    rng = rng or np.random.default_rng(0)
    # one untimed call so first-use costs do not land on the first map
    pl.sample_path(planner_params, x0s[0], pl.embed_map(planner_params, pl.map_grid(masks[0], pcfg)), rng, pcfg)
    times = []
    for _ in range(repeats):
        for mask, x0 in zip(masks, x0s):
            t0 = time.perf_counter()
            grid = pl.map_grid(mask, pcfg)
            E = pl.embed_map(planner_params, grid)
            pl.sample_path(planner_params, x0, E, rng, pcfg)
            times.append(time.perf_counter() - t0)
    t = np.array(times)
    return {"n": len(t), "p50": float(np.percentile(t, 50)), "p95": float(np.percentile(t, 95)),
            "max": float(t.max()), "mean": float(t.mean())}
