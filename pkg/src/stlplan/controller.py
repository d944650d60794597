"""Goal-conditioned control policy trained with clipped-surrogate PPO."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .sim import BatchSim, EnvConfig, MapGenerationError, TransitionCounter, sample_free_points

log = logging.getLogger(__name__)

LOG_2PI_E = math.log(2 * math.pi * math.e)


@dataclass(frozen=True)
class ControllerConfig:
    hidden: int = 128
    depth: int = 2
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip: float = 0.2
    epochs: int = 4
    minibatches: int = 4
    ent_coef: float = 0.01
    vf_coef: float = 0.5
    lr: float = 3e-4
    max_grad_norm: float = 0.5
    log_std0: float = -0.5
    n_envs: int = 16
    rollout_len: int = 128
    reward_scale: float = 10.0
    range_clip: float = 2.0
    min_budget: int = 10
    budget_factor: float = 3.0

    def __post_init__(self):
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")
        if not 0 < self.clip:
            raise ValueError("clip ratio must be positive")
        if self.hidden < 1 or self.depth < 1 or self.n_envs < 1 or self.rollout_len < 1:
            raise ValueError("sizes must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def feature_dim(env: EnvConfig) -> int:
    return env.n_rays + 7


def features(obs: np.ndarray, goal: np.ndarray, env: EnvConfig, ccfg: ControllerConfig) -> np.ndarray:
    """Policy input: scaled rays, heading, normalised position and the goal as
    robot-frame (range, sin bearing, cos bearing)."""
    obs = np.asarray(obs, float)
    goal = np.asarray(goal, float)
    if obs.shape[-1] != 4 + env.n_rays:
        raise ad.ShapeError(f"observation has {obs.shape[-1]} entries, expected {4 + env.n_rays}")
    x, y, s, c = obs[..., 0], obs[..., 1], obs[..., 2], obs[..., 3]
    dx, dy = goal[..., 0] - x, goal[..., 1] - y
    rng_ = np.minimum(np.hypot(dx, dy), ccfg.range_clip)
    bearing = np.arctan2(dy, dx) - np.arctan2(s, c)
    m, n = env.extent
    head = np.stack([s, c, 2 * x / m - 1, 2 * y / n - 1, rng_, np.sin(bearing), np.cos(bearing)], axis=-1)
    return np.concatenate([obs[..., 4:] / env.ray_range, head], axis=-1)


def init_controller(rng: np.random.Generator, env: EnvConfig, ccfg: ControllerConfig) -> dict:
    d = feature_dim(env)
    sizes = [d] + [ccfg.hidden] * ccfg.depth
    p = nn.init_mlp(rng, sizes + [2], "pi/", out_scale=0.01)
    p.update(nn.init_mlp(rng, sizes + [1], "v/", out_scale=1.0))
    p["log_std"] = np.full(2, ccfg.log_std0)
    return p


def action_scale(env: EnvConfig) -> np.ndarray:
    return np.array([env.v_max, env.w_max])


def act(params: dict, obs, goal, rng: np.random.Generator | None, env: EnvConfig,
        ccfg: ControllerConfig, deterministic: bool = False):
    """Sample actions.  Returns (env-unit actions clipped to bounds, raw
    normalised actions, log-probabilities of the raw actions)."""
    feat = features(obs, goal, env, ccfg)
    mean = nn.mlp_np(params, "pi/", feat)
    std = np.exp(params["log_std"])
    if deterministic:
        raw = mean
    else:
        raw = mean + std * rng.standard_normal(mean.shape)
    logp = np.sum(-0.5 * ((raw - mean) / std) ** 2 - params["log_std"] - 0.5 * math.log(2 * math.pi), axis=-1)
    return np.clip(raw, -1.0, 1.0) * action_scale(env), raw, logp


def value(params: dict, feat: np.ndarray) -> np.ndarray:
    return nn.mlp_np(params, "v/", feat)[..., 0]


def waypoint_budget(pos, heading, goal, env: EnvConfig, ccfg: ControllerConfig) -> np.ndarray:
    """Per-goal step budget: ``budget_factor`` times the kinematic lower bound
    (turn toward the goal, then drive straight at full speed)."""
    pos, goal = np.asarray(pos, float), np.asarray(goal, float)
    d = np.hypot(goal[..., 0] - pos[..., 0], goal[..., 1] - pos[..., 1])
    turn = np.abs(np.angle(np.exp(1j * (np.arctan2(goal[..., 1] - pos[..., 1], goal[..., 0] - pos[..., 0])
                                        - heading))))
    bound = np.maximum(d - env.goal_tol, 0.0) / (env.v_max * env.dt) + turn / (env.w_max * env.dt)
    return np.maximum(np.ceil(ccfg.budget_factor * bound), ccfg.min_budget).astype(np.int64)


# -- goal sampling ------------------------------------------------------------

class GoalSamplingError(RuntimeError):
    pass


@dataclass
class GoalContext:
    world_index: int
    start: np.ndarray
    heading: float
    goal: np.ndarray


class GoalSampler:
    """Source of (map, start pose, goal) contexts for controller training.

    ``mode="planner"`` draws successive-waypoint pairs from paths produced by
    ``path_fn(world_indices, x0, rng) -> (B, T+1, 2)``; ``mode="uniform"``
    draws start and goal uniformly from free space.
    """

    def __init__(self, mode: str, worlds: list, env: EnvConfig, start_region,
                 path_fn=None, cache: int = 512, start_margin: float = 0.05):
        if mode not in ("planner", "uniform"):
            raise ValueError(f"unknown goal mode {mode!r}")
        if mode == "planner" and path_fn is None:
            raise ValueError("planner mode needs a path function")
        self.mode, self.worlds, self.env = mode, worlds, env
        self.start_region = start_region
        self.path_fn = path_fn
        self.cache_size = cache
        self.start_margin = start_margin
        self._cache: list[GoalContext] = []

    def sample(self, rng: np.random.Generator) -> GoalContext:
        if not self._cache:
            self._cache = self._fill(rng)
        return self._cache.pop()

    def _fill(self, rng) -> list[GoalContext]:
        return self._planner_batch(rng) if self.mode == "planner" else self._uniform_batch(rng)

    def _uniform_batch(self, rng) -> list[GoalContext]:
        out = []
        idx = rng.integers(len(self.worlds), size=self.cache_size)
        for wi in idx:
            w = self.worlds[wi]
            try:
                s = sample_free_points(w, 1, rng, self.start_margin)[0]
                g = sample_free_points(w, 1, rng, self.env.goal_tol)[0]
            except MapGenerationError as exc:
                raise GoalSamplingError(str(exc)) from exc
            out.append(GoalContext(int(wi), s, float(rng.uniform(-math.pi, math.pi)), g))
        return out

    def _planner_batch(self, rng, max_rounds: int = 20) -> list[GoalContext]:
        out: list[GoalContext] = []
        tol = self.env.goal_tol
        for _ in range(max_rounds):
            n = self.cache_size - len(out)
            if n <= 0:
                break
            idx = rng.integers(len(self.worlds), size=n)
            x0 = np.stack([sample_free_points(self.worlds[i], 1, rng, self.start_margin,
                                              region=self.start_region)[0] for i in idx])
            paths = self.path_fn(idx, x0, rng)
            T = paths.shape[1] - 1
            for b, wi in enumerate(idx):
                w = self.worlds[wi]
                jitter = rng.uniform(-1, 1, size=(T, 2)) * (tol / math.sqrt(2))
                jitter[0] = 0.0
                starts = paths[b, :-1] + jitter
                goals = paths[b, 1:]
                ok = ((w.sdf(starts) > self.start_margin) & (w.sdf(goals) > tol)
                      & (np.hypot(*(goals - starts).T) > tol))
                valid = np.flatnonzero(ok)
                if len(valid) == 0:
                    continue
                k = int(valid[rng.integers(len(valid))])
                if k == 0:
                    heading = float(rng.uniform(-math.pi, math.pi))
                else:
                    d = paths[b, k] - paths[b, k - 1]
                    heading = float(math.atan2(d[1], d[0]) + rng.normal(scale=0.3))
                out.append(GoalContext(int(wi), starts[k], heading, goals[k]))
        if len(out) < self.cache_size // 4:
            raise GoalSamplingError("planner paths yielded too few free-space goals")
        return out


def sample_goals(sampler: GoalSampler, n: int, rng: np.random.Generator) -> np.ndarray:
    return np.stack([sampler.sample(rng).goal for _ in range(n)])


# -- rollouts -------------------------------------------------------------------

@dataclass
class RolloutBuffer:
    feat: np.ndarray      # (L, N, D)
    action: np.ndarray    # (L, N, 2) raw normalised actions
    logp: np.ndarray      # (L, N)
    reward: np.ndarray    # (L, N), bootstrap value folded in at truncations
    value: np.ndarray     # (L, N)
    done: np.ndarray      # (L, N) episode ended after this step
    last_value: np.ndarray  # (N,)
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None


def compute_gae(reward, value, done, last_value, gamma: float, lam: float):
    L = reward.shape[0]
    adv = np.zeros_like(reward)
    last = np.zeros_like(last_value)
    for t in reversed(range(L)):
        nxt = last_value if t == L - 1 else value[t + 1]
        nonterm = 1.0 - done[t]
        delta = reward[t] + gamma * nxt * nonterm - value[t]
        last = delta + gamma * lam * nonterm * last
        adv[t] = last
    return adv, adv + value


@dataclass
class EpisodeStats:
    returns: list
    lengths: list
    successes: list

    def summary(self) -> dict:
        n = len(self.returns)
        return {"episodes": n,
                "mean_return": float(np.mean(self.returns)) if n else 0.0,
                "mean_episode_len": float(np.mean(self.lengths)) if n else 0.0,
                "success_frac": float(np.mean(self.successes)) if n else 0.0}


class GoalEnvs:
    """N parallel goal-reaching episodes driven by a :class:`GoalSampler`.
    Episodes end on reaching the goal, on collision, or at the step budget
    (the last is a truncation and is bootstrapped)."""

    def __init__(self, sampler: GoalSampler, env: EnvConfig, ccfg: ControllerConfig,
                 counter: TransitionCounter, rng: np.random.Generator):
        self.sampler, self.env, self.ccfg, self.rng = sampler, env, ccfg, rng
        n = ccfg.n_envs
        self.sim = BatchSim([sampler.worlds[0]] * n, env, counter)
        self.goal = np.zeros((n, 2))
        self.budget = np.zeros(n, np.int64)
        self.t = np.zeros(n, np.int64)
        self.ep_return = np.zeros(n)
        for i in range(n):
            self._reset(i)

    def _reset(self, i: int) -> None:
        ctx = self.sampler.sample(self.rng)
        self.sim.set_world(i, self.sampler.worlds[ctx.world_index])
        self.sim.set_state(i, ctx.start[0], ctx.start[1], ctx.heading)
        self.goal[i] = ctx.goal
        self.budget[i] = waypoint_budget(ctx.start, ctx.heading, ctx.goal, self.env, self.ccfg)
        self.t[i] = 0
        self.ep_return[i] = 0.0

    def collect(self, params: dict, length: int) -> tuple[RolloutBuffer, EpisodeStats]:
        env, ccfg = self.env, self.ccfg
        n = ccfg.n_envs
        D = feature_dim(env)
        buf = RolloutBuffer(np.zeros((length, n, D)), np.zeros((length, n, 2)), np.zeros((length, n)),
                            np.zeros((length, n)), np.zeros((length, n)), np.zeros((length, n)),
                            np.zeros(n))
        stats = EpisodeStats([], [], [])
        obs = self.sim.observe()
        for t in range(length):
            feat = features(obs, self.goal, env, ccfg)
            a, raw, logp = act(params, obs, self.goal, self.rng, env, ccfg)
            prev = self.sim.pos.copy()
            collided = self.sim.step(a[:, 0], a[:, 1])
            pos = self.sim.pos
            r = np.hypot(*(self.goal - prev).T) - np.hypot(*(self.goal - pos).T)
            self.t += 1
            self.ep_return += r
            reached = np.hypot(*(self.goal - pos).T) < env.goal_tol
            timeout = (self.t >= self.budget) & ~reached & ~collided
            terminal = reached | collided
            obs_next = self.sim.observe()
            rew = ccfg.reward_scale * r
            if timeout.any():
                fnext = features(obs_next[timeout], self.goal[timeout], env, ccfg)
                rew[timeout] += ccfg.gamma * value(params, fnext)
            buf.feat[t], buf.action[t], buf.logp[t] = feat, raw, logp
            buf.reward[t], buf.value[t] = rew, value(params, feat)
            buf.done[t] = terminal | timeout
            for i in np.flatnonzero(terminal | timeout):
                stats.returns.append(float(self.ep_return[i]))
                stats.lengths.append(int(self.t[i]))
                stats.successes.append(bool(reached[i]))
                self._reset(i)
            obs = obs_next if not (terminal | timeout).any() else self.sim.observe()
        buf.last_value = value(params, features(obs, self.goal, env, ccfg))
        return buf, stats


# -- PPO ----------------------------------------------------------------------

def ppo_loss(P: dict, feat, action, logp_old, adv, ret, ccfg: ControllerConfig):
    mean = nn.mlp(P, "pi/", feat)
    std = ad.exp(P["log_std"])
    logp = ad.sum(ad.gaussian_logpdf(action, mean, std), axis=-1)
    ratio = ad.exp(ad.sub(logp, logp_old))
    surr = ad.minimum(ad.mul(ratio, adv), ad.mul(ad.clip(ratio, 1 - ccfg.clip, 1 + ccfg.clip), adv))
    v = ad.reshape(nn.mlp(P, "v/", feat), (-1,))
    v_loss = ad.mean(ad.square(ad.sub(v, ret)))
    entropy = ad.add(ad.sum(P["log_std"]), 0.5 * LOG_2PI_E * 2)
    loss = ad.sub(ad.add(ad.neg(ad.mean(surr)), ad.mul(v_loss, ccfg.vf_coef)), ad.mul(entropy, ccfg.ent_coef))
    return loss, ratio


def ppo_update(params: dict, opt: nn.Adam, buf: RolloutBuffer, ccfg: ControllerConfig,
               rng: np.random.Generator, record_ratios: list | None = None) -> tuple[dict, dict]:
    """Clipped-surrogate update over several minibatch epochs; returns the new
    parameters and loss statistics."""
    adv, ret = compute_gae(buf.reward, buf.value, buf.done, buf.last_value, ccfg.gamma, ccfg.gae_lambda)
    buf.advantages, buf.returns = adv, ret
    feat = buf.feat.reshape(-1, buf.feat.shape[-1])
    if np.all(feat == feat[0]):
        log.warning("degenerate rollout buffer (identical states); update skipped")
        return params, {"skipped": True}
    action = buf.action.reshape(-1, 2)
    logp_old = buf.logp.reshape(-1)
    adv_f, ret_f = adv.reshape(-1), ret.reshape(-1)
    n = len(feat)
    mb = max(1, n // ccfg.minibatches)
    losses = []
    for epoch in range(ccfg.epochs):
        perm = rng.permutation(n)
        for start in range(0, n - mb + 1, mb):
            idx = perm[start:start + mb]
            a = adv_f[idx]
            a = (a - a.mean()) / (a.std() + 1e-8) if len(a) > 1 else a
            P = nn.as_params(params)
            loss, ratio = ppo_loss(P, feat[idx], action[idx], logp_old[idx], a, ret_f[idx], ccfg)
            if record_ratios is not None and epoch == 0 and start == 0:
                record_ratios.append(ratio.value.copy())
            if not np.isfinite(loss.value):
                raise FloatingPointError("non-finite PPO loss")
            ad.backward(loss)
            params = opt.step(params, nn.grads_of(P))
            losses.append(float(loss.value))
    return params, {"skipped": False, "loss": float(np.mean(losses))}
