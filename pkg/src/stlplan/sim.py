"""2-D unicycle robot among raster obstacles.

The scalar API (:func:`step`, :func:`raycast`) and the vectorised
:class:`BatchSim` share the same array kernels, so a batch of one reproduces
the scalar trajectory bit for bit.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .sdf import OccupancyMask, SignedDistanceField, WorldTransform, save_mask


class MapGenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class EnvConfig:
    dt: float = 0.1
    v_max: float = 0.22
    w_max: float = 2.84
    n_rays: int = 36
    ray_range: float = 1.0
    goal_tol: float = 0.1
    max_steps: int = 500
    extent: tuple = (2.42, 2.42)
    resolution: int = 64
    n_obstacles: int = 5
    obstacle_size: tuple = (0.15, 0.45)
    border_walls: bool = False
    start_center: tuple = (1.21, 1.21)
    start_radius: float = 0.15
    clearance: float = 0.1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "extent", tuple(float(e) for e in self.extent))
        object.__setattr__(self, "obstacle_size", tuple(float(e) for e in self.obstacle_size))
        object.__setattr__(self, "start_center", tuple(float(e) for e in self.start_center))
        positive = dict(dt=self.dt, v_max=self.v_max, w_max=self.w_max, n_rays=self.n_rays,
                        ray_range=self.ray_range, goal_tol=self.goal_tol,
                        max_steps=self.max_steps, resolution=self.resolution,
                        min_obstacle=self.obstacle_size[0], width=self.extent[0],
                        height=self.extent[1])
        for k, v in positive.items():
            if not v > 0:
                raise ValueError(f"EnvConfig.{k} must be positive, got {v}")
        if self.n_obstacles < 0 or self.start_radius < 0 or self.clearance < 0:
            raise ValueError("EnvConfig counts and radii must be non-negative")
        if self.obstacle_size[0] > self.obstacle_size[1]:
            raise ValueError("obstacle_size must be (min, max)")
        if not self.goal_tol < self.obstacle_size[0]:
            raise ValueError("goal_tol must be smaller than the minimum obstacle size")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class RobotState:
    x: float
    y: float
    theta: float
    clock: int = 0


@dataclass(frozen=True)
class Action:
    v: float
    omega: float


@dataclass(frozen=True)
class Observation:
    x: float
    y: float
    sin: float
    cos: float
    rays: np.ndarray = field(repr=False)

    @property
    def pos(self) -> np.ndarray:
        return np.array([self.x, self.y])

    def as_array(self) -> np.ndarray:
        return np.concatenate([[self.x, self.y, self.sin, self.cos], self.rays])


def wrap_angle(theta):
    """Map angles to (-pi, pi]."""
    theta = np.asarray(theta, dtype=float)
    inside = (theta > -math.pi) & (theta <= math.pi)
    return np.where(inside, theta, math.pi - np.mod(math.pi - theta, 2 * math.pi))


# -- maps ---------------------------------------------------------------------

@dataclass
class World:
    """One generated (or loaded) map with its SDF."""

    mask: OccupancyMask
    rects: list = field(default_factory=list)
    seed: int | None = None

    def __post_init__(self):
        self.field = SignedDistanceField(self.mask)

    @property
    def transform(self) -> WorldTransform:
        return self.field.transform

    def sdf(self, g):
        return self.field(g)

    def occupied(self, g) -> np.ndarray:
        return self.field.occupied_world(g)


def _rect_disc_distance(rect, center) -> float:
    x0, y0, x1, y1 = rect
    cx, cy = center
    dx = max(x0 - cx, 0.0, cx - x1)
    dy = max(y0 - cy, 0.0, cy - y1)
    return math.hypot(dx, dy)


def rasterize(rects, cfg: EnvConfig) -> OccupancyMask:
    W = H = cfg.resolution
    m, n = cfg.extent
    xs = (np.arange(W) + 0.5) * (m / W)
    ys = (np.arange(H) + 0.5) * (n / H)
    X, Y = np.meshgrid(xs, ys[::-1])  # image order: row 0 is the top
    grid = np.zeros((H, W), bool)
    for x0, y0, x1, y1 in rects:
        grid |= (X >= x0) & (X <= x1) & (Y >= y0) & (Y <= y1)
    if cfg.border_walls:
        grid[0, :] = grid[-1, :] = grid[:, 0] = grid[:, -1] = True
    return OccupancyMask(grid, cfg.extent)


def generate_map(cfg: EnvConfig, seed: int, keep_free=(), max_tries: int = 200) -> World:
    """Random axis-aligned rectangles, keeping the start disc and every
    ``(center, radius)`` in ``keep_free`` clear by ``cfg.clearance``."""
    rng = np.random.default_rng(seed)
    reserved = [(cfg.start_center, cfg.start_radius)] + [(tuple(c), float(r)) for c, r in keep_free]
    lo, hi = cfg.obstacle_size
    m, n = cfg.extent
    rects = []
    for k in range(cfg.n_obstacles):
        for _ in range(max_tries):
            w, h = rng.uniform(lo, hi, size=2)
            x0 = rng.uniform(0.0, m - w)
            y0 = rng.uniform(0.0, n - h)
            rect = (float(x0), float(y0), float(x0 + w), float(y0 + h))
            if all(_rect_disc_distance(rect, c) > r + cfg.clearance for c, r in reserved):
                rects.append(rect)
                break
        else:
            raise MapGenerationError(
                f"could not place obstacle {k + 1} clear of the reserved regions after {max_tries} tries")
    return World(rasterize(rects, cfg), rects, seed)


def save_world(stem, world: World, cfg: EnvConfig) -> None:
    """Write ``stem.pgm`` and a ``stem.json`` sidecar listing the rectangles."""
    stem = str(stem)
    save_mask(stem + ".pgm", world.mask)
    side = {"seed": world.seed, "extent": list(world.mask.extent),
            "resolution": [world.mask.W, world.mask.H],
            "rectangles": [list(r) for r in world.rects], "border_walls": cfg.border_walls}
    ad.atomic_write_bytes(stem + ".json", json.dumps(side, indent=1).encode())


def sample_free_points(world: World, n: int, rng, margin: float, region=None,
                       max_tries: int = 10000) -> np.ndarray:
    """Rejection-sample ``n`` points with sdf > margin, uniform over the
    extent or over a ``(center, radius)`` disc."""
    out = np.zeros((0, 2))
    tries = 0
    m, e = world.mask.extent
    while len(out) < n:
        k = max(2 * (n - len(out)), 8)
        if region is None:
            cand = rng.uniform([0.0, 0.0], [m, e], size=(k, 2))
        else:
            (cx, cy), r = region
            ang = rng.uniform(0, 2 * math.pi, size=k)
            rad = r * np.sqrt(rng.uniform(0, 1, size=k))
            cand = np.stack([cx + rad * np.cos(ang), cy + rad * np.sin(ang)], axis=1)
        ok = world.sdf(cand) > margin
        out = np.concatenate([out, cand[ok]])
        tries += k
        if tries > max_tries and len(out) < n:
            raise MapGenerationError("rejection sampling exceeded its retry budget")
    return out[:n]


# -- array kernels shared by the scalar and batch APIs ------------------------

def _occupied(grids: np.ndarray, env: np.ndarray, pts: np.ndarray, tf: WorldTransform) -> np.ndarray:
    """Pixel occupancy of ``pts[..., 2]`` in ``grids[env]``; off-map is occupied."""
    H, W = grids.shape[1:]
    u = np.rint((pts[..., 0] - tf.ox) / tf.sx).astype(np.int64)
    v = np.rint((pts[..., 1] - tf.oy) / tf.sy).astype(np.int64)
    inside = (u >= 0) & (u < W) & (v >= 0) & (v < H)
    uc = np.clip(u, 0, W - 1)
    vc = np.clip(v, 0, H - 1)
    return np.where(inside, grids[env, H - 1 - vc, uc], True)


def _raycast(grids, env, x, y, theta, n_rays, ray_range, tf) -> np.ndarray:
    step = 0.25 * tf.pitch
    n = int(math.ceil(ray_range / step))
    s = step * np.arange(1, n + 1)
    bearings = theta[:, None] + (2 * math.pi / n_rays) * np.arange(n_rays)[None, :]
    cx, sy = np.cos(bearings), np.sin(bearings)
    px = x[:, None, None] + cx[:, :, None] * s[None, None, :]
    py = y[:, None, None] + sy[:, :, None] * s[None, None, :]
    hit = _occupied(grids, env[:, None, None], np.stack([px, py], axis=-1), tf)
    first = np.argmax(hit, axis=-1)
    any_hit = hit.any(axis=-1)
    return np.minimum(np.where(any_hit, s[first], ray_range), ray_range)


def _kinematics(x, y, theta, v, w, cfg: EnvConfig):
    v = np.clip(v, -cfg.v_max, cfg.v_max)
    w = np.clip(w, -cfg.w_max, cfg.w_max)
    nx = x + v * np.cos(theta) * cfg.dt
    ny = y + v * np.sin(theta) * cfg.dt
    nth = wrap_angle(theta + w * cfg.dt)
    return nx, ny, nth


# -- scalar API ---------------------------------------------------------------

def raycast(state: RobotState, world: World, n_rays: int, ray_range: float) -> np.ndarray:
    if n_rays < 1:
        raise ValueError("need at least one ray")
    grids = world.mask.grid[None]
    return _raycast(grids, np.zeros(1, np.int64), np.array([state.x]), np.array([state.y]),
                    np.array([state.theta]), n_rays, ray_range, world.transform)[0]


def observe(state: RobotState, world: World, cfg: EnvConfig) -> Observation:
    rays = raycast(state, world, cfg.n_rays, cfg.ray_range)
    return Observation(state.x, state.y, math.sin(state.theta), math.cos(state.theta), rays)


def step(state: RobotState, action: Action, world: World, cfg: EnvConfig,
         counter: "TransitionCounter | None" = None):
    """Advance one Euler step.  Returns (state, observation, collided); on a
    collision the position is kept and only the heading changes."""
    nx, ny, nth = _kinematics(np.array([state.x]), np.array([state.y]), np.array([state.theta]),
                              np.array([action.v]), np.array([action.omega]), cfg)
    collided = bool(_occupied(world.mask.grid[None], np.zeros(1, np.int64),
                              np.stack([nx, ny], axis=-1), world.transform)[0])
    if collided:
        nx, ny = np.array([state.x]), np.array([state.y])
    new = RobotState(float(nx[0]), float(ny[0]), float(nth[0]), state.clock + 1)
    if counter is not None:
        counter.add(1)
    return new, observe(new, world, cfg), collided


def control_reward(o_t, o_next, g) -> float:
    """Progress toward ``g``: positive iff the robot got closer."""
    p0 = o_t.pos if isinstance(o_t, Observation) else np.asarray(o_t, dtype=float)[..., :2]
    p1 = o_next.pos if isinstance(o_next, Observation) else np.asarray(o_next, dtype=float)[..., :2]
    g = np.asarray(g, dtype=float)
    return np.linalg.norm(g - p0, axis=-1) - np.linalg.norm(g - p1, axis=-1)


# -- batch API ----------------------------------------------------------------

class TransitionCounter:
    """Audited count of environment steps (one per active robot per step)."""

    def __init__(self, count: int = 0):
        self.count = int(count)

    def add(self, n: int) -> None:
        self.count += int(n)


class BatchSim:
    """N robots, each on its own map; all maps share one resolution/extent."""

    def __init__(self, worlds: list[World], cfg: EnvConfig, counter: TransitionCounter | None = None):
        if not worlds:
            raise ValueError("BatchSim needs at least one world")
        self.cfg = cfg
        self.counter = counter or TransitionCounter()
        self.tf = worlds[0].transform
        self.grids = np.stack([w.mask.grid for w in worlds])
        self.worlds = list(worlds)
        n = len(worlds)
        self.env = np.arange(n)
        self.x = np.zeros(n)
        self.y = np.zeros(n)
        self.theta = np.zeros(n)

    @property
    def n(self) -> int:
        return len(self.worlds)

    def set_world(self, i: int, world: World) -> None:
        self.worlds[i] = world
        self.grids[i] = world.mask.grid

    def set_state(self, i, x, y, theta) -> None:
        self.x[i], self.y[i], self.theta[i] = x, y, wrap_angle(theta)

    @property
    def pos(self) -> np.ndarray:
        return np.stack([self.x, self.y], axis=-1)

    def observe(self, idx=None) -> np.ndarray:
        idx = self.env if idx is None else np.asarray(idx)
        rays = _raycast(self.grids, idx, self.x[idx], self.y[idx], self.theta[idx],
                        self.cfg.n_rays, self.cfg.ray_range, self.tf)
        head = np.stack([self.x[idx], self.y[idx], np.sin(self.theta[idx]), np.cos(self.theta[idx])], axis=-1)
        return np.concatenate([head, rays], axis=-1)

    def step(self, v, w, active=None) -> np.ndarray:
        """Step the robots flagged in ``active`` (all by default); returns the
        per-robot collision flags (False for inactive robots)."""
        active = np.ones(self.n, bool) if active is None else np.asarray(active, bool)
        idx = self.env[active]
        nx, ny, nth = _kinematics(self.x[idx], self.y[idx], self.theta[idx],
                                  np.asarray(v, float)[active], np.asarray(w, float)[active], self.cfg)
        hit = _occupied(self.grids, idx, np.stack([nx, ny], axis=-1), self.tf)
        self.x[idx] = np.where(hit, self.x[idx], nx)
        self.y[idx] = np.where(hit, self.y[idx], ny)
        self.theta[idx] = nth
        collided = np.zeros(self.n, bool)
        collided[idx] = hit
        self.counter.add(len(idx))
        return collided


def write_episode_log(path, records) -> None:
    """JSON-lines, one ``{t, x, y, theta, v, omega, reward, collided}`` per step."""
    lines = [json.dumps({k: (bool(v) if k == "collided" else v) for k, v in r.items()})
             for r in records]
    ad.atomic_write_bytes(path, ("\n".join(lines) + ("\n" if lines else "")).encode())
