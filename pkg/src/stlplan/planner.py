"""Stochastic neural path planner.

A map embedding and the start position feed an MLP decoder that outputs
per-step means of a tanh-squashed Gaussian over bounded waypoint deviations;
the path is the running sum of the deviations.  Training losses combine a
policy-gradient term on the tracking return with the smoothed STL
robustness, either differentiated through the waypoints (``dscrl_loss``) or
folded into the reward (``rs_loss``); ``rm_reward`` provides milestone
progress shaping.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import autodiff as ad
from . import nn
from .sdf import OccupancyMask, downsample

TANH_EPS = 1e-6
TANH_CLIP = 1.0 - 1e-12


@dataclass(frozen=True)
class PlannerConfig:
    grid: int = 32
    embed: int = 64
    enc_hidden: int = 128
    hidden: int = 256
    depth: int = 3
    T: int = 20
    delta_g: float = 0.3
    log_sigma0: float = -1.5
    extent: tuple = (2.42, 2.42)
    beta0: float = 10.0
    beta_max: float = 160.0
    beta_every: int = 200
    lambda0: float = 1.0
    eta_lambda: float = 0.05
    delta: float = 0.05
    lambda_min: float = 0.0
    lambda_max: float = 100.0
    batch: int = 32
    pg_batch: int = 4
    lr: float = 3e-4
    max_grad_norm: float = 10.0
    baseline_decay: float = 0.99

    def __post_init__(self):
        object.__setattr__(self, "extent", tuple(float(e) for e in self.extent))
        if not (self.delta_g > 0 and self.T >= 1 and self.grid >= 1):
            raise ValueError("delta_g, T and grid must be positive")
        if not (self.lambda_min <= self.lambda0 <= self.lambda_max):
            raise ValueError("lambda0 outside [lambda_min, lambda_max]")
        if self.batch < 1 or self.pg_batch < 0 or self.pg_batch > self.batch:
            raise ValueError("need batch >= 1 and 0 <= pg_batch <= batch")

    def beta_at(self, update: int) -> float:
        return min(self.beta0 * 2.0 ** (update // self.beta_every), self.beta_max)

    def to_dict(self) -> dict:
        return asdict(self)


def init_planner(rng: np.random.Generator, cfg: PlannerConfig) -> dict:
    p = nn.init_mlp(rng, [cfg.grid * cfg.grid, cfg.enc_hidden, cfg.embed], "enc/")
    p.update(nn.init_mlp(rng, [cfg.embed + 2] + [cfg.hidden] * cfg.depth + [cfg.T * 2], "dec/",
                         out_scale=0.1))
    p["log_sigma"] = np.full((cfg.T, 2), cfg.log_sigma0)
    return p


def map_grid(mask: OccupancyMask, cfg: PlannerConfig) -> np.ndarray:
    """Flattened G x G occupancy fractions fed to the encoder."""
    return downsample(mask, cfg.grid).ravel()


def embed_map(params: dict, grids) -> np.ndarray | ad.Var:
    """Map embedding; tape-free for arrays, on the tape when params are Vars."""
    if isinstance(params["enc/W0"], ad.Var):
        return nn.mlp(params, "enc/", grids)
    return nn.mlp_np(params, "enc/", grids)


def _normalise_x0(x0, cfg: PlannerConfig) -> np.ndarray:
    return 2.0 * np.asarray(x0, float) / np.asarray(cfg.extent) - 1.0


def decoder_means(params: dict, E, x0, cfg: PlannerConfig):
    x0n = _normalise_x0(x0, cfg)
    if isinstance(params["dec/W0"], ad.Var):
        h = nn.mlp(params, "dec/", ad.concat([ad.as_var(E), ad.as_var(x0n)], axis=-1))
        return ad.reshape(h, h.shape[:-1] + (cfg.T, 2))
    h = nn.mlp_np(params, "dec/", np.concatenate([E, x0n], axis=-1))
    return h.reshape(h.shape[:-1] + (cfg.T, 2))


def _squash(u):
    return np.clip(np.tanh(u), -TANH_CLIP, TANH_CLIP)


def log_prob(u: np.ndarray, mu: np.ndarray, log_sigma: np.ndarray) -> np.ndarray:
    """Log-density of deviations ``tanh(u) * delta_g`` up to the constant
    scale Jacobian, summed over steps and axes."""
    sigma = np.exp(log_sigma)
    z = (u - mu) / sigma
    gauss = -0.5 * z * z - log_sigma - 0.5 * math.log(2 * math.pi)
    corr = np.log(1.0 - _squash(u) ** 2 + TANH_EPS)
    return np.sum(gauss - corr, axis=(-2, -1))


def integrate(x0, u, delta_g: float) -> np.ndarray:
    d = _squash(u) * delta_g
    x0 = np.asarray(x0, float)
    return np.concatenate([x0[..., None, :], x0[..., None, :] + np.cumsum(d, axis=-2)], axis=-2)


@dataclass
class PlannedPath:
    waypoints: np.ndarray   # (T+1, 2), waypoints[0] == x0
    u: np.ndarray           # (T, 2) raw pre-tanh samples
    logp: float


def sample_path(params: dict, x0, E, rng: np.random.Generator | None, cfg: PlannerConfig,
                mode: bool = False, sigma_scale: float = 1.0) -> PlannedPath:
    """One path; ``mode=True`` (or ``sigma_scale=0``) gives the mean path."""
    mu = decoder_means(params, np.asarray(E, float), np.asarray(x0, float), cfg)
    if not np.all(np.isfinite(mu)):
        raise FloatingPointError("non-finite decoder output")
    if mode or sigma_scale == 0:
        u = mu.copy()
    else:
        u = mu + sigma_scale * np.exp(params["log_sigma"]) * rng.standard_normal(mu.shape)
    return PlannedPath(integrate(x0, u, cfg.delta_g), u, float(log_prob(u, mu, params["log_sigma"])))


def sample_paths(params: dict, grids: np.ndarray, x0: np.ndarray, rng, cfg: PlannerConfig,
                 mode: bool = False) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Batched tape-free sampling: returns (waypoints, u, logp)."""
    mu = decoder_means(params, embed_map(params, grids), x0, cfg)
    if not np.all(np.isfinite(mu)):
        raise FloatingPointError("non-finite decoder output")
    u = mu.copy() if mode else mu + np.exp(params["log_sigma"]) * rng.standard_normal(mu.shape)
    return integrate(x0, u, cfg.delta_g), u, log_prob(u, mu, params["log_sigma"])


def path_graph(P: dict, grids: np.ndarray, x0: np.ndarray, eps: np.ndarray, cfg: PlannerConfig):
    """Differentiable batch of paths for noise ``eps`` (zeros give the mode).

    Returns (waypoints Var (B, T+1, 2), log-prob Var (B,), raw u array).  The
    waypoints carry the reparameterised gradient; the log-prob is evaluated at
    the sampled ``u`` held constant, as a score-function term needs.
    """
    mu = decoder_means(P, embed_map(P, grids), x0, cfg)
    sigma = ad.exp(P["log_sigma"])
    u = ad.add(mu, ad.mul(sigma, eps))
    t = ad.clip(ad.tanh(u), -TANH_CLIP, TANH_CLIP)
    d = ad.mul(t, cfg.delta_g)
    x0v = ad.reshape(ad.as_var(np.asarray(x0, float)), (len(x0), 1, 2))
    rest = ad.add(x0v, ad.cumsum(d, axis=1))
    wps = ad.concat([x0v, rest], axis=1)
    u_c = u.value
    gauss = ad.gaussian_logpdf(u_c, mu, sigma)
    corr = np.log(1.0 - _squash(u_c) ** 2 + TANH_EPS)
    logp = ad.sum(ad.sub(gauss, corr), axis=(1, 2))
    return wps, logp, u_c


# -- losses --------------------------------------------------------------------

def dscrl_loss(logp_pg, advantages, rho_soft, lam: float) -> ad.Var:
    """Score-function term on the tracked sub-batch plus the Lagrangian
    robustness term differentiated through the waypoints.

    ``advantages`` are constants (baseline already subtracted).  With the same
    paths in both arguments this is -mean[logp * A + lam * rho].
    """
    loss = ad.mul(ad.mean(rho_soft), -float(lam))
    if logp_pg is not None and np.size(advantages):
        loss = ad.sub(loss, ad.mean(ad.mul(logp_pg, np.asarray(advantages, float))))
    return loss


def rs_loss(logp_pg, advantages, logp_all, phi_values, lam: float) -> ad.Var:
    """Reward shaping: the robustness enters only as a (batch-centred)
    constant reward inside the score-function estimator."""
    phi = np.asarray(phi_values, float)
    centred = phi - phi.mean()
    loss = ad.mul(ad.mean(ad.mul(logp_all, centred)), -float(lam))
    if logp_pg is not None and np.size(advantages):
        loss = ad.sub(loss, ad.mean(ad.mul(logp_pg, np.asarray(advantages, float))))
    return loss


def rm_reward(path, milestones, scale: float | None = None) -> float:
    """Milestone progress: the number of milestones reached in order, minus
    the normalised closest approach to the next one.

    ``milestones`` is a list of ``(center, radius)``.  A milestone counts as
    reached when a waypoint after the previous milestone lies inside it.
    """
    if not milestones:
        raise ValueError("rm_reward needs at least one milestone")
    path = np.asarray(path, float)
    scale = scale or float(np.ptp(path, axis=0).max() + 1.0)
    j, start = 0, 0
    for t, p in enumerate(path):
        if j < len(milestones):
            c, r = milestones[j]
            if math.hypot(p[0] - c[0], p[1] - c[1]) < r:
                j += 1
                start = t
    if j == len(milestones):
        return float(j)
    c, _ = milestones[j]
    d = np.hypot(*(path[start:] - np.asarray(c)).T).min()
    return float(j - min(d / scale, 1.0))


@dataclass(frozen=True)
class LagrangeState:
    lam: float = 1.0
    eta: float = 0.05
    delta: float = 0.05
    lo: float = 0.0
    hi: float = 100.0

    def __post_init__(self):
        if not (self.lo <= self.lam <= self.hi):
            raise ValueError("lambda outside its bounds")


def update_lambda(state: LagrangeState, mean_robustness: float) -> LagrangeState:
    lam = state.lam + state.eta * (state.delta - float(mean_robustness))
    return replace(state, lam=float(min(max(lam, state.lo), state.hi)))


class RunningBaseline:
    """Exponential moving average of the normalised tracking return."""

    def __init__(self, decay: float = 0.99, value: float | None = None):
        self.decay = decay
        self.value = value

    def advantages(self, r: np.ndarray) -> np.ndarray:
        r = np.asarray(r, float)
        b = float(r.mean()) if self.value is None else self.value
        return r - b

    def update(self, r: np.ndarray) -> None:
        m = float(np.mean(r))
        self.value = m if self.value is None else self.decay * self.value + (1 - self.decay) * m


# -- export --------------------------------------------------------------------

def paths_to_jsonl(records) -> bytes:
    """``records``: iterable of dicts with episode, waypoints, robustness, r_h."""
    out = []
    for r in records:
        wp = np.asarray(r["waypoints"], float).tolist()
        out.append(json.dumps({"episode": int(r["episode"]), "waypoints": wp,
                               "robustness": float(r["robustness"]),
                               "r_h": None if r.get("r_h") is None else float(r["r_h"])}))
    return ("\n".join(out) + ("\n" if out else "")).encode()
