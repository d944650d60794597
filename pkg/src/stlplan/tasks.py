"""Task library: region layouts and STL formulas for the five navigation
tasks, each conjoined with a map-wide obstacle-avoidance constraint."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import stl
from .sdf import SignedDistanceField, batched_avoid_predicate

TASK_NAMES = ("Sequence", "Cover", "Branch", "Loop", "Signal")

# Desk layout on a 2.42 m square map: three blue regions around the start
# disc, a fourth (green) for Branch and a yellow one for Signal.
DEFAULT_REGIONS = {
    "A": ((0.70, 0.70), 0.25),
    "B": ((1.72, 0.70), 0.25),
    "C": ((1.21, 1.75), 0.25),
    "D": ((0.45, 1.75), 0.25),
    "Y": ((1.97, 1.75), 0.25),
}


@dataclass(frozen=True)
class TaskSpec:
    name: str
    text: str
    regions: dict = field(hash=False)
    T: int = 20
    M: int = 1
    milestones: tuple = ()

    def region_bindings(self) -> dict:
        return {k: stl.region(k, c, r) for k, (c, r) in self.regions.items()}

    def formula(self, avoid: stl.PredicateBinding | None = None) -> stl.Formula:
        """Parse with the region bindings plus ``avoid`` (bound as avoid_map).
        Without ``avoid`` the names are only checked and nothing is bound."""
        b = self.region_bindings()
        if avoid is None:
            return stl.parse_spec(self.text, set(b) | {"avoid_map"})
        b["avoid_map"] = avoid
        return stl.parse_spec(self.text, b)

    def batch_formula(self, fields: list[SignedDistanceField]) -> stl.Formula:
        """Formula over a batch of paths, path i checked against map i."""
        return self.formula(batched_avoid_predicate(fields))

    @property
    def keep_free(self) -> list:
        return [(c, r) for c, r in self.regions.values()]

    def milestone_regions(self) -> list:
        return [(np.asarray(self.regions[k][0], float), float(self.regions[k][1])) for k in self.milestones]


def _sequence(names, T):
    n = len(names)
    bounds = [round(i * T / n) for i in range(n + 1)]
    parts = []
    for i, k in enumerate(names):
        a = bounds[i] + (1 if i > 0 else 0)
        parts.append(f"F[{a},{bounds[i + 1]}] {k}")
    return " & ".join(parts)


def make_task(name: str, T: int = 20, M: int = 3, regions: dict | None = None) -> TaskSpec:
    """Build one of the five library tasks at horizon ``T``."""
    regions = dict(regions or DEFAULT_REGIONS)
    blue = ["A", "B", "C"]
    k = T // M
    loop = "G[0,{}] ({})".format(T - k, " & ".join(f"F[0,{k}] {r}" for r in blue))
    if name == "Sequence":
        body, miles, used = _sequence(blue, T), blue, blue
    elif name == "Cover":
        body, miles, used = " & ".join(f"F[0,{T}] {r}" for r in blue), blue, blue
    elif name == "Branch":
        body = f"(F[0,{T}] A & F[0,{T}] B) | (F[0,{T}] C & F[0,{T}] D)"
        miles, used = ["A", "B"], ["A", "B", "C", "D"]
    elif name == "Loop":
        body, miles, used = loop, blue * M, blue
    elif name == "Signal":
        body = f"({loop}) U[0,1] A & F[0,{T}] Y"
        miles, used = blue + ["Y"], blue + ["Y"]
    else:
        raise ValueError(f"unknown task {name!r}; expected one of {TASK_NAMES}")
    text = f"({body}) & G[0,{T}] avoid_map"
    return TaskSpec(name, text, {r: regions[r] for r in used}, T, M if name in ("Loop", "Signal") else 1,
                    tuple(miles))


def hard_robustness(formula: stl.Formula, paths: np.ndarray) -> np.ndarray:
    """Robustness at t=0 for a batch of paths (..., T+1, 2)."""
    v, d = stl.robustness_signal(formula, np.asarray(paths, float))
    if not d[0]:
        raise stl.EmptyWindowError("formula undefined at t=0")
    return v[..., 0]
