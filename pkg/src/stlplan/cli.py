"""Command-line entry point: ``stlplan <command> [options]``.

Exit codes: 0 success (or satisfied), 1 unsatisfied (monitor), 2 usage or
configuration error, 3 I/O error, 4 numerical abort.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys

EXIT_OK, EXIT_UNSAT, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3, 4

log = logging.getLogger("stlplan")


class CliError(Exception):
    def __init__(self, msg: str, code: int):
        super().__init__(msg)
        self.code = code


def _limit_threads(n: int) -> None:
    # must run before numpy is first imported
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def _setup_logging() -> None:
    level = os.environ.get("STLPLAN_LOG", "warn").lower()
    levels = {"error": logging.ERROR, "warn": logging.WARNING, "warning": logging.WARNING,
              "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        raise CliError(f"STLPLAN_LOG must be one of error, warn, info, debug (got {level!r})", EXIT_USAGE)
    logging.basicConfig(level=levels[level], format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


# -- shared helpers ------------------------------------------------------------

def _atomic_text(path, text: str) -> None:
    from .autodiff import atomic_write_bytes
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    atomic_write_bytes(path, text.encode())


def _json_dump(path, obj) -> None:
    _atomic_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _read_text(path) -> str:
    try:
        with open(path, encoding="utf-8") as fh:
            return fh.read()
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc.strerror or exc}", EXIT_IO) from exc


def _load_config(args):
    from .config import ConfigError, RunConfig, load_config
    if args.config is None:
        return RunConfig()
    if not os.path.exists(args.config):
        raise CliError(f"config file not found: {args.config}", EXIT_IO)
    try:
        return load_config(args.config)
    except ConfigError as exc:
        raise CliError(f"invalid config: {exc}", EXIT_USAGE) from exc
    except OSError as exc:
        raise CliError(f"cannot read {args.config}: {exc}", EXIT_IO) from exc


def _load_checkpoint(path, cfg):
    from . import trainer as tr
    from .autodiff import CheckpointError
    if path is None:
        raise CliError("--checkpoint is required", EXIT_USAGE)
    if not os.path.exists(path):
        raise CliError(f"checkpoint not found: {path}", EXIT_IO)
    try:
        state, meta = tr.load_state(path, cfg)
    except CheckpointError as exc:
        raise CliError(f"unreadable checkpoint {path}: {exc}", EXIT_IO) from exc
    except ValueError as exc:
        raise CliError(f"checkpoint does not match the config: {exc}", EXIT_USAGE) from exc
    return state, meta


def _load_world(args, cfg, task, seed):
    """The --map mask if given (extent from the config), else a generated map."""
    from .sdf import MaskError, load_mask
    from .sim import World, generate_map
    if getattr(args, "map", None):
        try:
            mask = load_mask(args.map, cfg.env.extent)
        except FileNotFoundError as exc:
            raise CliError(f"map not found: {args.map}", EXIT_IO) from exc
        except MaskError as exc:
            raise CliError(f"unreadable map {args.map}: {exc}", EXIT_IO) from exc
        return World(mask, (), seed)
    return generate_map(cfg.env, seed, task.keep_free)


# -- monitor --------------------------------------------------------------------

def _predicate_bindings(spec: dict, extent):
    from . import stl
    out = {}
    for name, d in spec.items():
        if not isinstance(d, dict) or len(d) != 1:
            raise CliError(f"predicate {name!r} must be an object with one key", EXIT_USAGE)
        kind, val = next(iter(d.items()))
        try:
            if kind == "region":
                out[name] = stl.region(name, val[0], float(val[1]))
            elif kind == "linear":
                out[name] = stl.linear(name, val[0], float(val[1]))
            elif kind == "x_greater":
                out[name] = stl.x_greater(name, float(val))
            else:
                raise CliError(f"predicate {name!r}: unknown kind {kind!r}", EXIT_USAGE)
        except (TypeError, IndexError, ValueError) as exc:
            raise CliError(f"predicate {name!r}: malformed parameters ({exc})", EXIT_USAGE) from exc
    return out


def cmd_monitor(args) -> int:
    import numpy as np

    from . import stl
    from .sdf import MaskError, avoid_predicate, load_mask
    from .tasks import DEFAULT_REGIONS

    text = _read_text(args.spec)
    extent = tuple(args.extent)
    bindings = {k: stl.region(k, c, r) for k, (c, r) in DEFAULT_REGIONS.items()}
    if args.predicates:
        try:
            spec = json.loads(_read_text(args.predicates))
        except json.JSONDecodeError as exc:
            raise CliError(f"{args.predicates}: invalid JSON ({exc})", EXIT_USAGE) from exc
        if not isinstance(spec, dict):
            raise CliError("predicate file must hold a JSON object", EXIT_USAGE)
        bindings.update(_predicate_bindings(spec, extent))
    if args.map:
        try:
            bindings["avoid_map"] = avoid_predicate(load_mask(args.map, extent))
        except FileNotFoundError as exc:
            raise CliError(f"map not found: {args.map}", EXIT_IO) from exc
        except MaskError as exc:
            raise CliError(f"unreadable map {args.map}: {exc}", EXIT_IO) from exc
    try:
        formula = stl.parse_spec(text, bindings)
    except (stl.SpecSyntaxError, stl.UnboundPredicateError, stl.ast.IntervalError) as exc:
        raise CliError(f"cannot parse {args.spec}: {exc}", EXIT_USAGE) from exc

    trajectories = []
    for lineno, line in enumerate(_read_text(args.trajectory).splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            wps = np.asarray(rec["waypoints"] if isinstance(rec, dict) else rec, float)
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise CliError(f"{args.trajectory}:{lineno}: malformed trajectory ({exc})", EXIT_USAGE) from exc
        if wps.ndim != 2 or wps.shape[1] != 2 or len(wps) == 0 or not np.all(np.isfinite(wps)):
            raise CliError(f"{args.trajectory}:{lineno}: waypoints must be a non-empty list of finite [x, y]",
                           EXIT_USAGE)
        trajectories.append(wps)
    if not trajectories:
        raise CliError(f"{args.trajectory}: no trajectories", EXIT_USAGE)

    all_sat = True
    for i, wps in enumerate(trajectories):
        try:
            rho = stl.robustness(formula, wps, 0)
            soft = float(stl.soft_robustness(formula, wps, 0, args.beta).value)
        except stl.EmptyWindowError as exc:
            raise CliError(f"trajectory {i}: {exc}", EXIT_USAGE) from exc
        sat = rho > 0
        all_sat &= sat
        print(f"trajectory {i}: robustness {rho:.6g} {'satisfied' if sat else 'violated'} "
              f"soft(beta={args.beta:g}) {soft:.6g}")
    return EXIT_OK if all_sat else EXIT_UNSAT


# -- train ------------------------------------------------------------------------

METRIC_COLUMNS = ("alternation", "transitions", "planner_updates", "ctrl_episodes", "ctrl_mean_return",
                  "ctrl_mean_episode_len", "ctrl_success_frac", "rho_soft", "rho_hard", "sat_frac",
                  "lambda", "beta", "loss", "r_h", "probe_SR")


def _metrics_csv(rows) -> str:
    # fixed order so a resumed run (rows restored from a checkpoint) writes identical bytes
    seen = {k for r in rows for k in r}
    keys = [k for k in METRIC_COLUMNS if k in seen] + sorted(seen - set(METRIC_COLUMNS))
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=keys, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in keys})
    return buf.getvalue()


def _write_training_artifacts(out, state, cfg, task, args, final: bool):
    from . import plots
    from . import trainer as tr

    rows = [{k: v for k, v in r.items() if k != "seconds"} for r in state.log.rows]
    _atomic_text(os.path.join(out, "metrics.csv"), _metrics_csv(rows))
    if rows:
        xs = [r["transitions"] for r in rows]
        series = {"probe SR": (xs, [r.get("probe_SR", float("nan")) for r in rows]),
                  "controller success": (xs, [r.get("ctrl_success_frac", float("nan")) for r in rows]),
                  "sampled path sat.": (xs, [r.get("sat_frac", float("nan")) for r in rows])}
        _atomic_text(os.path.join(out, "plots", "training.svg"),
                     plots.line_chart_svg(series, f"{task.name} ({args.mode})", "transitions", "fraction"))
    if not final:
        return
    rep = tr.evaluate(state.planner, state.controller, task, cfg, cfg.schedule.eval_episodes,
                      args.seed + 10_000, record=True)
    d = rep.to_dict()
    episodes = d.pop("episodes")
    d["transitions"] = state.counter.count
    d["transitions_to_threshold"] = tr.transitions_to_threshold(state.log.probes, cfg.schedule.threshold)
    if d["transitions_to_threshold"] == float("inf"):
        d["transitions_to_threshold"] = None
    _json_dump(os.path.join(out, "eval_report.json"), d)
    _atomic_text(os.path.join(out, "episodes.jsonl"),
                 "".join(json.dumps({k: v for k, v in e.items() if k != "trace"}, sort_keys=True) + "\n"
                         for e in episodes))
    ep = episodes[0]
    world = _load_world(argparse.Namespace(map=None), cfg, task, tr._seed(args.seed + 10_000, 2, 0))
    spec = plots.PlotSpec(world.mask, [ep["waypoints"]], [ep["trace"]], task.regions,
                          f"{task.name}: robustness {ep['robustness']:.3f}")
    _atomic_text(os.path.join(out, "plots", "eval_episode0.svg"), plots.plan_svg(spec))
    print(f"SR {rep.SR:.3f} TtR {'n/a' if rep.TtR is None else f'{rep.TtR:.2f} s'} "
          f"transitions {state.counter.count}")


def cmd_train(args) -> int:
    from dataclasses import replace

    from . import trainer as tr

    cfg = _load_config(args)
    if args.budget is not None:
        if args.budget < 0:
            raise CliError("--budget must be non-negative", EXIT_USAGE)
        cfg = replace(cfg, schedule=replace(cfg.schedule, budget=args.budget))
    out = args.out
    ck_dir = os.path.join(out, "checkpoints")
    latest = os.path.join(ck_dir, "latest.ckpt")
    task = tr.task_for(cfg)
    run_meta = {"mode": args.mode, "seed": args.seed, "config": cfg.to_dict()}

    state = None
    if args.resume:
        if not os.path.exists(latest):
            raise CliError(f"nothing to resume: {latest} not found", EXIT_IO)
        state, meta = _load_checkpoint(latest, cfg)
        if meta.get("run") != {k: run_meta[k] for k in ("mode", "seed")}:
            raise CliError("checkpoint was written by a run with another mode or seed", EXIT_USAGE)
    try:
        os.makedirs(ck_dir, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create {ck_dir}: {exc}", EXIT_IO) from exc
    _json_dump(os.path.join(out, "config.json"), run_meta)

    extra = {"run": {"mode": args.mode, "seed": args.seed}}

    def on_phase(st):
        tr.save_state(latest, st, extra)
        _write_training_artifacts(out, st, cfg, task, args, final=False)

    if state is None:
        state = tr.init_state(cfg, args.seed)
        tr.save_state(os.path.join(ck_dir, "initial.ckpt"), state, extra)
        tr.save_state(latest, state, extra)
    if cfg.schedule.budget == 0:
        print(f"budget 0: wrote initial checkpoint to {ck_dir}")
        return EXIT_OK
    try:
        state = tr.train_alternating(task, cfg, args.mode, args.seed, state=state, on_phase=on_phase)
    except (tr.TrainingAbort, FloatingPointError) as exc:
        diag = os.path.join(ck_dir, "abort.ckpt")
        bad = getattr(exc, "state", None) or state
        tr.save_state(diag, bad, dict(extra, error=str(exc)))
        raise CliError(f"training aborted: {exc} (diagnostic checkpoint {diag})", EXIT_NUMERIC) from exc
    tr.save_state(latest, state, extra)
    tr.save_state(os.path.join(ck_dir, "final.ckpt"), state, extra)
    _write_training_artifacts(out, state, cfg, task, args, final=True)
    return EXIT_OK


# -- plan / eval / latency ------------------------------------------------------------

def cmd_plan(args) -> int:
    import numpy as np

    from . import planner as pl
    from . import plots
    from . import trainer as tr
    from .tasks import hard_robustness

    cfg = _load_config(args)
    state, _ = _load_checkpoint(args.checkpoint, cfg)
    task = tr.task_for(cfg)
    if args.n < 1:
        raise CliError("--n must be positive", EXIT_USAGE)
    world = _load_world(args, cfg, task, args.seed)
    rng = np.random.default_rng(args.seed)
    if args.start is not None:
        x0 = np.array(args.start, float)
    else:
        x0 = tr.sample_starts([world], rng, cfg.env)[0]
    grid = pl.map_grid(world.mask, cfg.planner)
    grids = np.tile(grid, (args.n, 1))
    starts = np.tile(x0, (args.n, 1))
    wps, _, _ = pl.sample_paths(state.planner, grids, starts, rng, cfg.planner, mode=args.mode_path)
    rho = hard_robustness(task.batch_formula([world.field] * args.n), wps)
    records = [{"episode": i, "waypoints": wps[i], "robustness": rho[i], "r_h": None} for i in range(args.n)]
    from .autodiff import atomic_write_bytes
    os.makedirs(args.out, exist_ok=True)
    atomic_write_bytes(os.path.join(args.out, "paths.jsonl"), pl.paths_to_jsonl(records))
    spec = plots.PlotSpec(world.mask, list(wps), [], task.regions,
                          f"{task.name}: robustness {rho.max():.3f}")
    _atomic_text(os.path.join(args.out, "plan.svg"), plots.plan_svg(spec))
    for i, r in enumerate(rho):
        print(f"path {i}: robustness {r:.6g} {'satisfied' if r > 0 else 'violated'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from . import trainer as tr

    cfg = _load_config(args)
    n = args.n if args.n is not None else cfg.schedule.eval_episodes
    if n <= 0:
        raise CliError("--n must be positive", EXIT_USAGE)
    state, _ = _load_checkpoint(args.checkpoint, cfg)
    rep = tr.evaluate(state.planner, state.controller, tr.task_for(cfg), cfg, n, args.seed)
    lo, hi = rep.wilson()
    d = rep.to_dict()
    episodes = d.pop("episodes")
    _json_dump(os.path.join(args.out, "eval_report.json"), d)
    _atomic_text(os.path.join(args.out, "episodes.jsonl"),
                 "".join(json.dumps(e, sort_keys=True) + "\n" for e in episodes))
    ttr = "n/a" if rep.TtR is None else f"{rep.TtR:.2f} s"
    print(f"SR {rep.SR:.3f} (95% Wilson [{lo:.3f}, {hi:.3f}], n={rep.n}) TtR {ttr}")
    return EXIT_OK


def cmd_latency(args) -> int:
    from dataclasses import replace

    import numpy as np

    from . import planner as pl
    from . import trainer as tr
    from .sim import generate_map

    cfg = _load_config(args)
    if args.n < 1:
        raise CliError("--n must be positive", EXIT_USAGE)
    if args.checkpoint:
        params = _load_checkpoint(args.checkpoint, cfg)[0].planner
    else:
        params = pl.init_planner(np.random.default_rng(args.seed), cfg.planner)
    task = tr.task_for(cfg)
    report = {}
    for k in args.obstacles:
        env = replace(cfg.env, n_obstacles=k)
        masks = [generate_map(env, tr._seed(args.seed, 4, k, i), task.keep_free).mask for i in range(args.n)]
        x0s = [env.start_center] * args.n
        report[str(k)] = tr.measure_plan_latency(params, masks, x0s, cfg.planner, repeats=args.repeats)
        s = report[str(k)]
        print(f"{k} obstacles: p50 {s['p50'] * 1e3:.2f} ms  p95 {s['p95'] * 1e3:.2f} ms  max {s['max'] * 1e3:.2f} ms")
    _json_dump(os.path.join(args.out, "latency.json"), report)
    return EXIT_OK


def cmd_gen_maps(args) -> int:
    from . import trainer as tr
    from .sim import MapGenerationError, save_world

    cfg = _load_config(args)
    if args.n < 1:
        raise CliError("--n must be positive", EXIT_USAGE)
    task = tr.task_for(cfg)
    os.makedirs(args.out, exist_ok=True)
    for i in range(args.n):
        try:
            world = _load_world(argparse.Namespace(map=None), cfg, task, tr._seed(args.seed, 5, i))
        except MapGenerationError as exc:
            raise CliError(f"map generation failed: {exc}", EXIT_USAGE) from exc
        save_world(os.path.join(args.out, f"map_{i:04d}"), world, cfg.env)
    print(f"wrote {args.n} maps to {args.out}")
    return EXIT_OK


# -- parser ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config JSON (defaults if omitted)")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=1, help="BLAS thread cap; 1 is bitwise reproducible")
    common.add_argument("--out", default=".", help="output directory")

    p = argparse.ArgumentParser(prog="stlplan", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    m = sub.add_parser("monitor", parents=[common], help="robustness of trajectories against a formula")
    m.add_argument("spec", help="text file with one formula")
    m.add_argument("trajectory", help="JSON-lines file, one {\"waypoints\": [[x, y], ...]} per line")
    m.add_argument("--predicates", help="JSON object: name -> {region: [[cx, cy], r]} | "
                                        "{linear: [[a1, a2], b]} | {x_greater: c}")
    m.add_argument("--map", help="PGM/PNG mask bound as avoid_map")
    m.add_argument("--extent", type=float, nargs=2, default=(2.42, 2.42), metavar=("M", "N"))
    m.add_argument("--beta", type=float, default=10.0)
    m.set_defaults(fn=cmd_monitor)

    t = sub.add_parser("train", parents=[common], help="alternating planner/controller training")
    t.add_argument("--mode", choices=["dscrl", "rs", "rm", "unaligned"], default="dscrl")
    t.add_argument("--budget", type=int, help="override the transition budget")
    t.add_argument("--resume", action="store_true", help="continue from OUT/checkpoints/latest.ckpt")
    t.set_defaults(fn=cmd_train)

    pl_ = sub.add_parser("plan", parents=[common], help="sample paths on a map")
    pl_.add_argument("--checkpoint", required=True)
    pl_.add_argument("--map", help="PGM/PNG mask (a generated map if omitted)")
    pl_.add_argument("--start", type=float, nargs=2, metavar=("X", "Y"))
    pl_.add_argument("--n", type=int, default=1, help="number of paths")
    pl_.add_argument("--sample", dest="mode_path", action="store_false",
                     help="draw stochastic samples instead of the mode path")
    pl_.set_defaults(fn=cmd_plan)

    e = sub.add_parser("eval", parents=[common], help="success rate and time-to-reach")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--n", type=int, help="episodes (config eval_episodes if omitted)")
    e.set_defaults(fn=cmd_eval)

    la = sub.add_parser("latency", parents=[common], help="planner inference latency")
    la.add_argument("--checkpoint")
    la.add_argument("--n", type=int, default=50, help="maps per obstacle count")
    la.add_argument("--repeats", type=int, default=1)
    la.add_argument("--obstacles", type=int, nargs="+", default=[10, 40])
    la.set_defaults(fn=cmd_latency)

    g = sub.add_parser("gen-maps", parents=[common], help="write random maps (PGM + JSON sidecar)")
    g.add_argument("--n", type=int, default=10)
    g.set_defaults(fn=cmd_gen_maps)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    if args.threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return EXIT_USAGE
    _limit_threads(args.threads)
    try:
        _setup_logging()
        return args.fn(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except FloatingPointError as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
