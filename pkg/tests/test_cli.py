import json
import os
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from stlplan import cli
from stlplan import trainer as tr

TINY = {
    "task": {"T": 6},
    "planner": {"grid": 8, "embed": 8, "enc_hidden": 16, "hidden": 16, "depth": 2, "batch": 4, "pg_batch": 2},
    "controller": {"hidden": 16, "n_envs": 2, "rollout_len": 32, "epochs": 1},
    "schedule": {"controller_steps": 128, "planner_updates": 3, "budget": 2500, "map_pool": 4,
                 "probe_episodes": 4, "eval_episodes": 6},
}


@pytest.fixture
def tiny(tmp_path):
    p = tmp_path / "tiny.json"
    p.write_text(json.dumps(TINY))
    return str(p)


def run(*argv):
    return cli.main([str(a) for a in argv])


# -- monitor ------------------------------------------------------------------------

@pytest.fixture
def until_files(tmp_path):
    (tmp_path / "until.stl").write_text("xpos U[0,2] xbig\n")
    (tmp_path / "preds.json").write_text(json.dumps({"xpos": {"x_greater": 0}, "xbig": {"x_greater": 2}}))
    (tmp_path / "good.jsonl").write_text(json.dumps({"waypoints": [[1, 0], [1, 0], [3, 0]]}) + "\n")
    (tmp_path / "bad.jsonl").write_text(json.dumps({"waypoints": [[1, 0], [1, 0], [1, 0]]}) + "\n")
    return tmp_path


def test_monitor_until_case(until_files, capsys):
    d = until_files
    code = run("monitor", d / "until.stl", d / "good.jsonl", "--predicates", d / "preds.json")
    out = capsys.readouterr().out
    assert code == 0
    assert "robustness 1 satisfied" in out


def test_monitor_violation_exit_1(until_files, capsys):
    d = until_files
    assert run("monitor", d / "until.stl", d / "bad.jsonl", "--predicates", d / "preds.json") == 1
    assert "robustness -1 violated" in capsys.readouterr().out


def test_monitor_default_regions_and_map(tmp_path, capsys):
    from stlplan.sdf import OccupancyMask, save_mask
    grid = np.zeros((64, 64), bool)
    grid[:, 40:] = True
    save_mask(tmp_path / "m.pgm", OccupancyMask(grid))
    (tmp_path / "s.stl").write_text("F[0,2] A & G[0,2] avoid_map")
    (tmp_path / "t.jsonl").write_text(json.dumps({"waypoints": [[1.0, 1.0], [0.8, 0.8], [0.7, 0.7]]}) + "\n")
    assert run("monitor", tmp_path / "s.stl", tmp_path / "t.jsonl", "--map", tmp_path / "m.pgm") == 0
    (tmp_path / "t2.jsonl").write_text(json.dumps({"waypoints": [[1.0, 1.0], [0.7, 0.7], [2.0, 0.7]]}) + "\n")
    assert run("monitor", tmp_path / "s.stl", tmp_path / "t2.jsonl", "--map", tmp_path / "m.pgm") == 1


def test_monitor_errors(until_files, capsys):
    d = until_files
    (d / "broken.stl").write_text("xpos U[0,2")
    assert run("monitor", d / "broken.stl", d / "good.jsonl", "--predicates", d / "preds.json") == 2
    (d / "unbound.stl").write_text("F[0,2] nowhere")
    assert run("monitor", d / "unbound.stl", d / "good.jsonl") == 2
    assert run("monitor", d / "missing.stl", d / "good.jsonl") == 3
    assert run("monitor", d / "until.stl", d / "missing.jsonl", "--predicates", d / "preds.json") == 3
    (d / "junk.jsonl").write_text("not json\n")
    assert run("monitor", d / "until.stl", d / "junk.jsonl", "--predicates", d / "preds.json") == 2
    assert run("monitor") == 2


# -- config and training ------------------------------------------------------------

def test_config_errors(tmp_path, capsys):
    assert run("train", "--config", tmp_path / "nope.json", "--out", tmp_path) == 3
    (tmp_path / "bad.json").write_text('{"planner": {"widht": 3}}')
    assert run("train", "--config", tmp_path / "bad.json", "--out", tmp_path) == 2
    assert "widht" in capsys.readouterr().err
    (tmp_path / "bad2.json").write_text("{not json")
    assert run("train", "--config", tmp_path / "bad2.json", "--out", tmp_path) == 2
    assert run("train", "--threads", 0) == 2


def test_log_level_env(tiny, tmp_path, monkeypatch):
    monkeypatch.setenv("STLPLAN_LOG", "loud")
    assert run("train", "--config", tiny, "--budget", 0, "--out", tmp_path / "r") == 2


def test_budget_zero_writes_initial_checkpoint(tiny, tmp_path):
    out = tmp_path / "r0"
    assert run("train", "--config", tiny, "--budget", 0, "--out", out) == 0
    assert sorted(os.listdir(out / "checkpoints")) == ["initial.ckpt", "latest.ckpt"]
    assert not (out / "metrics.csv").exists()


def test_train_artifacts_and_determinism(tiny, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("train", "--config", tiny, "--seed", 3, "--out", a) == 0
    assert run("train", "--config", tiny, "--seed", 3, "--out", b, "--threads", 1) == 0
    for name in ("metrics.csv", "eval_report.json", "episodes.jsonl"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    rep = json.loads((a / "eval_report.json").read_text())
    assert 0 <= rep["SR"] <= 1 and rep["n"] == 6
    for svg in ("training.svg", "eval_episode0.svg"):
        ET.fromstring((a / "plots" / svg).read_text())


def test_resume_reproduces_uninterrupted(tiny, tmp_path, monkeypatch):
    full, part = tmp_path / "full", tmp_path / "part"
    assert run("train", "--config", tiny, "--seed", 4, "--out", full) == 0

    original = tr.train_alternating

    class Interrupt(Exception):
        pass

    def interrupted(*args, on_phase=None, **kw):
        def stop_after_first(state):
            on_phase(state)
            if state.alternations == 1:
                raise Interrupt
        return original(*args, on_phase=stop_after_first, **kw)

    monkeypatch.setattr(tr, "train_alternating", interrupted)
    with pytest.raises(Interrupt):
        run("train", "--config", tiny, "--seed", 4, "--out", part)
    monkeypatch.setattr(tr, "train_alternating", original)
    assert run("train", "--config", tiny, "--seed", 4, "--out", part, "--resume") == 0
    for name in ("metrics.csv", "eval_report.json", "episodes.jsonl"):
        assert (full / name).read_bytes() == (part / name).read_bytes(), name
    # a resume under another seed is refused
    assert run("train", "--config", tiny, "--seed", 5, "--out", part, "--resume") == 2
    assert run("train", "--config", tiny, "--out", tmp_path / "empty", "--resume") == 3


def test_numeric_abort_exit_4(tiny, tmp_path, monkeypatch):
    def boom(state, *a, **kw):
        raise tr.TrainingAbort("non-finite planner loss", state)

    monkeypatch.setattr(tr, "planner_update", boom)
    out = tmp_path / "r"
    assert run("train", "--config", tiny, "--out", out) == 4
    assert (out / "checkpoints" / "abort.ckpt").exists()


# -- plan / eval / latency / gen-maps -----------------------------------------------

@pytest.fixture
def checkpoint(tiny, tmp_path):
    out = tmp_path / "ck"
    assert run("train", "--config", tiny, "--budget", 0, "--out", out) == 0
    return out / "checkpoints" / "latest.ckpt"


def test_eval_output_and_validation(tiny, checkpoint, tmp_path, capsys):
    assert run("eval", "--config", tiny, "--checkpoint", checkpoint, "--n", 0, "--out", tmp_path) == 2
    assert run("eval", "--config", tiny, "--checkpoint", checkpoint, "--n", 8, "--out", tmp_path) == 0
    out = capsys.readouterr().out
    assert out.startswith("SR 0.") and "95% Wilson [" in out
    rep = json.loads((tmp_path / "eval_report.json").read_text())
    assert rep["n"] == 8 and len(rep["SR_wilson95"]) == 2


def test_checkpoint_config_mismatch_exit_2(checkpoint, tmp_path):
    # default config has other network sizes
    assert run("eval", "--checkpoint", checkpoint, "--n", 2, "--out", tmp_path) == 2
    assert run("eval", "--checkpoint", tmp_path / "none.ckpt", "--n", 2, "--out", tmp_path) == 3
    (tmp_path / "junk.ckpt").write_bytes(b"hello")
    assert run("eval", "--checkpoint", tmp_path / "junk.ckpt", "--n", 2, "--out", tmp_path) == 3


def test_plan_writes_paths_and_svg(tiny, checkpoint, tmp_path, capsys):
    out = tmp_path / "p"
    assert run("plan", "--config", tiny, "--checkpoint", checkpoint, "--n", 3, "--sample", "--out", out) == 0
    lines = (out / "paths.jsonl").read_text().splitlines()
    assert len(lines) == 3
    rec = json.loads(lines[0])
    assert set(rec) == {"episode", "waypoints", "robustness", "r_h"} and len(rec["waypoints"]) == 7
    root = ET.fromstring((out / "plan.svg").read_text())
    assert root.tag.endswith("svg")
    assert capsys.readouterr().out.count("robustness") == 3


def test_plan_on_mask_file(tiny, checkpoint, tmp_path):
    from stlplan.sdf import OccupancyMask, save_mask
    save_mask(tmp_path / "m.png", OccupancyMask(np.zeros((64, 64), bool)))
    out = tmp_path / "p"
    assert run("plan", "--config", tiny, "--checkpoint", checkpoint, "--map", tmp_path / "m.png",
               "--start", 1.2, 1.2, "--out", out) == 0
    rec = json.loads((out / "paths.jsonl").read_text())
    assert rec["waypoints"][0] == [1.2, 1.2]
    assert run("plan", "--config", tiny, "--checkpoint", checkpoint, "--map", tmp_path / "none.png",
               "--out", out) == 3


def test_latency_and_gen_maps(tiny, tmp_path, capsys):
    assert run("latency", "--config", tiny, "--n", 2, "--obstacles", 2, 4, "--out", tmp_path) == 0
    rep = json.loads((tmp_path / "latency.json").read_text())
    assert set(rep) == {"2", "4"} and rep["2"]["n"] == 2
    maps = tmp_path / "maps"
    assert run("gen-maps", "--n", 2, "--seed", 1, "--out", maps) == 0
    assert sorted(os.listdir(maps)) == ["map_0000.json", "map_0000.pgm", "map_0001.json", "map_0001.pgm"]
    again = tmp_path / "maps2"
    assert run("gen-maps", "--n", 2, "--seed", 1, "--out", again) == 0
    assert (maps / "map_0001.pgm").read_bytes() == (again / "map_0001.pgm").read_bytes()
