import csv
import json
import math

import numpy as np
import pytest

from trimanual.cli import main
from trimanual.kincore import planar_chain


@pytest.fixture
def chain_file(tmp_path):
    p = tmp_path / "chain.json"
    p.write_text(json.dumps({"chains": [planar_chain((1.0, 1.0), "two").to_dict()]}))
    return p


def fk_out(capsys, *argv):
    assert main(["fk", *argv]) == 0
    return json.loads(capsys.readouterr().out)


@pytest.mark.parametrize("q,pos,yaw", [
    ("0,0", [2.0, 0.0, 0.0], 0.0),
    ("1.5707963267948966,0", [0.0, 2.0, 0.0], math.pi / 2),
    ("0,1.5707963267948966", [1.0, 1.0, 0.0], math.pi / 2),
])
def test_fk_planar(capsys, chain_file, q, pos, yaw):
    out = fk_out(capsys, "--chain", str(chain_file), "--q", q)
    np.testing.assert_allclose(out["position"], pos, atol=1e-12)
    assert out["rpy"][2] == pytest.approx(yaw, abs=1e-12)
    assert np.linalg.norm(out["quat"]) == pytest.approx(1.0)


def test_fk_batch_keeps_row_order(capsys, chain_file, tmp_path):
    qf = tmp_path / "q.csv"
    qf.write_text("# q0,q1\n0,0\n\n1.5707963267948966,0\n0,3.141592653589793\n")
    out = fk_out(capsys, "--chain", str(chain_file), "--q-file", str(qf))
    np.testing.assert_allclose([o["position"] for o in out],
                               [[2, 0, 0], [0, 2, 0], [0, 0, 0]], atol=1e-12)


def test_fk_bundled_chain_by_name(capsys, tmp_path):
    from importlib import resources

    path = resources.files("trimanual.data").joinpath("chains.json")
    out = fk_out(capsys, "--chain", str(path), "--name", "right", "--q", "0,0,0")
    assert len(out["position"]) == 3


@pytest.mark.parametrize("argv", [
    ["fk", "--chain", "CHAIN", "--q", "0"],            # wrong dimension
    ["fk", "--chain", "CHAIN", "--q", "0,nan"],        # not finite
    ["fk", "--chain", "CHAIN", "--q", "a,b"],          # not numbers
    ["fk", "--chain", "CHAIN"],                        # no q at all
    ["fk", "--chain", "CHAIN", "--name", "zz", "--q", "0,0"],
    ["fk", "--chain", "missing.json", "--q", "0,0"],
    ["run-trials", "--scenario", "indoor", "--trials", "0", "--out", "OUT"],
    ["simulate", "--scenario", "no_such_scenario", "--out", "OUT"],
    ["bogus"],
])
def test_bad_input_exits_3(chain_file, tmp_path, argv):
    argv = [str(chain_file) if a == "CHAIN" else str(tmp_path / "o") if a == "OUT" else a
            for a in argv]
    assert main(argv) == 3


def test_infeasible_nbv_exits_2(tmp_path):
    out = tmp_path / "nbv"
    assert main(["plan-nbv", "--scenario", "indoor", "--target", "6,0,0.7", "--out", str(out)]) == 2
    assert json.loads((out / "nbv.json").read_text())["feasible"] is False


def test_plan_nbv_and_bimanual(tmp_path):
    assert main(["plan-nbv", "--scenario", "indoor", "--out", str(tmp_path / "a")]) == 0
    nbv = json.loads((tmp_path / "a" / "nbv.json").read_text())
    assert nbv["feasible"] and nbv["standoff"] >= 0.45 - 1e-9
    q = ",".join(repr(x) for x in nbv["q"])
    assert main(["plan-bimanual", "--scenario", "indoor", f"--q-spot={q}",
                 "--out", str(tmp_path / "b")]) == 0
    with open(tmp_path / "b" / "plan.csv") as fh:
        rows = list(csv.DictReader(fh))
    t = [float(r["t"]) for r in rows]
    assert t == sorted(t)
    assert {r["phase"] for r in rows} >= {"left-hold", "twist", "retract"}


def test_perceive_synthetic_then_files(tmp_path):
    spec = tmp_path / "scene.json"
    spec.write_text(json.dumps({"objects": [
        {"center": [0.05, 0.0, 1.0], "radius": 0.04},
        {"center": [-0.1, 0.02, 1.3], "radius": 0.04}]}))
    a = tmp_path / "a"
    assert main(["perceive", "--synthetic", str(spec), "--radius", "0.04", "--out", str(a)]) == 0
    est = json.loads((a / "estimates.json").read_text())
    assert est["count"] == 2
    assert np.linalg.norm(np.array(est["estimates"][0]["center"]) - [0.05, 0, 1.0]) <= 0.005
    b = tmp_path / "b"
    assert main(["perceive", "--depth", str(a / "depth.raw"), "--masks", str(a / "mask0.pgm"),
                 str(a / "mask1.pgm"), "--radius", "0.04", "--out", str(b)]) == 0
    assert (b / "estimates.csv").read_bytes() == (a / "estimates.csv").read_bytes()


def test_simulate_with_trajectory_and_plots(tmp_path):
    out = tmp_path / "sim"
    assert main(["simulate", "--scenario", "indoor_ideal", "--dump-traj", "--plot",
                 "--out", str(out)]) == 0
    rec = json.loads((out / "record.json").read_text())
    assert rec["success"] is True
    for name in ("traj_ee.csv", "traj_joints.csv", "traj_ee.png", "traj_joints.png",
                 "trace.jsonl"):
        assert (out / name).stat().st_size > 0
    assert (out / "traj_ee.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_run_trials_writes_manifest_first(tmp_path):
    out = tmp_path / "trials"
    assert main(["run-trials", "--scenario", "indoor_ideal", "--trials", "3", "--plot",
                 "--out", str(out)]) == 0
    files = sorted(out.iterdir(), key=lambda p: p.stat().st_mtime_ns)
    assert files[0].name == "manifest.json"
    man = json.loads((out / "manifest.json").read_text())
    assert man["command"] == "run-trials" and man["seed"] == 0
    assert len(man["inputs"]["scenario"]["sha256"]) == 64
    summary = json.loads((out / "summary.json").read_text())
    assert summary["environments"]["indoor"]["success_rate"] == 1.0
    assert (out / "trials.png").exists()


def test_rerun_is_byte_identical(tmp_path):
    out = tmp_path / "r"
    argv = ["run-trials", "--scenario", "indoor", "--trials", "4", "--seed", "11", "--out", str(out)]
    assert main(argv) == 0
    first = {p.name: p.read_bytes() for p in out.iterdir()}
    assert main(argv) == 0
    assert {p.name: p.read_bytes() for p in out.iterdir()} == first
