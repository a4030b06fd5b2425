"""Command-line entry point: ``trimanual <command> ...``.

Exit codes: 0 success, 2 infeasible plan, 3 invalid input, 4 internal
invariant breach. Commands that write files put everything under ``--out``
and write ``manifest.json`` there before any result file.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import IllegalTransition, PhaseInfeasible, TrimanualError

EXIT_OK, EXIT_INFEASIBLE, EXIT_INPUT, EXIT_INTERNAL = 0, 2, 3, 4


class InputError(Exception):
    """Bad command-line input (exit 3)."""


# ---------------------------------------------------------------------------
# helpers


def _floats(text, what="values"):
    try:
        vals = [float(x) for x in text.replace(";", ",").split(",") if x.strip()]
    except ValueError:
        raise InputError(f"cannot parse {what}: {text!r}") from None
    if not all(math.isfinite(v) for v in vals):
        raise InputError(f"{what} must be finite")
    return np.array(vals)


def _vec3(text, what):
    v = _floats(text, what)
    if v.shape != (3,):
        raise InputError(f"{what} needs three comma-separated numbers")
    return v


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _dump(obj):
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def _write_json(path, obj):
    Path(path).write_text(_dump(obj))


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(x):
    return f"{float(x):.9g}"


def _scenario_inputs(name):
    """Resolve a scenario argument to (Scenario, source path)."""
    from .scenario import bundled_scenario_path, load_scenario

    sc = load_scenario(name)
    p = Path(name)
    if not p.exists():
        p = p if p.suffix else Path(str(p) + ".json")
        if not p.exists():
            p = bundled_scenario_path(p.name)
    return sc, p


def _start_outdir(args, inputs, seed=None):
    """Create --out and write the run manifest before anything else."""
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    opts = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "out")}
    manifest = {
        "tool": "trimanual",
        "version": __version__,
        "command": args.command,
        "options": {k: (str(v) if isinstance(v, Path) else v) for k, v in opts.items()},
        "seed": seed,
        "out": str(args.out),
        "inputs": {str(k): {"path": str(p), "sha256": _sha256(p)} for k, p in inputs.items()},
    }
    _write_json(out / "manifest.json", manifest)
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_fk(args):
    from .kincore import forward_kinematics, load_chains

    try:
        chains = load_chains(args.chain)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise InputError(f"cannot load chain file {args.chain}: {exc}") from None
    if args.name:
        if args.name not in chains:
            raise InputError(f"chain {args.name!r} not in {args.chain}")
        chain = chains[args.name]
    else:
        chain = next(iter(chains.values()))
    if (args.q is None) == (args.q_file is None):
        raise InputError("give exactly one of --q or --q-file")
    if args.q is not None:
        rows = [_floats(args.q, "--q")]
    else:
        rows = []
        for ln in Path(args.q_file).read_text().splitlines():
            if ln.strip() and not ln.lstrip().startswith("#"):
                rows.append(_floats(ln, "--q-file row"))
    out = []
    for q in rows:
        p = forward_kinematics(chain, q)
        out.append({"position": [float(x) for x in p.position],
                    "quat": [float(x) for x in p.orientation], "rpy": list(p.rpy())})
    sys.stdout.write(_dump(out[0] if args.q is not None else out))
    return EXIT_OK


def _spot_world(sc):
    from .orchestrator import body_pose

    spot = sc.chains["spot"]
    return spot.with_base(body_pose(*sc.mission.navigation[0]) @ spot.base_pose)


def _nbv_for(sc, target_pos):
    from .collision import CollisionScene
    from .kincore import Pose
    from .nbv import plan_nbv

    spot = _spot_world(sc)
    scene = CollisionScene(sc.grid, {"spot": spot}, ())
    return plan_nbv(spot, scene, Pose(tuple(target_pos)), sc.nbv, np.array(sc.mission.start_q_spot))


def cmd_plan_nbv(args):
    sc, path = _scenario_inputs(args.scenario)
    if args.seed is not None:
        from dataclasses import replace
        sc = replace(sc, nbv=replace(sc.nbv, seed=args.seed))
    out = _start_outdir(args, {"scenario": path}, sc.nbv.seed)
    target = _vec3(args.target, "--target") if args.target else sc.targets[0].position
    sol = _nbv_for(sc, target)
    res = sol.to_dict()
    res["target"] = [float(x) for x in target]
    res["roll_pitch_error"] = sol.roll_pitch_error(sc.nbv) if sol.feasible else None
    res["cost"] = sol.cost if sol.feasible else None
    _write_json(out / "nbv.json", res)
    return EXIT_OK if sol.feasible else EXIT_INFEASIBLE


def cmd_plan_bimanual(args):
    from .bimanual import mounted_chains, plan_harvest_sequence, sequence_rows
    from .collision import CollisionScene
    from .kincore import Pose

    sc, path = _scenario_inputs(args.scenario)
    out = _start_outdir(args, {"scenario": path}, sc.sequence.seed)
    fruit = _vec3(args.fruit, "--fruit") if args.fruit else sc.targets[0].position
    if args.q_spot:
        q_spot = _floats(args.q_spot, "--q-spot")
        sc.chains["spot"].check_q(q_spot)
    else:
        sol = _nbv_for(sc, fruit)
        if not sol.feasible:
            _write_json(out / "plan.json", {"feasible": False, "phase": "nbv",
                                            "cause": "NoFeasibleViewpoint"})
            return EXIT_INFEASIBLE
        q_spot = sol.q
    chains = mounted_chains({**sc.chains, "spot": _spot_world(sc)}, q_spot)
    scene = CollisionScene(sc.grid, chains, sc.self_pairs)
    m = sc.mission
    try:
        segs = plan_harvest_sequence(Pose(tuple(fruit)), m.stowed_left, m.stowed_right, scene,
                                     sc.sequence)
    except PhaseInfeasible as exc:
        _write_json(out / "plan.json", {"feasible": False, "phase": exc.phase, "cause": exc.cause})
        return EXIT_INFEASIBLE
    _write_json(out / "plan.json", {
        "feasible": True, "fruit": [float(x) for x in fruit],
        "q_spot": [float(x) for x in q_spot],
        "segments": [s.to_dict() for s in segs]})
    rows = sequence_rows(segs)
    width = max(len(r[3]) for r in rows)
    _write_csv(out / "plan.csv", ["t", "chain", "phase"] + [f"q{k}" for k in range(width)],
               [[_fmt(t), c, ph] + [_fmt(x) for x in q] + [""] * (width - len(q))
                for t, c, ph, q in rows])
    return EXIT_OK


def cmd_perceive(args):
    from .perception import (COLOR_VGA, DetectionSet, Intrinsics, perceive, read_depth, read_pgm,
                             surface_to_center, write_depth, write_pgm)

    inputs = {}
    if args.synthetic:
        inputs["synthetic"] = Path(args.synthetic)
    else:
        if not args.depth or not args.masks:
            raise InputError("give --depth and --masks, or --synthetic")
        inputs["depth"] = Path(args.depth)
        inputs["depth_sidecar"] = Path(str(args.depth) + ".json")
        for i, m in enumerate(args.masks):
            inputs[f"mask{i}"] = Path(m)
    if args.color_intrinsics:
        inputs["color_intrinsics"] = Path(args.color_intrinsics)
    for p in inputs.values():
        if not p.exists():
            raise InputError(f"{p} not found")
    color = COLOR_VGA
    if args.color_intrinsics:
        color = Intrinsics.from_dict(json.loads(Path(args.color_intrinsics).read_text()))
    out = _start_outdir(args, inputs, args.seed)

    if args.synthetic:
        from .synthetic import Box, Sphere, render

        spec = json.loads(Path(args.synthetic).read_text())
        objs = []
        for o in spec["objects"]:
            if o.get("type", "sphere") == "sphere":
                objs.append(Sphere(np.array(o["center"], float), float(o["radius"]),
                                   bool(o.get("detect", True))))
            else:
                objs.append(Box(np.array(o["center"], float), np.array(o["half"], float),
                                np.array(o.get("rotation", np.eye(3).tolist()), float),
                                bool(o.get("detect", True))))
        rng = np.random.default_rng(args.seed)
        fr = render(objs, color_intr=color, rng=rng, depth_noise=float(spec.get("depth_noise", 0)))
        frame, dets = fr.depth, fr.detections
        write_depth(out / "depth.raw", frame)
        for i, m in enumerate(dets.masks):
            write_pgm(out / f"mask{i}.pgm", m)
    else:
        frame = read_depth(args.depth)
        dets = DetectionSet(tuple(read_pgm(m) for m in args.masks))
    ests = perceive(frame, color, dets, args.outlier_sigma)
    res = []
    for e in ests:
        d = e.to_dict()
        if args.radius is not None or not e.degenerate:
            d["center"] = [float(x) for x in surface_to_center(e, args.radius)]
        res.append(d)
    _write_json(out / "estimates.json", {"count": len(res), "estimates": res})
    _write_csv(out / "estimates.csv",
               ["detection", "cx", "cy", "cz", "ex", "ey", "ez", "points", "mean_range"],
               [[d["detection"], *map(_fmt, d["centroid"]), *map(_fmt, d["extent"]),
                 d["point_count"], _fmt(d["mean_range"])] for d in res])
    return EXIT_OK


def _target_rpy(anchor, pos):
    """Cord-aligned fruit orientation: body z along fruit -> anchor."""
    from .kincore import Pose

    u = np.asarray(anchor, float) - np.asarray(pos, float)
    u /= np.linalg.norm(u)
    z = np.array([0.0, 0.0, 1.0])
    ax = np.cross(z, u)
    s = np.linalg.norm(ax)
    if s < 1e-12:
        return (0.0, 0.0, 0.0)
    return Pose.from_axis_angle(ax / s, math.atan2(s, z @ u)).rpy()


def trajectory_tables(rows, anchor):
    """(ee_header, ee_rows, joint_header, joint_rows) from recorded execution samples."""
    ee_h = ["t"] + [f"{w}_{c}" for w in ("left", "right", "target")
                    for c in ("x", "y", "z", "roll", "pitch", "yaw")]
    ee, jt = [], []
    r0 = rows[0]
    n_s = 0 if r0["q_spot"] is None else len(r0["q_spot"])
    jt_h = (["t"] + [f"spot_q{k}" for k in range(n_s)]
            + [f"left_q{k}" for k in range(len(r0["q_left"]))]
            + [f"right_q{k}" for k in range(len(r0["q_right"]))] + ["right_ee_q0"])
    for r in rows:
        line = [r["t"]]
        for who in ("left", "right"):
            p = r[who]
            line += [*p.position, *p.rpy()]
        line += [*r["target"], *_target_rpy(anchor, r["target"])]
        ee.append([_fmt(x) for x in line])
        q = [r["t"]] + ([] if r["q_spot"] is None else list(r["q_spot"]))
        q += list(r["q_left"]) + list(r["q_right"]) + [r["twist"]]
        jt.append([_fmt(x) for x in q])
    return ee_h, ee, jt_h, jt


def _csv_dicts(header, rows):
    return [{h: float(v) for h, v in zip(header, r)} for r in rows]


def cmd_simulate(args):
    from .orchestrator import MissionCache, run_mission, write_trace

    sc, path = _scenario_inputs(args.scenario)
    out = _start_outdir(args, {"scenario": path}, args.seed)
    rec = run_mission(sc, args.seed, 0, MissionCache(), record=args.dump_traj or args.plot)
    _write_json(out / "record.json", rec.to_dict())
    write_trace(out / "trace.jsonl", [rec])
    if rec.trajectory:
        tab = trajectory_tables(rec.trajectory, sc.targets[0].anchor)
        if args.dump_traj:
            _write_csv(out / "traj_ee.csv", tab[0], tab[1])
            _write_csv(out / "traj_joints.csv", tab[2], tab[3])
        if args.plot:
            from .plotting import plot_end_effectors, plot_joints

            phases = []
            for e in rec.trace:
                for a in e["actions"]:
                    if a.get("action") == "plan" and a.get("feasible"):
                        base = next(x["t"] for x in rec.trace if x["state"] == "Execute"
                                    and x["seq"] > e["seq"])
                        seen = {}
                        for s in a["segments"]:
                            lo, hi = seen.get(s["phase"], (math.inf, -math.inf))
                            seen[s["phase"]] = (min(lo, s["t0"]), max(hi, s["t1"]))
                        phases = [(base + lo, base + hi, ph) for ph, (lo, hi) in seen.items()
                                  if ph in ("left-hold", "twist")]
            plot_end_effectors(_csv_dicts(tab[0], tab[1]), out / "traj_ee.png", phases)
            plot_joints(_csv_dicts(tab[2], tab[3]), out / "traj_joints.png")
    return EXIT_OK


def cmd_run_trials(args):
    from .orchestrator import write_trace
    from .simworld import TrialRecord, run_trials

    if args.trials < 1:
        raise InputError("--trials must be >= 1")
    sc, path = _scenario_inputs(args.scenario)
    out = _start_outdir(args, {"scenario": path}, args.seed)
    records, summary = run_trials(sc, args.trials, args.seed)
    _write_csv(out / "trials.csv", TrialRecord.CSV_FIELDS, [r.csv_row() for r in records])
    _write_json(out / "summary.json", {"scenario": sc.name, "trials": args.trials,
                                       "base_seed": args.seed, "environments": summary})
    write_trace(out / "trace.jsonl", records)
    if args.plot:
        from .plotting import plot_trial_summary

        plot_trial_summary(records, out / "trials.png")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser():
    ap = argparse.ArgumentParser(prog="trimanual", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fk", help="forward kinematics of one chain")
    p.add_argument("--chain", required=True, help="chain JSON file")
    p.add_argument("--name", help="chain name when the file holds several (default: first)")
    p.add_argument("--q", help="comma-separated joint values")
    p.add_argument("--q-file", help="text/CSV file with one joint vector per line")
    p.set_defaults(func=cmd_fk)

    p = sub.add_parser("plan-nbv", help="carrier-arm viewpoint for a target")
    p.add_argument("--scenario", required=True)
    p.add_argument("--target", help="x,y,z in the world frame (default: first scenario target)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plan_nbv)

    p = sub.add_parser("plan-bimanual", help="hold-then-twist sequence for the dual arms")
    p.add_argument("--scenario", required=True)
    p.add_argument("--fruit", help="x,y,z fruit center (default: first scenario target)")
    p.add_argument("--q-spot", help="carrier configuration (default: planned viewpoint)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plan_bimanual)

    p = sub.add_parser("perceive", help="fruit estimates from a depth frame and masks")
    p.add_argument("--depth", help="raw depth file with its .json sidecar")
    p.add_argument("--masks", nargs="+", help="PGM detection masks in color-camera pixels")
    p.add_argument("--synthetic", help="JSON object list to render instead of reading files")
    p.add_argument("--color-intrinsics", help="JSON intrinsics (default: 640x480, f = 615)")
    p.add_argument("--radius", type=float, help="fruit radius for the center correction")
    p.add_argument("--outlier-sigma", type=float, default=2.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_perceive)

    p = sub.add_parser("simulate", help="one full mission with trace")
    p.add_argument("--scenario", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dump-traj", action="store_true", help="write trajectory CSVs")
    p.add_argument("--plot", action="store_true", help="render trajectory PNGs")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("run-trials", help="seeded batch of missions")
    p.add_argument("--scenario", required=True)
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--plot", action="store_true", help="render an outcome PNG")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_run_trials)
    return ap


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    try:
        return args.func(args)
    except (IllegalTransition, AssertionError) as exc:
        print(f"error: internal invariant breach: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except PhaseInfeasible as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (InputError, TrimanualError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
