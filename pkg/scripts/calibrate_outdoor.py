"""Grid search for the outdoor wind amplitude and pose noise.

Runs a fixed seed block for every (wind_amplitude, pose_noise_sigma) pair and
prints the success rate, then the pair closest to the target rate. The chosen
values are written into the outdoor scenario file by hand together with the
calibration record.

    python3 scripts/calibrate_outdoor.py --trials 200 --target 0.40
"""
import argparse
import itertools
import json

from trimanual.orchestrator import MissionCache
from trimanual.scenario import load_scenario
from trimanual.simworld import run_trials


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--scenario", default="outdoor")
    ap.add_argument("--trials", type=int, default=200)
    ap.add_argument("--seed", type=int, default=10_000)
    ap.add_argument("--target", type=float, default=0.40)
    ap.add_argument("--wind", type=float, nargs="+", default=[0.1, 0.15, 0.2, 0.3])
    ap.add_argument("--sigma", type=float, nargs="+", default=[0.005, 0.01])
    args = ap.parse_args(argv)

    base = load_scenario(args.scenario)
    cache = MissionCache()
    rows = []
    for w, s in itertools.product(args.wind, args.sigma):
        sc = base.with_noise(wind_amplitude=w, pose_noise_sigma=s)
        _, summary = run_trials(sc, args.trials, args.seed, cache)
        rate = summary[sc.environment]["success_rate"]
        rows.append({"wind_amplitude": w, "pose_noise_sigma": s, "success_rate": rate})
        print(f"wind {w:.3f}  sigma {s:.4f}  success {rate:.3f}", flush=True)
    best = min(rows, key=lambda r: (abs(r["success_rate"] - args.target), r["wind_amplitude"]))
    print(json.dumps({"target": args.target, "trials": args.trials, "seed": args.seed,
                      "best": best}, indent=1))


if __name__ == "__main__":
    main()
