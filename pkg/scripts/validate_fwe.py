"""Monte Carlo family-wise error of the GRF cluster test on null phantoms.

Each simulation is appended to a JSON-lines log as it finishes, so an
interrupted run resumes where it stopped.

    python scripts/validate_fwe.py --n-sim 1000 --log results/fwe_1000.jsonl
"""

import argparse
import json
import time
from dataclasses import asdict
from pathlib import Path

from vbmstat.phantom import three_group_spec
from vbmstat.validation import FweCalibration, NullSimulation, run_null_simulation, simulation_seed


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    p.add_argument("--n-sim", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dims", type=int, nargs=3, default=[64, 64, 64])
    p.add_argument("--voxel-size", type=float, default=1.5)
    p.add_argument("--fwhm", type=float, default=8.0)
    p.add_argument("--voxel-p", type=float, default=0.001)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--log", type=Path, required=True)
    args = p.parse_args(argv)

    done = []
    if args.log.exists():
        done = [NullSimulation(**json.loads(line)) for line in args.log.read_text().splitlines() if line]
    args.log.parent.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    with args.log.open("a") as fh:
        for i in range(len(done), args.n_sim):
            spec = three_group_spec(dims=tuple(args.dims), voxel_size=args.voxel_size, fwhm=args.fwhm, seed=simulation_seed(args.seed, i))
            sim = run_null_simulation(spec, voxel_p=args.voxel_p)
            done.append(sim)
            fh.write(json.dumps(asdict(sim)) + "\n")
            fh.flush()
            print(f"{i + 1}/{args.n_sim} clusters={sim.n_clusters} min_fwe_p={sim.min_fwe_p:.4f} {time.time() - t0:.0f}s", flush=True)
    sims = done[: args.n_sim]
    cal = FweCalibration(len(sims), args.alpha, sum(s.min_fwe_p < args.alpha for s in sims), sims)
    lo, hi = cal.interval()
    print(json.dumps({"n_sim": cal.n_sim, "false_positives": cal.false_positives, "rate": cal.rate, "wilson_95": [lo, hi]}))


if __name__ == "__main__":
    main()
