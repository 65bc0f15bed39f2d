"""Run the flat-surface calibration experiment.

Trains the shared policy against a flat 20 percent implied-vol surface
and writes the training history, reward trace, final smile and
checkpoints under the output directory. At full scale (120k
trajectories, 10 runs, 500 iterations) this is a long single-CPU run;
pass --scale to shrink it proportionally, which keeps the basis-player
count and the problem geometry.

Example:
    python3 scripts/run_flat_smile.py --out runs/flat --scale 20
"""
import argparse
import json
import os
import sys
import tempfile

from marlvol import cli


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default=os.path.join("runs", "flat"))
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--scale", type=int, default=1,
                        help="divide trajectories and runs by this factor")
    parser.add_argument("--vol", type=float, default=0.20,
                        help="flat surface implied vol")
    parser.add_argument("--sigma-init", type=float, default=0.25,
                        help="initial model vol (set off-target so the "
                             "run has something to learn)")
    parser.add_argument("--iterations", type=int, default=500)
    parser.add_argument("--action-variant", choices=("A", "B"), default="A")
    args = parser.parse_args(argv)

    os.makedirs(args.out, exist_ok=True)
    code = cli.main(["make-surface", "--kind", "flat", "--vol",
                     str(args.vol), "--out", args.out, "--targets"])
    if code != 0:
        return code

    config = {
        "experiment": "vanilla-surface",
        "surface": "surface.json",
        "maturities_days": [11, 21, 36, 51],
        "strikes": [0.95, 1.0, 1.05],
        "sim": {"sigma_init": args.sigma_init},
        "trainer": {"max_iterations": args.iterations},
    }
    fd, cfg_path = tempfile.mkstemp(dir=args.out, suffix=".json")
    try:
        with os.fdopen(fd, "w") as fh:
            json.dump(config, fh, indent=2)
        return cli.main(["calibrate-vanilla", "--config", cfg_path,
                         "--out", args.out, "--seed", str(args.seed),
                         "--scale", str(args.scale),
                         "--action-variant", args.action_variant])
    finally:
        os.unlink(cfg_path)


if __name__ == "__main__":
    sys.exit(main())
