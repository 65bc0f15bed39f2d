"""Render PNG figures from a run's plot-data CSVs.

Reads the CSV artifacts a calibration run wrote (history, smile, switch,
heatmap) and renders whatever it finds. Purely optional sugar on top of
the CSV interface; needs matplotlib (pip install marlvol[plots]).

Example:
    python3 scripts/render_plots.py runs/flat
"""
import argparse
import csv
import math
import os
import sys


def read_rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def render_history(path, out, plt):
    rows = read_rows(path)
    its = [int(r["iteration"]) for r in rows]
    vals = [float(r["game_value"]) for r in rows]
    ses = [float(r["game_value_se"]) for r in rows]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(its, vals, lw=1.2)
    ax.fill_between(its, [v - 2 * s for v, s in zip(vals, ses)],
                    [v + 2 * s for v, s in zip(vals, ses)], alpha=0.25)
    ax.set_xlabel("iteration")
    ax.set_ylabel("game value")
    ax.set_title(os.path.basename(path))
    fig.tight_layout()
    fig.savefig(out, dpi=150)
    plt.close(fig)


def render_smile(path, out, plt):
    rows = read_rows(path)
    fig, ax = plt.subplots(figsize=(7, 4))
    maturities = sorted({int(r["t_days"]) for r in rows})
    for t in maturities:
        pts = sorted((float(r["strike"]), float(r["model_iv"]),
                      float(r["target_iv"]))
                     for r in rows if int(r["t_days"]) == t)
        ks = [p[0] for p in pts]
        ax.plot(ks, [p[1] for p in pts], "o-", label=f"model {t}d")
        ax.plot(ks, [p[2] for p in pts], "k--", lw=0.8)
    ax.set_xlabel("strike")
    ax.set_ylabel("implied vol")
    ax.legend(fontsize=8)
    ax.set_title(os.path.basename(path))
    fig.tight_layout()
    fig.savefig(out, dpi=150)
    plt.close(fig)


def render_switch(paths, out, plt):
    fig, ax = plt.subplots(figsize=(7, 4))
    for path in paths:
        rows = read_rows(path)
        label = (os.path.basename(path)
                 .replace("switch", "").replace(".csv", "").strip("_")
                 or "switch")
        ax.plot([int(r["iteration"]) for r in rows],
                [float(r["switch_volpts"]) for r in rows], label=label)
    ax.set_xlabel("iteration")
    ax.set_ylabel("switch value (vol points)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out, dpi=150)
    plt.close(fig)


def render_heatmap(path, out, plt):
    import numpy as np

    rows = read_rows(path)
    xs = sorted({float(r["ln_spot_t1"]) for r in rows})
    ys = sorted({float(r["ln_spot_t"]) for r in rows})
    fig, axes = plt.subplots(1, 2, figsize=(10, 4), sharey=True)
    for ax, col in zip(axes, ("mean_vol", "mean_localized_vol")):
        grid = np.full((len(ys), len(xs)), math.nan)
        for r in rows:
            i = ys.index(float(r["ln_spot_t"]))
            j = xs.index(float(r["ln_spot_t1"]))
            if r[col] not in ("", "nan"):
                grid[i, j] = float(r[col])
        im = ax.pcolormesh(xs, ys, grid, shading="nearest")
        fig.colorbar(im, ax=ax)
        ax.set_xlabel("ln spot at t1")
        ax.set_title(col)
    axes[0].set_ylabel("ln spot at t")
    fig.tight_layout()
    fig.savefig(out, dpi=150)
    plt.close(fig)


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("run_dir", help="directory holding the run's CSVs")
    args = parser.parse_args(argv)
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        print("matplotlib is not installed; pip install marlvol[plots]",
              file=sys.stderr)
        return 1

    rendered = []
    for name in sorted(os.listdir(args.run_dir)):
        path = os.path.join(args.run_dir, name)
        stem, ext = os.path.splitext(name)
        if ext != ".csv":
            continue
        out = os.path.join(args.run_dir, stem + ".png")
        if stem.startswith("history"):
            render_history(path, out, plt)
        elif stem.startswith(("smile", "eval_smile")):
            render_smile(path, out, plt)
        elif stem.startswith("heatmap"):
            render_heatmap(path, out, plt)
        else:
            continue
        rendered.append(out)
    switches = [os.path.join(args.run_dir, n)
                for n in sorted(os.listdir(args.run_dir))
                if n.startswith("switch") and n.endswith(".csv")]
    if switches:
        out = os.path.join(args.run_dir, "switch_overlay.png")
        render_switch(switches, out, plt)
        rendered.append(out)
    if not rendered:
        print(f"no renderable CSVs found in {args.run_dir}", file=sys.stderr)
        return 1
    for path in rendered:
        print(f"wrote {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
