"""Plot curves.csv and predictions.csv written by ``rtn train --out DIR``.

    python3 scripts/plot_run.py DIR

Needs matplotlib, which is not a package dependency.
"""

import csv
import sys
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def read(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def main(run_dir):
    run = Path(run_dir)
    curves = read(run / "curves.csv")
    fig, (ax_loss, ax_acc, ax_emb) = plt.subplots(1, 3, figsize=(14, 4))
    steps = [int(r["step"]) for r in curves if r["source_ce"]]
    for key in ("source_ce", "mmd", "entropy"):
        ax_loss.plot(steps, [float(r[key]) for r in curves if r["source_ce"]], label=key, lw=0.8)
    ax_loss.set_xlabel("step")
    ax_loss.legend()
    evals = [(int(r["step"]), float(r["target_acc"])) for r in curves if r["target_acc"]]
    ax_acc.plot(*zip(*evals), marker=".")
    ax_acc.set_xlabel("step")
    ax_acc.set_ylabel("target accuracy")
    preds = read(run / "predictions.csv")
    ax_emb.scatter([float(p["embed_x"]) for p in preds], [float(p["embed_y"]) for p in preds],
                   c=[int(p["predicted"]) for p in preds], s=6, cmap="tab10")
    ax_emb.set_title("fcb features (first two coords), colored by prediction")
    fig.tight_layout()
    fig.savefig(run / "run.png", dpi=120)
    print(f"wrote {run / 'run.png'}")


if __name__ == "__main__":
    main(sys.argv[1])
