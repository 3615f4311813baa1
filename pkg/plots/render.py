#!/usr/bin/env python3
"""Render experiment CSVs as figures.

Standalone view layer over the engine's plot-data CSV schema: it reads the
documented `# schema=1` files and draws exactly the values they contain.

Usage: plots/render.py --kind <kind> --in <csv...> --out <img>
Kinds: learning-curve, calibration, error-curve, class-delta.
The calibration kind accepts an optional second CSV (learning_curve.csv) for
the calibration-error-evolution side panel.
"""

import argparse
import sys

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

SCHEMA = 1
KINDS = ("learning-curve", "calibration", "error-curve", "class-delta")


class CsvError(Exception):
    pass


def read_rows(path):
    """Parse one schema-checked CSV into a list of dicts of strings."""
    try:
        with open(path) as f:
            lines = f.read().splitlines()
    except OSError as e:
        raise CsvError(f"{path}: {e.strerror}") from e
    if not lines or lines[0].strip() != f"# schema={SCHEMA}":
        got = lines[0].strip() if lines else "<empty file>"
        raise CsvError(f"{path}:1: schema mismatch: expected '# schema={SCHEMA}', "
                       f"got {got!r}")
    header = lines[1].split(",")
    rows = []
    for ln, line in enumerate(lines[2:], start=3):
        if not line.strip():
            continue
        cells = line.split(",")
        if len(cells) != len(header):
            raise CsvError(f"{path}:{ln}: expected {len(header)} fields, "
                           f"got {len(cells)}")
        rows.append(dict(zip(header, cells)))
    return rows


def need_columns(rows, path, *cols):
    missing = [c for c in cols if rows and c not in rows[0]]
    if not rows:
        raise CsvError(f"{path}:3: no data rows")
    if missing:
        raise CsvError(f"{path}:2: missing columns {missing}")


def by_strategy(rows):
    out = {}
    for r in rows:
        out.setdefault(r["strategy"], []).append(r)
    return out


def render_learning_curve(ax, rows, path):
    need_columns(rows, path, "strategy", "rep", "labeled", "accuracy")
    for strategy, srows in sorted(by_strategy(rows).items()):
        per_rep = {}
        for r in srows:
            per_rep.setdefault(r["rep"], []).append(
                (int(r["labeled"]), float(r["accuracy"])))
        reps = [sorted(v) for v in per_rep.values()]
        labels = [p[0] for p in reps[0]]
        series = [[acc for _, acc in rep] for rep in reps]
        mean = [sum(col) / len(col) for col in zip(*series)]
        lo = [min(col) for col in zip(*series)]
        hi = [max(col) for col in zip(*series)]
        line, = ax.plot(labels, mean, marker="o", label=strategy)
        ax.fill_between(labels, lo, hi, color=line.get_color(), alpha=0.2)
    ax.set_xlabel("labeled samples")
    ax.set_ylabel("test accuracy")
    ax.legend()


def render_calibration(ax, rows, path):
    need_columns(rows, path, "strategy", "rep", "mean_confidence",
                 "empirical_accuracy")
    ax.plot([0, 1], [0, 1], "k--", linewidth=1, label="perfect calibration")
    for strategy, srows in sorted(by_strategy(rows).items()):
        pts = [(float(r["mean_confidence"]), float(r["empirical_accuracy"]))
               for r in srows if r["mean_confidence"] != "nan"]
        pts.sort()
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o",
                linestyle="-", label=strategy)
    ax.set_xlabel("mean confidence")
    ax.set_ylabel("empirical accuracy")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    ax.legend()


def render_calibration_evolution(ax, rows, path):
    need_columns(rows, path, "strategy", "rep", "step", "calibration_error")
    for strategy, srows in sorted(by_strategy(rows).items()):
        per_rep = {}
        for r in srows:
            per_rep.setdefault(r["rep"], []).append(
                (int(r["step"]), float(r["calibration_error"])))
        for rep, pts in sorted(per_rep.items()):
            pts.sort()
            ax.plot([p[0] for p in pts], [p[1] for p in pts], alpha=0.7,
                    label=f"{strategy} rep {rep}")
    ax.set_xlabel("query step")
    ax.set_ylabel("calibration error")
    ax.legend(fontsize="x-small")


def render_error_curve(ax, rows, path):
    need_columns(rows, path, "strategy", "rep", "fraction", "method_loss",
                 "oracle_loss")
    for strategy, srows in sorted(by_strategy(rows).items()):
        per_rep = {}
        for r in srows:
            per_rep.setdefault(r["rep"], []).append(
                (float(r["fraction"]), float(r["method_loss"]),
                 float(r["oracle_loss"])))
        color = None
        for rep, pts in sorted(per_rep.items()):
            pts.sort(reverse=True)
            fr = [p[0] for p in pts]
            line, = ax.plot(fr, [p[1] for p in pts], color=color,
                            label=strategy if rep == min(per_rep) else None)
            color = line.get_color()
            ax.plot(fr, [p[2] for p in pts], color=color, linestyle=":",
                    alpha=0.6)
    ax.invert_xaxis()
    ax.set_xlabel("fraction of predictions retained")
    ax.set_ylabel("mean cross-entropy (dotted: oracle ordering)")
    ax.legend()


def render_class_delta(ax, rows, path):
    need_columns(rows, path, "strategy", "rep", "step", "class_index",
                 "class_name", "delta")
    final = max(int(r["step"]) for r in rows)
    rows = [r for r in rows if int(r["step"]) == final]
    classes = sorted({(int(r["class_index"]), r["class_name"]) for r in rows})
    groups = sorted({(r["strategy"], r["rep"]) for r in rows})
    width = 0.8 / max(1, len(groups))
    for g, (strategy, rep) in enumerate(groups):
        vals = {int(r["class_index"]): float(r["delta"]) for r in rows
                if r["strategy"] == strategy and r["rep"] == rep}
        xs = [i + g * width for i, _ in classes]
        ax.bar(xs, [vals.get(i, 0.0) for i, _ in classes], width=width,
               label=f"{strategy} rep {rep}")
    ax.axhline(0.0, color="k", linewidth=0.8)
    ax.set_xticks([i + 0.4 - width / 2 for i, _ in classes])
    ax.set_xticklabels([name for _, name in classes], rotation=30, ha="right")
    ax.set_ylabel(f"queried-fraction delta vs baseline (step {final})")
    ax.legend(fontsize="x-small")


def render(kind, in_paths, out_path):
    """Build the figure for one kind and save it; returns the Figure."""
    if kind == "calibration" and len(in_paths) == 2:
        fig, (ax, ax2) = plt.subplots(1, 2, figsize=(11, 4.5))
        render_calibration(ax, read_rows(in_paths[0]), in_paths[0])
        render_calibration_evolution(ax2, read_rows(in_paths[1]), in_paths[1])
    else:
        if len(in_paths) != 1:
            raise CsvError(f"kind {kind} takes exactly one input CSV")
        fig, ax = plt.subplots(figsize=(6.5, 4.5))
        rows = read_rows(in_paths[0])
        {"learning-curve": render_learning_curve,
         "calibration": render_calibration,
         "error-curve": render_error_curve,
         "class-delta": render_class_delta}[kind](ax, rows, in_paths[0])
    fig.tight_layout()
    if out_path is not None:
        fig.savefig(out_path, dpi=120)
    return fig


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--kind", choices=KINDS, required=True)
    parser.add_argument("--in", dest="inputs", nargs="+", required=True,
                        metavar="CSV")
    parser.add_argument("--out", required=True)
    args = parser.parse_args(argv)
    try:
        fig = render(args.kind, args.inputs, args.out)
        plt.close(fig)
    except CsvError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
