"""Experiment orchestration CLI.

Subcommands: gen-data, run, report, plot-data. A `--config` key=value file
supplies flag defaults; explicit flags override it. Every `run` echoes its
fully resolved configuration to `config.echo`, and rerunning from that file
alone reproduces all output files bitwise.

Exit codes: 0 success, 2 usage error, 1 runtime failure.
"""

import argparse
import hashlib
import json
import os
import sys

import numpy as np

from . import datagen as dg
from . import loop as al
from . import metrics as met
from . import net
from . import uncertainty as unc
from .rng import RngStream

CSV_SCHEMA = 1


# ---------------------------------------------------------------------------
# CSV dialect: "# schema=<v>" comment line, fixed header row, '.' decimals,
# 17 significant digits so 64-bit floats round-trip bitwise.

def fmt_value(v) -> str:
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def write_csv(path, header, rows) -> None:
    with open(path, "w") as f:
        f.write(f"# schema={CSV_SCHEMA}\n")
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(fmt_value(v) for v in row) + "\n")


def read_csv(path):
    """Returns (header, rows) with string cells; validates the schema line."""
    with open(path) as f:
        first = f.readline().strip()
        if first != f"# schema={CSV_SCHEMA}":
            raise ValueError(f"{path}: unsupported schema line {first!r}")
        header = f.readline().strip().split(",")
        rows = [line.strip().split(",") for line in f if line.strip()]
    for i, row in enumerate(rows):
        if len(row) != len(header):
            raise ValueError(f"{path}: row {i + 3} has {len(row)} fields, "
                             f"expected {len(header)}")
    return header, rows


def read_csv_dicts(path):
    header, rows = read_csv(path)
    return [dict(zip(header, row)) for row in rows]


# ---------------------------------------------------------------------------
# key=value config files ("config.echo" uses the same format)

def load_config_file(path) -> dict:
    out = {}
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{ln}: expected key = value")
            key, val = line.split("=", 1)
            out[key.strip()] = val.strip()
    return out


def inject_config_defaults(argv):
    """Expand `--config file` into synthetic flags placed before the explicit
    ones, so command-line flags override file values."""
    if "--config" not in argv:
        return argv
    i = argv.index("--config")
    if i + 1 >= len(argv):
        raise UsageError("--config requires a path")
    pairs = load_config_file(argv[i + 1])
    rest = argv[:i] + argv[i + 2:]
    synthetic = []
    for key, val in pairs.items():
        synthetic += [f"--{key}", val]
    # argv[0] is the subcommand name
    return rest[:1] + synthetic + rest[1:]


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# gen-data

def add_gen_data_parser(sub):
    p = sub.add_parser("gen-data", description="Generate a synthetic dataset container.")
    p.add_argument("--config")
    p.add_argument("--preset", choices=("kitti-ratios", "balanced"), default="kitti-ratios")
    p.add_argument("--classes", type=int, default=3, help="class count for --preset balanced")
    p.add_argument("--n-train", type=int, default=1000)
    p.add_argument("--n-test", type=int, default=500)
    p.add_argument("--feature-dim", type=int, default=8)
    p.add_argument("--separation", type=float, default=3.0)
    p.add_argument("--proposals", action="store_true",
                   help="pass the training split through the proposal simulator "
                        "(adds a Background class)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    return p


def cmd_gen_data(args) -> int:
    profile = dg.ClassProfile.kitti() if args.preset == "kitti-ratios" \
        else dg.ClassProfile.balanced(args.classes)
    train, test = dg.gen_cluster_dataset(profile, args.n_train, args.n_test,
                                         args.feature_dim, args.separation,
                                         RngStream(args.seed))
    if args.proposals:
        pp = dg.ProposalProfile.kitti() if args.preset == "kitti-ratios" \
            else dg.ProposalProfile(recall=(0.9,) * len(profile.class_names))
        train, report = dg.simulate_proposals(train, pp, RngStream(args.seed, 1))
        test, _ = dg.simulate_proposals(test, pp, RngStream(args.seed, 2), test_band=True)
        print(f"proposal simulator dropped {report.dropped_indices.size} objects, "
              f"added {report.background_count} background proposals")
    os.makedirs(args.out, exist_ok=True)
    dg.dataset_write(os.path.join(args.out, "train"), train)
    dg.dataset_write(os.path.join(args.out, "test"), test)
    counts = train.class_counts()
    print("train class counts: "
          + " ".join(f"{name}={c}" for name, c in zip(train.class_names, counts)))
    print(f"wrote {len(train)} train / {len(test)} test samples to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# run

RUN_FLAGS = [
    # (flag, type, default, help)
    ("data", str, None, "dataset directory from gen-data"),
    ("strategy", str, "random", "comma-separated strategy list"),
    ("steps", int, 10, "max query steps"),
    ("query", int, 200, "samples queried per step"),
    ("seed-per-class", int, 200, "balanced seed-set size per class"),
    ("reps", int, 3, "repetitions; rep r runs with seed master+r"),
    ("stop-rule", str, "max-steps", "max-steps | convergence | target"),
    ("conv-epsilon", float, 1e-3, "convergence accuracy gain threshold"),
    ("conv-window", int, 5, "convergence lookback window"),
    ("target-accuracy", float, 1.0, "target stop accuracy"),
    ("mc-passes", int, 20, "stochastic passes for mc-* strategies"),
    ("ensemble", int, 5, "members for ens-* strategies"),
    ("bins", int, 10, "calibration bins"),
    ("spars-steps", int, 20, "sparsification grid steps"),
    ("epochs", int, 30, "inner training epochs"),
    ("lr", float, 1e-3, "Adam learning rate"),
    ("batch-size", int, 32, "minibatch size"),
    ("fc-widths", str, "64,64", "comma-separated hidden widths"),
    ("dropout", float, 0.5, "dropout rate"),
    ("weight-decay", float, 1e-4, "L2 coefficient"),
    ("loc-weight", float, 1.0, "location loss weight"),
    ("seed", int, 0, "master seed"),
]


def add_run_parser(sub):
    p = sub.add_parser("run", description="Execute active-learning runs.")
    p.add_argument("--config")
    for flag, typ, default, hlp in RUN_FLAGS:
        req = default is None
        p.add_argument(f"--{flag}", type=typ, default=default, required=req, help=hlp)
    p.add_argument("--out", required=True)
    return p


def echo_config(path, args) -> None:
    with open(path, "w") as f:
        for flag, _, _, _ in RUN_FLAGS:
            f.write(f"{flag} = {getattr(args, flag.replace('-', '_'))}\n")


def build_configs(args, strategy, train_ds):
    loop_cfg = al.LoopConfig(
        seed_per_class=args.seed_per_class, query_batch=args.query,
        max_steps=args.steps, strategy=strategy, repetitions=args.reps,
        stop_rule=args.stop_rule, conv_epsilon=args.conv_epsilon,
        conv_window=args.conv_window, target_accuracy=args.target_accuracy,
        mc_passes=args.mc_passes, ensemble_size=args.ensemble,
        calibration_bins=args.bins, sparsification_steps=args.spars_steps)
    widths = tuple(int(w) for w in args.fc_widths.split(","))
    net_cfg = net.NetworkConfig(
        input_shape=train_ds.features.shape[1:], fc_widths=widths,
        dropout_rate=args.dropout, num_classes=train_ds.num_classes,
        loc_weight=args.loc_weight, weight_decay=args.weight_decay,
        learning_rate=args.lr, epochs=args.epochs, batch_size=args.batch_size)
    return loop_cfg, net_cfg


METRIC_COLUMNS = ("step", "labeled", "accuracy", "loc_mse",
                  "calibration_error", "error_sum")


def write_metrics_csv(path, records, class_names) -> None:
    header = list(METRIC_COLUMNS) + [f"queried_class_{i}" for i in range(len(class_names))]
    rows = []
    for r in records:
        rows.append([r.step, r.labeled_count, r.accuracy, r.loc_mse,
                     r.calibration_error, r.error_sum]
                    + [int(c) for c in r.queried_class_counts])
    write_csv(path, header, rows)


def write_calibration_csv(path, curves) -> None:
    header = ["step", "bin", "lower", "upper", "mean_confidence",
              "empirical_accuracy", "count"]
    rows = []
    for step, c in enumerate(curves):
        for b in range(c.counts.size):
            rows.append([step, b, c.edges[b], c.edges[b + 1], c.mean_confidence[b],
                         c.empirical_accuracy[b], int(c.counts[b])])
    write_csv(path, header, rows)


def write_errorcurve_csv(path, error_curves) -> None:
    header = ["step", "fraction", "method_loss", "oracle_loss"]
    rows = []
    for step, (m, o) in enumerate(error_curves):
        for f, ml, ol in zip(m.fractions, m.mean_loss, o.mean_loss):
            rows.append([step, f, ml, ol])
    write_csv(path, header, rows)


def dataset_fingerprint(ds) -> str:
    h = hashlib.blake2b(digest_size=16)
    for arr in (ds.features, ds.labels, ds.locations, ds.loc_mask):
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def full_pool_reference(train_ds, test_ds, net_cfg, seed, cache_dir):
    """Accuracy/MSE of a model trained on the whole pool, cached by
    (dataset hash, NetworkConfig hash, seed) so repeated strategies reuse it."""
    key = hashlib.blake2b(
        (dataset_fingerprint(train_ds) + dataset_fingerprint(test_ds)
         + json.dumps(net_cfg.to_dict(), sort_keys=True) + str(seed)).encode(),
        digest_size=16).hexdigest()
    cache_path = os.path.join(cache_dir, f"{key}.json")
    if os.path.exists(cache_path):
        with open(cache_path) as f:
            return json.load(f)
    model, _ = net.train(train_ds.features, train_ds.labels, train_ds.locations,
                         train_ds.loc_mask, net_cfg,
                         RngStream(seed).substream("reference"))
    pred = net.forward(model, test_ds.features)
    acc = met.accuracy(met.predicted_classes(pred.class_probs), test_ds.labels)
    mse = met.loc_mse(pred.loc, test_ds.locations, test_ds.loc_mask) \
        if test_ds.loc_mask.any() else 0.0
    ref = {"labeled": len(train_ds), "accuracy": acc, "loc_mse": mse}
    os.makedirs(cache_dir, exist_ok=True)
    with open(cache_path, "w") as f:
        json.dump(ref, f)
    return ref


def cmd_run(args) -> int:
    train_ds = dg.dataset_read(os.path.join(args.data, "train"))
    test_ds = dg.dataset_read(os.path.join(args.data, "test"))
    strategies = [s.strip() for s in args.strategy.split(",") if s.strip()]
    for s in strategies:
        if s not in unc.STRATEGIES:
            raise UsageError(f"unknown strategy {s!r}; expected one of "
                             + ", ".join(unc.STRATEGIES))
    os.makedirs(args.out, exist_ok=True)
    echo_config(os.path.join(args.out, "config.echo"), args)
    cache_dir = os.path.join(args.out, ".refcache")

    for rep in range(args.reps):
        seed = args.seed + rep
        ref = None
        for strategy in strategies:
            loop_cfg, net_cfg = build_configs(args, strategy, train_ds)
            if ref is None:
                ref = full_pool_reference(train_ds, test_ds, net_cfg, seed, cache_dir)
                write_csv(os.path.join(args.out, f"reference_{rep}.csv"),
                          ["labeled", "accuracy", "loc_mse"],
                          [[ref["labeled"], ref["accuracy"], ref["loc_mse"]]])
            result = al.run_loop(train_ds, test_ds, loop_cfg, net_cfg, seed)
            tag = f"{strategy}_{rep}"
            write_metrics_csv(os.path.join(args.out, f"metrics_{tag}.csv"),
                              result.records, train_ds.class_names)
            al.write_query_log(os.path.join(args.out, f"querylog_{tag}.txt"),
                               result.query_log)
            write_calibration_csv(os.path.join(args.out, f"calibration_{tag}.csv"),
                                  result.calibration_curves)
            write_errorcurve_csv(os.path.join(args.out, f"errorcurve_{tag}.csv"),
                                 result.error_curves)
            if strategy == strategies[0]:
                write_csv(os.path.join(args.out, f"poolcounts_{rep}.csv"),
                          ["class_index", "class_name", "count"],
                          [[i, name, int(c)] for i, (name, c) in
                           enumerate(zip(train_ds.class_names, result.pool_class_counts))])
            final = result.records[-1]
            print(f"rep {rep} strategy {strategy}: {len(result.records)} steps, "
                  f"final accuracy {final.accuracy:.4f} at {final.labeled_count} labels"
                  + (f" ({loop_cfg.ensemble_size} members trained per step)"
                     if strategy.startswith("ens-") else ""))
    return 0


# ---------------------------------------------------------------------------
# report

def add_report_parser(sub):
    p = sub.add_parser("report", description="Labels-needed and savings tables.")
    p.add_argument("--config")
    p.add_argument("--runs", required=True, help="output directory of a run")
    p.add_argument("--baseline", default="random")
    p.add_argument("--thresholds", default="0.05,0.02,0.01",
                   help="comma-separated relative-error thresholds")
    p.add_argument("--kind", choices=("accuracy", "mse"), default="accuracy")
    p.add_argument("--out", help="also write the table as CSV here")
    return p


def discover_runs(runs_dir):
    """Map strategy -> sorted repetition list from metrics_* file names."""
    found = {}
    for name in sorted(os.listdir(runs_dir)):
        if name.startswith("metrics_") and name.endswith(".csv"):
            stem = name[len("metrics_"):-len(".csv")]
            strategy, rep = stem.rsplit("_", 1)
            found.setdefault(strategy, []).append(int(rep))
    return {s: sorted(r) for s, r in found.items()}


def load_history(runs_dir, strategy, rep):
    rows = read_csv_dicts(os.path.join(runs_dir, f"metrics_{strategy}_{rep}.csv"))
    labeled = [int(r["labeled"]) for r in rows]
    acc = [float(r["accuracy"]) for r in rows]
    mse = [float(r["loc_mse"]) for r in rows]
    return labeled, acc, mse


def load_reference(runs_dir, rep):
    rows = read_csv_dicts(os.path.join(runs_dir, f"reference_{rep}.csv"))
    return float(rows[0]["accuracy"]), float(rows[0]["loc_mse"])


def cmd_report(args) -> int:
    runs = discover_runs(args.runs)
    if not runs:
        raise ValueError(f"no metrics_*.csv files found in {args.runs}")
    if args.baseline not in runs:
        raise ValueError(f"baseline strategy {args.baseline!r} has no runs in {args.runs}; "
                         f"found: {', '.join(runs)}")
    thresholds = [float(t) for t in args.thresholds.split(",")]

    # labels needed per (strategy, threshold, rep)
    needed = {}
    for strategy, reps in runs.items():
        for rep in reps:
            labeled, acc, mse = load_history(args.runs, strategy, rep)
            ref_acc, ref_mse = load_reference(args.runs, rep)
            series = acc if args.kind == "accuracy" else mse
            reference = ref_acc if args.kind == "accuracy" else ref_mse
            for tau in thresholds:
                needed[(strategy, tau, rep)] = met.labels_to_reach(
                    labeled, series, reference, tau, args.kind)

    def stats(vals):
        hit = [v for v in vals if v is not None]
        if not hit:
            return None
        return sum(hit) / len(hit), min(hit), max(hit)

    header = ["strategy", "threshold", "labels_mean", "labels_min", "labels_max",
              "savings_vs_baseline"]
    rows = []
    for strategy in sorted(runs):
        for tau in thresholds:
            vals = [needed[(strategy, tau, r)] for r in runs[strategy]]
            base_vals = [needed[(args.baseline, tau, r)] for r in runs[args.baseline]]
            st = stats(vals)
            if st is None:
                rows.append([strategy, tau, "unreached", "unreached", "unreached", ""])
                continue
            mean, lo, hi = st
            bst = stats(base_vals)
            saving = met.labeling_savings(mean, bst[0]) if bst else None
            rows.append([strategy, tau, mean, lo, hi,
                         saving if saving is not None else "unreached-baseline"])

    widths = [max(len(h), max((len(fmt_value(r[i])) for r in rows), default=0))
              for i, h in enumerate(header)]
    print("  ".join(h.ljust(w) for h, w in zip(header, widths)))
    for row in rows:
        print("  ".join(fmt_value(v).ljust(w) for v, w in zip(row, widths)))
    if args.out:
        write_csv(args.out, header, rows)
    return 0


# ---------------------------------------------------------------------------
# plot-data

def add_plotdata_parser(sub):
    p = sub.add_parser("plot-data", description="Emit plot-ready CSV series.")
    p.add_argument("--config")
    p.add_argument("--runs", required=True)
    p.add_argument("--baseline", default="random", help="baseline for classdelta")
    p.add_argument("--step", type=int, default=-1,
                   help="step for calibration/errorcurve snapshots; -1 = last")
    p.add_argument("--out", required=True)
    return p


def cmd_plotdata(args) -> int:
    runs = discover_runs(args.runs)
    if not runs:
        raise ValueError(f"no metrics_*.csv files found in {args.runs}")
    os.makedirs(args.out, exist_ok=True)

    # learning curves: every metrics row, tagged by strategy and repetition
    lc_rows = []
    max_step = 0
    for strategy in sorted(runs):
        for rep in runs[strategy]:
            for r in read_csv_dicts(os.path.join(args.runs, f"metrics_{strategy}_{rep}.csv")):
                lc_rows.append([strategy, rep, int(r["step"]), int(r["labeled"]),
                                float(r["accuracy"]), float(r["loc_mse"]),
                                float(r["calibration_error"]), float(r["error_sum"])])
                max_step = max(max_step, int(r["step"]))
    write_csv(os.path.join(args.out, "learning_curve.csv"),
              ["strategy", "rep", "step", "labeled", "accuracy", "loc_mse",
               "calibration_error", "error_sum"], lc_rows)

    step = args.step if args.step >= 0 else max_step
    cal_rows, err_rows = [], []
    for strategy in sorted(runs):
        for rep in runs[strategy]:
            tag = f"{strategy}_{rep}"
            for r in read_csv_dicts(os.path.join(args.runs, f"calibration_{tag}.csv")):
                if int(r["step"]) == step:
                    cal_rows.append([strategy, rep, int(r["bin"]), r["lower"], r["upper"],
                                     r["mean_confidence"], r["empirical_accuracy"],
                                     int(r["count"])])
            for r in read_csv_dicts(os.path.join(args.runs, f"errorcurve_{tag}.csv")):
                if int(r["step"]) == step:
                    err_rows.append([strategy, rep, r["fraction"], r["method_loss"],
                                     r["oracle_loss"]])
    write_csv(os.path.join(args.out, f"calibration_step{step}.csv"),
              ["strategy", "rep", "bin", "lower", "upper", "mean_confidence",
               "empirical_accuracy", "count"], cal_rows)
    write_csv(os.path.join(args.out, f"errorcurve_step{step}.csv"),
              ["strategy", "rep", "fraction", "method_loss", "oracle_loss"], err_rows)

    # queried-class distribution deltas vs the baseline strategy
    if args.baseline not in runs:
        raise ValueError(f"classdelta needs baseline runs; expected "
                         f"metrics_{args.baseline}_<rep>.csv in {args.runs}")
    delta_rows = []
    for strategy in sorted(runs):
        for rep in runs[strategy]:
            if rep not in runs[args.baseline]:
                continue
            pc = read_csv_dicts(os.path.join(args.runs, f"poolcounts_{rep}.csv"))
            pool_counts = np.array([float(r["count"]) for r in pc])
            names = [r["class_name"] for r in pc]

            def step_counts(strat):
                rows = read_csv_dicts(os.path.join(args.runs, f"metrics_{strat}_{rep}.csv"))
                cols = [f"queried_class_{i}" for i in range(len(pool_counts))]
                return np.array([[float(r[c]) for c in cols] for r in rows[1:]])

            al_counts = step_counts(strategy)
            base_counts = step_counts(args.baseline)
            steps = min(len(al_counts), len(base_counts))
            delta = met.class_distribution_delta(al_counts[:steps],
                                                 base_counts[:steps], pool_counts)
            for s in range(steps):
                for i, name in enumerate(names):
                    delta_rows.append([strategy, rep, s + 1, i, name, delta[s, i]])
    write_csv(os.path.join(args.out, "classdelta.csv"),
              ["strategy", "rep", "step", "class_index", "class_name", "delta"],
              delta_rows)
    print(f"wrote plot data for step {step} to {args.out}")
    return 0


# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="alforge",
                                     description="Active-learning experiment engine.")
    sub = parser.add_subparsers(dest="command", required=True)
    add_gen_data_parser(sub)
    add_run_parser(sub)
    add_report_parser(sub)
    add_plotdata_parser(sub)
    return parser


COMMANDS = {
    "gen-data": cmd_gen_data,
    "run": cmd_run,
    "report": cmd_report,
    "plot-data": cmd_plotdata,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        argv = inject_config_defaults(argv)
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 2
    except SystemExit as e:
        return 2 if e.code not in (0, None) else 0
    try:
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 2
    except (OSError, ValueError, net.DimensionError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
