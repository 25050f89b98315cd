"""Command-line entry point: ``dermalite <subcommand> [flags]``."""

from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import logging
import sys
import time
import zlib
from pathlib import Path

import numpy as np

from . import __version__
from .dataio import CLASSES, ImageSet, NdArray, load_dataset_bytes, write_npz
from .errors import DatasetError, DermaliteError, FormatError, LabelOutOfRange, ShapeMismatch

log = logging.getLogger("dermalite")

INPUT_ERRORS = (FormatError, DatasetError, ShapeMismatch, LabelOutOfRange)


class InputError(Exception):
    """Bad input file: exit status 2."""


def derive_seed(seed: int, tag: str) -> int:
    """Deterministic 32-bit sub-seed for one consumer of randomness."""
    return int(np.random.SeedSequence([seed, zlib.crc32(tag.encode())]).generate_state(1)[0])


class Run:
    """Collects inputs, outputs and timings for the run manifest."""

    def __init__(self, args, argv):
        self.args = args
        self.argv = list(argv)
        self.inputs = {}
        self.outputs = []
        self.seeds = {"seed": args.seed}
        self.timings = {}
        self.started = time.perf_counter()
        self.out_dir = Path(getattr(args, "out_dir", "out"))

    def read_input(self, path) -> bytes:
        try:
            buf = Path(path).read_bytes()
        except OSError as exc:
            raise InputError(f"cannot read {path}: {exc.strerror}") from None
        self.inputs[str(path)] = hashlib.sha256(buf).hexdigest()
        return buf

    def load(self, path):
        buf = self.read_input(path)
        t = time.perf_counter()
        try:
            sets = load_dataset_bytes(buf)
        except INPUT_ERRORS as exc:
            raise InputError(f"{path}: {type(exc).__name__}: {exc}") from None
        self.timings["load"] = time.perf_counter() - t
        return sets

    def seed_for(self, tag):
        s = derive_seed(self.args.seed, tag)
        self.seeds[tag] = s
        return s

    def path(self, name) -> Path:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        p = self.out_dir / name
        p.parent.mkdir(parents=True, exist_ok=True)
        self.outputs.append(name)
        return p

    def add_outputs(self, paths):
        for p in paths:
            self.outputs.append(str(Path(p).relative_to(self.out_dir)))

    def write_manifest(self):
        self.timings["total"] = time.perf_counter() - self.started
        flags = {k: v for k, v in vars(self.args).items() if k != "func"}
        doc = {"toolkit_version": __version__, "subcommand": self.args.command,
               "argv": self.argv, "flags": flags, "seeds": self.seeds,
               "inputs": self.inputs,
               "outputs": sorted(set(self.outputs)) + ["manifest.json"],
               "timings_seconds": self.timings}
        self.out_dir.mkdir(parents=True, exist_ok=True)
        (self.out_dir / "manifest.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _write_json(path, doc):
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


# -- subcommands -------------------------------------------------------------

def cmd_inspect(run: Run):
    from .analysis import class_histogram, imbalance_index

    train, val, test = run.load(run.args.data)
    hist = class_histogram(train)
    try:
        index = imbalance_index(hist)
    except DermaliteError:
        index = None
    summary = {
        "split_sizes": {s.split: len(s) for s in (train, val, test)},
        "class_counts": {s.split: {c.acronym: n for c, n in zip(CLASSES, class_histogram(s).counts)}
                         for s in (train, val, test)},
        "train_counts_by_index": list(hist.counts),
        "train_counts_descending": sorted(hist.counts, reverse=True),
        "imbalance_index": index,
        "imbalance_index_2dp": None if index is None else f"{index:.2f}",
    }
    _write_json(run.path("summary.json"), summary)
    if run.args.json:
        print(json.dumps(summary, indent=1, sort_keys=True))
        return
    print("split sizes: " + ", ".join(f"{k} {v}" for k, v in summary["split_sizes"].items()))
    print("train class counts:")
    for c, n in zip(CLASSES, hist.counts):
        print(f"  {c.index} {c.acronym:2s} {n:6d}  {c.name}")
    print("descending: " + ", ".join(str(n) for n in summary["train_counts_descending"]))
    if index is None:
        print("imbalance index: undefined (empty class)")
    else:
        print(f"imbalance index: {index:.2f} ({index:.6f})")


def _split(sets, name) -> ImageSet:
    return {s.split: s for s in sets}[name]


def cmd_stats(run: Run):
    from . import analysis
    from .svg import scatter_svg

    images = _split(run.load(run.args.data), run.args.split)
    run.out_dir.mkdir(parents=True, exist_ok=True)
    run.add_outputs(analysis.write_stats(run.out_dir, images, bins=run.args.bins))
    corr = analysis.correlation_matrix(images)
    feats = analysis.set_channel_means(images)
    for i, j in ((0, 1), (0, 2), (1, 2)):
        a, b = analysis.CHANNEL_NAMES[i], analysis.CHANNEL_NAMES[j]
        scatter_svg(run.path(f"scatter_{a}{b}.svg".lower()), feats[:, [i, j]], images.labels,
                    title=f"mean {a} vs mean {b} (r = {corr[i, j]:.3f})",
                    xlabel=f"mean {a}", ylabel=f"mean {b}")
    names = analysis.CHANNEL_NAMES
    off = {f"{names[i]}{names[j]}": float(corr[i, j]) for i, j in ((0, 1), (0, 2), (1, 2))}
    result = {"split": images.split, "n": len(images), "correlation_offdiagonal": off,
              "strongest_pair": max(off, key=off.get)}
    _write_json(run.path("stats_summary.json"), result)
    print(json.dumps(result, indent=1, sort_keys=True) if run.args.json else
          "channel correlations: " + ", ".join(f"{k} {v:.4f}" for k, v in off.items()))


def _kmeans_config(run: Run):
    from .selection import KMeansConfig
    a = run.args
    return KMeansConfig(k=a.k, max_iter=a.max_iter, tol=a.tol, seed=run.seed_for("kmeans"), init=a.init)


def _plan_for(run: Run, train):
    from .selection import SelectionPlan, build_selection_plan
    if getattr(run.args, "plan", None):
        try:
            return SelectionPlan.from_json(run.read_input(run.args.plan).decode())
        except (ValueError, KeyError) as exc:
            raise InputError(f"{run.args.plan}: malformed selection plan: {exc}") from None
    t = time.perf_counter()
    plan = build_selection_plan(train, _kmeans_config(run), run.args.aug_target,
                                getattr(run.args, "channels", "rgb"))
    run.timings["selection"] = time.perf_counter() - t
    return plan


def cmd_select(run: Run):
    from .selection import materialize

    train, _, _ = run.load(run.args.data)
    plan = _plan_for(run, train)
    run.path("selection_plan.json").write_text(plan.to_json())
    if run.args.export_npz:
        sel = materialize(train, plan)
        run.path("selected_train.npz").write_bytes(write_npz({
            "train_images": NdArray.from_numpy(sel.images),
            "train_labels": NdArray.from_numpy(sel.labels.astype(np.uint8).reshape(-1, 1))}))
    sizes = plan.class_sizes()
    if run.args.json:
        print(json.dumps({"class_sizes": sizes, "total": sum(sizes)}))
    else:
        print("class sizes: " + ", ".join(f"{c.acronym} {n}" for c, n in zip(CLASSES, sizes))
              + f" (total {sum(sizes)})")


def cmd_embed(run: Run):
    from . import embedding as E
    from .selection import flatten_batch, materialize
    from .svg import scatter_svg

    a = run.args
    train, _, _ = run.load(a.data)
    images = materialize(train, _plan_for(run, train), "rgb") if a.after else train
    idx = E.stratified_subsample(images.labels, a.cap, run.seed_for("subsample"))
    x = flatten_batch(images.images[idx])
    labels = images.labels[idx]
    t = time.perf_counter()
    if a.method == "tsne":
        emb = E.tsne(x, E.TsneConfig(perplexity=a.perplexity, output_dim=a.dim,
                                     iterations=a.iterations, learning_rate=a.learning_rate,
                                     seed=run.seed_for("tsne")), labels=labels)
    else:
        emb = E.isomap(x, E.IsomapConfig(k_neighbors=a.knn, output_dim=a.dim,
                                         seed=run.seed_for("isomap")), labels=labels)
    run.timings["embedding"] = time.perf_counter() - t
    E.write_embedding_csv(run.path("embedding.csv"), emb, source_indices=idx)
    stage = "after selection" if a.after else "before selection"
    scatter_svg(run.path("embedding.svg"), emb.coordinates, emb.labels,
                title=f"{a.method} {stage}", xlabel="dim 1", ylabel="dim 2")
    summary = {"method": a.method, "stage": "after" if a.after else "before",
               "points": int(len(idx)), "embedded": int(len(emb.indices)),
               "dropped_indices": [int(idx[i]) for i in emb.dropped],
               emb.diagnostic_name: emb.diagnostic,
               "class_dispersion": {CLASSES[c].acronym: v for c, v in E.class_dispersion(emb).items()}}
    _write_json(run.path("embedding_summary.json"), summary)
    print(json.dumps(summary, indent=1, sort_keys=True) if a.json else
          f"{a.method} ({stage}): {len(emb.indices)} points embedded, "
          f"{emb.diagnostic_name} {emb.diagnostic:.4f}")


def _training_data(run: Run):
    from .experiment import ExperimentData
    from .selection import drop_channels, materialize

    train, val, test = run.load(run.args.data)
    c = run.args.channels
    if run.args.no_select:
        tr = ImageSet("train", drop_channels(train.images, c), train.labels)
    else:
        tr = materialize(train, _plan_for(run, train), c)
    return train, val, test, ExperimentData(
        tr, ImageSet("val", drop_channels(val.images, c), val.labels),
        ImageSet("test", drop_channels(test.images, c), test.labels))


def cmd_train(run: Run):
    from .experiment import TrainConfig, evaluate, train, write_metrics_csv
    from .nn.checkpoint import save_checkpoint
    from .nn.network import PAPER_PARAM_REFERENCE, NetworkConfig, param_count

    a = run.args
    _, _, _, data = _training_data(run)
    net_cfg = NetworkConfig(input_channels=len(a.channels), activation=a.activation)
    cfg = TrainConfig(a.epochs, a.batch_size, a.lr, a.channels, a.activation, run.seed_for("train"), 1)
    t = time.perf_counter()
    params, history = train(net_cfg, data.train, data.val, cfg, cfg.seed)
    run.timings["training"] = time.perf_counter() - t
    acc = evaluate(params, data.test)
    write_metrics_csv(run.path("metrics.csv"), history)
    run.add_outputs(save_checkpoint(params, run.path("checkpoint")))
    run.outputs.remove("checkpoint")
    report = {"activation": a.activation, "channel_config": a.channels, "epochs": a.epochs,
              "seed": cfg.seed, "test_accuracy_percent": 100.0 * acc,
              "train_size": len(data.train), "param_count": param_count(net_cfg),
              "paper_param_reference": PAPER_PARAM_REFERENCE}
    _write_json(run.path("train_report.json"), report)
    print(json.dumps(report, indent=1, sort_keys=True) if a.json else
          f"test accuracy {100 * acc:.2f}% ({param_count(net_cfg)} parameters)")


def cmd_experiment(run: Run):
    from .experiment import TrainConfig, planned_cells, run_grid
    from .nn.network import PAPER_PARAM_REFERENCE

    a = run.args
    cells = planned_cells(a.activations, a.channel_configs)
    if a.dry_run:
        for act, ch, n in cells:
            print(f"{act:5s} {ch:4s} {n:8d} parameters (reference ~{PAPER_PARAM_REFERENCE})")
        return
    train, val, test = run.load(a.data)
    plan = _plan_for(run, train)
    run.path("selection_plan.json").write_text(plan.to_json())
    base = TrainConfig(a.epochs, a.batch_size, a.lr, "rgb", "relu", run.seed_for("train"), a.repetitions)
    t = time.perf_counter()
    grid = run_grid(base, train, val, test, plan, a.activations, a.channel_configs,
                    out_dir=run.out_dir)
    run.timings["grid"] = time.perf_counter() - t
    for (act, ch), rep in grid.cells.items():
        run.timings[f"{act}/{ch}"] = rep.wall_clock_seconds
        for r in range(len(rep.accuracies)):
            for suffix in (f"metrics_rep{r}.csv", f"checkpoint_rep{r}.json", f"checkpoint_rep{r}.bin"):
                run.outputs.append(f"{act}_{ch}/{suffix}")
    run.path("run_report.json").write_text(grid.to_json())
    grid.write_table(run.path("table1.csv"))
    print(Path(run.out_dir / "table1.csv").read_text(), end="")


def cmd_gradcheck(run: Run):
    from .nn.gradcheck import THRESHOLD, run_gradcheck

    results = run_gradcheck(run.args.instances, run.seed_for("gradcheck"))
    with open(run.path("gradcheck.csv"), "w") as fh:
        fh.write("kernel,max_relative_error,passed\n")
        for k, v in results.items():
            fh.write(f"{k},{v!r},{int(v < THRESHOLD)}\n")
    ok = all(v < THRESHOLD for v in results.values())
    if run.args.json:
        print(json.dumps({"max_relative_error": results, "passed": ok}, indent=1))
    else:
        print(f"{'kernel':14s} {'max rel err':>12s}")
        for k, v in results.items():
            print(f"{k:14s} {v:12.3e} {'ok' if v < THRESHOLD else 'FAIL'}")
    return 0 if ok else 1


# -- parser ------------------------------------------------------------------

def _channels(value):
    v = value.lower()
    if v not in ("rgb", "rg", "rb"):
        raise argparse.ArgumentTypeError("channel config must be rgb, rg or rb")
    return v


def _csv_list(choices):
    def parse(value):
        items = [v.strip().lower() for v in value.split(",") if v.strip()]
        bad = [v for v in items if v not in choices]
        if bad or not items:
            raise argparse.ArgumentTypeError(f"choose from {', '.join(choices)}")
        return items
    return parse


def _positive(value):
    n = int(value)
    if n < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return n


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out-dir", default="out", help="directory for outputs (default: out)")
    common.add_argument("--seed", type=int, default=0, help="master seed (default: 0)")
    common.add_argument("--threads", type=_positive, default=None, help="cap BLAS worker threads")
    common.add_argument("--json", action="store_true", help="machine-readable stdout")
    common.add_argument("-v", "--verbose", action="store_true")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--data", required=True, help="DermaMNIST-style .npz archive")

    sel = argparse.ArgumentParser(add_help=False)
    sel.add_argument("--k", type=_positive, default=1000, help="clusters for the majority class")
    sel.add_argument("--aug-target", type=int, default=400, help="size target for DF and VL")
    sel.add_argument("--max-iter", type=_positive, default=100)
    sel.add_argument("--tol", type=float, default=1e-4)
    sel.add_argument("--init", choices=("kmeans++", "random-points"), default="kmeans++")
    sel.add_argument("--plan", help="reuse a selection_plan.json instead of running k-means")

    train = argparse.ArgumentParser(add_help=False)
    train.add_argument("--epochs", type=int, default=50)
    train.add_argument("--batch-size", type=_positive, default=32)
    train.add_argument("--lr", type=float, default=1e-4)

    p = argparse.ArgumentParser(prog="dermalite", description=__doc__)
    p.add_argument("--version", action="version", version=f"dermalite {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("inspect", parents=[common, data], help="split sizes, class counts")
    s.set_defaults(func=cmd_inspect)

    s = sub.add_parser("stats", parents=[common, data], help="channel statistics tables")
    s.add_argument("--split", choices=("train", "val", "test"), default="train")
    s.add_argument("--bins", type=_positive, default=32)
    s.set_defaults(func=cmd_stats)

    s = sub.add_parser("select", parents=[common, data, sel], help="k-means instance selection")
    s.add_argument("--channels", type=_channels, default="rgb")
    s.add_argument("--export-npz", action="store_true", help="also write selected_train.npz")
    s.set_defaults(func=cmd_select)

    s = sub.add_parser("embed", parents=[common, data, sel], help="t-SNE / Isomap embeddings")
    s.add_argument("--method", choices=("tsne", "isomap"), default="tsne")
    g = s.add_mutually_exclusive_group()
    g.add_argument("--before", dest="after", action="store_false", help="raw training split (default)")
    g.add_argument("--after", dest="after", action="store_true", help="selection-reduced split")
    s.add_argument("--perplexity", type=float, default=30.0)
    s.add_argument("--iterations", type=int, default=1000)
    s.add_argument("--learning-rate", type=float, default=200.0)
    s.add_argument("--knn", type=_positive, default=10)
    s.add_argument("--cap", type=_positive, default=2000, help="max points, stratified by class")
    s.add_argument("--dim", type=int, choices=(2, 3), default=2)
    s.set_defaults(func=cmd_embed, after=False)

    s = sub.add_parser("train", parents=[common, data, sel, train], help="train one model")
    s.add_argument("--activation", choices=("relu", "elu", "gelu"), default="elu")
    s.add_argument("--channels", type=_channels, default="rgb")
    s.add_argument("--no-select", action="store_true", help="train on the full training split")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("experiment", parents=[common, sel, train], help="activation x channel grid")
    s.add_argument("--data", help="DermaMNIST-style .npz archive (not needed with --dry-run)")
    s.add_argument("--repetitions", type=_positive, default=5)
    s.add_argument("--activations", type=_csv_list(("relu", "elu", "gelu")),
                   default=["relu", "elu", "gelu"])
    s.add_argument("--channel-configs", type=_csv_list(("rgb", "rg", "rb")),
                   default=["rgb", "rg", "rb"])
    s.add_argument("--dry-run", action="store_true", help="list planned cells and exit")
    s.set_defaults(func=cmd_experiment)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    s.add_argument("--instances", type=_positive, default=20)
    s.set_defaults(func=cmd_gradcheck)
    return p


def _thread_limit(n):
    if n is None:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.command == "experiment" and not args.dry_run and not args.data:
        print("dermalite experiment: error: --data is required unless --dry-run", file=sys.stderr)
        return 2
    run = Run(args, argv)
    try:
        with _thread_limit(args.threads):
            status = args.func(run) or 0
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DermaliteError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    if not (args.command == "experiment" and args.dry_run):
        run.write_manifest()
    return status


def main_entry():
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
