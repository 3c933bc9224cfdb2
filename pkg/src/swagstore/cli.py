"""Command-line entry point.

    swagstore bench run --config experiments.toml
    swagstore bench summarize results/
    swagstore bench layout --rows 4096 --cols 64 --backend tiered:cache_capacity_bytes=65536
    swagstore train --synthetic --epochs 2 --out run/
    swagstore eval --model-dir run/ --synthetic
    swagstore size --params 2800000 --rank 600 --width 4

Exit codes: 0 success, 1 usage, 2 data/format error, 3 storage error,
4 divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import bench
from .bayes import bma_predict, evaluate, point_predict
from .exceptions import StorageError, SwagstoreError
from .store import BackendConfig, make_backend
from .swag import SwagPosterior, estimate_size
from .trainer import PRESETS, Dataset, MlpModel, TrainConfig, load_mnist, sgd_epoch, synthetic_dataset

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_STORAGE, EXIT_DIVERGENCE = 0, 1, 2, 3, 4
_GIB = 1024**3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _layers(text):
    if text in PRESETS:
        return PRESETS[text]
    try:
        return tuple(int(x) for x in text.split("-"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a preset or sizes like 784-32-32-10, got {text!r}")


def _add_data_args(p):
    group = p.add_mutually_exclusive_group()
    group.add_argument("--mnist", metavar="DIR", help="directory holding the MNIST IDX files")
    group.add_argument("--synthetic", action="store_true", help="use synthetic Gaussian blobs (default)")
    p.add_argument("--synthetic-samples", type=int, default=6000)


def _dataset(args, layers, seed, split="train"):
    if args.mnist:
        return load_mnist(args.mnist, split)
    # held-out synthetic data: same class centres, fresh draws
    data = synthetic_dataset(seed, args.synthetic_samples * (2 if split == "test" else 1), layers[0], layers[-1])
    if split == "test":
        return Dataset(data.inputs[args.synthetic_samples:], data.labels[args.synthetic_samples:], data.n_classes)
    return data


def build_parser():
    parser = _Parser(prog="swagstore", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    b = sub.add_parser("bench", help="storage benchmarks")
    bsub = b.add_subparsers(dest="bench_command", required=True, parser_class=_Parser)
    run = bsub.add_parser("run", help="run experiments from a TOML/JSON config")
    run.add_argument("--config", required=True, type=Path)
    run.add_argument("--output-dir", type=Path, help="overrides output_dir in the config")
    run.add_argument("--baseline", default="in_memory")
    summ = bsub.add_parser("summarize", help="summarize results.json files under a directory")
    summ.add_argument("directory", type=Path)
    summ.add_argument("--baseline", default="in_memory")
    lay = bsub.add_parser("layout", help="row- vs column-major column-write comparison")
    lay.add_argument("--rows", type=int, required=True)
    lay.add_argument("--cols", type=int, required=True)
    lay.add_argument("--backend", default="in_memory", help="kind[:key=value,...]")
    lay.add_argument("--writes", type=int)
    lay.add_argument("--width", type=int, default=4, choices=(4, 8))

    t = sub.add_parser("train", help="train the MLP and collect a SWAG posterior")
    _add_data_args(t)
    t.add_argument("--layers", type=_layers, default=PRESETS["desk"])
    t.add_argument("--epochs", type=int, default=1)
    t.add_argument("--learning-rate", type=float, default=0.05)
    t.add_argument("--minibatch-size", type=int, default=100)
    t.add_argument("--minibatches-per-epoch", type=int, default=600)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--burn-in", type=int, default=0)
    t.add_argument("--max-columns", type=int, default=20)
    t.add_argument("--backend", default="in_memory", help="kind[:key=value,...]")
    t.add_argument("--out", type=Path, required=True)

    e = sub.add_parser("eval", help="point vs SWAG-BMA predictive metrics")
    _add_data_args(e)
    e.add_argument("--model-dir", type=Path, required=True)
    e.add_argument("--samples", type=int, default=30)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--split", choices=("train", "test"), default="test")

    s = sub.add_parser("size", help="deviation-matrix size for P parameters at rank K")
    s.add_argument("--params", type=int, required=True)
    s.add_argument("--rank", type=int, required=True)
    s.add_argument("--width", type=int, default=4)
    return parser


def cmd_bench_run(args):
    specs = bench.load_experiments(args.config)
    out = args.output_dir or Path(specs[0].output_dir or "bench-results")
    results = []
    for spec in specs:
        spec.output_dir = str(out)
        logging.info("running %s (%d reps, %d epochs)", spec.backend.name, spec.repetitions, spec.train.epochs)
        results.append(bench.run_experiment(spec))
    names = {r.backend for r in results}
    summary = bench.summarize(results, baseline=args.baseline if args.baseline in names else None)
    for path in bench.emit(results, summary, out):
        print(path)
    return EXIT_OK


def cmd_bench_summarize(args):
    results = bench.load_results(args.directory)
    if not results:
        raise StorageError(f"no results.json under {args.directory}")
    summary = bench.summarize(results, baseline=args.baseline)
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def cmd_bench_layout(args):
    report = bench.layout_pathology(args.rows, args.cols, BackendConfig.parse(args.backend),
                                    n_writes=args.writes, element_width=args.width)
    for key in ("row", "col"):
        report[key].pop("miss_trace")
    print(json.dumps(report, indent=2))
    return EXIT_OK


def cmd_train(args):
    layers = args.layers
    data = _dataset(args, layers, args.seed)
    config = TrainConfig(args.minibatch_size, args.minibatches_per_epoch, args.epochs,
                         args.learning_rate, args.seed)
    model = MlpModel(layers, seed=args.seed)
    posterior = SwagPosterior(burn_in=args.burn_in, max_columns=args.max_columns,
                              backend=make_backend(args.backend))
    posterior.allocate(model.n_params)
    for epoch in range(config.epochs):
        loss = sgd_epoch(model, data, config, posterior.update, epoch)
        logging.info("epoch %d loss %.6f", epoch + 1, loss)
    args.out.mkdir(parents=True, exist_ok=True)
    np.save(args.out / "model.npy", model.flatten())
    (args.out / "model.json").write_text(json.dumps({"layer_sizes": list(layers), "seed": args.seed}))
    with open(args.out / "posterior.swag", "wb") as fh:
        posterior.checkpoint(fh)
    print(json.dumps({"n_params": model.n_params, "rank": posterior.rank_, "final_loss": loss,
                      "out": str(args.out)}))
    return EXIT_OK


def cmd_eval(args):
    meta = json.loads((args.model_dir / "model.json").read_text())
    layers = tuple(meta["layer_sizes"])
    model = MlpModel(layers, params=np.load(args.model_dir / "model.npy"))
    with open(args.model_dir / "posterior.swag", "rb") as fh:
        posterior = SwagPosterior.restore(fh)
    data = _dataset(args, layers, meta.get("seed", 0), args.split)
    point = evaluate(point_predict(model, data.inputs), data.labels)
    print(json.dumps(point.to_record("point", 1, args.seed)))
    if args.samples > 0:
        bma = evaluate(bma_predict(model, posterior, data.inputs, args.samples, args.seed), data.labels)
        print(json.dumps(bma.to_record("swag_bma", args.samples, args.seed)))
    return EXIT_OK


def cmd_size(args):
    nbytes = estimate_size(args.params, args.rank, args.width)
    print(json.dumps({"params": args.params, "rank": args.rank, "width": args.width,
                      "bytes": nbytes, "gib": round(nbytes / _GIB, 3)}))
    return EXIT_OK


_COMMANDS = {
    ("bench", "run"): cmd_bench_run,
    ("bench", "summarize"): cmd_bench_summarize,
    ("bench", "layout"): cmd_bench_layout,
    ("train", None): cmd_train,
    ("eval", None): cmd_eval,
    ("size", None): cmd_size,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handler = _COMMANDS[(args.command, getattr(args, "bench_command", None))]
    try:
        return handler(args)
    except SwagstoreError as exc:
        print(f"swagstore: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except (FileNotFoundError, IsADirectoryError) as exc:
        print(f"swagstore: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"swagstore: storage error: {exc}", file=sys.stderr)
        return EXIT_STORAGE
    except ValueError as exc:
        print(f"swagstore: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
