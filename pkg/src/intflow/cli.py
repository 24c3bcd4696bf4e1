"""Command line front end.

Subcommands: train, compress, decompress, eval, flatten-demo, analyze.
Every command echoes the configuration it actually ran with.  Exit codes:
0 on success, 2 for configuration or usage problems, 3 for broken inputs
or streams, 4 when training diverges.

``IDF_THREADS`` caps the numeric thread pools (set before numpy loads,
which is why the heavy imports live inside the command bodies), and
``IDF_SEED`` overrides the configured seed when no ``--seed`` is given.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from .errors import (
    ConfigError,
    DomainError,
    IntflowError,
    ParameterError,
    StreamCorruptionError,
    StreamFormatError,
    TrainingDivergence,
    UsageError,
)

_THREAD_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
)


def _set_thread_env() -> None:
    threads = os.environ.get("IDF_THREADS")
    if threads:
        for var in _THREAD_VARS:
            os.environ.setdefault(var, threads)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="idf", description="Lossless compression with integer discrete flows."
    )
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="train a model from a config file")
    train.add_argument("--config", required=True, help="INI run configuration")
    train.add_argument("--out", help="output directory (overrides run.out_dir)")
    train.add_argument("--seed", type=int, help="training seed override")

    compress = sub.add_parser("compress", help="compress one raw image")
    compress.add_argument("--model", required=True, help="trained model file")
    compress.add_argument("--in", dest="input", required=True, help="raw image file")
    compress.add_argument("--out", required=True, help="compressed stream file")

    decompress = sub.add_parser("decompress", help="decode one compressed stream")
    decompress.add_argument("--model", required=True, help="trained model file")
    decompress.add_argument("--in", dest="input", required=True, help="compressed stream file")
    decompress.add_argument("--out", required=True, help="raw image output file")

    evaluate = sub.add_parser("eval", help="exact validation rate of a model")
    evaluate.add_argument("--config", required=True, help="INI run configuration")
    evaluate.add_argument("--model", required=True, help="trained model file")

    flatten = sub.add_parser("flatten-demo", help="flatten a toy joint and audit it")
    flatten.add_argument("--bits", type=int, default=1, help="toy source bit depth")

    analyze = sub.add_parser("analyze", help="gradient and landscape experiments")
    analyze.add_argument("--config", required=True, help="INI run configuration")
    analyze.add_argument("--model", help="trained model file (else trains in process)")
    analyze.add_argument("--out", help="output directory (overrides run.out_dir)")
    analyze.add_argument("--seed", type=int, help="seed override")
    analyze.add_argument(
        "--what",
        choices=("agreement", "estimators", "landscape", "all"),
        default="agreement",
        help="which experiment family to run",
    )
    return parser


def _resolve_seed(args) -> int | None:
    seed = getattr(args, "seed", None)
    if seed is not None:
        return seed
    env = os.environ.get("IDF_SEED")
    if not env:
        return None
    try:
        return int(env)
    except ValueError as exc:
        raise ConfigError(f"IDF_SEED must be an integer, got {env!r}") from exc


def _load_run(args):
    """Load the config file and apply seed overrides; echoes the result."""
    from dataclasses import replace

    from .config import load_config, render_config

    rc = load_config(args.config)
    seed = _resolve_seed(args)
    if seed is not None:
        rc = replace(rc, train=replace(rc.train, seed=seed))
    print(render_config(rc), end="")
    return rc


def _echo_model(model) -> None:
    print("[model]")
    for key, value in sorted(model.config.to_dict().items()):
        print(f"{key} = {value}")
    print()


def _cmd_train(args) -> int:
    from .config import build_dataset
    from .flows import build_flow_model, save_model
    from .train import train as run_train

    rc = _load_run(args)
    out_dir = Path(args.out or rc.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset = build_dataset(rc.data)
    model = build_flow_model(rc.model)
    model.initialize(rc.train.seed)
    result = run_train(
        model,
        dataset,
        rc.train,
        metrics_path=out_dir / "metrics.csv",
        checkpoint_dir=out_dir,
    )
    save_model(model, out_dir / "model.idfm")
    print(f"epochs_run = {result.epochs_run}")
    print(f"final_bpd = {result.final_bpd:.6f}")
    print(f"model = {out_dir / 'model.idfm'}")
    return 0


def _cmd_compress(args) -> int:
    from .codec import compress, stream_bpd
    from .data import read_raw_image
    from .flows import load_model

    model = load_model(args.model)
    _echo_model(model)
    image = read_raw_image(args.input)
    blob = compress(model, image)
    Path(args.out).write_bytes(blob)
    print(f"bytes = {len(blob)}")
    print(f"stream_bpd = {stream_bpd(blob):.6f}")
    return 0


def _cmd_decompress(args) -> int:
    from .codec import decompress
    from .data import write_raw_image
    from .flows import load_model

    model = load_model(args.model)
    _echo_model(model)
    raw = Path(args.input).read_bytes()
    image = decompress(model, raw)
    write_raw_image(args.out, image)
    print(f"shape = {image.shape}")
    return 0


def _cmd_eval(args) -> int:
    from .config import build_dataset
    from .flows import load_model

    rc = _load_run(args)
    model = load_model(args.model)
    dataset = build_dataset(rc.data)
    print(f"val_bpd = {dataset.eval_bpd(model):.6f}")
    return 0


def _cmd_flatten_demo(args) -> int:
    import numpy as np

    from .analysis import flatten_demo, toy_pmf

    pmf = toy_pmf(args.bits)
    demo = flatten_demo(pmf)
    print(f"counts = {demo.counts}")
    print(f"entropy_bpd = {demo.entropy_bpd:.6f}")
    print(f"flatten_bpd = {demo.bpd:.6f}")
    if demo.pushed is not None:
        print("pushed joint over the output box:")
        print(np.array2string(demo.pushed, precision=6, suppress_small=True))
        print(f"second_singular = {demo.second_singular:.3e}")
        rank_one = demo.second_singular <= 1e-12
        print(f"rank_one = {rank_one}")
    return 0


def _cmd_analyze(args) -> int:
    from . import analysis
    from .config import build_dataset
    from .flows import build_flow_model, load_model
    from .train import train as run_train

    rc = _load_run(args)
    out_dir = Path(args.out or rc.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset = build_dataset(rc.data)
    iterations = rc.train.epochs * rc.train.iters_per_epoch
    wants = ("agreement", "estimators", "landscape") if args.what == "all" else (args.what,)

    result = None
    if args.model:
        model = load_model(args.model)
    else:
        model = build_flow_model(rc.model)
        model.initialize(rc.train.seed)
        result = run_train(model, dataset, rc.train)

    if "agreement" in wants:
        records = analysis.agreement_sweep(model, dataset, seed=rc.train.seed)
        analysis.write_agreement_csv(
            records, out_dir / "agreement.csv", {"source": args.config}
        )
        for eps, mean in analysis.mean_by_epsilon(records).items():
            print(f"agreement eps={eps:.2e} mean_cosine={mean:.4f}")
    if "estimators" in wants:
        results = analysis.estimator_matrix(bits=rc.data.bits, iterations=iterations)
        analysis.write_estimator_csv(
            results, out_dir / "estimators.csv", {"source": args.config}
        )
        for key, mean in sorted(analysis.estimator_means(results).items()):
            print(f"estimator {key[2]} fwd={key[0]} bwd={key[1]} bpd={mean:.4f}")
    if "landscape" in wants:
        if result is None:
            result = run_train(model, dataset, rc.train)
        axis1, axis2 = analysis.landscape_axes(result.checkpoints)
        slc = analysis.landscape_slice(
            model,
            lambda: dataset.eval_bpd(model),
            axis1,
            axis2,
            checkpoints=result.checkpoints,
        )
        analysis.write_landscape_csv(
            slc,
            out_dir / "landscape.csv",
            trajectory_path=out_dir / "trajectory.csv",
            metadata={"source": args.config},
        )
        print(f"landscape center bpd={slc.base_loss:.4f}")
    return 0


_COMMANDS = {
    "train": _cmd_train,
    "compress": _cmd_compress,
    "decompress": _cmd_decompress,
    "eval": _cmd_eval,
    "flatten-demo": _cmd_flatten_demo,
    "analyze": _cmd_analyze,
}


def main(argv=None) -> int:
    _set_thread_env()
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, UsageError, ParameterError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingDivergence as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except (StreamFormatError, StreamCorruptionError, DomainError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except IntflowError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
