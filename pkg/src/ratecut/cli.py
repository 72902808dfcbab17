"""Command-line interface.

Subcommands:
    gen            synthetic features -> cgf file
    train          config + features -> checkpoint + log
    eval           checkpoint + features -> metrics JSON on stdout
    dump-affinity  checkpoint + features -> "i j w" triples file
    dump-curves    training log -> CSV curve files

Exit codes: 0 success, 1 usage/config error, 2 data/format error,
3 numerical failure.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from ratecut import data as data_mod
from ratecut.coding_rate import EmbeddingBatch
from ratecut.data import ConfigError, FormatError, SyntheticSpec
from ratecut.graph import DegenerateGraphError, build_affinity
from ratecut.network import load_checkpoint, save_checkpoint
from ratecut.optim import NumericalError
from ratecut.trainer import TrainConfig, TrainLog, evaluate, train

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3


def _build_parser():
    parser = argparse.ArgumentParser(prog="ratecut",
                                     description="Structured-embedding clustering toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("gen", help="generate a synthetic feature file")
    p_gen.add_argument("--out", required=True)
    p_gen.add_argument("--kind", default="orthogonal_subspaces",
                       choices=["orthogonal_subspaces", "gaussian_blobs"])
    p_gen.add_argument("--k", type=int, required=True)
    p_gen.add_argument("--ambient-dim", type=int, required=True)
    p_gen.add_argument("--points-per-cluster", type=int, required=True)
    p_gen.add_argument("--subspace-dim", type=int, default=3)
    p_gen.add_argument("--blob-sigma", type=float, default=0.1)
    p_gen.add_argument("--noise", type=float, default=0.0)
    p_gen.add_argument("--seed", type=int, default=0)

    p_train = sub.add_parser("train", help="train on a feature file")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--features", required=True)
    p_train.add_argument("--out-dir", required=True)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--features", required=True)
    p_eval.add_argument("--sparsity", type=int, default=10)
    p_eval.add_argument("--seed", type=int, default=0)

    p_aff = sub.add_parser("dump-affinity", help="write the affinity as 'i j w' triples")
    p_aff.add_argument("--checkpoint", required=True)
    p_aff.add_argument("--features", required=True)
    p_aff.add_argument("--out", required=True)
    p_aff.add_argument("--sparsity", type=int, default=10)

    p_curves = sub.add_parser("dump-curves", help="convert a training log to CSV")
    p_curves.add_argument("--log", required=True)
    p_curves.add_argument("--out-prefix", required=True)
    return parser


def _load_ckpt(path):
    try:
        return load_checkpoint(path)
    except ValueError as exc:  # malformed checkpoint is a data error, not usage
        raise FormatError(str(exc)) from None


def _cmd_gen(args):
    spec = SyntheticSpec(kind=args.kind, k=args.k, ambient_dim=args.ambient_dim,
                         points_per_cluster=args.points_per_cluster,
                         subspace_dim=args.subspace_dim, blob_sigma=args.blob_sigma,
                         noise=args.noise, seed=args.seed)
    fm = data_mod.gen_synthetic(spec)
    data_mod.save_cgf(fm, args.out)
    print(f"wrote {fm.n_points} x {fm.dim} features to {args.out}")
    return EXIT_OK


def _cmd_train(args):
    cfg = TrainConfig.from_mapping(data_mod.load_config(args.config))
    fm = data_mod.load_features(args.features)
    model, log = train(cfg, fm)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out_dir / "checkpoint.cgmc")
    (out_dir / "log.json").write_text(log.to_json())
    (out_dir / "curves_iterations.csv").write_text(log.iterations_csv())
    (out_dir / "curves_evals.csv").write_text(log.evals_csv())
    print(f"wrote checkpoint and logs to {out_dir}")
    return EXIT_OK


def _cmd_eval(args):
    model = _load_ckpt(args.checkpoint)
    fm = data_mod.load_features(args.features)
    result = evaluate(model, fm, sparsity=args.sparsity, seed=args.seed)
    payload = {"n": result["n"], "k": result["k"]}
    if "acc_ch" in result:
        payload.update({key: result[key] for key in ("acc_ch", "nmi_ch", "acc_sc", "nmi_sc")})
    else:
        counts = np.bincount(result["labels_ch"], minlength=result["k"])
        payload["pseudo_label_histogram"] = counts.tolist()
    print(json.dumps(payload))
    return EXIT_OK


def _cmd_dump_affinity(args):
    model = _load_ckpt(args.checkpoint)
    fm = data_mod.load_features(args.features)
    z, _, _ = model.forward(fm.features, train=False)
    zb = EmbeddingBatch(z, eps=1.0, validate=False)
    graph = build_affinity(zb, s=min(args.sparsity, fm.n_points))
    with open(args.out, "w") as fh:
        for i, j, w in graph.triples():
            fh.write(f"{i} {j} {w:.17g}\n")
    print(f"wrote affinity triples to {args.out}")
    return EXIT_OK


def _cmd_dump_curves(args):
    log = TrainLog.from_json(Path(args.log).read_text())
    iters_path = f"{args.out_prefix}_iterations.csv"
    evals_path = f"{args.out_prefix}_evals.csv"
    Path(iters_path).write_text(log.iterations_csv())
    Path(evals_path).write_text(log.evals_csv())
    print(f"wrote {iters_path} and {evals_path}")
    return EXIT_OK


_COMMANDS = {
    "gen": _cmd_gen,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "dump-affinity": _cmd_dump_affinity,
    "dump-curves": _cmd_dump_curves,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, DegenerateGraphError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
