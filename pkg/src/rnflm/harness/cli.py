"""Command line entry point.

Exit codes: 0 success, 2 configuration error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from ..data import Corpus
from ..errors import ConfigError, ContractError, NumericalAbort
from ..geometry import Curve, curve_energy, curve_length, geodesic
from ..rnf import gather_clusters, save_clusters
from .config import load_config
from .plots import plot_curvature, plot_mi_bars
from .trainer import Trainer, distinct_ratio, evaluate, format_table_row, posterior_means, sample

log = logging.getLogger("rnflm")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def _vector(text: str) -> np.ndarray:
    try:
        return np.array([float(v) for v in text.split(",")])
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated floats, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--data-dir")
    common.add_argument("--checkpoint")
    common.add_argument("--out")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = argparse.ArgumentParser(prog="rnflm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="train a model (resumes from --checkpoint)")
    p.add_argument("--objective")
    p.add_argument("--epochs", type=int)
    p.add_argument("--steps-per-epoch", type=int)
    p.add_argument("--cluster-path")

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--split", choices=["dev", "test"], default="test")
    p.add_argument("--batch-size", type=int)

    p = sub.add_parser("sample", parents=[common], help="decode sentences from prior samples")
    p.add_argument("-n", type=int, default=100)
    p.add_argument("--mode", choices=["greedy", "temperature"], default="greedy")
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--max-len", type=int, default=50)

    p = sub.add_parser("clusters", parents=[common], help="k-means over training posterior means")
    p.add_argument("-k", type=int, default=20)

    p = sub.add_parser("geodesic", parents=[common], help="geodesic between two latent points")
    p.add_argument("--start", type=_vector, help="comma-separated latent vector")
    p.add_argument("--end", type=_vector)
    p.add_argument("--sentences", type=int, nargs=2, metavar=("I", "J"),
                   help="use the posterior means of two dev sentences as endpoints")
    p.add_argument("-N", type=int, default=32, help="curve segments")
    p.add_argument("--iters", type=int, default=500)

    p = sub.add_parser("plots", parents=[common], help="MI bar chart and curvature heatmap")
    p.add_argument("--metrics", nargs="*", default=[], metavar="LABEL=CSV")
    return parser


def _require_checkpoint(args) -> Trainer:
    if not args.checkpoint:
        raise ConfigError(f"{args.command} needs --checkpoint")
    if not Path(args.checkpoint).exists():
        raise ConfigError(f"checkpoint {args.checkpoint!r} does not exist")
    return Trainer.load(args.checkpoint, write_files=False)


def _model_latents_on(trainer: Trainer) -> bool:
    return trainer.phase == "main" or trainer.cfg.pretrain_epochs == 0


def cmd_train(args) -> int:
    overrides = {"seed": args.seed, "data_dir": args.data_dir, "out": args.out, "objective": args.objective,
                 "epochs": args.epochs, "steps_per_epoch": args.steps_per_epoch, "cluster_path": args.cluster_path}
    if args.checkpoint:
        trainer = Trainer.load(args.checkpoint, out_dir=args.out)
    else:
        cfg = load_config(args.config, overrides)
        trainer = Trainer(cfg)
    trainer.fit()
    best = trainer.best_row()
    if best is not None:
        print(f"best dev epoch {best['epoch']}: {format_table_row(best)}  mi {best['mi']:.3f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    trainer = _require_checkpoint(args)
    corpus: Corpus | None = trainer.data.test if args.split == "test" else trainer.data.dev
    if corpus is None:
        raise ConfigError(f"no {args.split} split available")
    row = evaluate(trainer.model, corpus, trainer.cfg, trainer.clusters, use_flows=_model_latents_on(trainer),
                   batch_size=args.batch_size)
    print(f"{args.split}: NLL (KL) PPL = {format_table_row(row)}")
    for key, value in row.items():
        print(f"  {key} = {value}")
    return EXIT_OK


def cmd_sample(args) -> int:
    trainer = _require_checkpoint(args)
    lines = sample(trainer.model, trainer.data.vocab, args.n, seed=args.seed or 0, mode=args.mode,
                   temperature=args.temperature, max_len=args.max_len)
    text = "".join(line + "\n" for line in lines)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    print(f"distinct sentences: {len(set(lines))}/{len(lines)} ({distinct_ratio(lines):.3f})", file=sys.stderr)
    return EXIT_OK


def cmd_clusters(args) -> int:
    trainer = _require_checkpoint(args)
    codes = posterior_means(trainer.model, trainer.data.train)
    cs = gather_clusters(codes, args.k, seed=args.seed or 0)
    out = args.out or "clusters.bin"
    save_clusters(cs, out)
    print(f"wrote {cs.K} centers of dimension {cs.dim} to {out}")
    return EXIT_OK


def cmd_geodesic(args) -> int:
    trainer = _require_checkpoint(args)
    if args.sentences:
        means = posterior_means(trainer.model, trainer.data.dev)
        za, zb = means[args.sentences[0]], means[args.sentences[1]]
    elif args.start is not None and args.end is not None:
        za, zb = args.start, args.end
    else:
        raise ConfigError("geodesic needs --start/--end or --sentences")
    if za.shape != (trainer.cfg.latent,) or zb.shape != (trainer.cfg.latent,):
        raise ConfigError(f"endpoints must have dimension {trainer.cfg.latent}")
    flows = trainer.model.flows
    result = geodesic(flows, za, zb, N=args.N, iters=args.iters)
    straight = Curve.straight(za, zb, args.N)
    print(f"straight line: length {curve_length(flows, straight):.6g}  energy {curve_energy(flows, straight):.6g}")
    print(f"geodesic:      length {curve_length(flows, result.curve):.6g}  energy {result.energies[-1]:.6g}"
          f"  iterations {len(result.energies) - 1}{'' if result.converged else '  (not converged)'}")
    if args.out:
        with open(args.out, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow([f"z{i}" for i in range(za.size)])
            writer.writerows([[repr(float(v)) for v in p] for p in result.curve.points])
    return EXIT_OK


def cmd_plots(args) -> int:
    out = Path(args.out or "plots")
    out.mkdir(parents=True, exist_ok=True)
    if args.metrics:
        paths = {}
        for item in args.metrics:
            label, sep, path = item.partition("=")
            if not sep:
                label, path = Path(item).parent.name or item, item
            paths[label] = path
        bars = plot_mi_bars(paths, out / "mi")
        for label, (mi, se) in bars.items():
            print(f"MI {label}: {mi:.3f} +- {se:.3f}")
    if args.checkpoint:
        trainer = _require_checkpoint(args)
        flows = trainer.model.flows
        overlays = []
        if trainer.cfg.latent == 2 and len(flows):
            overlays = [geodesic(flows, np.array([-2.0, -2.0]), np.array([2.0, 2.0])),
                        geodesic(flows, np.array([-2.0, 2.0]), np.array([2.0, -2.0]))]
        grid = plot_curvature(flows, out / "curvature", geodesics=overlays)
        if grid is None:
            print("curvature heatmap skipped: latent dimension is not 2", file=sys.stderr)
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "sample": cmd_sample, "clusters": cmd_clusters,
            "geodesic": cmd_geodesic, "plots": cmd_plots}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose + 1, 2)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ContractError) as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except NumericalAbort as exc:
        log.error("numerical abort: %s (last good checkpoint left in place)", exc)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
