"""Command-line entry point for the full workflow: generate driving data,
train the steering model, evaluate attacks, serve the live dashboard, and
manage saved perturbations.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import attacks, evaluation, model, nn, simulator


class UsageError(Exception):
    """Invalid flag values or combinations, caught before any side effect."""


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on bad flags; this tool reserves 2 for
    runtime failures, so usage problems exit 1 instead."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="advdrive",
                     description="Adversarial attacks on a neural-network "
                                 "driver in a closed-loop 2D simulator.")
    sub = parser.add_subparsers(dest="subcommand", required=True,
                                parser_class=_Parser)

    p = sub.add_parser("gen-data",
                       help="record expert driving frames with noisy "
                            "exploration")
    p.add_argument("--track", default="train_track",
                   help="bundled track name or JSON path")
    p.add_argument("--frames", type=int, default=4000)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise-std", type=float, default=0.1,
                   help="steering exploration noise")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the steering model")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--out", required=True, help="output weight file")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval",
                       help="closed-loop attack evaluation with report")
    p.add_argument("--weights", required=True)
    p.add_argument("--track", default="eval_track")
    p.add_argument("--attacks", default="all",
                   help="'all' or comma list, e.g. none,fgsmr-left")
    p.add_argument("--frames", type=int, default=evaluation.DEFAULT_FRAMES)
    p.add_argument("--epsilon", type=float,
                   default=evaluation.DEFAULT_EPSILON)
    p.add_argument("--p", choices=["2", "inf"], default="2",
                   help="universal-perturbation norm")
    p.add_argument("--xi", type=float, default=evaluation.DEFAULT_XI,
                   help="universal-perturbation budget")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json-out", help="write the report JSON here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("serve", help="run the live attack server")
    p.add_argument("--weights", required=True)
    p.add_argument("--track", default="train_track")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--mode", choices=["internal", "external"],
                   default="internal",
                   help="drive the built-in simulator, or wait for an "
                        "external one on the socket")
    p.add_argument("--headless", action="store_true",
                   help="serve the protocol only, no dashboard assets")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("uapr-learn",
                       help="learn a universal perturbation from a dataset")
    p.add_argument("--weights", required=True)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--direction", choices=list(attacks.DIRECTIONS),
                   required=True)
    p.add_argument("--p", choices=["2", "inf"], default="2")
    p.add_argument("--xi", type=float, default=evaluation.DEFAULT_XI)
    p.add_argument("--passes", type=int, default=5)
    p.add_argument("--frames", type=int, default=None,
                   help="cap on dataset frames used (default: all)")
    p.add_argument("--out", required=True, help="output perturbation file")
    p.set_defaults(func=cmd_uapr_learn)

    p = sub.add_parser("replay",
                       help="apply a saved perturbation to a dataset "
                            "offline and report deviations")
    p.add_argument("--weights", required=True)
    p.add_argument("--perturbation", required=True)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--json-out", help="write the report JSON here")
    p.set_defaults(func=cmd_replay)

    return parser


def _parse_p(value: str):
    return "inf" if value == "inf" else int(value)


def cmd_gen_data(args) -> int:
    if args.frames < 1:
        raise UsageError("--frames must be >= 1")
    if args.noise_std < 0:
        raise UsageError("--noise-std must be >= 0")
    track = simulator.resolve_track(args.track)
    frames, labels = simulator.generate_training_data(
        track, args.frames, seed=args.seed, noise_std=args.noise_std)
    model.save_dataset(args.out, frames, labels, track_name=track.name,
                       seed=args.seed)
    print(f"wrote {len(frames)} frames from {track.name} to {args.out}")
    return 0


def cmd_train(args) -> int:
    if args.epochs < 1:
        raise UsageError("--epochs must be >= 1")
    if args.lr <= 0:
        raise UsageError("--lr must be > 0")
    if args.batch_size < 1:
        raise UsageError("--batch-size must be >= 1")
    dataset = model.load_dataset(args.data)
    print(f"training on {len(dataset)} frames "
          f"(epochs={args.epochs}, lr={args.lr}, seed={args.seed})")
    result = model.train_bc(dataset, epochs=args.epochs, lr=args.lr,
                            seed=args.seed, batch_size=args.batch_size)
    for i, loss in enumerate(result.epoch_losses, 1):
        print(f"  epoch {i:3d}  train mse {loss:.6f}")
    model.save_weights(result.model, args.out)
    print(f"validation mse {result.val_mse:.6f}; weights -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    if args.frames < 1:
        raise UsageError("--frames must be >= 1")
    if args.attacks == "all":
        labels = None
    else:
        labels = [label.strip() for label in args.attacks.split(",")
                  if label.strip()]
        known = {label for label, _ in evaluation.standard_configs()}
        unknown = [label for label in labels if label not in known]
        if unknown:
            raise UsageError(f"unknown attack labels {unknown}; choose from "
                             f"{sorted(known)} or 'all'")
        if not labels:
            raise UsageError("--attacks must name at least one attack")
    net = model.load_weights(args.weights)
    track = simulator.resolve_track(args.track)
    results = evaluation.run_suite(
        net, track, labels=labels, epsilon=args.epsilon,
        p=_parse_p(args.p), xi=args.xi, n_frames=args.frames,
        seed=args.seed, progress=lambda note: print(f"... {note}"))
    print(evaluation.format_table(results))
    if args.json_out:
        evaluation.write_report(results, args.json_out)
        print(f"report -> {args.json_out}")
    return 0


def cmd_serve(args) -> int:
    from . import server

    net = model.load_weights(args.weights)
    track = simulator.resolve_track(args.track)
    print(f"serving {args.weights} on {args.host}:{args.port} "
          f"({args.mode} simulator, track {track.name})")
    server.serve(net, track, host=args.host, port=args.port,
                 internal_sim=(args.mode == "internal"),
                 headless=args.headless)
    return 0


def cmd_uapr_learn(args) -> int:
    if args.passes < 1:
        raise UsageError("--passes must be >= 1")
    if args.frames is not None and args.frames < 1:
        raise UsageError("--frames must be >= 1")
    net = model.load_weights(args.weights)
    dataset = model.load_dataset(args.data)
    frames = dataset.images
    if args.frames is not None:
        frames = frames[:args.frames]
    p = _parse_p(args.p)
    print(f"learning universal perturbation on {len(frames)} frames "
          f"(direction={args.direction}, p={p}, xi={args.xi})")
    eta = attacks.uapr_learn(net, frames, args.direction, p, args.xi,
                             passes=args.passes)
    model.save_perturbation(eta, args.out)
    print(f"||eta||_{p} = {attacks.lp_norm(eta, p):.4f}; "
          f"perturbation -> {args.out}")
    return 0


def cmd_replay(args) -> int:
    net = model.load_weights(args.weights)
    eta = model.load_perturbation(args.perturbation)
    dataset = model.load_dataset(args.data)
    clean = np.array([nn.forward(net, x) for x in dataset.images])
    perturbed = np.array([nn.forward(net, attacks.apply(x, eta))
                          for x in dataset.images])
    dev = perturbed - clean
    abs_dev = float(np.mean(np.abs(dev)))
    clean_scale = float(np.mean(np.abs(clean)))
    rel = abs_dev / clean_scale * 100.0 if clean_scale >= 1e-6 else None
    report = {
        "frames": len(dataset),
        "abs_dev": abs_dev,
        "rel_dev_pct": rel,
        "rmse": float(np.sqrt(np.mean(dev ** 2))),
    }
    rel_text = "n/a" if rel is None else f"{rel:.2f}%"
    print(f"replayed {report['frames']} frames: "
          f"abs_dev {abs_dev:.4f}, rel_dev {rel_text}, "
          f"rmse {report['rmse']:.4f}")
    if args.json_out:
        with open(args.json_out, "w") as fh:
            json.dump(report, fh, indent=2)
            fh.write("\n")
        print(f"report -> {args.json_out}")
    return 0


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (ValueError, OSError, RuntimeError,
            model.WeightFileError, simulator.ExpertLostError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 2


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
