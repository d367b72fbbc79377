"""Command-line entry point: train, eval, verify, plot.

Exit codes: 0 success, 1 runtime failure, 2 usage error. Log verbosity
comes from ``PGRL_LOG_LEVEL`` (default WARNING).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2

log = logging.getLogger("pgrl")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def cmd_train(args) -> int:
    from .config import ConfigError, load_config
    from .training import Trainer, TrainingError, load_checkpoint

    try:
        config = load_config(args.config)
    except (ConfigError, OSError) as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE if isinstance(exc, ConfigError) else EXIT_FAILURE
    if args.resume:
        state = load_checkpoint(args.resume)
        if state["config"] != config.to_dict():
            print(f"checkpoint {args.resume} was written by a different config", file=sys.stderr)
            return EXIT_FAILURE
        trainer = Trainer.from_state(state)
    else:
        trainer = Trainer(config)
    try:
        trainer.train(resume=bool(args.resume))
    except TrainingError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    rate = trainer.success_rate()
    print(f"trained {trainer.update} updates, {trainer.global_step} steps; "
          f"success rate over last {len(trainer.window)} episodes: {rate:.3f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .training import evaluate, load_checkpoint

    if args.episodes < 0:
        raise UsageError("--episodes must be nonnegative")
    state = load_checkpoint(args.ckpt)
    summary = evaluate(state, args.episodes, args.deterministic, args.seed)
    summary["checkpoint"] = str(args.ckpt)
    out = args.out or str(Path(args.ckpt).with_suffix("")) + ".eval.json"
    Path(out).write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    if args.episodes == 0:
        print("0 episodes: empty summary")
    else:
        print(f"episodes {args.episodes}: return {summary['mean_return']:.4f} +- {summary['std_return']:.4f}, "
              f"success rate {summary['success_rate']:.3f}")
    print(f"summary written to {out}")
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import run_suite

    checks = run_suite(args.suite)
    for c in checks:
        print(c.line())
    failed = sum(not c.passed for c in checks)
    print(f"{len(checks) - failed}/{len(checks)} checks passed")
    return EXIT_OK if failed == 0 else EXIT_FAILURE


def moving_average(x, window: int):
    import numpy as np

    x = np.asarray(x, dtype=np.float64)
    out = np.full_like(x, np.nan)
    for i in range(len(x)):
        seg = x[max(0, i - window + 1):i + 1]
        seg = seg[np.isfinite(seg)]
        if seg.size:
            out[i] = seg.mean()
    return out


def cmd_plot(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .training import read_metrics

    if args.window < 1:
        raise UsageError("--window must be >= 1")
    rows = read_metrics(args.inp)
    steps = [r["step"] for r in rows]
    returns = [r["mean_return"] for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    if rows:
        ax.plot(steps, moving_average(returns, args.window), label=f"mean return ({args.window}-update average)")
        ax.legend(loc="best")
    ax.set_xlabel("environment steps")
    ax.set_ylabel("mean episode return")
    fig.tight_layout()
    fig.savefig(args.out)
    plt.close(fig)
    print(f"wrote {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    from .verify import SUITE_NAMES

    p = _Parser(prog="pgrl", description="Policy-gradient training and verification.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    t = sub.add_parser("train", help="train from a YAML config")
    t.add_argument("--config", required=True, help="run config (YAML)")
    t.add_argument("--resume", metavar="CKPT", help="continue from a checkpoint written by the same config")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="roll out a checkpointed policy")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--episodes", type=int, required=True)
    e.add_argument("--deterministic", action="store_true", help="use the mean (or argmax) action")
    e.add_argument("--seed", type=int, default=None, help="evaluation seed (default: the run seed)")
    e.add_argument("--out", help="JSON summary path (default: <ckpt>.eval.json)")
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("verify", help="run numerical verification suites")
    v.add_argument("--suite", required=True, choices=SUITE_NAMES)
    v.set_defaults(func=cmd_verify)

    pl = sub.add_parser("plot", help="learning curve from a metrics CSV")
    pl.add_argument("--in", dest="inp", required=True, help="metrics CSV")
    pl.add_argument("--out", required=True, help="output image (png, pdf, ...)")
    pl.add_argument("--window", type=int, default=10, help="moving-average window in updates")
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    level = os.environ.get("PGRL_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - every internal error maps to exit 1
        log.debug("command failed", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
