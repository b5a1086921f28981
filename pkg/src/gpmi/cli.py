"""Command line: ``gpmi run | plot | oracle-reward``.

Every command prints one JSON object on stdout. Failures exit nonzero and
print ``{"error": ..., "type": ...}``.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .experiment import (ConfigError, ExperimentConfig, NoDataError, emit_curves,
                         oracle_reward, run_dir, run_replicate)

EXIT_CONFIG = 2
EXIT_NO_DATA = 3
EXIT_RUN_FAILED = 4
EXIT_INTERNAL = 1


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gpmi", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="run replicates of an experiment config")
    run.add_argument("--config", required=True, type=Path)
    run.add_argument("--replicate", type=int, default=None,
                     help="run only this replicate index (default: all)")
    run.add_argument("--seed", type=int, default=None, help="override the master seed")
    run.add_argument("--output-dir", type=Path, default=None)

    plot = sub.add_parser("plot", help="write median/quartile curves for a results directory")
    plot.add_argument("--dir", required=True, type=Path)
    plot.add_argument("--png", action="store_true", help="also draw a figure (needs matplotlib)")

    oracle = sub.add_parser("oracle-reward", help="compute the reference return R*")
    oracle.add_argument("--config", required=True, type=Path)
    oracle.add_argument("--out", type=Path, default=None, help="also write the JSON here")
    return p


def _load(path: Path, seed, output_dir=None) -> ExperimentConfig:
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    cfg = ExperimentConfig.load(path)
    if seed is not None:
        cfg.seed = seed
    if output_dir is not None:
        cfg.output_dir = str(output_dir)
    return cfg


def _cmd_run(args) -> int:
    cfg = _load(args.config, args.seed, args.output_dir)
    reps = range(cfg.replicates) if args.replicate is None else [args.replicate]
    summary = []
    for k in reps:
        if k < 0:
            raise ConfigError("--replicate must be non-negative")
        res = run_replicate(cfg, k, run_dir(cfg, k))
        summary.append({"replicate": k, "status": res.status, "error": res.error,
                        "rewards": res.rewards, "solved_episode": res.solved_episode,
                        "dir": str(run_dir(cfg, k))})
    failed = [s for s in summary if s["status"] != "ok"]
    out = {"runs": summary}
    if failed:
        out["error"] = f"{len(failed)} of {len(summary)} replicates failed"
        out["type"] = "RunFailed"
    print(json.dumps(out))
    return EXIT_RUN_FAILED if failed else 0


def _cmd_plot(args) -> int:
    if not args.dir.is_dir():
        raise NoDataError(f"results directory not found: {args.dir}")
    paths = emit_curves(args.dir)
    figure = None
    if args.png:
        figure = str(_draw(paths, args.dir / "curves.png"))
    print(json.dumps({"curves": [str(p) for p in paths], "figure": figure}))
    return 0


def _draw(paths, target: Path) -> Path:
    import csv

    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for path in paths:
        with open(path) as fh:
            rows = list(csv.DictReader(fh))
        t = [float(r["interaction_s"]) for r in rows]
        line, = ax.plot(t, [float(r["median"]) for r in rows],
                        label=path.stem.removeprefix("curve_"))
        ax.fill_between(t, [float(r["p25"]) for r in rows], [float(r["p75"]) for r in rows],
                        color=line.get_color(), alpha=0.25)
    ax.set_xlabel("interaction time (s)")
    ax.set_ylabel("best reward so far")
    ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(target, dpi=120)
    return target


def _cmd_oracle(args) -> int:
    cfg = _load(args.config, None)
    out = oracle_reward(cfg)
    text = json.dumps(out)
    if args.out is not None:
        args.out.write_text(json.dumps(out, indent=2) + "\n")
    print(text)
    return 0


def main(argv=None) -> int:
    try:
        args = _parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(name)s %(levelname)s %(message)s",
                            stream=sys.stderr)
        handler = {"run": _cmd_run, "plot": _cmd_plot, "oracle-reward": _cmd_oracle}
        return handler[args.command](args)
    except ConfigError as exc:
        code, err = EXIT_CONFIG, exc
    except NoDataError as exc:
        code, err = EXIT_NO_DATA, exc
    except Exception as exc:  # last-resort: still emit machine-readable JSON
        code, err = EXIT_INTERNAL, exc
    print(json.dumps({"error": str(err), "type": type(err).__name__}))
    return code


if __name__ == "__main__":
    sys.exit(main())
