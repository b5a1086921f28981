#!/usr/bin/env python3
"""Produce the cached runs behind acceptance criteria 7-9.

Runs every config in configs/acceptance/ for 10 replicates into
results/acceptance/. Finished replicates (a results.json with status "ok")
are skipped, so the script can be interrupted and restarted. The solve
threshold comes from configs/oracle_reward.json, which is computed first if
it is missing.

    python scripts/run_acceptance.py [--jobs N] [--only LABEL ...]
"""
import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from gpmi.experiment import ExperimentConfig, oracle_reward, run_dir, run_replicate

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs" / "acceptance"
ORACLE_CONFIG = ROOT / "configs" / "oracle.json"
ORACLE_OUT = ROOT / "configs" / "oracle_reward.json"
OUT = ROOT / "results" / "acceptance"


def threshold() -> float:
    if not ORACLE_OUT.exists():
        logging.info("computing R* with %s", ORACLE_CONFIG)
        out = oracle_reward(ExperimentConfig.load(ORACLE_CONFIG))
        ORACLE_OUT.write_text(json.dumps(out, indent=2) + "\n")
    return json.loads(ORACLE_OUT.read_text())["solve_threshold"]


def done(cfg, k) -> bool:
    path = run_dir(cfg, k) / "results.json"
    return path.exists() and json.loads(path.read_text()).get("status") == "ok"


def job(args):
    path, k, thr = args
    cfg = ExperimentConfig.load(path)
    cfg.output_dir = str(OUT)
    cfg.solve_threshold = thr
    res = run_replicate(cfg, k, run_dir(cfg, k))
    return cfg.label, k, res.status, [round(r, 4) for r in res.rewards]


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--jobs", type=int, default=1, help="replicates run side by side")
    p.add_argument("--only", nargs="*", default=None, help="config labels to run")
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    thr = threshold()
    todo = []
    for path in sorted(CONFIGS.glob("*.json")):
        cfg = ExperimentConfig.load(path)
        cfg.output_dir = str(OUT)
        if args.only and cfg.label not in args.only:
            continue
        todo += [(path, k, thr) for k in range(cfg.replicates) if not done(cfg, k)]
    # interleave configs so partial results cover every comparison
    todo.sort(key=lambda t: (t[1], t[0].name))
    logging.info("%d replicates to run, solve threshold %.4f", len(todo), thr)

    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            results = pool.map(job, todo)
            for label, k, status, rewards in results:
                logging.info("%s rep %d %s %s", label, k, status, rewards)
    else:
        for t in todo:
            label, k, status, rewards = job(t)
            logging.info("%s rep %d %s %s", label, k, status, rewards)
    return 0


if __name__ == "__main__":
    sys.exit(main())
