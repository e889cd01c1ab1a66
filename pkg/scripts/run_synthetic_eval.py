#!/usr/bin/env python3
"""Run a full synthetic evaluation and print the leaderboard.

Example:
    python scripts/run_synthetic_eval.py --seed 7 --markets 120 --cycles 12 \
        --agents market_copier,momentum,mean_reversion,drift_adjusted
"""

from __future__ import annotations

import argparse
from pathlib import Path

from driftmark.evalloop import EvalEngine, verify_run
from driftmark.reporting import aggregate, emit


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--markets", type=int, default=120)
    parser.add_argument("--cycles", type=int, default=12)
    parser.add_argument(
        "--agents",
        default="market_copier,momentum,mean_reversion,drift_adjusted,risk_confirmation",
    )
    parser.add_argument("--mode", choices=["execution", "observation"], default="execution")
    parser.add_argument("--out", type=Path, default=Path("runs"))
    parser.add_argument("--sort", choices=["hhis", "pnl", "brier"], default="hhis")
    args = parser.parse_args()

    engine = EvalEngine.create(
        args.out,
        seed=args.seed,
        agent_ids=args.agents.split(","),
        feed_source={"kind": "synthetic", "n_markets": args.markets},
        cycles=args.cycles,
        mode=args.mode,
    )
    result = engine.run()
    print(f"run {result.run_id}: {result.cycles_run} cycles")
    print(f"event log sha256 {result.event_log_sha256}\n")

    report = aggregate(result.events_path, sort_key=args.sort)
    print(emit(report, "table"))

    check = verify_run(args.out, result.run_id)
    print(f"verification: {'OK' if check.ok else 'FAILED'}")


if __name__ == "__main__":
    main()
