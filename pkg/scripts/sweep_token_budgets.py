#!/usr/bin/env python3
"""Token-budget sweep: one run per budget on an identical seed and feed.

Shows how probability adjustment depth and temporal drift respond to the
reasoning budget; the budget-sensitive probe agent contracts toward 0.5 as
the budget grows while the copier stays untouched.
"""

from __future__ import annotations

import argparse
import json
from pathlib import Path

from driftmark.evalloop import token_budget_sweep


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seed", type=int, default=11)
    parser.add_argument("--markets", type=int, default=60)
    parser.add_argument("--cycles", type=int, default=8)
    parser.add_argument("--agents", default="budget_noise,market_copier")
    parser.add_argument("--budgets", default="500,1000,2000,4000")
    parser.add_argument("--out", type=Path, default=Path("runs"))
    args = parser.parse_args()

    report = token_budget_sweep(
        args.out,
        seed=args.seed,
        agent_ids=args.agents.split(","),
        feed_source={"kind": "synthetic", "n_markets": args.markets},
        cycles=args.cycles,
        budgets=tuple(int(b) for b in args.budgets.split(",")),
        mode="observation",
    )
    dest = args.out / "sweep_report.json"
    dest.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True), encoding="utf-8")

    print(f"{'budget':>7} {'agent':<18} {'mean|dP|':>10} {'mean dT':>10} {'gap vs first':>13}")
    for row in report.rows:
        dprob = "-" if row.mean_abs_dprob is None else f"{row.mean_abs_dprob:.6f}"
        print(
            f"{row.budget:>7} {row.agent_id:<18} {dprob:>10} "
            f"{row.mean_d_temporal:>10.6f} {row.max_prob_gap_vs_first_budget:>13.6f}"
        )
    print(f"\nwrote {dest}")


if __name__ == "__main__":
    main()
