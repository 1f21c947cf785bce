"""Smoothed Shapley values of honest vs malicious clients over the rounds of one run.

    python3 scripts/sv_trajectories.py --malicious 8 --attack sign_flip
"""
import argparse

import numpy as np

from fedsv.attacks import AttackSpec
from fedsv.orchestrator import desk_scale_config, detection_report, run


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--malicious", type=int, default=8)
    ap.add_argument("--attack", default="sign_flip")
    ap.add_argument("--rounds", type=int, default=40)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    cfg = desk_scale_config(rounds=args.rounds, master_seed=args.seed,
                            num_malicious=args.malicious, attack=AttackSpec(args.attack))
    summary = run(cfg)
    bad = np.arange(args.malicious)
    print(f"{'round':>5} {'honest mean':>12} {'malicious mean':>15} {'excluded':>9} {'acc':>7}")
    for r in summary.records:
        honest = np.delete(r.sv_bar, bad)
        mal = r.sv_bar[bad].mean() if args.malicious else float("nan")
        print(f"{r.round:>5} {honest.mean():>12.4f} {mal:>15.4f} "
              f"{20 - len(r.selected):>9} {r.accuracy:>7.4f}")
    rep = detection_report(summary)
    print(f"\nprecision {rep.precision:.3f}  recall {rep.recall:.3f}  "
          f"all malicious excluded from round {rep.rounds_to_full_exclusion}")


if __name__ == "__main__":
    main()
