"""Accuracy per round for every defense under one attack at one malicious share.

    python3 scripts/compare_defenses.py --malicious 8 --attack sign_flip --seed 0
"""
import argparse
from dataclasses import replace

from fedsv.attacks import AttackSpec
from fedsv.orchestrator import DEFENSES, DefenseConfig, desk_scale_config, run


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--malicious", type=int, default=8, help="number of malicious clients (of 20)")
    ap.add_argument("--attack", default="sign_flip")
    ap.add_argument("--rounds", type=int, default=40)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--every", type=int, default=5, help="print every k-th round")
    args = ap.parse_args()

    base = desk_scale_config(rounds=args.rounds, master_seed=args.seed)
    series = {"fedavg (clean)": run(replace(base, defense=DefenseConfig("fedavg")))}
    attacked = replace(base, num_malicious=args.malicious, attack=AttackSpec(args.attack))
    for d in DEFENSES:
        series[d] = run(replace(attacked, defense=DefenseConfig(d)))

    names = list(series)
    print("round " + " ".join(f"{n:>15}" for n in names))
    for t in range(args.every - 1, args.rounds, args.every):
        print(f"{t + 1:>5} " + " ".join(f"{series[n].records[t].accuracy:>15.4f}" for n in names))
    bar = 0.8 * series["fedavg (clean)"].final_accuracy
    print(f"\nsuccess bar (0.8 x clean fedavg) = {bar:.4f}")
    for n in DEFENSES:
        mark = "meets" if series[n].final_accuracy >= bar else "fails"
        print(f"  {n:<14} {series[n].final_accuracy:.4f}  {mark}")


if __name__ == "__main__":
    main()
