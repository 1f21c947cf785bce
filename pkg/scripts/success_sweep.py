"""Success rate (final accuracy >= 0.8 x clean FedAvg) per defense and malicious share.

    python3 scripts/success_sweep.py --fractions 0.2,0.4,0.5,0.55 --reps 10
"""
import argparse

from fedsv.attacks import AttackSpec
from fedsv.orchestrator import DEFENSES, desk_scale_config, run_sweep, success_rates


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--fractions", default="0.2,0.4,0.5,0.55")
    ap.add_argument("--reps", type=int, default=5)
    ap.add_argument("--attack", default="sign_flip")
    ap.add_argument("--defenses", default=",".join(DEFENSES))
    ap.add_argument("--rounds", type=int, default=40)
    args = ap.parse_args()

    fractions = [float(f) for f in args.fractions.split(",")]
    defenses = args.defenses.split(",")
    base = desk_scale_config(rounds=args.rounds, attack=AttackSpec(args.attack))
    rates = success_rates(run_sweep(base, fractions, args.reps, defenses))

    print(f"{'defense':<14}" + "".join(f"{f:>8.2f}" for f in fractions))
    for d in defenses:
        print(f"{d:<14}" + "".join(f"{100 * rates[(d, f)]:>7.0f}%" for f in fractions))


if __name__ == "__main__":
    main()
