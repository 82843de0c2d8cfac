#!/usr/bin/env python3
"""Train and evaluate every catalogued problem through the command line."""
import argparse
import shlex
import subprocess
import sys
from pathlib import Path

PROBLEMS = ["dr1p", "dr2p", "adv_rhs", "diff2d"]


def run_command(command: str, check: bool = True) -> bool:
    print(f"Running: {command}")
    result = subprocess.run(shlex.split(command), check=False)
    if check and result.returncode != 0:
        print(f"❌ exited with {result.returncode}")
    return result.returncode == 0


def train(problem: str, out: Path, seed: int, epochs: str) -> bool:
    return run_command(
        f"poetry run weighted-minres train --problem {problem} --seed {seed} "
        f"--output-dir {out}{epochs}"
    )


def evaluate(problem: str, out: Path, seed: int) -> bool:
    return run_command(
        f"poetry run weighted-minres eval --problem {problem} --seed {seed} "
        f"--checkpoint {out / 'checkpoint.npz'} --output-dir {out}"
    )


def compare(problem: str, out: Path, seed: int, epochs: str) -> bool:
    return run_command(
        f"poetry run weighted-minres compare-refinement --problem {problem} --seed {seed} "
        f"--output-dir {out / 'refinement'}{epochs}"
    )


def main() -> bool:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--output-root", type=Path, default=Path("runs"))
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--epochs", type=int, help="epochs per learning rate, default per problem")
    parser.add_argument("--problems", nargs="+", default=PROBLEMS, choices=PROBLEMS)
    args = parser.parse_args()
    epochs = f" --epochs {args.epochs}" if args.epochs else ""

    print("🚀 Weighted MinRes experiments")
    print("=" * 40)

    failed = []
    for problem in args.problems:
        out = args.output_root / problem / f"seed{args.seed}"
        steps = [
            ("Training", lambda: train(problem, out, args.seed, epochs)),
            ("Evaluating", lambda: evaluate(problem, out, args.seed)),
        ]
        if problem == "adv_rhs":
            steps.append(("Comparing refinement", lambda: compare(problem, out, args.seed, epochs)))

        for step_name, step_func in steps:
            print(f"\n{step_name} {problem}...")
            if not step_func():
                print(f"❌ {step_name} {problem} failed")
                failed.append(problem)
                break
        else:
            print(f"✅ {problem} done: {out}")

    print("\n" + "=" * 40)
    if failed:
        print(f"Failed: {', '.join(failed)}")
        return False
    print("🎉 All experiments finished")
    return True


if __name__ == "__main__":
    sys.exit(0 if main() else 1)
