import argparse
import os
import sys

# Add project root to path
sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from src.features.artifact_store import write_csv
from src.features.experiment_config import PRESETS, preset
from src.features.experiment_runner import dp_sweep_frame, run_experiment
from src.features.report_builder import report


def main():
    parser = argparse.ArgumentParser(description="FedGC Uncertainty Studies")
    parser.add_argument("--study", nargs="+", choices=sorted(PRESETS), default=["aleatoric", "epistemic"],
                        help="Preset sweeps to run")
    parser.add_argument("--seed", type=int, default=0, help="Random seed for reproducibility")
    parser.add_argument("--T", type=int, default=None, help="Override the preset horizon")
    parser.add_argument("--threads", type=int, default=4, help="Concurrent sweep points")
    parser.add_argument("--output", type=str, default="results", help="Output root")

    args = parser.parse_args()

    print(f"[*] Starting FedGC studies {args.study} (Seed: {args.seed})...")
    failures = 0
    for name in args.study:
        overrides = {"seed": args.seed}
        if args.T is not None:
            overrides["T"] = args.T
        config = preset(name, **overrides)
        print(f"\n[+] Study '{name}': {config.sweep.axis} over {config.sweep.values}")

        result = run_experiment(config, out=args.output, threads=args.threads)
        for ctx in result.points:
            last = ctx.tracker.rows[-1] if ctx.tracker is not None and ctx.tracker.rows else {}
            traces = ", ".join(f"{k}={v:.4e}" for k, v in last.items() if k.startswith("tr_sigma_A_"))
            print(f"    {ctx.label}: {ctx.state.name} (steady: {ctx.steady_status}) {traces}")
        if result.exit_code:
            failures += 1
            continue
        if config.sweep.axis == "dp_sigma":
            write_csv(os.path.join(result.directory, "dp_sweep.csv"), dp_sweep_frame(result))

        summary = report(result.directory)
        for check in summary["checks"]:
            print(f"    -> {check['check']}: {check['status'].upper()} ({check['detail']})")

    print(f"\n[*] Studies complete. Results saved under {args.output}")
    sys.exit(1 if failures else 0)


if __name__ == "__main__":
    main()
