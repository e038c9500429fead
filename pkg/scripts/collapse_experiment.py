#!/usr/bin/env python3
"""Train the three set similarities on the default synthetic world across
seeds and report test retrieval, circular variance, and slot ablation."""
import argparse
import json
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from setsim.runner import collapse_experiment  # noqa: E402


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--epochs", type=int, default=None,
                    help="override the experiment's default epoch count")
    ap.add_argument("--out", default=None, help="optional JSON results path")
    args = ap.parse_args()

    kwargs = {"seeds": tuple(args.seeds)}
    if args.epochs is not None:
        kwargs["epochs"] = args.epochs

    def progress(kind, entry):
        print(f"  {kind:9s} seed={entry['seed']} rsum={entry['rsum']:7.2f} "
              f"circvar={entry['circular_variance']:.4f} "
              f"({entry['wall_clock_sec']:.0f}s)", flush=True)

    results = collapse_experiment(progress=progress, **kwargs)

    print("\nper-kind summary (mean over seeds):")
    for kind, entries in results.items():
        rsums = [e["rsum"] for e in entries]
        cvs = [e["circular_variance"] for e in entries]
        print(f"  {kind:9s} rsum {sum(rsums) / len(rsums):7.2f}   "
              f"circular variance {sum(cvs) / len(cvs):.4f}")

    if args.out:
        Path(args.out).write_text(json.dumps(results, indent=2, sort_keys=True))
        print(f"\nwrote {args.out}")


if __name__ == "__main__":
    main()
