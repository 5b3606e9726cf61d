"""Run the static9 resource sharing benchmark with both flow variants.

Drives the command line interface once per variant, then prints a side by
side summary from the written reports. Traces land under --out-dir.
"""

import argparse
import json
from pathlib import Path

from feasiflow.cli import main as cli_main


def run_variant(variant: str, args) -> dict:
    out_dir = Path(args.out_dir) / variant
    argv = [
        "run",
        "--scenario", "static9",
        "--variant", variant,
        "--k0", str(args.k0),
        "--dt", str(args.dt),
        "--horizon", str(args.horizon),
        "--out-dir", str(out_dir),
    ]
    code = cli_main(argv)
    if code != 0:
        raise SystemExit(f"{variant} run failed with exit code {code}")
    with open(out_dir / "report.json", encoding="utf-8") as fh:
        return json.load(fh)


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--k0", type=float, default=1.0)
    parser.add_argument("--dt", type=float, default=0.01)
    parser.add_argument("--horizon", type=float, default=20.0)
    parser.add_argument("--out-dir", default="out/static9")
    args = parser.parse_args()

    reports = {v: run_variant(v, args) for v in ("dense", "sparse")}

    print()
    print(f"{'variant':<8} {'final rel gap':>14} {'max violation':>14} "
          f"{'consensus':>10} {'aux':>5} {'wall s':>7}")
    for variant, rep in reports.items():
        print(f"{variant:<8} {rep['final_rel_gap']:>14.3e} "
              f"{rep['max_violation']:>14.3e} {rep['final_consensus']:>10.2e} "
              f"{rep['aux_scalars']:>5d} {rep['wall_time_s']:>7.1f}")
    print(f"\noracle cost: {reports['dense']['oracle_cost']:.9f}")


if __name__ == "__main__":
    main()
