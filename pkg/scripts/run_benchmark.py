"""Train every benchmark config on the synthetic set and run the occlusion sweep.

Usage: python scripts/run_benchmark.py [--work runs/] [--skip-ablation]
"""

import argparse
import json
import sys
from pathlib import Path

from shapereg.cli import main as shapereg

ROOT = Path(__file__).resolve().parent.parent
CONFIGS = ROOT / "configs"
RUNS = ("point_transformer_disp", "pointnet_disp", "pixel_baseline", "mean_shape")


def run(*args: str) -> None:
    code = shapereg(list(args))
    if code:
        sys.exit(code)


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--work", default="runs")
    p.add_argument("--skip-ablation", action="store_true")
    args = p.parse_args()
    work = Path(args.work)
    data = work / "data"
    if not (data / "manifest.json").exists():
        run("generate-data", "--config", str(CONFIGS / "synthetic.json"), "--out", str(data), "--seed", "0")
    for name in RUNS:
        run("train", "--config", str(CONFIGS / f"{name}.json"), "--data", str(data), "--out", str(work / name))

    print(f"{'run':<26}{'DSC':>14}{'ASD (mm)':>18}")
    for name in RUNS:
        avg = json.loads((work / name / "report.json").read_text())["average"]
        print(f"{name:<26}{avg['dsc_mean']:>8.2f}±{avg['dsc_sd']:<5.2f}{avg['asd_mean']:>11.3f}±{avg['asd_sd']:.3f}")

    if not args.skip_ablation:
        runs = ",".join(str(work / n) for n in ("point_transformer_disp", "pixel_baseline", "mean_shape"))
        run("ablate", "--runs", runs, "--data", str(data), "--out", str(work / "ablation.csv"))


if __name__ == "__main__":
    main()
