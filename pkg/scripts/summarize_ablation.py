"""Print the median relative-DSC curves of an ablation CSV as a text table."""

import argparse

from shapereg.experiment import median_curves, read_ablation


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("csv")
    p.add_argument("--key", default="dsc_rel", choices=["dsc_rel", "dsc_abs", "asd_mm"])
    args = p.parse_args()
    curves = median_curves(read_ablation(args.csv), args.key)
    names = sorted(curves)
    print("fraction " + " ".join(f"{n:>24}" for n in names))
    for f in sorted(next(iter(curves.values()))):
        print(f"{f:>8.2f} " + " ".join(f"{curves[n][f]:>24.4f}" for n in names))


if __name__ == "__main__":
    main()
