"""End-to-end training on the synthetic ellipse corpus; prints the per-epoch log."""

import argparse
from dataclasses import fields

from atseg.experiments import SyntheticRunConfig, synthetic_run


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    for f in fields(SyntheticRunConfig):
        name = "--" + f.name.replace("_", "-")
        if f.type in ("bool", bool):
            ap.add_argument(name, action="store_true")
        else:
            ap.add_argument(name, type=type(f.default), default=f.default)
    ap.add_argument("--csv", help="also write the metrics CSV here")
    args = vars(ap.parse_args())
    csv_path = args.pop("csv")
    cfg = SyntheticRunConfig(**args)
    result, seconds = synthetic_run(cfg, csv_path=csv_path)
    print(result.csv_text(), end="")
    print(f"# best val dice {result.best.val_dice:.4f} at epoch {result.best.epoch}; {seconds:.0f} s")


if __name__ == "__main__":
    main()
