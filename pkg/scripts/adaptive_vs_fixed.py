"""Train on the bias-field corpus per seed and compare thresholding strategies on the test split.

Runs gen-data, train and compare through the command line, exactly as a user would.
"""

import argparse
import tempfile

from atseg.experiments import SyntheticRunConfig, adaptive_wins, compare_run


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3])
    ap.add_argument("--workdir", help="keep corpora and checkpoints here (default: a temp dir)")
    ap.add_argument("--checkpoint", default="model_best.ckpt", choices=("model_best.ckpt", "model_final.ckpt"))
    ap.add_argument("--epochs", type=int, default=SyntheticRunConfig.epochs)
    ap.add_argument("--n", type=int, default=SyntheticRunConfig.n)
    args = ap.parse_args()
    cfg = SyntheticRunConfig(bias_field=True, epochs=args.epochs, n=args.n)
    with tempfile.TemporaryDirectory() as tmp:
        work = args.workdir or tmp
        wins = 0
        print("seed,strategy,dice,iou,fp,fn")
        for seed in args.seeds:
            rows = compare_run(work, seed, cfg, args.checkpoint)
            for name, r in rows.items():
                print(f"{seed},{name},{r['dice']:.4f},{r['iou']:.4f},{r['fp']},{r['fn']}", flush=True)
            wins += adaptive_wins(rows)
        print(f"# adaptive >= fixed_0.5 on dice and fp: {wins}/{len(args.seeds)} seeds")


if __name__ == "__main__":
    main()
