"""Reference experiments shared by the acceptance tests and ``scripts/``.

Each runner returns plain numbers so callers can print or assert on them.
"""

from __future__ import annotations

import contextlib
import csv
import io
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .baselines import fixed_threshold
from .cli import main as cli_main
from .datasets import gen_synthetic, split_dataset, SplitSpec
from .losses import LossConfig, aggregate, compute_metrics, loss_terms
from .segnet import UNetConfig, hard_binarize, init_params, threshold_forward
from .tensor import Tape, Tensor
from .training import AdamState, TrainConfig, adam_step, train


# ---------------------------------------------------------------- threshold recovery


@dataclass(frozen=True)
class RecoveryConfig:
    size: int = 16
    n_train: int = 256
    n_val: int = 32
    epochs: int = 60
    batch_size: int = 32
    lr: float = 3e-3
    seed: int = 0
    left: float = 0.3
    right: float = 0.7
    tolerance: float = 0.1
    loss: LossConfig = field(default_factory=LossConfig)

    @property
    def steps(self) -> int:
        return self.epochs * -(-self.n_train // self.batch_size)


def optimal_threshold_map(cfg: RecoveryConfig) -> np.ndarray:
    t = np.full((1, 1, cfg.size, cfg.size), cfg.left, dtype=np.float32)
    t[..., cfg.size // 2 :] = cfg.right
    return t


def recovery_corpus(n: int, cfg: RecoveryConfig, seed: int):
    """Uniform probability maps; foreground where prob reaches the half's threshold."""
    prob = np.random.default_rng(seed).random((n, 1, cfg.size, cfg.size)).astype(np.float32)
    masks = (prob >= optimal_threshold_map(cfg)).astype(np.float32)
    return prob, masks


@dataclass
class RecoveryResult:
    within_fraction: float
    adaptive_dice: float
    fixed_dice: float
    val_dice: list
    steps: int
    seconds: float
    threshold_map: np.ndarray


def recover_thresholds(cfg: RecoveryConfig = RecoveryConfig()) -> RecoveryResult:
    """Fit only the threshold head on probability maps fed in directly (no U-Net)."""
    start = time.perf_counter()
    net = UNetConfig(base_channels=2, depth=1, image_h=cfg.size, image_w=cfg.size)
    model = init_params(net, cfg.seed)
    tcfg = TrainConfig(lr=cfg.lr, seed=cfg.seed, loss=cfg.loss, detach_threshold_input=True,
                       trainable=("thresh.",))
    prob, masks = recovery_corpus(cfg.n_train, cfg, [cfg.seed, 0])
    vprob, vmasks = recovery_corpus(cfg.n_val, cfg, [cfg.seed, 1])
    state = AdamState()
    names = [k for k in model.params if k.startswith("thresh.")]
    history = []
    steps = 0
    for epoch in range(1, cfg.epochs + 1):
        order = np.random.default_rng(cfg.seed + epoch).permutation(cfg.n_train)
        for i in range(0, cfg.n_train, cfg.batch_size):
            idx = order[i : i + cfg.batch_size]
            model.zero_grad()
            with Tape() as tape:
                p = Tensor(prob[idx])
                total, _, _ = loss_terms(p, threshold_forward(model, p), masks[idx], tcfg.loss)
            T.backward(total, tape)
            adam_step(model.params, {k: model[k].grad for k in names}, state, tcfg)
            steps += 1
        thr = threshold_forward(model, Tensor(vprob)).data
        history.append(_dice(hard_binarize(vprob, thr), vmasks))
    thr = threshold_forward(model, Tensor(vprob)).data
    within = float(np.mean(np.abs(thr - optimal_threshold_map(cfg)) <= cfg.tolerance))
    return RecoveryResult(
        within_fraction=within,
        adaptive_dice=_dice(hard_binarize(vprob, thr), vmasks),
        fixed_dice=_dice(fixed_threshold(vprob), vmasks),
        val_dice=history,
        steps=steps,
        seconds=time.perf_counter() - start,
        threshold_map=thr,
    )


def _dice(pred, masks) -> float:
    return aggregate(compute_metrics(pred[i], masks[i]) for i in range(len(masks))).dice


# ---------------------------------------------------------------- end-to-end synthetic run


@dataclass(frozen=True)
class SyntheticRunConfig:
    n: int = 200
    size: int = 64
    base_channels: int = 16
    depth: int = 3
    epochs: int = 30
    lr: float = 5e-5
    batch_size: int = 4
    seed: int = 0
    bias_field: bool = False


def synthetic_run(cfg: SyntheticRunConfig = SyntheticRunConfig(), csv_path=None):
    """Generate, split and train in memory. Returns (TrainResult, seconds)."""
    start = time.perf_counter()
    samples = gen_synthetic(cfg.n, cfg.size, cfg.size, cfg.seed, cfg.bias_field)
    train_s, val_s, _ = split_dataset(samples, SplitSpec(seed=cfg.seed))
    net = UNetConfig(base_channels=cfg.base_channels, depth=cfg.depth, image_h=cfg.size, image_w=cfg.size)
    tcfg = TrainConfig(lr=cfg.lr, epochs=cfg.epochs, batch_size=cfg.batch_size, seed=cfg.seed)
    result = train(train_s, val_s, init_params(net, cfg.seed), tcfg, csv_path=csv_path)
    return result, time.perf_counter() - start


# ---------------------------------------------------------------- adaptive vs fixed through the CLI


def run_cli(argv) -> tuple[int, str]:
    out = io.StringIO()
    with contextlib.redirect_stdout(out):
        code = cli_main([str(a) for a in argv])
    return code, out.getvalue()


def read_compare_csv(path) -> dict:
    with open(path, newline="") as fh:
        return {
            row["strategy"]: {"dice": float(row["dice"]), "iou": float(row["iou"]),
                              "fp": int(row["fp"]), "fn": int(row["fn"])}
            for row in csv.DictReader(fh)
        }


def compare_run(workdir, seed: int, cfg: SyntheticRunConfig = SyntheticRunConfig(bias_field=True),
                checkpoint: str = "model_best.ckpt") -> dict:
    """gen-data, train and compare on the test split, all through the command line.

    The seed drives corpus generation, the split, initialisation and shuffling.
    """
    work = Path(workdir) / f"seed{seed}"
    data, run = work / "data", work / "run"
    gen = ["gen-data", "--out", data, "--n", cfg.n, "--size", f"{cfg.size}x{cfg.size}", "--seed", seed,
           "--depth", cfg.depth]
    if cfg.bias_field:
        gen.append("--bias-field")
    steps = [
        gen,
        ["train", "--data", data, "--out", run, "--epochs", cfg.epochs, "--lr", cfg.lr, "--seed", seed,
         "--batch", cfg.batch_size, "--base-channels", cfg.base_channels, "--depth", cfg.depth],
        ["compare", "--ckpt", run / checkpoint, "--data", data, "--split", "test", "--out", run],
    ]
    for argv in steps:
        code, _ = run_cli(argv)
        if code != 0:
            raise RuntimeError(f"atseg {argv[0]} exited with {code}")
    return read_compare_csv(run / "compare_test.csv")


def adaptive_wins(rows: dict) -> bool:
    a, f = rows["adaptive"], rows["fixed_0.5"]
    return a["dice"] >= f["dice"] and a["fp"] <= f["fp"]
