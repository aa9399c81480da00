"""Adam, the joint training loop, evaluation and the checkpoint format."""

from __future__ import annotations

import io
import logging
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .datasets import Sample, stack
from .errors import ContractError, ParseError, ShapeError, TrainingError, VersionError
from .losses import LossConfig, MetricsRecord, aggregate, compute_metrics, loss_terms
from .segnet import SegModel, UNetConfig, hard_binarize, parameter_shapes, threshold_forward, unet_forward
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

CSV_HEADER = "epoch,train_loss,train_dice_loss,train_mse_loss,val_dice,val_iou,val_fp,val_fn"


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.00005
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 30
    batch_size: int = 4
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    detach_threshold_input: bool = False
    fixed_threshold_only: bool = False
    # learning rate for the threshold head; None means the same as lr
    threshold_lr: Optional[float] = None
    # restrict updates to parameters with these name prefixes (None = all)
    trainable: Optional[tuple[str, ...]] = None

    def __post_init__(self):
        if not self.lr > 0:
            raise ContractError("lr must be positive")
        if self.threshold_lr is not None and not self.threshold_lr > 0:
            raise ContractError("threshold_lr must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ContractError("beta1 and beta2 must lie in [0, 1)")
        if self.epochs < 0 or self.batch_size < 1:
            raise ContractError("epochs must be >= 0 and batch_size >= 1")


    def lr_for(self, name: str) -> float:
        if self.threshold_lr is not None and name.startswith("thresh."):
            return self.threshold_lr
        return self.lr


# ---------------------------------------------------------------- Adam


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def copy(self) -> "AdamState":
        return AdamState(self.step, {k: a.copy() for k, a in self.m.items()}, {k: a.copy() for k, a in self.v.items()})


def adam_step(params: dict, grads: dict, state: AdamState, cfg: TrainConfig) -> AdamState:
    """One bias-corrected Adam update, in place on ``params[name].data``.

    ``params`` maps names to Tensors, ``grads`` maps the same names to arrays;
    names missing from ``grads`` are left untouched.
    """
    state.step += 1
    t = state.step
    b1, b2 = np.float32(cfg.beta1), np.float32(cfg.beta2)
    # 1 - beta in float64: float32(1) - float32(0.999) is off by ~1e-5 relative
    a1, a2 = np.float32(1.0 - cfg.beta1), np.float32(1.0 - cfg.beta2)
    c1 = np.float32(1.0 - cfg.beta1**t)
    c2 = np.float32(1.0 - cfg.beta2**t)
    eps = np.float32(cfg.adam_eps)
    for name, g in grads.items():
        p = params[name]
        lr = np.float32(cfg.lr_for(name))
        if g.shape != p.shape:
            raise ShapeError(f"adam_step: gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros(p.shape, dtype=np.float32)
            v = np.zeros(p.shape, dtype=np.float32)
        elif m.shape != p.shape or v.shape != p.shape:
            raise ShapeError(f"adam_step: optimizer state for {name} has the wrong shape")
        g = g.astype(np.float32, copy=False)
        m = b1 * m + a1 * g
        v = b2 * v + a2 * (g * g)
        mhat = m / c1
        vhat = v / c2
        p.data = (p.data - lr * mhat / (np.sqrt(vhat) + eps)).astype(np.float32)
        state.m[name] = m
        state.v[name] = v
    return state


# ---------------------------------------------------------------- checkpoint


MAGIC = b"ATSEG1"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    config: UNetConfig
    params: dict  # name -> float32 array
    adam: AdamState = field(default_factory=AdamState)
    seed: int = 0
    epoch: int = 0
    val_dice: float = float("nan")
    threshold_mode: str = "adaptive"  # or "fixed"

    @classmethod
    def from_model(cls, model: SegModel, adam: Optional[AdamState] = None, **meta) -> "Checkpoint":
        return cls(
            model.config,
            {k: v.data.copy() for k, v in model.params.items()},
            adam.copy() if adam is not None else AdamState(),
            **meta,
        )

    def to_model(self) -> SegModel:
        return SegModel(self.config, {k: Tensor(a.copy(), requires_grad=True, name=k) for k, a in self.params.items()})

    @property
    def adaptive(self) -> bool:
        return self.threshold_mode == "adaptive"


def _meta_text(ck: Checkpoint) -> str:
    items = {f"config.{k}": v for k, v in ck.config.to_dict().items()}
    items.update(
        seed=ck.seed, epoch=ck.epoch, val_dice=repr(float(ck.val_dice)),
        threshold_mode=ck.threshold_mode, adam_step=ck.adam.step,
    )
    return "".join(f"{k} = {v}\n" for k, v in items.items())


def _write_str(buf, s: str):
    b = s.encode("utf-8")
    buf.write(struct.pack("<I", len(b)))
    buf.write(b)


def _write_tensor(buf, name: str, a: np.ndarray):
    _write_str(buf, name)
    buf.write(struct.pack("<B", a.ndim))
    buf.write(struct.pack(f"<{a.ndim}I", *a.shape))
    buf.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def checkpoint_bytes(ck: Checkpoint) -> bytes:
    """Serialize: magic, version, meta text, tensor table, CRC32 of everything before it."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    _write_str(buf, _meta_text(ck))
    tensors = [(f"param/{k}", a) for k, a in ck.params.items()]
    for k in ck.params:
        if k in ck.adam.m:
            tensors.append((f"adam_m/{k}", ck.adam.m[k]))
            tensors.append((f"adam_v/{k}", ck.adam.v[k]))
    buf.write(struct.pack("<I", len(tensors)))
    for name, a in tensors:
        _write_tensor(buf, name, a)
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(ck: Checkpoint, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(ck))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise ParseError(f"truncated checkpoint while reading {what}", self.pos)
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]

    def string(self, what):
        n = self.u32(what)
        raw = self.take(n, what)
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError:
            raise ParseError(f"{what} is not valid UTF-8", self.pos - n) from None


def parse_checkpoint(data: bytes) -> Checkpoint:
    r = _Reader(data)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise ParseError("bad magic: not an ATSEG1 checkpoint", 0)
    version = r.u32("format version")
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported checkpoint format version {version} (expected {FORMAT_VERSION})", len(MAGIC))
    if len(data) < r.pos + 4:
        raise ParseError("truncated checkpoint", len(data))
    body, crc = data[:-4], struct.unpack("<I", data[-4:])[0]
    if zlib.crc32(body) != crc:
        raise ParseError("checksum mismatch: file is truncated or corrupted", len(data) - 4)
    r.data = body

    meta_pos = r.pos
    meta = {}
    for line in r.string("metadata").splitlines():
        key, sep, value = line.partition(" = ")
        if not sep:
            raise ParseError(f"malformed metadata line {line!r}", meta_pos)
        meta[key] = value
    try:
        config = UNetConfig.from_dict({k[7:]: v for k, v in meta.items() if k.startswith("config.")})
        seed, epoch = int(meta["seed"]), int(meta["epoch"])
        val_dice = float(meta["val_dice"])
        mode = meta["threshold_mode"]
        step = int(meta["adam_step"])
    except (KeyError, ValueError, ContractError) as e:
        raise ParseError(f"invalid checkpoint metadata: {e}", meta_pos) from None
    if mode not in ("adaptive", "fixed"):
        raise ParseError(f"unknown threshold_mode {mode!r}", meta_pos)

    shapes = parameter_shapes(config)
    params, m, v = {}, {}, {}
    for _ in range(r.u32("tensor count")):
        start = r.pos
        name = r.string("tensor name")
        kind, _, pname = name.partition("/")
        table = {"param": params, "adam_m": m, "adam_v": v}.get(kind)
        if table is None or pname not in shapes:
            raise ParseError(f"unknown tensor name {name!r}", start)
        if pname in table:
            raise ParseError(f"duplicate tensor {name!r}", start)
        ndim = struct.unpack("<B", r.take(1, "rank"))[0]
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim, "shape"))
        if shape != shapes[pname]:
            raise ParseError(f"{name}: shape {shape} does not match config {shapes[pname]}", start)
        count = int(np.prod(shape))
        table[pname] = np.frombuffer(r.take(4 * count, name), dtype="<f4").astype(np.float32).reshape(shape)
    if r.pos != len(body):
        raise ParseError(f"{len(body) - r.pos} unexpected trailing bytes", r.pos)
    if set(params) != set(shapes):
        raise ParseError(f"missing parameters: {sorted(set(shapes) - set(params))[:5]}", r.pos)
    if set(m) != set(v) or not set(m) <= set(params):
        raise ParseError("optimizer state is incomplete", r.pos)
    params = {k: params[k] for k in shapes}
    return Checkpoint(config, params, AdamState(step, m, v), seed, epoch, val_dice, mode)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        return parse_checkpoint(path.read_bytes())
    except ParseError as e:
        raise type(e)(str(e), e.offset, path) from None


# ---------------------------------------------------------------- evaluation


def infer(model: SegModel, images: np.ndarray, adaptive: bool, batch_size: int = 8):
    """(prob, threshold) arrays for N x 1 x H x W images, batched, without a tape."""
    probs, thrs = [], []
    for i in range(0, len(images), batch_size):
        prob = unet_forward(model, Tensor(images[i : i + batch_size]))
        if adaptive:
            thr = threshold_forward(model, prob).data
        else:
            thr = np.full(prob.shape, 0.5, dtype=np.float32)
        probs.append(prob.data)
        thrs.append(thr)
    return np.concatenate(probs), np.concatenate(thrs)


def evaluate_model(model: SegModel, samples: Sequence[Sample], adaptive: bool = True):
    """(aggregate MetricsRecord, per-sample records) using hard binarization."""
    if not samples:
        return aggregate([]), []
    images, masks = stack(samples)
    prob, thr = infer(model, images, adaptive)
    pred = hard_binarize(prob, thr)
    per = [compute_metrics(pred[i], masks[i]) for i in range(len(samples))]
    return aggregate(per), per


def evaluate(checkpoint: Checkpoint, samples: Sequence[Sample], adaptive: Optional[bool] = None):
    cfg = checkpoint.config
    for s in samples:
        if s.hw != (cfg.image_h, cfg.image_w):
            raise ShapeError(f"sample {s.id} is {s.hw}, checkpoint expects {(cfg.image_h, cfg.image_w)}")
    use_adaptive = checkpoint.adaptive if adaptive is None else adaptive
    return evaluate_model(checkpoint.to_model(), samples, use_adaptive)


# ---------------------------------------------------------------- training


@dataclass
class EpochRow:
    epoch: int
    train_loss: float
    train_dice_loss: float
    train_mse_loss: Optional[float]
    val: MetricsRecord

    def csv(self) -> str:
        mse = "" if self.train_mse_loss is None else repr(self.train_mse_loss)
        return ",".join(
            [
                str(self.epoch), repr(self.train_loss), repr(self.train_dice_loss), mse,
                repr(self.val.dice), repr(self.val.iou), str(self.val.fp), str(self.val.fn),
            ]
        )


@dataclass
class TrainResult:
    final: Checkpoint
    best: Checkpoint
    log: list

    def csv_text(self) -> str:
        return "".join(line + "\n" for line in [CSV_HEADER] + [row.csv() for row in self.log])


def train_step(model: SegModel, images: np.ndarray, masks: np.ndarray, state: AdamState,
               cfg: TrainConfig, rng: Optional[np.random.Generator] = None):
    """Forward, joint loss, backward and one Adam update. Returns the loss terms as floats."""
    model.zero_grad()
    names = [k for k in model.params if cfg.trainable is None or k.startswith(cfg.trainable)]
    with Tape() as tape:
        prob = unet_forward(model, Tensor(images), training=True, rng=rng)
        thr = None
        if not cfg.fixed_threshold_only and cfg.loss.lambda_mse > 0:
            thr = threshold_forward(model, prob.detach() if cfg.detach_threshold_input else prob)
        total, dice, mse = loss_terms(prob, thr, masks, cfg.loss)
    T.backward(total, tape)
    grads = {k: model[k].grad for k in names if model[k].grad is not None}
    adam_step(model.params, grads, state, cfg)
    return total.item(), dice.item(), (None if mse is None else mse.item())


def train(train_set: Sequence[Sample], val_set: Sequence[Sample], model: SegModel,
          cfg: TrainConfig, csv_path=None) -> TrainResult:
    """Joint training of the U-Net and the threshold head.

    The model is updated in place. With ``epochs == 0`` the initial
    parameters come back unchanged and the log is empty.
    """
    if not train_set or not val_set:
        raise ContractError("train and val splits must both be non-empty")
    images, masks = stack(train_set)
    mode = "fixed" if cfg.fixed_threshold_only else "adaptive"
    adaptive = not cfg.fixed_threshold_only
    state = AdamState()
    rows = []
    initial = Checkpoint.from_model(model, state, seed=cfg.seed, epoch=0, threshold_mode=mode)
    best = initial
    if csv_path is not None:
        Path(csv_path).write_text(CSV_HEADER + "\n")

    for epoch in range(1, cfg.epochs + 1):
        order = np.random.default_rng(cfg.seed + epoch).permutation(len(train_set))
        drop_rng = np.random.default_rng([cfg.seed, epoch, 1])
        sums = [0.0, 0.0, 0.0]
        nb = 0
        for b, i in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[i : i + cfg.batch_size]
            total, dice, mse = train_step(model, images[idx], masks[idx], state, cfg, drop_rng)
            if not math.isfinite(total):
                raise TrainingError(f"loss became {total} at epoch {epoch}, batch {b}")
            sums[0] += total
            sums[1] += dice
            sums[2] += 0.0 if mse is None else mse
            nb += 1
        val, _ = evaluate_model(model, val_set, adaptive)
        row = EpochRow(epoch, sums[0] / nb, sums[1] / nb, None if cfg.fixed_threshold_only else sums[2] / nb, val)
        rows.append(row)
        log.info("epoch %d loss %.5f val dice %.4f", epoch, row.train_loss, val.dice)
        if csv_path is not None:
            with open(csv_path, "a") as fh:
                fh.write(row.csv() + "\n")
        if best is initial or val.dice > best.val_dice:
            best = Checkpoint.from_model(model, state, seed=cfg.seed, epoch=epoch, val_dice=val.dice, threshold_mode=mode)

    final_dice = rows[-1].val.dice if rows else float("nan")
    final = Checkpoint.from_model(model, state, seed=cfg.seed, epoch=cfg.epochs, val_dice=final_dice, threshold_mode=mode)
    return TrainResult(final, best, rows)
