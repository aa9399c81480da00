"""U-Net-lite segmentation network with a learned per-pixel threshold head."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeError
from .tensor import Tensor


@dataclass(frozen=True)
class UNetConfig:
    base_channels: int = 16
    depth: int = 3
    in_channels: int = 1
    image_h: int = 64
    image_w: int = 64
    dropout_rate: float = 0.0
    pooled_size: int = 8

    def __post_init__(self):
        if self.base_channels < 1 or self.depth < 1:
            raise ContractError("base_channels and depth must be positive")
        if self.in_channels != 1:
            raise ContractError("only single-channel input is supported")
        step = 2**self.depth
        if self.image_h % step or self.image_w % step or self.image_h < 1 or self.image_w < 1:
            raise ContractError(
                f"image size {self.image_h}x{self.image_w} must be divisible by 2^depth = {step}"
            )
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ContractError("dropout_rate must be in [0, 1)")
        if not 1 <= self.pooled_size <= min(self.image_h, self.image_w):
            raise ContractError("pooled_size must lie in 1..min(image_h, image_w)")

    def channels(self, level: int) -> int:
        return self.base_channels * 2**level

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "UNetConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        unknown = set(d) - set(kinds)
        if unknown:
            raise ContractError(f"unknown UNetConfig keys: {sorted(unknown)}")
        out = {}
        for k, v in d.items():
            out[k] = float(v) if kinds[k] in (float, "float") else int(v)
        return cls(**out)


def conv_layout(cfg: UNetConfig) -> list[tuple[str, int, int, int]]:
    """(name, in_channels, out_channels, kernel) for every conv, in forward order."""
    layers = []
    cin = cfg.in_channels
    for lvl in range(cfg.depth):
        c = cfg.channels(lvl)
        layers += [(f"enc{lvl}.conv1", cin, c, 3), (f"enc{lvl}.conv2", c, c, 3)]
        cin = c
    cb = cfg.channels(cfg.depth)
    layers += [("bottleneck.conv1", cin, cb, 3), ("bottleneck.conv2", cb, cb, 3)]
    cin = cb
    for lvl in reversed(range(cfg.depth)):
        c = cfg.channels(lvl)
        # upsampled features are concatenated with the matching encoder skip
        layers += [(f"dec{lvl}.conv1", cin + c, c, 3), (f"dec{lvl}.conv2", c, c, 3)]
        cin = c
    layers.append(("head", cin, 1, 1))
    return layers


class SegModel:
    """Parameters of the U-Net and of the threshold head, keyed by name."""

    def __init__(self, config: UNetConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params
        expected = parameter_shapes(config)
        if list(params) != list(expected):
            raise ContractError("parameter names do not match the configuration")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ShapeError(f"{name}: shape {params[name].shape} != expected {shape}")

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def named_parameters(self):
        return self.params.items()

    def unet_parameter_names(self) -> list[str]:
        return [k for k in self.params if not k.startswith("thresh.")]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def clone(self) -> "SegModel":
        return SegModel(
            self.config,
            {k: Tensor(v.data.copy(), requires_grad=v.requires_grad, name=k) for k, v in self.params.items()},
        )


def parameter_shapes(cfg: UNetConfig) -> dict[str, tuple]:
    shapes = {}
    for name, cin, cout, k in conv_layout(cfg):
        shapes[f"{name}.weight"] = (cout, cin, k, k)
        shapes[f"{name}.bias"] = (cout,)
    hw = cfg.image_h * cfg.image_w
    shapes["thresh.fc_weight"] = (hw, cfg.pooled_size**2)
    shapes["thresh.fc_bias"] = (hw,)
    return shapes


def he_limit(fan_in: int) -> float:
    return float(np.sqrt(6.0 / fan_in))


def glorot_limit(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def init_limit(name: str, shape: tuple) -> float:
    """Uniform init bound: He for ReLU-fed convs, Glorot for the sigmoid-fed threshold layer."""
    fan_in = int(np.prod(shape[1:]))
    if name == "thresh.fc_weight":
        # keeps the initial threshold map close to 0.5; never exceeds the He bound
        return glorot_limit(fan_in, shape[0])
    return he_limit(fan_in)


def init_params(config: UNetConfig, seed: int) -> SegModel:
    """Uniform weights, zero biases, drawn in parameter order from one seeded stream."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith("bias"):
            data = np.zeros(shape, dtype=np.float32)
        else:
            lim = init_limit(name, shape)
            data = rng.uniform(-lim, lim, size=shape).astype(np.float32)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return SegModel(config, params)


def _check_batch(model: SegModel, batch: Tensor):
    cfg = model.config
    want = (cfg.in_channels, cfg.image_h, cfg.image_w)
    if batch.data.ndim != 4 or tuple(batch.shape[1:]) != want:
        raise ShapeError(f"expected a batch of shape (N, {want[0]}, {want[1]}, {want[2]}), got {batch.shape}")


def unet_forward(
    model: SegModel,
    batch: Tensor,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Probability map N x 1 x H x W in (0, 1)."""
    _check_batch(model, batch)
    cfg = model.config
    p = model.params

    def block(x, name):
        x = T.relu(T.conv2d(x, p[f"{name}.conv1.weight"], p[f"{name}.conv1.bias"], padding=1))
        return T.relu(T.conv2d(x, p[f"{name}.conv2.weight"], p[f"{name}.conv2.bias"], padding=1))

    skips = []
    x = batch
    for lvl in range(cfg.depth):
        x = block(x, f"enc{lvl}")
        x = T.dropout(x, cfg.dropout_rate, rng, training)
        skips.append(x)
        x = T.max_pool2d(x, 2)
    x = block(x, "bottleneck")
    for lvl in reversed(range(cfg.depth)):
        x = T.concat_channels(T.upsample_nearest2d(x, 2), skips[lvl])
        x = block(x, f"dec{lvl}")
    logits = T.conv2d(x, p["head.weight"], p["head.bias"])
    return T.sigmoid(logits)


def threshold_forward(model: SegModel, prob: Tensor) -> Tensor:
    """Per-pixel threshold map: pool, fully connected layer, sigmoid."""
    cfg = model.config
    n = prob.shape[0]
    if prob.data.ndim != 4 or tuple(prob.shape[1:]) != (1, cfg.image_h, cfg.image_w):
        raise ShapeError(f"threshold_forward: prob shape {prob.shape} does not match the model")
    ps = cfg.pooled_size
    pooled = T.adaptive_avg_pool2d(prob, ps, ps)
    z = T.linear(T.reshape(pooled, (n, ps * ps)), model["thresh.fc_weight"], model["thresh.fc_bias"])
    return T.reshape(T.sigmoid(z), (n, 1, cfg.image_h, cfg.image_w))


def hard_binarize(prob, threshold) -> np.ndarray:
    """1 where prob >= threshold, else 0 (float32 array)."""
    p = prob.data if isinstance(prob, Tensor) else np.asarray(prob)
    t = threshold.data if isinstance(threshold, Tensor) else np.asarray(threshold)
    if p.shape != t.shape:
        raise ShapeError(f"hard_binarize: prob {p.shape} vs threshold {t.shape}")
    return (p >= t).astype(np.float32)


def soft_binarize(prob: Tensor, threshold: Tensor, tau: float) -> Tensor:
    """sigmoid((prob - threshold) / tau); differentiable in both inputs."""
    if not tau > 0:
        raise ContractError(f"tau must be positive, got {tau}")
    if prob.shape != threshold.shape:
        raise ShapeError(f"soft_binarize: prob {prob.shape} vs threshold {threshold.shape}")
    inv = 1.0 / tau
    s = T._sigmoid((prob.data - threshold.data) * prob.data.dtype.type(inv))

    def grad_fn(g):
        d = g * s * (1 - s) * inv
        return d, -d

    return T.record("soft_binarize", [prob, threshold], s, grad_fn)


def predict(model: SegModel, images: np.ndarray, adaptive: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Inference without a tape. Returns (prob, threshold) arrays, N x 1 x H x W."""
    prob = unet_forward(model, Tensor(images))
    if adaptive:
        thr = threshold_forward(model, prob).data
    else:
        thr = np.full(prob.shape, 0.5, dtype=np.float32)
    return prob.data, thr
