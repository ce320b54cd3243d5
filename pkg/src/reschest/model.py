"""Residual CNN: 7x7 stem, four stages of basic blocks, pooled two-layer head.

Parameter names are hierarchical and enumerate in construction order:

    stem.conv.weight, stem.bn.{weight,bias,running_mean,running_var}
    stage{s}.block{b}.conv1.weight, .bn1.*, .conv2.weight, .bn2.*
    stage{s}.block{b}.downsample.conv.weight, .downsample.bn.*   (projection blocks only)
    head.fc1.weight, head.fc1.bias, head.fc2.weight, head.fc2.bias

Stages and blocks are numbered from 1.  The stem is as wide as the first
stage.  Convolutions feeding a batch norm carry no bias.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor

NUM_CLASSES = 5


@dataclass
class ModelConfig:
    in_channels: int = 1
    stage_widths: list[int] = field(default_factory=lambda: [64, 128, 256, 512])
    blocks_per_stage: list[int] = field(default_factory=lambda: [2, 2, 2, 2])
    num_classes: int = NUM_CLASSES
    head_hidden: int = 256

    def __post_init__(self) -> None:
        self.stage_widths = [int(v) for v in self.stage_widths]
        self.blocks_per_stage = [int(v) for v in self.blocks_per_stage]
        self.validate()

    def validate(self) -> None:
        if len(self.stage_widths) != 4 or len(self.blocks_per_stage) != 4:
            raise ValueError("stage_widths and blocks_per_stage need exactly 4 entries")
        if any(w < 1 for w in self.stage_widths) or any(b < 1 for b in self.blocks_per_stage):
            raise ValueError("stage widths and block counts must be positive")
        if any(a > b for a, b in zip(self.stage_widths, self.stage_widths[1:])):
            raise ValueError(f"stage_widths must be non-decreasing, got {self.stage_widths}")
        if self.in_channels < 1 or self.num_classes < 2 or self.head_hidden < 1:
            raise ValueError("in_channels, num_classes and head_hidden must be positive")

    @classmethod
    def reduced(cls) -> "ModelConfig":
        """Small variant used for tests and desk-scale runs."""
        return cls(stage_widths=[8, 16, 32, 64], blocks_per_stage=[1, 1, 1, 1], head_hidden=32)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


RUNNING_SUFFIXES = ("running_mean", "running_var")


class ModelParams:
    """Ordered name -> Tensor map; running statistics are non-trainable."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self.entries: OrderedDict[str, Tensor] = OrderedDict()

    def add(self, name: str, data: np.ndarray, trainable: bool = True) -> Tensor:
        if name in self.entries:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(data, requires_grad=trainable, name=name)
        self.entries[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __iter__(self) -> Iterator[str]:
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def items(self):
        return self.entries.items()

    def state_dict(self) -> OrderedDict[str, np.ndarray]:
        return OrderedDict((k, v.data.copy()) for k, v in self.entries.items())

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.entries) - set(state)
        extra = set(state) - set(self.entries)
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, t in self.entries.items():
            arr = np.asarray(state[k], dtype=T.DTYPE)
            if arr.shape != t.shape:
                raise T.ShapeError(f"{k}: expected shape {t.shape}, got {arr.shape}")
            t.data[...] = arr
            t.grad = None


def parameters(params: ModelParams, trainable_only: bool = False) -> list[tuple[str, Tensor]]:
    out = []
    for name, t in params.items():
        if trainable_only and name.endswith(RUNNING_SUFFIXES):
            continue
        out.append((name, t))
    return out


def _he_normal(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(T.DTYPE)


def _add_conv(p: ModelParams, rng, name: str, cout: int, cin: int, k: int) -> None:
    p.add(f"{name}.weight", _he_normal(rng, (cout, cin, k, k)))


def _add_bn(p: ModelParams, name: str, c: int) -> None:
    p.add(f"{name}.weight", np.ones(c))
    p.add(f"{name}.bias", np.zeros(c))
    p.add(f"{name}.running_mean", np.zeros(c), trainable=False)
    p.add(f"{name}.running_var", np.ones(c), trainable=False)


def block_layout(cfg: ModelConfig) -> list[tuple[str, int, int, int]]:
    """(prefix, in_width, out_width, stride) for every residual block, in order."""
    layout = []
    width = cfg.stage_widths[0]
    for s, (out_w, nblocks) in enumerate(zip(cfg.stage_widths, cfg.blocks_per_stage), start=1):
        for b in range(1, nblocks + 1):
            stride = 2 if (b == 1 and s > 1) else 1
            layout.append((f"stage{s}.block{b}", width, out_w, stride))
            width = out_w
    return layout


def needs_projection(in_w: int, out_w: int, stride: int) -> bool:
    return stride != 1 or in_w != out_w


def build_model(cfg: ModelConfig | None = None, seed: int = 0) -> ModelParams:
    cfg = cfg or ModelConfig()
    cfg.validate()
    rng = np.random.default_rng(seed)
    p = ModelParams(cfg)
    stem = cfg.stage_widths[0]
    _add_conv(p, rng, "stem.conv", stem, cfg.in_channels, 7)
    _add_bn(p, "stem.bn", stem)
    for prefix, in_w, out_w, stride in block_layout(cfg):
        _add_conv(p, rng, f"{prefix}.conv1", out_w, in_w, 3)
        _add_bn(p, f"{prefix}.bn1", out_w)
        _add_conv(p, rng, f"{prefix}.conv2", out_w, out_w, 3)
        _add_bn(p, f"{prefix}.bn2", out_w)
        if needs_projection(in_w, out_w, stride):
            _add_conv(p, rng, f"{prefix}.downsample.conv", out_w, in_w, 1)
            _add_bn(p, f"{prefix}.downsample.bn", out_w)
    last = cfg.stage_widths[-1]
    p.add("head.fc1.weight", _he_normal(rng, (cfg.head_hidden, last)))
    p.add("head.fc1.bias", np.zeros(cfg.head_hidden))
    p.add("head.fc2.weight", _he_normal(rng, (cfg.num_classes, cfg.head_hidden)))
    p.add("head.fc2.bias", np.zeros(cfg.num_classes))
    return p


def _bn(params: ModelParams, name: str, x: Tensor, training: bool) -> Tensor:
    return T.batchnorm2d(
        x,
        params[f"{name}.weight"],
        params[f"{name}.bias"],
        params[f"{name}.running_mean"],
        params[f"{name}.running_var"],
        training,
    )


def residual_block(params: ModelParams, prefix: str, x: Tensor, stride: int, training: bool) -> Tensor:
    """relu(bn2(conv2(relu(bn1(conv1(x))))) + skip(x))."""
    w1 = params[f"{prefix}.conv1.weight"]
    if x.shape[1] != w1.shape[1]:
        raise T.ShapeError(f"{prefix}: input has {x.shape[1]} channels, block expects {w1.shape[1]}")
    out_w = w1.shape[0]
    h = T.conv2d(x, w1, None, stride=stride, padding=1)
    h = T.relu(_bn(params, f"{prefix}.bn1", h, training))
    h = T.conv2d(h, params[f"{prefix}.conv2.weight"], None, stride=1, padding=1)
    h = _bn(params, f"{prefix}.bn2", h, training)
    has_proj = f"{prefix}.downsample.conv.weight" in params
    if has_proj:
        skip = T.conv2d(x, params[f"{prefix}.downsample.conv.weight"], None, stride=stride, padding=0)
        skip = _bn(params, f"{prefix}.downsample.bn", skip, training)
    elif needs_projection(x.shape[1], out_w, stride):
        raise T.ShapeError(f"{prefix}: identity skip cannot map {x.shape[1]}ch/stride {stride} to {out_w}ch")
    else:
        skip = x
    return T.relu(T.tensor_add(h, skip))


MIN_INPUT = 32


def forward(params: ModelParams, x: Tensor | np.ndarray, training: bool = False, record: bool | None = None) -> Tensor:
    """Raw class logits (N, num_classes).

    ``record`` defaults to ``training``: eval-mode passes leave no tape.
    """
    cfg = params.config
    if not isinstance(x, Tensor):
        x = Tensor(x)
    if x.ndim != 4:
        raise T.ShapeError(f"forward expects (N, C, H, W) input, got {x.shape}")
    if x.shape[1] != cfg.in_channels:
        raise T.ShapeError(f"input has {x.shape[1]} channels, model expects {cfg.in_channels}")
    if x.shape[2] < MIN_INPUT or x.shape[3] < MIN_INPUT:
        raise T.ShapeError(f"input {x.shape[2]}x{x.shape[3]} is below the {MIN_INPUT}x{MIN_INPUT} minimum")
    record = training if record is None else record
    if record:
        return _forward(params, x, training)
    with T.no_grad():
        return _forward(params, x, training)


def _forward(params: ModelParams, x: Tensor, training: bool) -> Tensor:
    h = T.conv2d(x, params["stem.conv.weight"], None, stride=2, padding=3)
    h = T.relu(_bn(params, "stem.bn", h, training))
    h = T.maxpool2d(h, 3, stride=2, padding=1)
    for prefix, _, _, stride in block_layout(params.config):
        h = residual_block(params, prefix, h, stride, training)
    h = T.global_avg_pool(h)
    h = T.relu(T.linear(h, params["head.fc1.weight"], params["head.fc1.bias"]))
    return T.linear(h, params["head.fc2.weight"], params["head.fc2.bias"])


def count_trainable(params: ModelParams) -> int:
    return sum(t.size for _, t in parameters(params, trainable_only=True))
