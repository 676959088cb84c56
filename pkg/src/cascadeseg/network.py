"""Encoder-decoder segmentation network built from modified V-Net blocks.

Blocks follow the reformulated design: 3x3x3 convolutions, batch
normalization before the ReLU, and residual connections that are pure
identities. When a residual skip crosses a resolution or channel change it
is minimally adapted with max-pooling / repeated up-sampling plus a 1x1x1
convolution. Down-transitions are strided 2x2x2 convolutions; up-transitions
are learned transposed convolutions (or repetition, per config). Long skip
connections concatenate encoder features into the decoder, and the first
network variant can concatenate the raw FLAIR channel ahead of the
classifier head.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    BatchNormState,
    ConvKernel,
    ShapeError,
    Tensor,
    as_tensor,
    batchnorm3d,
    concat_channels,
    conv3d,
    conv3d_transpose,
    maxpool3d,
    relu,
    repeat_upsample3d,
    slice_channels,
    softmax_channels,
)

CHECKPOINT_MAGIC = b"CSEGCKPT"
CHECKPOINT_VERSION = 1

_KIND_CONV = 0
_KIND_BN = 1


class NumericsError(RuntimeError):
    """A forward pass produced NaN activations (training diagnostic)."""


class CheckpointError(ValueError):
    """A checkpoint file is malformed or has an unsupported version."""


@dataclass
class NetworkConfig:
    """Architecture hyperparameters; initialization is (config, seed)-pure."""

    in_channels: int = 4
    out_classes: int = 2
    levels: int = 3
    base_channels: int = 8
    convs_per_level: tuple = (1, 2, 3)
    flair_concat: bool = False
    flair_channel: int = 3
    post_concat_conv: bool = True
    upsample_kind: str = "learned"   # learned | repeat
    bn_momentum: float = 0.9
    bn_epsilon: float = 1e-5

    def __post_init__(self):
        self.convs_per_level = tuple(int(n) for n in self.convs_per_level)
        self.validate()

    def validate(self):
        if self.levels < 1:
            raise ValueError(f"levels must be >= 1, got {self.levels}")
        if self.base_channels < 1:
            raise ValueError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.out_classes < 2:
            raise ValueError(f"out_classes must be >= 2, got {self.out_classes}")
        if len(self.convs_per_level) != self.levels:
            raise ValueError(
                f"convs_per_level needs {self.levels} entries, got {len(self.convs_per_level)}")
        if any(n < 1 for n in self.convs_per_level):
            raise ValueError("convs_per_level entries must be >= 1")
        if self.upsample_kind not in ("learned", "repeat"):
            raise ValueError(f"unknown upsample_kind {self.upsample_kind!r}")
        if self.flair_concat and not 0 <= self.flair_channel < self.in_channels:
            raise ValueError(
                f"flair_channel {self.flair_channel} outside {self.in_channels} input channels")

    def channels_at(self, level):
        return self.base_channels * (2 ** level)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["convs_per_level"] = list(self.convs_per_level)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: tuple(v) if k == "convs_per_level" else v for k, v in d.items()})


class ModelParams:
    """Named, ordered map of kernels and batch-norm states for one network."""

    def __init__(self, entries=None):
        self.entries = dict(entries or {})

    def __getitem__(self, name):
        return self.entries[name]

    def __contains__(self, name):
        return name in self.entries

    def get(self, name, default=None):
        return self.entries.get(name, default)

    def names(self):
        return list(self.entries)

    def items(self):
        return self.entries.items()

    def trainable(self):
        """Yield (qualified name, tensor) for every trainable leaf, in order."""
        for name, entry in self.entries.items():
            for sub, tensor in entry.tensors():
                yield f"{name}.{sub}", tensor

    def n_parameters(self):
        return sum(t.data.size for _, t in self.trainable())

    def zero_grad(self):
        for _, tensor in self.trainable():
            tensor.zero_grad()

    def copy(self):
        out = {}
        for name, entry in self.entries.items():
            if isinstance(entry, ConvKernel):
                out[name] = ConvKernel(
                    Tensor(entry.weights.data.copy(), requires_grad=True),
                    Tensor(entry.bias.data.copy(), requires_grad=True))
            else:
                out[name] = BatchNormState(
                    gamma=Tensor(entry.gamma.data.copy(), requires_grad=True),
                    beta=Tensor(entry.beta.data.copy(), requires_grad=True),
                    running_mean=entry.running_mean.copy(),
                    running_var=entry.running_var.copy(),
                    momentum=entry.momentum,
                    epsilon=entry.epsilon)
        return ModelParams(out)

    def allclose(self, other, exact=True):
        if self.names() != other.names():
            return False
        for (_, a), (_, b) in zip(self.trainable(), other.trainable()):
            if exact:
                if not np.array_equal(a.data, b.data):
                    return False
            elif not np.allclose(a.data, b.data):
                return False
        return True


# -- blocks -------------------------------------------------------------------


def conv_block(x, kernel, bn, mode="train"):
    """3x3x3 convolution, batch normalization, then ReLU; spatial-preserving."""
    if kernel.weights.data.shape[2:] != (3, 3, 3):
        raise ShapeError(
            f"conv_block expects a 3x3x3 kernel, got {kernel.weights.data.shape[2:]}")
    h = conv3d(x, kernel, stride=1, padding=1)
    h = batchnorm3d(h, bn, mode=mode)
    return relu(h)


def residual_block(x, body, mode="train"):
    """x plus a body of conv_blocks; the skip path is a pure identity."""
    h = x
    for kernel, bn in body:
        h = conv_block(h, kernel, bn, mode=mode)
    if h.data.shape != x.data.shape:
        raise ShapeError(
            f"residual body output {h.data.shape} differs from input {x.data.shape}; "
            "use residual_adapter on the skip path")
    return h + x


def residual_adapter(x, target_channels, spatial_change="none", kernel=None):
    """Minimally adapt a residual skip to the body's output shape.

    Spatial correspondence uses max-pooling (down) or repeated up-sampling
    (up); a 1x1x1 convolution is inserted only when the channel counts
    differ, otherwise the path stays an exact identity.
    """
    if spatial_change not in ("none", "down", "up"):
        raise ValueError(f"unknown spatial_change {spatial_change!r}")
    h = x
    if spatial_change == "down":
        h = maxpool3d(h, window=2, stride=2)
    elif spatial_change == "up":
        h = repeat_upsample3d(h, factor=2)
    channels = h.data.shape[1]
    if channels == target_channels:
        if kernel is not None:
            raise ValueError("adapter kernel given although channel counts already match")
        return h
    if kernel is None:
        raise ValueError(
            f"adapter needs a 1x1x1 kernel to map {channels} -> {target_channels} channels")
    if kernel.weights.data.shape[2:] != (1, 1, 1):
        raise ShapeError(f"adapter kernel must be 1x1x1, got {kernel.weights.data.shape[2:]}")
    if kernel.weights.data.shape[0] != target_channels:
        raise ShapeError(
            f"adapter kernel outputs {kernel.weights.data.shape[0]} channels, "
            f"expected {target_channels}")
    return conv3d(h, kernel, stride=1, padding=0)


# -- construction -------------------------------------------------------------


def _layer_plan(cfg):
    """Ordered (name, kind, shape-info) description of every layer."""
    plan = []

    def stage(prefix, c_in, c_out, n_blocks):
        for j in range(n_blocks):
            cin_j = c_in if j == 0 else c_out
            plan.append((f"{prefix}.block{j}.conv", "conv", (c_out, cin_j, 3, 3, 3)))
            plan.append((f"{prefix}.block{j}.bn", "bn", c_out))
        if c_in != c_out:
            plan.append((f"{prefix}.skip", "conv", (c_out, c_in, 1, 1, 1)))

    levels = cfg.levels
    for lvl in range(levels):
        c = cfg.channels_at(lvl)
        stage(f"enc{lvl}", cfg.in_channels if lvl == 0 else c, c, cfg.convs_per_level[lvl])
        c_next = cfg.channels_at(lvl + 1)
        plan.append((f"down{lvl}.conv", "conv", (c_next, c, 2, 2, 2)))
        plan.append((f"down{lvl}.bn", "bn", c_next))
        plan.append((f"down{lvl}.skip", "conv", (c_next, c, 1, 1, 1)))
    c_bottom = cfg.channels_at(levels)
    stage("bottom", c_bottom, c_bottom, cfg.convs_per_level[-1])
    for lvl in reversed(range(levels)):
        c_hi, c_lo = cfg.channels_at(lvl + 1), cfg.channels_at(lvl)
        if cfg.upsample_kind == "learned":
            plan.append((f"up{lvl}.conv", "transpose", (c_hi, c_lo, 2, 2, 2)))
        else:
            plan.append((f"up{lvl}.conv", "conv", (c_lo, c_hi, 1, 1, 1)))
        plan.append((f"up{lvl}.bn", "bn", c_lo))
        plan.append((f"up{lvl}.skip", "conv", (c_lo, c_hi, 1, 1, 1)))
        stage(f"dec{lvl}", 2 * c_lo, c_lo, cfg.convs_per_level[lvl])
    c_head = cfg.base_channels
    if cfg.flair_concat:
        if cfg.post_concat_conv:
            plan.append(("flair.block0.conv", "conv", (c_head, c_head + 1, 3, 3, 3)))
            plan.append(("flair.block0.bn", "bn", c_head))
        else:
            c_head = c_head + 1
    plan.append(("head.conv", "conv", (cfg.out_classes, c_head, 1, 1, 1)))
    return plan


def build_network(cfg, seed, dtype=np.float32):
    """Deterministically initialized parameters for ``cfg``.

    Convolutions get fan-in-scaled zero-mean normal weights and zero biases;
    batch norm starts at gamma 1, beta 0, running mean 0 and running var 1.
    """
    cfg.validate()
    rng = np.random.default_rng(seed)
    entries = {}
    for name, kind, info in _layer_plan(cfg):
        if kind == "bn":
            entries[name] = BatchNormState(
                gamma=Tensor(np.ones(info, dtype=dtype), requires_grad=True),
                beta=Tensor(np.zeros(info, dtype=dtype), requires_grad=True),
                running_mean=np.zeros(info, dtype=dtype),
                running_var=np.ones(info, dtype=dtype),
                momentum=cfg.bn_momentum,
                epsilon=cfg.bn_epsilon)
        else:
            fan_in = (info[0] if kind == "transpose" else info[1]) * int(np.prod(info[2:]))
            std = float(np.sqrt(2.0 / fan_in))
            weights = rng.normal(0.0, std, size=info).astype(dtype)
            bias_len = info[1] if kind == "transpose" else info[0]
            entries[name] = ConvKernel(
                Tensor(weights, requires_grad=True),
                Tensor(np.zeros(bias_len, dtype=dtype), requires_grad=True))
    return ModelParams(entries)


# -- forward ------------------------------------------------------------------


def _check_input(cfg, x):
    if x.data.ndim != 5:
        raise ShapeError(f"network input must be 5-D, got shape {x.data.shape}")
    if x.data.shape[1] != cfg.in_channels:
        raise ShapeError(
            f"network input has {x.data.shape[1]} channels, config expects {cfg.in_channels}")
    divisor = 2 ** cfg.levels
    for axis, name in enumerate(("depth", "height", "width")):
        if x.data.shape[2 + axis] % divisor != 0:
            raise ShapeError(
                f"input {name} {x.data.shape[2 + axis]} is not divisible by 2^levels={divisor}")


def _guard(name, tensor, mode):
    if mode == "train" and np.isnan(tensor.data).any():
        raise NumericsError(f"NaN activation in {name}")
    return tensor


def _stage_forward(params, prefix, x, n_blocks, c_out, mode):
    h = x
    for j in range(n_blocks):
        h = conv_block(h, params[f"{prefix}.block{j}.conv"], params[f"{prefix}.block{j}.bn"],
                       mode=mode)
    skip = residual_adapter(x, c_out, "none", params.get(f"{prefix}.skip"))
    return _guard(prefix, h + skip, mode)


def forward(params, cfg, scan, mode="infer"):
    """Per-voxel class probabilities for a (1, C, D, H, W) scan tensor."""
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    x = scan if isinstance(scan, Tensor) else as_tensor(scan)
    _check_input(cfg, x)

    feats = []
    h = x
    for lvl in range(cfg.levels):
        h = _stage_forward(params, f"enc{lvl}", h, cfg.convs_per_level[lvl],
                           cfg.channels_at(lvl), mode)
        feats.append(h)
        c_next = cfg.channels_at(lvl + 1)
        body = conv3d(h, params[f"down{lvl}.conv"], stride=2, padding=0)
        body = relu(batchnorm3d(body, params[f"down{lvl}.bn"], mode=mode))
        skip = residual_adapter(h, c_next, "down", params[f"down{lvl}.skip"])
        h = _guard(f"down{lvl}", body + skip, mode)

    h = _stage_forward(params, "bottom", h, cfg.convs_per_level[-1],
                       cfg.channels_at(cfg.levels), mode)

    for lvl in reversed(range(cfg.levels)):
        c_lo = cfg.channels_at(lvl)
        if cfg.upsample_kind == "learned":
            body = conv3d_transpose(h, params[f"up{lvl}.conv"], stride=2)
        else:
            body = conv3d(repeat_upsample3d(h, 2), params[f"up{lvl}.conv"],
                          stride=1, padding=0)
        body = relu(batchnorm3d(body, params[f"up{lvl}.bn"], mode=mode))
        skip = residual_adapter(h, c_lo, "up", params[f"up{lvl}.skip"])
        h = _guard(f"up{lvl}", body + skip, mode)
        h = concat_channels(h, feats[lvl])
        h = _stage_forward(params, f"dec{lvl}", h, cfg.convs_per_level[lvl], c_lo, mode)

    if cfg.flair_concat:
        flair = slice_channels(x, cfg.flair_channel, cfg.flair_channel + 1)
        h = concat_channels(h, flair)
        if cfg.post_concat_conv:
            h = conv_block(h, params["flair.block0.conv"], params["flair.block0.bn"], mode=mode)

    logits = conv3d(h, params["head.conv"], stride=1, padding=0)
    return _guard("head", softmax_channels(logits), mode)


# -- checkpoints --------------------------------------------------------------


def save_checkpoint(path, params, cfg, seed, meta=None):
    """Write params as named float32 little-endian records with a JSON header."""
    header = json.dumps({"config": cfg.to_dict(), "seed": int(seed),
                         "meta": dict(meta or {})}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(struct.pack("<I", len(params.entries)))
        for name, entry in params.items():
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            if isinstance(entry, ConvKernel):
                fh.write(struct.pack("<B", _KIND_CONV))
                shape = entry.weights.data.shape
                fh.write(struct.pack("<5I", *shape))
                fh.write(np.ascontiguousarray(entry.weights.data, dtype="<f4").tobytes())
                fh.write(struct.pack("<I", entry.bias.data.shape[0]))
                fh.write(np.ascontiguousarray(entry.bias.data, dtype="<f4").tobytes())
            else:
                fh.write(struct.pack("<B", _KIND_BN))
                fh.write(struct.pack("<I", entry.channels))
                fh.write(struct.pack("<2d", entry.momentum, entry.epsilon))
                for vec in (entry.gamma.data, entry.beta.data,
                            entry.running_mean, entry.running_var):
                    fh.write(np.ascontiguousarray(vec, dtype="<f4").tobytes())


def _read_exact(fh, count, what):
    data = fh.read(count)
    if len(data) != count:
        raise CheckpointError(f"checkpoint truncated while reading {what}: "
                              f"expected {count} bytes, got {len(data)}")
    return data


def load_checkpoint(path):
    """Read a checkpoint; returns (params, config, info dict with seed/meta)."""
    with open(path, "rb") as fh:
        magic = _read_exact(fh, len(CHECKPOINT_MAGIC), "magic")
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"not a checkpoint file: bad magic {magic!r}")
        version = struct.unpack("<I", _read_exact(fh, 4, "version"))[0]
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        header_len = struct.unpack("<I", _read_exact(fh, 4, "header length"))[0]
        header = json.loads(_read_exact(fh, header_len, "header"))
        cfg = NetworkConfig.from_dict(header["config"])
        count = struct.unpack("<I", _read_exact(fh, 4, "record count"))[0]
        entries = {}
        for _ in range(count):
            name_len = struct.unpack("<H", _read_exact(fh, 2, "record name length"))[0]
            name = _read_exact(fh, name_len, "record name").decode("utf-8")
            kind = struct.unpack("<B", _read_exact(fh, 1, "record kind"))[0]
            if kind == _KIND_CONV:
                shape = struct.unpack("<5I", _read_exact(fh, 20, "kernel shape"))
                n = int(np.prod(shape))
                weights = np.frombuffer(_read_exact(fh, 4 * n, f"{name} weights"),
                                        dtype="<f4").reshape(shape).copy()
                bias_len = struct.unpack("<I", _read_exact(fh, 4, "bias length"))[0]
                bias = np.frombuffer(_read_exact(fh, 4 * bias_len, f"{name} bias"),
                                     dtype="<f4").copy()
                entries[name] = ConvKernel(Tensor(weights, requires_grad=True),
                                           Tensor(bias, requires_grad=True))
            elif kind == _KIND_BN:
                channels = struct.unpack("<I", _read_exact(fh, 4, "bn channels"))[0]
                momentum, epsilon = struct.unpack("<2d", _read_exact(fh, 16, "bn scalars"))
                vecs = [np.frombuffer(_read_exact(fh, 4 * channels, f"{name} stats"),
                                      dtype="<f4").copy() for _ in range(4)]
                entries[name] = BatchNormState(
                    gamma=Tensor(vecs[0], requires_grad=True),
                    beta=Tensor(vecs[1], requires_grad=True),
                    running_mean=vecs[2], running_var=vecs[3],
                    momentum=momentum, epsilon=epsilon)
            else:
                raise CheckpointError(f"unknown record kind {kind} for {name!r}")
        trailing = fh.read(1)
        if trailing:
            raise CheckpointError("checkpoint has trailing bytes after last record")
    return ModelParams(entries), cfg, {"seed": header["seed"], "meta": header["meta"]}
