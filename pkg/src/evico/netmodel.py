"""Shared-encoder, dual-head fully convolutional segmentation network.

Encoder: three 3x3 relu convolutions (1 -> 8 -> 16 -> 16).  Each head: a
3x3 relu convolution (16 -> 16) followed by a 1x1 convolution to K logits.
Spatial resolution is preserved throughout.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .errors import ConfigError, ShapeError
from .heads import EvidentialOutputs, evidential_head, fuse_predictions, vanilla_head

# (name, in_channels, out_channels, kernel); None means K
ENCODER = (("enc1", 1, 8, 3), ("enc2", 8, 16, 3), ("enc3", 16, 16, 3))
HEAD = (("1", 16, 16, 3), ("2", 16, None, 1))
HEAD_NAMES = ("van", "evi")

CHECKPOINT_MAGIC = b"EVICOCKP"
CHECKPOINT_VERSION = 1


def layer_table(num_classes):
    layers = [(name, cin, cout, k) for name, cin, cout, k in ENCODER]
    for head in HEAD_NAMES:
        for suffix, cin, cout, k in HEAD:
            layers.append((head + suffix, cin, num_classes if cout is None else cout, k))
    return layers


class ModelParams:
    """Ordered mapping of parameter name -> float64 array."""

    def __init__(self, arrays: dict[str, np.ndarray]):
        self.arrays = {name: np.asarray(a, dtype=np.float64) for name, a in arrays.items()}

    @property
    def num_classes(self):
        return self.arrays["van2.w"].shape[0]

    def __getitem__(self, name):
        return self.arrays[name]

    def __iter__(self):
        return iter(self.arrays)

    def __len__(self):
        return len(self.arrays)

    def items(self):
        return self.arrays.items()

    def copy(self):
        return ModelParams({k: v.copy() for k, v in self.arrays.items()})

    def equals(self, other):
        return list(self) == list(other) and all(
            np.array_equal(self[k], other[k]) for k in self)


def init_params(seed, num_classes=2) -> ModelParams:
    """Kaiming normal weights (std = sqrt(2 / fan_in)), zero biases."""
    if num_classes < 2:
        raise ConfigError(f"need at least 2 classes, got {num_classes}")
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, cin, cout, k in layer_table(num_classes):
        fan_in = cin * k * k
        arrays[name + ".w"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(cout, cin, k, k))
        arrays[name + ".b"] = np.zeros(cout)
    return ModelParams(arrays)


@dataclass
class ModelOutputs:
    vanilla_logits: dc.DiffValue
    evidential_logits: dc.DiffValue
    p_vanilla: dc.DiffValue
    evidential: EvidentialOutputs

    @property
    def p_evidential(self):
        return self.evidential.prob

    @property
    def alpha(self):
        return self.evidential.alpha

    @property
    def weight(self):
        return self.evidential.weight


def _conv(x, leaves, name, k):
    w, b = leaves[name + ".w"], leaves[name + ".b"]
    y = dc.conv2d(x, w, stride=1, padding=k // 2)
    bias = dc.expand(dc.reshape(b, (1, -1, 1, 1)), y.shape)
    return y + bias


def forward(params, images, tape=None, activation="softplus") -> ModelOutputs:
    """Evaluate both heads on the shared encoder features.

    ``params`` may be a :class:`ModelParams` (values are placed on ``tape``,
    or evaluated tape-free when ``tape`` is None) or a dict of DiffValue
    leaves already on a tape.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or images.shape[1] != 1:
        raise ShapeError(f"images must be [N,1,H,W], got {images.shape}")
    if isinstance(params, ModelParams):
        if tape is None:
            leaves = {k: dc.constant(v) for k, v in params.items()}
        else:
            leaves = {k: tape.leaf(v) for k, v in params.items()}
    else:
        leaves = params

    h = dc.constant(images)
    for name, _, _, k in ENCODER:
        h = dc.relu(_conv(h, leaves, name, k))
    logits = {}
    for head in HEAD_NAMES:
        z = dc.relu(_conv(h, leaves, head + "1", HEAD[0][3]))
        logits[head] = _conv(z, leaves, head + "2", HEAD[1][3])
    return ModelOutputs(
        vanilla_logits=logits["van"],
        evidential_logits=logits["evi"],
        p_vanilla=vanilla_head(logits["van"]),
        evidential=evidential_head(logits["evi"], activation),
    )


PREDICT_MODES = ("fused", "vanilla", "evidential")


def prediction_probs(out: ModelOutputs, mode="fused") -> np.ndarray:
    if mode == "fused":
        return fuse_predictions(out.p_vanilla, out.p_evidential).value
    if mode == "vanilla":
        return out.p_vanilla.value
    if mode == "evidential":
        return out.p_evidential.value
    raise ConfigError(f"unknown prediction mode {mode!r}; choose from {PREDICT_MODES}")


def predict(params, images, mode="fused", activation="softplus"):
    """Hard labels ``[N,H,W]`` (ties go to the lower class) and the ``[N,H,W]`` weight map."""
    out = forward(params, images, activation=activation)
    probs = prediction_probs(out, mode)
    return np.argmax(probs, axis=1), out.weight.value[:, 0]


def save_checkpoint(params: ModelParams, path):
    """Write ``magic | version | layer count`` then, per array,
    ``name length | name | ndim | dims | little-endian float64 data``."""
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(params)))
        for name, arr in params.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return path


def load_checkpoint(path) -> ModelParams:
    data = Path(path).read_bytes()
    if data[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ConfigError(f"{path}: not a checkpoint file (bad magic)")
    pos = len(CHECKPOINT_MAGIC)
    arrays = {}
    try:
        version, count = struct.unpack_from("<II", data, pos)
        pos += 8
        if version != CHECKPOINT_VERSION:
            raise ConfigError(f"{path}: unsupported checkpoint version {version}")
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<I", data, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(data, dtype="<f8", count=size, offset=pos)
            pos += 8 * size
            arrays[name] = arr.reshape(shape).astype(np.float64)
    except (struct.error, ValueError) as exc:
        raise ConfigError(f"{path}: truncated checkpoint ({exc})") from None
    return ModelParams(arrays)
