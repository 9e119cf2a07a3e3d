"""Keyframe-guided attention network: shared backbone, frame attention, head.

The video path runs every frame through the backbone, scores each frame with
``sigmoid(FC(F_i))`` and sums the frame features weighted by those scores
(no normalization by the weight total). The image path runs the *same*
backbone parameter objects and the same head, skipping attention.

Parameters are also serializable through a small little-endian archive
format (see :func:`save_archive`).
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import autograd as ag
from .autograd import Parameter, Tensor
from .errors import ConfigError, ContractError, ParseError, VersionError

ACTIVATIONS = {
    "tanh": ag.tanh,
    "sigmoid": ag.sigmoid,
    "softplus": ag.softplus,
    "identity": lambda x: x,
}

POOLING_MODES = ("attention", "mean")


@dataclass
class ModelConfig:
    input_dim: int = 32
    hidden_dim: int = 32
    feature_dim: int = 16
    hidden_activation: str = "softplus"
    feature_activation: str = "tanh"
    pooling: str = "attention"
    max_frames: int = 128
    seed: int = 0

    def validate(self) -> None:
        for name in ("input_dim", "hidden_dim", "feature_dim", "max_frames"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("hidden_activation", "feature_activation"):
            if getattr(self, name) not in ACTIVATIONS:
                raise ConfigError(f"unknown activation {getattr(self, name)!r}")
        if self.pooling not in POOLING_MODES:
            raise ConfigError(f"pooling must be one of {POOLING_MODES}")


def _uniform_init(rng: np.random.Generator, fan_in: int, shape: tuple) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear:
    def __init__(self, name: str, fan_in: int, fan_out: int, rng: np.random.Generator):
        self.weight = Parameter(_uniform_init(rng, fan_in, (fan_in, fan_out)), f"{name}.weight")
        self.bias = Parameter(np.zeros(fan_out), f"{name}.bias")

    def __call__(self, x: Tensor) -> Tensor:
        return ag.matmul(x, self.weight) + self.bias

    def parameters(self) -> List[Parameter]:
        return [self.weight, self.bias]


class Backbone:
    """Two fully-connected layers mapping input_dim -> hidden_dim -> feature_dim."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.input_dim = config.input_dim
        self.layers = [
            (Linear("backbone.0", config.input_dim, config.hidden_dim, rng), config.hidden_activation),
            (Linear("backbone.1", config.hidden_dim, config.feature_dim, rng), config.feature_activation),
        ]

    def __call__(self, x: Tensor) -> Tensor:
        for layer, act in self.layers:
            x = ACTIVATIONS[act](layer(x))
        return x

    def parameters(self) -> List[Parameter]:
        return [p for layer, _ in self.layers for p in layer.parameters()]


class FrameAttention:
    """Per-frame weight ``w_i = sigmoid(F_i . a + b)``."""

    def __init__(self, feature_dim: int, rng: np.random.Generator):
        self.fc = Linear("attention", feature_dim, 1, rng)

    def __call__(self, features: Tensor) -> Tensor:
        n = features.shape[0]
        return ag.sigmoid(self.fc(features)).reshape(n)

    def parameters(self) -> List[Parameter]:
        return self.fc.parameters()


class ClassifierHead:
    """Linear map to two raw logits (index 0 benign, 1 malignant)."""

    def __init__(self, feature_dim: int, rng: np.random.Generator):
        self.fc = Linear("head", feature_dim, 2, rng)

    def __call__(self, features: Tensor) -> Tensor:
        return self.fc(features)

    def parameters(self) -> List[Parameter]:
        return self.fc.parameters()


@dataclass
class VideoForwardOutput:
    frame_features: Tensor
    attention_weights: Tensor
    aggregated_feature: Tensor
    video_logits: Tensor
    frame_logits: Tensor


def aggregate(features: Tensor, weights: Tensor) -> Tensor:
    """Weighted sum of frame feature rows."""
    features, weights = ag.as_tensor(features), ag.as_tensor(weights)
    if weights.ndim != 1 or features.ndim != 2 or weights.shape[0] != features.shape[0]:
        raise ContractError(
            f"aggregate needs N weights for N frames, got {weights.shape} and {features.shape}"
        )
    n = weights.shape[0]
    return ag.matmul(weights.reshape(1, n), features).reshape(features.shape[1])


class KGANet:
    def __init__(self, config: Optional[ModelConfig] = None):
        self.config = config or ModelConfig()
        self.config.validate()
        rng = np.random.default_rng(self.config.seed)
        self.backbone = Backbone(self.config, rng)
        self.attention = FrameAttention(self.config.feature_dim, rng)
        self.head = ClassifierHead(self.config.feature_dim, rng)
        names = [p.name for p in self.parameters()]
        assert len(set(names)) == len(names)

    def parameters(self) -> List[Parameter]:
        return self.backbone.parameters() + self.attention.parameters() + self.head.parameters()

    def named_parameters(self) -> Dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def zero_grad(self) -> None:
        ag.zero_grads(self.parameters())

    def _check_input(self, x: Tensor) -> Tensor:
        x = ag.as_tensor(x)
        if x.shape[-1] != self.config.input_dim:
            raise ConfigError(
                f"input dimension {x.shape[-1]} does not match model input_dim {self.config.input_dim}"
            )
        return x

    def backbone_forward(self, x) -> Tensor:
        x = self._check_input(x)
        if x.ndim == 1:
            x = x.reshape(1, x.shape[0])
        return self.backbone(x)

    def attention_weights(self, features: Tensor) -> Tensor:
        if features.shape[0] < 1:
            raise ContractError("attention needs at least one frame")
        return self.attention(features)

    def video_forward(self, clip) -> VideoForwardOutput:
        clip = self._check_input(clip)
        n = clip.shape[0] if clip.ndim == 2 else 0
        if n < 1:
            raise ContractError("video clip must contain at least one frame")
        if n > self.config.max_frames:
            raise ContractError(f"clip has {n} frames, more than max_frames={self.config.max_frames}")
        features = self.backbone(clip)
        if self.config.pooling == "attention":
            weights = self.attention_weights(features)
        else:
            weights = Tensor(np.full(n, 1.0 / n))
        pooled = aggregate(features, weights)
        video_logits = self.head(pooled.reshape(1, pooled.shape[0])).reshape(2)
        return VideoForwardOutput(
            frame_features=features,
            attention_weights=weights,
            aggregated_feature=pooled,
            video_logits=video_logits,
            frame_logits=self.head(features),
        )

    def image_forward(self, img) -> Tuple[Tensor, Tensor]:
        """Features and logits for one image (vector) or a batch (rows)."""
        img = self._check_input(img)
        single = img.ndim == 1
        feats = self.backbone_forward(img)
        logits = self.head(feats)
        if single:
            return feats.reshape(feats.shape[1]), logits.reshape(2)
        return feats, logits

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters().items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = set(params) - set(state)
        if missing:
            raise ConfigError(f"state is missing parameters: {sorted(missing)}")
        for name, p in params.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ConfigError(f"shape mismatch for {name}: {value.shape} vs {p.shape}")
            p.data = value.copy()


# ---------------------------------------------------------------------------
# archive format
#
#   magic b"KGAC" | u8 version | u32 n_entries
#   per entry: u16 name_len | name (utf-8) | u8 ndim | u32 dims[ndim] | f64 values (row-major)
#   u32 meta_len | meta (utf-8 JSON, sorted keys)
#
# all integers and floats little-endian.

ARCHIVE_MAGIC = b"KGAC"
ARCHIVE_VERSION = 1


def encode_archive(tensors: Dict[str, np.ndarray], meta: Optional[dict] = None) -> bytes:
    parts = [ARCHIVE_MAGIC, struct.pack("<BI", ARCHIVE_VERSION, len(tensors))]
    for name, value in tensors.items():
        value = np.ascontiguousarray(value, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack(f"<B{value.ndim}I", value.ndim, *value.shape))
        parts.append(value.tobytes())
    blob = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(blob)))
    parts.append(blob)
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def read(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise ParseError(f"truncated while reading {what}", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.read(struct.calcsize(fmt), what))


def decode_archive(buf: bytes) -> Tuple[Dict[str, np.ndarray], dict]:
    r = _Reader(buf)
    if r.read(4, "magic") != ARCHIVE_MAGIC:
        raise ParseError("bad magic, not a checkpoint archive", 0)
    (version,) = r.unpack("<B", "version")
    if version != ARCHIVE_VERSION:
        raise VersionError(f"unsupported archive version {version} (expected {ARCHIVE_VERSION})")
    (count,) = r.unpack("<I", "entry count")
    tensors = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H", "name length")
        name = r.read(name_len, "name").decode("utf-8")
        (ndim,) = r.unpack("<B", "ndim")
        shape = r.unpack(f"<{ndim}I", "shape")
        n = int(np.prod(shape, dtype=np.int64))
        raw = r.read(8 * n, f"values of {name}")
        tensors[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
    (meta_len,) = r.unpack("<I", "metadata length")
    meta = json.loads(r.read(meta_len, "metadata").decode("utf-8"))
    if r.pos != len(buf):
        raise ParseError("trailing bytes after archive", r.pos)
    return tensors, meta


def save_archive(path, tensors: Dict[str, np.ndarray], meta: Optional[dict] = None) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_archive(tensors, meta))


def load_archive(path) -> Tuple[Dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        return decode_archive(fh.read())


def save_model(path, model: KGANet) -> None:
    save_archive(path, model.state_dict(), {"model_config": asdict(model.config)})


def load_model(path) -> KGANet:
    tensors, meta = load_archive(path)
    if "model_config" not in meta:
        raise ConfigError("archive has no model_config metadata")
    model = KGANet(ModelConfig(**meta["model_config"]))
    model.load_state_dict(tensors)
    return model
