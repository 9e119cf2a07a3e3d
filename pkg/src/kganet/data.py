"""Synthetic video/keyframe data, its binary file format, and batch sampling.

The generator draws two Gaussian class clusters in input space. Standalone
images (keyframes) come from a tight distribution around their class mean.
Each video frame is, with probability ``keyframe_fraction``, drawn from that
same tight distribution and otherwise from a much wider one; for malignant
videos the wide distribution's mean is pulled toward the benign mean so that
the malignant evidence lives in a minority of frames.

File layout (all little-endian)::

    magic  b"KGAD"
    u8     version (= 1)
    u32    n_videos
    u32    n_images
    records, videos first then images:
        u32 id | u8 label | u16 n_frames | u16 dim
        u8 mask[n_frames]      (videos only; images have n_frames=1, no mask)
        f64 values[n_frames * dim], row-major
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, fields
from typing import List, Optional, Tuple

import numpy as np

from .errors import ConfigError, ContractError, ParseError, VersionError

DATASET_MAGIC = b"KGAD"
DATASET_VERSION = 1
_HEADER = struct.Struct("<4sBII")
_RECORD = struct.Struct("<IBHH")


@dataclass
class SyntheticConfig:
    input_dim: int = 32
    class_separation: float = 1.5
    keyframe_noise_sigma: float = 0.5
    offcenter_noise_sigma: float = 3.0
    frames_min: int = 8
    frames_max: int = 32
    keyframe_fraction: float = 0.2
    malignant_shift: float = 0.5
    n_videos_per_class: int = 60
    n_test_videos_per_class: int = 50
    n_images_per_class: int = 200
    seed: int = 0

    def validate(self) -> None:
        if not self.offcenter_noise_sigma > self.keyframe_noise_sigma >= 0:
            raise ConfigError("need offcenter_noise_sigma > keyframe_noise_sigma >= 0")
        if not 0.0 < self.keyframe_fraction < 1.0:
            raise ConfigError("keyframe_fraction must lie in (0, 1)")
        if not 0.0 <= self.malignant_shift <= 1.0:
            raise ConfigError("malignant_shift must lie in [0, 1]")
        if self.class_separation < 0:
            raise ConfigError("class_separation must be non-negative")
        if not 1 <= self.frames_min <= self.frames_max <= 0xFFFF:
            raise ConfigError("need 1 <= frames_min <= frames_max <= 65535")
        if not 1 <= self.input_dim <= 0xFFFF:
            raise ConfigError("input_dim must lie in [1, 65535]")
        for name in ("n_videos_per_class", "n_test_videos_per_class", "n_images_per_class"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")

    @classmethod
    def field_names(cls) -> List[str]:
        return [f.name for f in fields(cls)]


@dataclass
class VideoSample:
    frames: np.ndarray
    label: int
    id: int
    keyframe_mask: np.ndarray = field(default=None)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ContractError("video frames must be an N x dim array with N >= 1")
        if self.keyframe_mask is None:
            self.keyframe_mask = np.zeros(self.frames.shape[0], dtype=bool)
        self.keyframe_mask = np.asarray(self.keyframe_mask, dtype=bool)
        if self.keyframe_mask.shape != (self.frames.shape[0],):
            raise ContractError("keyframe_mask length must equal the frame count")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class ImageSample:
    pixels: np.ndarray
    label: int
    id: int

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64).reshape(-1)


@dataclass
class Dataset:
    videos: List[VideoSample] = field(default_factory=list)
    images: List[ImageSample] = field(default_factory=list)

    @property
    def input_dim(self) -> Optional[int]:
        if self.videos:
            return self.videos[0].frames.shape[1]
        if self.images:
            return self.images[0].pixels.shape[0]
        return None


@dataclass
class MixedBatch:
    videos: List[VideoSample]
    images: List[ImageSample]

    def __len__(self) -> int:
        return len(self.videos) + len(self.images)


def class_means(config: SyntheticConfig) -> Tuple[np.ndarray, np.ndarray]:
    """Input-space (benign, malignant) means used by :func:`generate`."""
    rng = np.random.default_rng(config.seed)
    return _draw_means(rng, config)


def _draw_means(rng, config):
    u = rng.standard_normal(config.input_dim)
    u /= np.linalg.norm(u)
    half = 0.5 * config.class_separation * u
    return -half, half


def generate(config: Optional[SyntheticConfig] = None) -> Tuple[Dataset, Dataset]:
    """Draw (train, test) splits; deterministic given ``config.seed``."""
    config = config or SyntheticConfig()
    config.validate()
    rng = np.random.default_rng(config.seed)
    mean_benign, mean_mal = _draw_means(rng, config)
    means = {0: mean_benign, 1: mean_mal}
    wide_means = {0: mean_benign, 1: mean_mal + config.malignant_shift * (mean_benign - mean_mal)}
    dim = config.input_dim
    next_id = 0

    def video(label):
        nonlocal next_id
        n = int(rng.integers(config.frames_min, config.frames_max + 1))
        mask = rng.random(n) < config.keyframe_fraction
        tight = means[label] + config.keyframe_noise_sigma * rng.standard_normal((n, dim))
        wide = wide_means[label] + config.offcenter_noise_sigma * rng.standard_normal((n, dim))
        sample = VideoSample(np.where(mask[:, None], tight, wide), label, next_id, mask)
        next_id += 1
        return sample

    def image(label):
        nonlocal next_id
        pixels = means[label] + config.keyframe_noise_sigma * rng.standard_normal(dim)
        sample = ImageSample(pixels, label, next_id)
        next_id += 1
        return sample

    train = Dataset()
    for label in (0, 1):
        train.videos.extend(video(label) for _ in range(config.n_videos_per_class))
    for label in (0, 1):
        train.images.extend(image(label) for _ in range(config.n_images_per_class))
    test = Dataset()
    for label in (0, 1):
        test.videos.extend(video(label) for _ in range(config.n_test_videos_per_class))
    return train, test


# ---------------------------------------------------------------------------
# file I/O


def encode_dataset(dataset: Dataset) -> bytes:
    parts = [_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, len(dataset.videos), len(dataset.images))]
    for v in dataset.videos:
        n, dim = v.frames.shape
        parts.append(_RECORD.pack(v.id, v.label, n, dim))
        parts.append(v.keyframe_mask.astype(np.uint8).tobytes())
        parts.append(np.ascontiguousarray(v.frames, dtype="<f8").tobytes())
    for im in dataset.images:
        parts.append(_RECORD.pack(im.id, im.label, 1, im.pixels.shape[0]))
        parts.append(np.ascontiguousarray(im.pixels, dtype="<f8").tobytes())
    return b"".join(parts)


def decode_dataset(buf: bytes) -> Dataset:
    if len(buf) < _HEADER.size:
        raise ParseError("truncated header", len(buf))
    magic, version, n_videos, n_images = _HEADER.unpack_from(buf, 0)
    if magic != DATASET_MAGIC:
        raise ParseError("bad magic, not a dataset file", 0)
    if version != DATASET_VERSION:
        raise VersionError(f"unsupported dataset version {version} (expected {DATASET_VERSION})")
    pos = _HEADER.size
    out = Dataset()

    def need(n, what):
        if pos + n > len(buf):
            raise ParseError(f"truncated {what}", pos)

    for i in range(n_videos + n_images):
        is_video = i < n_videos
        need(_RECORD.size, "record header")
        rid, label, n, dim = _RECORD.unpack_from(buf, pos)
        if label not in (0, 1):
            raise ParseError(f"invalid label {label}", pos + 4)
        if not is_video and n != 1:
            raise ParseError(f"image record with n_frames={n}", pos + 5)
        pos += _RECORD.size
        mask = None
        if is_video:
            need(n, "keyframe mask")
            mask = np.frombuffer(buf, dtype=np.uint8, count=n, offset=pos).astype(bool)
            pos += n
        need(8 * n * dim, "sample values")
        values = np.frombuffer(buf, dtype="<f8", count=n * dim, offset=pos).astype(np.float64)
        pos += 8 * n * dim
        if is_video:
            out.videos.append(VideoSample(values.reshape(n, dim), label, rid, mask))
        else:
            out.images.append(ImageSample(values, label, rid))
    if pos != len(buf):
        raise ParseError("trailing bytes after last record", pos)
    return out


def save_dataset(path, dataset: Dataset) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_dataset(dataset))


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        return decode_dataset(fh.read())


# ---------------------------------------------------------------------------
# sampling


def subsample_frames(video: VideoSample, max_frames: int, rng: np.random.Generator) -> VideoSample:
    """Keep ``max_frames`` frames chosen uniformly without replacement, in temporal order."""
    if video.n_frames <= max_frames:
        return video
    keep = np.sort(rng.choice(video.n_frames, size=max_frames, replace=False))
    return VideoSample(video.frames[keep], video.label, video.id, video.keyframe_mask[keep])


def sample_batch(
    rng: np.random.Generator,
    train: Dataset,
    batch_size: int,
    max_frames: int = 128,
    video_prob: float = 0.5,
    fixed_split: bool = False,
) -> MixedBatch:
    """Fill ``batch_size`` slots, each a video with probability ``video_prob``.

    With ``fixed_split`` the composition is exactly ``round(batch_size * video_prob)``
    videos and the rest images.
    """
    if batch_size < 1:
        raise ContractError("batch_size must be >= 1")
    if video_prob > 0 and not train.videos:
        raise ContractError("cannot sample videos from a dataset with no videos")
    if video_prob < 1 and not train.images:
        raise ContractError("cannot sample images from a dataset with no images")
    if fixed_split:
        n_videos = int(round(batch_size * video_prob))
        is_video = [i < n_videos for i in range(batch_size)]
    else:
        is_video = list(rng.random(batch_size) < video_prob)
    videos, images = [], []
    for slot in is_video:
        if slot:
            v = train.videos[int(rng.integers(len(train.videos)))]
            videos.append(subsample_frames(v, max_frames, rng))
        else:
            images.append(train.images[int(rng.integers(len(train.images)))])
    return MixedBatch(videos, images)
