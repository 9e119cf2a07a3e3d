import hashlib

import numpy as np
import pytest

from kganet.data import (
    Dataset,
    SyntheticConfig,
    VideoSample,
    class_means,
    decode_dataset,
    encode_dataset,
    generate,
    load_dataset,
    sample_batch,
    save_dataset,
    subsample_frames,
)
from kganet.errors import ConfigError, ContractError, ParseError, VersionError
from kganet.evaluation import auc


@pytest.fixture(scope="module")
def default_splits():
    return generate(SyntheticConfig())


def small_config(**kw):
    base = dict(n_videos_per_class=3, n_test_videos_per_class=2, n_images_per_class=4, input_dim=5)
    base.update(kw)
    return SyntheticConfig(**base)


class TestConfig:
    @pytest.mark.parametrize(
        "override",
        [
            {"offcenter_noise_sigma": 0.4},
            {"keyframe_fraction": 0.0},
            {"keyframe_fraction": 1.0},
            {"n_images_per_class": 0},
            {"frames_min": 10, "frames_max": 5},
            {"class_separation": -1.0},
        ],
    )
    def test_rejects_degenerate(self, override):
        with pytest.raises(ConfigError):
            generate(SyntheticConfig(**override))


class TestGenerate:
    def test_counts_and_disjoint_ids(self, default_splits):
        train, test = default_splits
        cfg = SyntheticConfig()
        assert len(train.videos) == 2 * cfg.n_videos_per_class
        assert len(train.images) == 2 * cfg.n_images_per_class
        assert len(test.videos) == 2 * cfg.n_test_videos_per_class and not test.images
        train_ids = {v.id for v in train.videos} | {im.id for im in train.images}
        assert not train_ids & {v.id for v in test.videos}

    def test_frame_counts_in_range(self, default_splits):
        cfg = SyntheticConfig()
        for v in default_splits[0].videos + default_splits[1].videos:
            assert cfg.frames_min <= v.n_frames <= cfg.frames_max

    def test_deterministic(self):
        a = encode_dataset(generate(small_config(seed=5))[0])
        b = encode_dataset(generate(small_config(seed=5))[0])
        c = encode_dataset(generate(small_config(seed=6))[0])
        assert a == b and a != c

    def test_zero_keyframe_sigma_gives_exact_means(self):
        cfg = small_config(keyframe_noise_sigma=0.0)
        benign, mal = class_means(cfg)
        for im in generate(cfg)[0].images:
            np.testing.assert_array_equal(im.pixels, mal if im.label == 1 else benign)

    def test_near_one_keyframe_fraction_masks_everything(self):
        train, _ = generate(small_config(keyframe_fraction=0.999999))
        assert all(v.keyframe_mask.all() for v in train.videos)

    def test_images_tighter_than_frames(self, default_splits):
        train, _ = default_splits

        def spread(rows_by_label):
            out = []
            for rows in rows_by_label.values():
                rows = np.array(rows)
                out.extend(np.linalg.norm(rows - rows.mean(axis=0), axis=1))
            return np.mean(out)

        imgs, frames = {0: [], 1: []}, {0: [], 1: []}
        for im in train.images:
            imgs[im.label].append(im.pixels)
        for v in train.videos:
            frames[v.label].extend(v.frames)
        assert spread(imgs) < spread(frames)

    def test_images_separable_by_distance_to_empirical_means(self, default_splits):
        train, _ = default_splits
        pix = np.stack([im.pixels for im in train.images])
        labels = np.array([im.label for im in train.images])
        m0, m1 = pix[labels == 0].mean(axis=0), pix[labels == 1].mean(axis=0)
        score = np.linalg.norm(pix - m0, axis=1) - np.linalg.norm(pix - m1, axis=1)
        assert auc(score, labels) > 0.95

    def test_keyframes_closer_to_class_mean(self, default_splits):
        benign, mal = class_means(SyntheticConfig())
        near, far = [], []
        for v in default_splits[0].videos:
            d = np.linalg.norm(v.frames - (mal if v.label else benign), axis=1)
            near.extend(d[v.keyframe_mask])
            far.extend(d[~v.keyframe_mask])
        assert np.mean(near) < np.mean(far)


class TestFileFormat:
    def test_round_trip_bit_exact(self, tmp_path):
        train, _ = generate(small_config())
        path = tmp_path / "train.kgad"
        save_dataset(path, train)
        back = load_dataset(path)
        assert encode_dataset(back) == path.read_bytes()
        for a, b in zip(train.videos, back.videos):
            assert a.frames.tobytes() == b.frames.tobytes()
            assert (a.id, a.label) == (b.id, b.label)
            np.testing.assert_array_equal(a.keyframe_mask, b.keyframe_mask)
        for a, b in zip(train.images, back.images):
            assert a.pixels.tobytes() == b.pixels.tobytes()

    def test_size_arithmetic(self):
        train, _ = generate(small_config())
        dim = 5
        # header 4+1+4+4, record header 4+1+2+2
        expected = 13
        for v in train.videos:
            expected += 9 + v.n_frames + 8 * v.n_frames * dim
        expected += len(train.images) * (9 + 8 * dim)
        assert len(encode_dataset(train)) == expected

    def test_empty_dataset(self):
        blob = encode_dataset(Dataset())
        assert len(blob) == 13
        back = decode_dataset(blob)
        assert back.videos == [] and back.images == []

    @pytest.mark.parametrize("cut", [0, 3, 12, 20, 40, -1])
    def test_truncation_is_parse_error(self, cut):
        blob = encode_dataset(generate(small_config())[0])
        with pytest.raises(ParseError, match="offset"):
            decode_dataset(blob[:cut])

    def test_bad_magic(self):
        blob = bytearray(encode_dataset(Dataset()))
        blob[0:4] = b"XXXX"
        with pytest.raises(ParseError):
            decode_dataset(bytes(blob))

    def test_version_error(self):
        blob = bytearray(encode_dataset(Dataset()))
        blob[4] = 2
        with pytest.raises(VersionError):
            decode_dataset(bytes(blob))

    def test_trailing_bytes(self):
        with pytest.raises(ParseError):
            decode_dataset(encode_dataset(Dataset()) + b"\x00")

    def test_file_hash_stable(self):
        blob = encode_dataset(generate(small_config(seed=11))[0])
        assert hashlib.sha256(blob).hexdigest() == hashlib.sha256(
            encode_dataset(generate(small_config(seed=11))[0])
        ).hexdigest()


class TestSampling:
    def test_video_fraction_monte_carlo(self):
        train, _ = generate(small_config())
        rng = np.random.default_rng(0)
        n_videos = n_total = 0
        for _ in range(10_000):
            b = sample_batch(rng, train, 16)
            n_videos += len(b.videos)
            n_total += len(b)
        assert n_total == 160_000
        assert abs(n_videos / n_total - 0.5) <= 0.02

    def test_batch_size_one(self):
        train, _ = generate(small_config())
        b = sample_batch(np.random.default_rng(1), train, 1)
        assert len(b) == 1

    def test_fixed_split(self):
        train, _ = generate(small_config())
        b = sample_batch(np.random.default_rng(2), train, 16, fixed_split=True)
        assert len(b.videos) == 8 and len(b.images) == 8

    def test_long_video_subsampled_in_order(self):
        frames = np.arange(200.0)[:, None] * np.ones((1, 3))
        v = VideoSample(frames, 1, 0, np.arange(200) % 2 == 0)
        out = subsample_frames(v, 128, np.random.default_rng(0))
        assert out.n_frames == 128
        order = out.frames[:, 0]
        assert np.all(np.diff(order) > 0)
        np.testing.assert_array_equal(out.keyframe_mask, order % 2 == 0)

    def test_empty_modality(self):
        train, _ = generate(small_config())
        with pytest.raises(ContractError):
            sample_batch(np.random.default_rng(0), Dataset(videos=train.videos), 4)
        with pytest.raises(ContractError):
            sample_batch(np.random.default_rng(0), Dataset(images=train.images), 4)

    def test_stream_deterministic(self):
        train, _ = generate(small_config())

        def ids(seed):
            rng = np.random.default_rng(seed)
            out = []
            for _ in range(20):
                b = sample_batch(rng, train, 8)
                out.append(tuple(v.id for v in b.videos) + tuple(-im.id - 1 for im in b.images))
            return out

        assert ids(3) == ids(3)
