"""
Tests for the synthetic dataset, episode sampling and dataset persistence
"""
import json
from collections import Counter

import numpy as np
import pytest

from src.config import DataConfig
from src.data.storage import load_dataset, save_dataset
from src.data.synth_data import generate_dataset, name_tokens_for, sample_episode
from src.errors import DatasetError, EpisodeSamplingError, UnknownClassError
from src.utils import episode_rng


def test_default_split_sizes_and_disjointness():
    config = DataConfig(images_per_class=2)
    dataset = generate_dataset(config)
    assert len(dataset.classes) == 35
    base, val, novel = (set(dataset.split_classes(s)) for s in ("base", "val", "novel"))
    assert (len(base), len(val), len(novel)) == (20, 5, 10)
    assert not base & val and not base & novel and not val & novel
    assert dataset.images.shape == (70, 3, 32, 32)


def test_generation_is_bit_identical(tiny_config):
    first = generate_dataset(tiny_config.data)
    second = generate_dataset(tiny_config.data)
    assert first.images.tobytes() == second.images.tobytes()
    assert [c.name_tokens for c in first.classes] == [c.name_tokens for c in second.classes]


def test_master_seed_changes_images(tiny_config):
    other = tiny_config.data.model_copy(update={"master_seed": 1})
    assert not np.array_equal(generate_dataset(tiny_config.data).images, generate_dataset(other).images)


def test_images_are_in_unit_range(tiny_dataset):
    assert tiny_dataset.images.dtype == np.float32
    assert tiny_dataset.images.min() >= 0.0 and tiny_dataset.images.max() <= 1.0


def test_classes_are_separable_by_pixel_distance():
    config = DataConfig(n_base=6, n_val=0, n_novel=2, images_per_class=10)
    dataset = generate_dataset(config)
    flat = dataset.images.reshape(len(dataset.images), -1).astype(np.float64)
    distances = np.sqrt(((flat[:, None, :] - flat[None, :, :]) ** 2).sum(-1))
    same = dataset.image_labels[:, None] == dataset.image_labels[None, :]
    off_diagonal = ~np.eye(len(flat), dtype=bool)
    assert distances[~same].mean() > distances[same & off_diagonal].mean()


def test_name_tokens_are_compositional():
    config = DataConfig()
    assert name_tokens_for(config, 3, 1) == (3, len(config.shape_vocab) + 1)
    assert name_tokens_for(config, 3, 1)[0] == name_tokens_for(config, 3, 4)[0]
    dataset = generate_dataset(config.model_copy(update={"images_per_class": 2}))
    assert dataset.vocab_size == len(config.shape_vocab) + len(config.palette_vocab)
    with pytest.raises(UnknownClassError):
        dataset.class_name_tokens(999)
    with pytest.raises(UnknownClassError):
        dataset.split_classes("test")


def test_rectangular_images():
    config = DataConfig(image_size=(4, 8), channels=1, patch_size=4, n_base=2, n_val=0, n_novel=2, images_per_class=3)
    assert generate_dataset(config).images.shape == (12, 1, 4, 8)


def test_too_many_classes_is_rejected():
    config = DataConfig(shape_vocab=[0, 1], palette_vocab=[0, 1], n_base=3, n_val=1, n_novel=1)
    with pytest.raises(DatasetError):
        generate_dataset(config)


def test_episode_sizes_and_labels(tiny_dataset):
    episode = sample_episode(tiny_dataset, "novel", 5, 1, 3, episode_rng(0, "eval", 0))
    assert len(episode.support_images) == 5
    assert len(episode.query_images) == 15
    assert sorted(set(episode.support_labels.tolist())) == list(range(5))
    assert sorted(set(episode.query_labels.tolist())) == list(range(5))
    assert not set(episode.support_image_ids.tolist()) & set(episode.query_image_ids.tolist())
    assert set(episode.class_ids.tolist()) <= set(tiny_dataset.split_classes("novel"))
    for label, class_id in enumerate(episode.class_ids):
        assert episode.name_tokens[label] == tiny_dataset.class_name_tokens(int(class_id))
        assert episode.slot(label) == label


def test_default_episode_shape():
    dataset = generate_dataset(DataConfig(images_per_class=16))
    episode = sample_episode(dataset, "novel", 5, 1, 15, episode_rng(0, "eval", 0))
    assert episode.support_images.shape[0] == 5
    assert episode.query_images.shape[0] == 75


def test_single_class_episode(tiny_dataset):
    episode = sample_episode(tiny_dataset, "base", 1, 1, 1, episode_rng(0, "train", 0))
    assert episode.support_labels.tolist() == [0]
    assert episode.query_labels.tolist() == [0]


def test_episode_sampling_errors(tiny_dataset):
    with pytest.raises(EpisodeSamplingError):
        sample_episode(tiny_dataset, "novel", 6, 1, 1, episode_rng(0, "eval", 0))
    with pytest.raises(EpisodeSamplingError):
        sample_episode(tiny_dataset, "novel", 2, 6, 7, episode_rng(0, "eval", 0))


def test_episode_streams_are_reproducible_and_tag_separated(tiny_dataset):
    def digest(tag, index):
        return sample_episode(tiny_dataset, "base", 3, 1, 2, episode_rng(5, tag, index)).digest()

    assert digest("train", 4) == digest("train", 4)
    assert digest("train", 4) != digest("eval", 4)


def test_novel_classes_are_drawn_uniformly(tiny_dataset):
    counts = Counter()
    for index in range(10_000):
        episode = sample_episode(tiny_dataset, "novel", 3, 1, 1, episode_rng(0, "eval", index))
        counts.update(episode.class_ids.tolist())
    novel = tiny_dataset.split_classes("novel")
    assert set(counts) == set(novel)
    expected = 10_000 * 3 / len(novel)
    for class_id in novel:
        assert abs(counts[class_id] - expected) <= 0.2 * expected


def test_save_and_load_dataset(tmp_path, tiny_dataset):
    save_dataset(tiny_dataset, tmp_path)
    loaded = load_dataset(tmp_path)
    assert np.array_equal(loaded.images, tiny_dataset.images)
    assert loaded.splits == tiny_dataset.splits
    assert loaded.classes == tiny_dataset.classes
    assert loaded.config == tiny_dataset.config

    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["image_shape"] == list(tiny_dataset.images.shape)


def test_load_dataset_detects_tampering(tmp_path, tiny_dataset):
    save_dataset(tiny_dataset, tmp_path)
    raw = bytearray((tmp_path / "images.bin").read_bytes())
    raw[-1] ^= 0xFF
    (tmp_path / "images.bin").write_bytes(bytes(raw))
    with pytest.raises(DatasetError):
        load_dataset(tmp_path)


def test_load_dataset_without_manifest(tmp_path):
    with pytest.raises(DatasetError):
        load_dataset(tmp_path)
