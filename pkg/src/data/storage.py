"""
Dataset persistence: JSON manifest plus a flat little-endian image array

images.bin layout:
    4 bytes   magic b"BKDS"
    uint32    format version (1)
    uint32    ndim
    ndim x uint32  dimensions (N, C, H, W)
    float32   N*C*H*W values, C order, little-endian
"""
import json
import struct
from pathlib import Path
from typing import Union

import numpy as np

from src.config import DataConfig
from src.data.synth_data import ClassSpec, Dataset
from src.errors import DatasetError
from src.utils import array_digest

IMAGE_MAGIC = b"BKDS"
IMAGE_VERSION = 1
MANIFEST_NAME = "manifest.json"
IMAGES_NAME = "images.bin"


def save_dataset(dataset: Dataset, directory: Union[str, Path]) -> Path:
    """Write manifest.json and images.bin under `directory`"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)

    images = np.ascontiguousarray(dataset.images, dtype="<f4")
    with open(directory / IMAGES_NAME, "wb") as f:
        f.write(IMAGE_MAGIC)
        f.write(struct.pack("<II", IMAGE_VERSION, images.ndim))
        f.write(struct.pack(f"<{images.ndim}I", *images.shape))
        f.write(images.tobytes())

    manifest = {
        "format_version": IMAGE_VERSION,
        "config": dataset.config.model_dump(mode="json"),
        "classes": [
            {
                "class_id": spec.class_id,
                "shape": spec.shape,
                "palette": spec.palette,
                "name_tokens": list(spec.name_tokens),
                "split": spec.split,
            }
            for spec in dataset.classes
        ],
        "splits": dataset.splits,
        "image_file": IMAGES_NAME,
        "image_shape": list(images.shape),
        "images_sha256": array_digest(images),
    }
    with open(directory / MANIFEST_NAME, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return directory


def load_dataset(directory: Union[str, Path]) -> Dataset:
    """Read a dataset written by save_dataset, verifying its image digest"""
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    if not manifest_path.is_file():
        raise DatasetError(f"no dataset manifest at {manifest_path}")
    with open(manifest_path, "r") as f:
        manifest = json.load(f)

    image_path = directory / manifest.get("image_file", IMAGES_NAME)
    raw = image_path.read_bytes() if image_path.is_file() else b""
    if len(raw) < 12 or raw[:4] != IMAGE_MAGIC:
        raise DatasetError(f"{image_path} is not a dataset image file")
    version, ndim = struct.unpack_from("<II", raw, 4)
    if version != IMAGE_VERSION:
        raise DatasetError(f"unsupported image file version {version}")
    header = 12 + 4 * ndim
    shape = struct.unpack_from(f"<{ndim}I", raw, 12)
    expected = int(np.prod(shape)) * 4
    if len(raw) - header != expected:
        raise DatasetError(f"{image_path} holds {len(raw) - header} data bytes, expected {expected}")
    images = np.frombuffer(raw, dtype="<f4", offset=header).reshape(shape).astype(np.float32)
    if array_digest(images) != manifest["images_sha256"]:
        raise DatasetError(f"{image_path} does not match the manifest digest")

    config = DataConfig.model_validate(manifest["config"])
    classes = [
        ClassSpec(
            class_id=entry["class_id"],
            shape=entry["shape"],
            palette=entry["palette"],
            name_tokens=tuple(entry["name_tokens"]),
            split=entry["split"],
        )
        for entry in manifest["classes"]
    ]
    labels = np.repeat(np.arange(len(classes), dtype=np.int64), config.images_per_class)
    return Dataset(
        config=config,
        classes=classes,
        splits={k: list(v) for k, v in manifest["splits"].items()},
        images=images,
        image_labels=labels,
    )
