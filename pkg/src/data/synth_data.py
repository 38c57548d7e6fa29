"""
Procedural compositional image dataset and N-way K-shot episode sampling
"""
import hashlib
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Tuple

import numpy as np

from src.config import DataConfig
from src.errors import DatasetError, EpisodeSamplingError, UnknownClassError
from src.utils import derive_seed

logger = logging.getLogger(__name__)

SPLITS = ("base", "val", "novel")

# Shape masks over centered coordinates (dx, dy) for a shape of radius r
ShapeFn = Callable[[np.ndarray, np.ndarray, float], np.ndarray]

SHAPES: Dict[int, Tuple[str, ShapeFn]] = {
    0: ("circle", lambda dx, dy, r: dx**2 + dy**2 <= r**2),
    1: ("square", lambda dx, dy, r: np.maximum(abs(dx), abs(dy)) <= 0.8 * r),
    2: ("triangle", lambda dx, dy, r: (dy <= 0.7 * r) & (abs(dx) <= 0.5 * (dy + r))),
    3: (
        "cross",
        lambda dx, dy, r: ((abs(dx) <= r / 3) & (abs(dy) <= r)) | ((abs(dy) <= r / 3) & (abs(dx) <= r)),
    ),
    4: ("ring", lambda dx, dy, r: (dx**2 + dy**2 <= r**2) & (dx**2 + dy**2 >= (0.55 * r) ** 2)),
    5: ("hbar", lambda dx, dy, r: (abs(dy) <= r / 3) & (abs(dx) <= r)),
    6: ("vbar", lambda dx, dy, r: (abs(dx) <= r / 3) & (abs(dy) <= r)),
    7: ("diamond", lambda dx, dy, r: abs(dx) + abs(dy) <= r),
}

# (foreground RGB, background RGB)
PALETTES: Dict[int, Tuple[str, Tuple[float, float, float], Tuple[float, float, float]]] = {
    0: ("crimson", (0.90, 0.15, 0.15), (0.10, 0.12, 0.35)),
    1: ("lime", (0.30, 0.90, 0.20), (0.35, 0.10, 0.35)),
    2: ("azure", (0.15, 0.35, 0.95), (0.85, 0.80, 0.30)),
    3: ("amber", (0.95, 0.75, 0.10), (0.10, 0.30, 0.15)),
    4: ("ivory", (0.95, 0.95, 0.90), (0.55, 0.15, 0.20)),
    5: ("teal", (0.10, 0.80, 0.80), (0.35, 0.22, 0.10)),
    6: ("violet", (0.65, 0.30, 0.90), (0.20, 0.20, 0.20)),
    7: ("orange", (0.95, 0.50, 0.10), (0.15, 0.25, 0.45)),
}


@dataclass(frozen=True)
class ClassSpec:
    """One synthetic class: a (shape, palette) pair and its two-token name"""

    class_id: int
    shape: int
    palette: int
    name_tokens: Tuple[int, int]
    split: str

    @property
    def name(self) -> str:
        return f"{PALETTES[self.palette][0]} {SHAPES[self.shape][0]}"


@dataclass
class Dataset:
    """Rendered images with their class specs and disjoint base/val/novel splits"""

    config: DataConfig
    classes: List[ClassSpec]
    splits: Dict[str, List[int]]
    images: np.ndarray
    image_labels: np.ndarray

    @property
    def vocab_size(self) -> int:
        return len(self.config.shape_vocab) + len(self.config.palette_vocab)

    def class_name_tokens(self, class_id: int) -> Tuple[int, int]:
        """Compositional name [shape token, palette token] of a registered class"""
        if not 0 <= class_id < len(self.classes):
            raise UnknownClassError(f"unknown class id {class_id}")
        return self.classes[class_id].name_tokens

    def split_classes(self, split: str) -> List[int]:
        if split not in self.splits:
            raise UnknownClassError(f"unknown split '{split}'")
        return self.splits[split]

    def image_ids(self, class_id: int) -> np.ndarray:
        per_class = self.config.images_per_class
        return np.arange(class_id * per_class, (class_id + 1) * per_class)

    def split_image_ids(self, split: str) -> np.ndarray:
        ids = [self.image_ids(c) for c in self.split_classes(split)]
        return np.concatenate(ids) if ids else np.zeros(0, dtype=np.int64)


@dataclass
class Episode:
    """One N-way K-shot task; support and query are ordered label-major"""

    split: str
    n_way: int
    k_shot: int
    n_query: int
    class_ids: np.ndarray
    name_tokens: List[Tuple[int, ...]]
    support_images: np.ndarray
    support_labels: np.ndarray
    support_image_ids: np.ndarray
    query_images: np.ndarray
    query_labels: np.ndarray
    query_image_ids: np.ndarray
    slot_assignment: Dict[int, int] = field(default_factory=dict)

    @property
    def support_class_ids(self) -> np.ndarray:
        return self.class_ids[self.support_labels]

    def slot(self, label: int) -> int:
        return self.slot_assignment.get(label, label)

    def digest(self) -> str:
        """sha256 over the drawn class ids and image ids"""
        digest = hashlib.sha256()
        for array in (self.class_ids, self.support_image_ids, self.query_image_ids):
            digest.update(np.asarray(array, dtype=np.int64).tobytes())
        return digest.hexdigest()


def name_tokens_for(config: DataConfig, shape: int, palette: int) -> Tuple[int, int]:
    """Shape tokens come first in the vocabulary, palette tokens after them"""
    shape_token = config.shape_vocab.index(shape)
    palette_token = len(config.shape_vocab) + config.palette_vocab.index(palette)
    return shape_token, palette_token


def render_image(config: DataConfig, spec: ClassSpec, rng: np.random.Generator) -> np.ndarray:
    """Render one jittered (channels, H, W) float32 image of a class"""
    height, width = config.shape
    _, fg, bg = PALETTES[spec.palette]
    fg = np.asarray(fg, dtype=np.float64)
    bg = np.asarray(bg, dtype=np.float64)

    offset = rng.integers(-config.max_offset, config.max_offset + 1, size=2)
    radius = 0.3 * min(height, width) * rng.uniform(0.85, 1.15)
    brightness = rng.uniform(0.8, 1.2)
    frequency = rng.uniform(0.2, 0.8)
    phase = rng.uniform(0.0, 2 * np.pi)
    angle = rng.uniform(0.0, np.pi)

    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    dx = xs - ((width - 1) / 2.0 + offset[0])
    dy = ys - ((height - 1) / 2.0 + offset[1])
    mask = SHAPES[spec.shape][1](dx, dy, radius)

    texture = 0.08 * np.sin(frequency * (xs * np.cos(angle) + ys * np.sin(angle)) + phase)
    background = bg[:, None, None] + texture[None]
    foreground = np.clip(fg * brightness, 0.0, 1.0)[:, None, None] * np.ones((1, height, width))
    image = np.where(mask[None], foreground, background)
    if config.channels == 1:
        image = image.mean(axis=0, keepdims=True)
    image = image + rng.normal(0.0, config.noise_std, size=image.shape)
    return np.clip(image, 0.0, 1.0).astype(np.float32)


def generate_dataset(config: DataConfig) -> Dataset:
    """
    Render the full dataset deterministically from `config.master_seed`

    Returns:
        Dataset with classes numbered base first, then val, then novel
    """
    if any(size % config.patch_size for size in config.shape):
        raise DatasetError(
            f"image size {config.image_size} is not divisible by patch size {config.patch_size}"
        )
    unknown = [s for s in config.shape_vocab if s not in SHAPES] + [
        p for p in config.palette_vocab if p not in PALETTES
    ]
    if unknown:
        raise DatasetError(f"unknown generator parameter ids: {unknown}")

    combos = [(s, p) for s in config.shape_vocab for p in config.palette_vocab]
    n_total = config.n_base + config.n_val + config.n_novel
    if n_total > len(combos):
        raise DatasetError(
            f"{n_total} classes requested but only {len(combos)} shape x palette combinations exist"
        )

    order = np.random.default_rng(derive_seed(config.master_seed, "data", 0)).permutation(len(combos))
    bounds = {
        "base": (0, config.n_base),
        "val": (config.n_base, config.n_base + config.n_val),
        "novel": (config.n_base + config.n_val, n_total),
    }
    classes: List[ClassSpec] = []
    splits: Dict[str, List[int]] = {}
    for split, (start, stop) in bounds.items():
        splits[split] = list(range(start, stop))
        for class_id in range(start, stop):
            shape, palette = combos[order[class_id]]
            classes.append(
                ClassSpec(
                    class_id=class_id,
                    shape=shape,
                    palette=palette,
                    name_tokens=name_tokens_for(config, shape, palette),
                    split=split,
                )
            )

    per_class = config.images_per_class
    images = np.empty(
        (n_total * per_class, config.channels, *config.shape), dtype=np.float32
    )
    for spec in classes:
        for index in range(per_class):
            image_id = spec.class_id * per_class + index
            rng = np.random.default_rng(derive_seed(config.master_seed, "data", 1 + image_id))
            images[image_id] = render_image(config, spec, rng)

    labels = np.repeat(np.arange(n_total, dtype=np.int64), per_class)
    logger.info("Rendered %d images over %d classes", len(images), n_total)
    return Dataset(config=config, classes=classes, splits=splits, images=images, image_labels=labels)


def sample_episode(
    dataset: Dataset,
    split: str,
    n_way: int,
    k_shot: int,
    n_query: int,
    rng: np.random.Generator,
) -> Episode:
    """
    Draw an N-way K-shot episode without replacement

    Labels 0..N-1 follow the class draw order, which is also the prompt slot order.
    """
    classes = dataset.split_classes(split)
    if n_way < 1 or k_shot < 1 or n_query < 1:
        raise EpisodeSamplingError(f"N, K and Q must be positive (got {n_way}, {k_shot}, {n_query})")
    if len(classes) < n_way:
        raise EpisodeSamplingError(
            f"split '{split}' has {len(classes)} classes, {n_way}-way episode requested"
        )
    per_class = dataset.config.images_per_class
    if per_class < k_shot + n_query:
        raise EpisodeSamplingError(
            f"classes hold {per_class} images, {k_shot}+{n_query} needed per class"
        )

    class_ids = rng.choice(np.asarray(classes, dtype=np.int64), size=n_way, replace=False)
    support_ids, query_ids = [], []
    for class_id in class_ids:
        drawn = rng.choice(dataset.image_ids(int(class_id)), size=k_shot + n_query, replace=False)
        support_ids.append(drawn[:k_shot])
        query_ids.append(drawn[k_shot:])
    support_ids = np.concatenate(support_ids)
    query_ids = np.concatenate(query_ids)

    return Episode(
        split=split,
        n_way=n_way,
        k_shot=k_shot,
        n_query=n_query,
        class_ids=class_ids,
        name_tokens=[dataset.class_name_tokens(int(c)) for c in class_ids],
        support_images=dataset.images[support_ids],
        support_labels=np.repeat(np.arange(n_way, dtype=np.int64), k_shot),
        support_image_ids=support_ids,
        query_images=dataset.images[query_ids],
        query_labels=np.repeat(np.arange(n_way, dtype=np.int64), n_query),
        query_image_ids=query_ids,
        slot_assignment={label: label for label in range(n_way)},
    )
