"""
Run configuration: section models, validation and file/override merging
"""
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from src.errors import ConfigError


def _pair(size: Union[int, Tuple[int, int]]) -> Tuple[int, int]:
    return (size, size) if isinstance(size, int) else tuple(size)


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class DataConfig(_Section):
    """Synthetic compositional dataset"""

    image_size: Union[int, Tuple[int, int]] = 32
    channels: Literal[1, 3] = 3
    patch_size: int = Field(8, ge=1)
    n_base: int = Field(20, ge=1)
    n_val: int = Field(5, ge=0)
    n_novel: int = Field(10, ge=1)
    images_per_class: int = Field(200, ge=2)
    shape_vocab: List[int] = Field(default_factory=lambda: list(range(8)))
    palette_vocab: List[int] = Field(default_factory=lambda: list(range(6)))
    max_offset: int = Field(3, ge=0)
    noise_std: float = Field(0.06, ge=0.0)
    master_seed: int = 0

    @property
    def shape(self) -> Tuple[int, int]:
        """(H, W) of every rendered image"""
        return _pair(self.image_size)

    @model_validator(mode="after")
    def _check_grid(self) -> "DataConfig":
        if min(self.shape) < 4:
            raise ConfigError("data.image_size", f"{self.image_size} is smaller than 4 pixels")
        if any(size % self.patch_size for size in self.shape):
            raise ConfigError(
                "data.image_size",
                f"{self.image_size} is not divisible by patch size {self.patch_size}",
            )
        return self


class BackboneConfig(_Section):
    """Patch embedding plus transformer encoder"""

    image_size: Union[int, Tuple[int, int]] = 32
    in_channels: int = Field(3, ge=1)
    patch_size: int = Field(8, ge=1)
    depth: int = Field(6, ge=2)
    l_split: int = Field(4, ge=1)
    dim: int = Field(64, ge=2)
    heads: int = Field(4, ge=1)
    mlp_ratio: int = Field(2, ge=1)
    use_positional_embedding: bool = True
    # GAP over patches and the prompt token; False pools the patches only
    pool_prompt_token: bool = True

    @property
    def shape(self) -> Tuple[int, int]:
        return _pair(self.image_size)

    @property
    def grid(self) -> Tuple[int, int]:
        height, width = self.shape
        return height // self.patch_size, width // self.patch_size

    @property
    def n_patches(self) -> int:
        rows, cols = self.grid
        return rows * cols

    @model_validator(mode="after")
    def _check_shapes(self) -> "BackboneConfig":
        if not 1 <= self.l_split < self.depth:
            raise ConfigError(
                "backbone.l_split", f"must satisfy 1 <= l_split < depth ({self.depth})"
            )
        if self.dim % self.heads != 0:
            raise ConfigError("backbone.heads", f"dim {self.dim} is not divisible by {self.heads}")
        if any(size % self.patch_size for size in self.shape):
            raise ConfigError(
                "backbone.image_size",
                f"{self.image_size} is not divisible by patch size {self.patch_size}",
            )
        return self


class TextConfig(_Section):
    """Meta-class-specific prompts and the frozen text encoder"""

    prompt: Literal["meta", "name", "none"] = "meta"
    prefix_length: int = Field(8, ge=0)
    n_slots: int = Field(5, ge=1)
    token_dim: int = Field(32, ge=1)
    encoder_seed: int = 7
    init_std: float = Field(0.02, ge=0.0)


class BkpConfig(_Section):
    """Bidirectional knowledge permeation"""

    mode: Literal[
        "bidirectional", "text_to_vision", "vision_to_text", "dot", "add", "concat"
    ] = "bidirectional"
    mu: float = Field(0.2, ge=0.0)
    hidden_ratio: int = Field(2, ge=1)
    attention_axis: Literal["key", "query"] = "key"


class SadConfig(_Section):
    """Semantic adversarial disentanglement"""

    enabled: bool = True
    samples: Optional[int] = Field(None, ge=1)
    temperature: float = Field(1.0, gt=0.0)
    depth: int = Field(2, ge=1)
    hidden_ratio: int = Field(2, ge=1)
    train_mode: Literal["hard", "soft"] = "hard"
    eval_prototype: Literal["relevant", "full"] = "relevant"


class LossConfig(_Section):
    tau: float = Field(0.2, gt=0.0)
    gamma: float = Field(0.5, ge=0.0)


class TrainConfig(_Section):
    """Pre-training and episodic fine-tuning"""

    pretrain_epochs: int = Field(20, ge=0)
    pretrain_batch_size: int = Field(128, ge=1)
    pretrain_lr: float = Field(1e-3, gt=0.0)
    finetune_episodes: int = Field(1000, ge=0)
    base_lr: float = Field(1e-4, gt=0.0)
    weight_decay: float = Field(1e-5, ge=0.0)
    lr_mult_bkp: float = Field(10.0, gt=0.0)
    lr_mult_sad: float = Field(50.0, gt=0.0)
    n_way: int = Field(5, ge=1)
    k_shot: int = Field(1, ge=1)
    n_query: int = Field(15, ge=1)
    seed: int = 0
    val_every: int = Field(200, ge=1)
    val_episodes: int = Field(100, ge=0)
    patience: int = Field(3, ge=1)
    deterministic: bool = True


class EvalConfig(_Section):
    split: Literal["base", "val", "novel"] = "novel"
    n_episodes: int = Field(600, ge=1)
    n_way: int = Field(5, ge=1)
    k_shot: int = Field(1, ge=1)
    n_query: int = Field(15, ge=1)
    seed: int = 1
    workers: int = Field(4, ge=1)


class RunSection(_Section):
    name: str = "default"
    log_level: str = "INFO"


class RunConfig(_Section):
    """Merged view of every section"""

    data: DataConfig = Field(default_factory=DataConfig)
    backbone: BackboneConfig = Field(default_factory=BackboneConfig)
    text: TextConfig = Field(default_factory=TextConfig)
    bkp: BkpConfig = Field(default_factory=BkpConfig)
    sad: SadConfig = Field(default_factory=SadConfig)
    loss: LossConfig = Field(default_factory=LossConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    run: RunSection = Field(default_factory=RunSection)

    @property
    def samples(self) -> int:
        """Gumbel sample count m, defaulting to half the channel width"""
        return self.sad.samples if self.sad.samples is not None else max(1, self.backbone.dim // 2)

    @model_validator(mode="after")
    def _check_cross_fields(self) -> "RunConfig":
        if self.data.patch_size != self.backbone.patch_size:
            raise ConfigError(
                "backbone.patch_size",
                f"{self.backbone.patch_size} differs from data.patch_size {self.data.patch_size}",
            )
        if self.backbone.shape != self.data.shape:
            raise ConfigError(
                "backbone.image_size",
                f"{self.backbone.image_size} differs from data.image_size {self.data.image_size}",
            )
        if self.data.channels != self.backbone.in_channels:
            raise ConfigError("backbone.in_channels", "must equal data.channels")
        if self.text.prompt == "none" and self.bkp.mode != "concat":
            raise ConfigError("bkp.mode", f"'{self.bkp.mode}' requires text prompts")
        needed = max(self.train.n_way, self.eval.n_way)
        if self.text.n_slots < needed:
            raise ConfigError("text.n_slots", f"must be at least the episode way count {needed}")
        if self.sad.enabled and self.samples > self.backbone.dim:
            raise ConfigError("sad.samples", f"{self.samples} exceeds the {self.backbone.dim} feature channels")
        return self

    def echo(self) -> Dict[str, Any]:
        """Fully resolved configuration as plain data"""
        data = self.model_dump(mode="json")
        data["sad"]["samples"] = self.samples
        return data


def flatten(tree: Dict[str, Any], prefix: str = "") -> Dict[str, Any]:
    """Flatten nested mappings into dotted keys"""
    flat: Dict[str, Any] = {}
    for key, value in tree.items():
        dotted = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(flatten(value, f"{dotted}."))
        else:
            flat[dotted] = value
    return flat


def _check_known_keys(raw: Dict[str, Any]) -> None:
    sections = RunConfig.model_fields
    for section, values in raw.items():
        if section not in sections:
            name = f"{section}.{next(iter(values))}" if isinstance(values, dict) and values else section
            raise ConfigError(name, "unknown config key")
        if not isinstance(values, dict):
            raise ConfigError(section, "expected a mapping of keys")
        fields = sections[section].annotation.model_fields
        for key, value in values.items():
            dotted = f"{section}.{key}"
            if key not in fields:
                raise ConfigError(dotted, "unknown config key")
            if isinstance(value, dict):
                raise ConfigError(dotted, "expected a scalar or list value")


def _apply_override(raw: Dict[str, Any], override: str) -> None:
    if "=" not in override:
        raise ConfigError(override, "override must look like section.key=value")
    dotted, text = override.split("=", 1)
    dotted = dotted.strip()
    parts = dotted.split(".")
    if len(parts) != 2 or not all(parts):
        raise ConfigError(dotted, "override key must be section.key")
    try:
        value = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(dotted, f"cannot parse value '{text}': {e}") from e
    section = raw.setdefault(parts[0], {})
    if not isinstance(section, dict):
        raise ConfigError(parts[0], "expected a mapping of keys")
    section[parts[1]] = value


def build_config(raw: Dict[str, Any]) -> RunConfig:
    """Validate a nested mapping into a RunConfig, naming the offending key on failure"""
    _check_known_keys(raw)
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as e:
        error = e.errors()[0]
        key = ".".join(str(part) for part in error["loc"]) or "<root>"
        raise ConfigError(key, error["msg"]) from e


def parse_config(path: Optional[Union[str, Path]] = None, overrides: Sequence[str] = ()) -> RunConfig:
    """
    Merge defaults, a YAML file and `key=value` overrides into a RunConfig

    Args:
        path: YAML file with one mapping per section; None means defaults only
        overrides: dotted `section.key=value` strings applied last

    Returns:
        Fully validated configuration
    """
    raw: Dict[str, Any] = {}
    if path is not None:
        config_path = Path(path)
        if not config_path.is_file():
            raise ConfigError(str(config_path), "config file not found")
        with open(config_path, "r") as f:
            loaded = yaml.safe_load(f)
        if loaded is not None and not isinstance(loaded, dict):
            raise ConfigError(str(config_path), "top level must be a mapping of sections")
        raw = loaded or {}

    for override in overrides:
        _apply_override(raw, override)

    return build_config(raw)


def with_overrides(config: RunConfig, overrides: Dict[str, Any]) -> RunConfig:
    """Copy of `config` with dotted-key overrides applied and revalidated"""
    raw = config.model_dump(mode="json")
    for dotted, value in overrides.items():
        section, _, key = dotted.partition(".")
        if section not in raw or not key:
            raise ConfigError(dotted, "unknown config key")
        raw[section][key] = value
    return build_config(raw)


# Sections that fix a trained model's weights and forward pass
MODEL_SECTIONS = ("backbone", "text", "bkp", "sad")
# Keys that only change how a trained model scores an episode
INFERENCE_KEYS = ("sad.eval_prototype", "loss.tau")


def inference_config(trained: RunConfig, requested: RunConfig) -> RunConfig:
    """
    The config a trained model runs under for `requested`

    Inference-only keys come from `requested`; every other model key must match
    what the model was trained with.
    """
    trained_flat, requested_flat = flatten(trained.echo()), flatten(requested.echo())
    for key, value in requested_flat.items():
        if key.split(".", 1)[0] in MODEL_SECTIONS and key not in INFERENCE_KEYS and trained_flat.get(key) != value:
            raise ConfigError(key, f"{value!r} differs from the checkpoint's {trained_flat.get(key)!r}")
    return with_overrides(trained, {key: requested_flat[key] for key in INFERENCE_KEYS})
