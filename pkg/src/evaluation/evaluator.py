"""
Episode-batch evaluation, channel magnitude diagnostics and attention dumps
"""
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor, as_completed
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Protocol, Tuple, Union

import numpy as np
import pandas as pd
import torch
import torch.nn as nn
from pydantic import BaseModel

from src.data.synth_data import Dataset, Episode, sample_episode
from src.errors import AttentionUnavailableError, EpisodeSamplingError, MmcUndefinedError
from src.models.bkp import CROSS_ATTENTION_MODES
from src.utils import episode_rng, stream_digest

logger = logging.getLogger(__name__)

CI_Z = 1.96


class EpisodeClassifier(Protocol):
    def forward_episode(self, episode: Episode, generator: Optional[torch.Generator] = None, mode: str = "eval"): ...


class EvalReport(BaseModel):
    mean_accuracy: float
    ci95: float
    n_episodes: int
    per_episode_acc: List[float]
    split: str = "novel"
    n_way: int = 5
    k_shot: int = 1
    n_query: int = 15
    seed: int = 0
    stream_digest: str = ""
    config: Dict[str, Any] = {}


class MmcReport(BaseModel):
    mmc: List[float]
    cv: float
    n_features: int


class AttentionMap(BaseModel):
    support_index: int
    label: int
    class_id: int
    grid: List[List[float]]


def summarize_accuracies(per_episode_acc: List[float]) -> Tuple[float, float]:
    """
    Mean accuracy and 95% confidence half-width, both in percent

    ci95 = 1.96 * sample_std / sqrt(n) with the n-1 denominator; a single
    episode has a zero-width interval.
    """
    accs = np.asarray(per_episode_acc, dtype=np.float64)
    if accs.size == 0:
        raise ValueError("no episode accuracies to summarize")
    mean = 100.0 * accs.mean()
    if accs.size == 1:
        return mean, 0.0
    return mean, 100.0 * CI_Z * accs.std(ddof=1) / math.sqrt(accs.size)


def episode_accuracy(model: EpisodeClassifier, episode: Episode) -> float:
    with torch.no_grad():
        logits = model.forward_episode(episode, None, "eval").logits
    labels = torch.as_tensor(episode.query_labels, device=logits.device)
    return float((logits.argmax(dim=-1) == labels).double().mean())


def evaluate(
    model: EpisodeClassifier,
    dataset: Dataset,
    split: str,
    n_episodes: int,
    n_way: int,
    k_shot: int,
    n_query: int,
    seed: int,
    tag: str = "eval",
    workers: int = 1,
    config_echo: Optional[Dict[str, Any]] = None,
) -> EvalReport:
    """
    Accuracy over `n_episodes` seeded episodes of `split`

    Episodes run concurrently against the unchanged model; results are
    reduced in episode-index order.
    """
    if not dataset.split_classes(split):
        raise EpisodeSamplingError(f"split '{split}' is empty")
    if isinstance(model, nn.Module):
        model.eval()

    def run(index: int) -> Tuple[float, str]:
        episode = sample_episode(dataset, split, n_way, k_shot, n_query, episode_rng(seed, tag, index))
        return episode_accuracy(model, episode), episode.digest()

    results: Dict[int, Tuple[float, str]] = {}
    with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        future_to_index = {executor.submit(run, index): index for index in range(n_episodes)}
        for future in as_completed(future_to_index):
            results[future_to_index[future]] = future.result()

    per_episode = [results[index][0] for index in range(n_episodes)]
    mean, ci95 = summarize_accuracies(per_episode)
    return EvalReport(
        mean_accuracy=mean,
        ci95=ci95,
        n_episodes=n_episodes,
        per_episode_acc=per_episode,
        split=split,
        n_way=n_way,
        k_shot=k_shot,
        n_query=n_query,
        seed=seed,
        stream_digest=stream_digest(results[index][1] for index in range(n_episodes)),
        config=config_echo or {},
    )


def compute_mmc(features: Union[torch.Tensor, np.ndarray]) -> MmcReport:
    """Per-channel mean absolute value and its coefficient of variation"""
    if isinstance(features, torch.Tensor):
        features = features.detach().cpu().numpy()
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] < 1:
        raise ValueError(f"expected a non-empty (n, C) feature matrix, got shape {features.shape}")
    mmc = np.abs(features).mean(axis=0)
    mean = mmc.mean()
    if mean == 0:
        raise MmcUndefinedError("all channel magnitudes are zero")
    return MmcReport(mmc=mmc.tolist(), cv=float(mmc.std() / mean), n_features=features.shape[0])


def collect_query_features(model: nn.Module, dataset: Dataset, split: str = "novel", batch_size: int = 256) -> torch.Tensor:
    """encode_query features of every image in `split`"""
    image_ids = dataset.split_image_ids(split)
    if image_ids.size == 0:
        raise EpisodeSamplingError(f"split '{split}' is empty")
    model.eval()
    chunks = []
    with torch.no_grad():
        for start in range(0, image_ids.size, batch_size):
            batch = torch.as_tensor(dataset.images[image_ids[start : start + batch_size]], dtype=model.dtype)
            chunks.append(model.backbone.encode_query(batch))
    return torch.cat(chunks)


def dump_attention(model: nn.Module, episode: Episode) -> List[AttentionMap]:
    """Vision-to-text attention A_T of every support image, laid out on the patch grid"""
    config = model.config
    if config.bkp.mode not in CROSS_ATTENTION_MODES or config.text.prompt == "none":
        raise AttentionUnavailableError(
            f"attention maps need a cross-attention BKP mode, model uses '{config.bkp.mode}'"
        )
    rows, cols = config.backbone.grid
    model.eval()
    with torch.no_grad():
        support = torch.as_tensor(episode.support_images, dtype=model.dtype)
        patches = model.backbone.encode_lower(model.backbone.patchify(support))
        labels = torch.as_tensor(episode.support_labels, dtype=torch.long)
        prompts = model.prompt_embeddings(episode)[labels].unsqueeze(1)
        _, attention = model.bkp.vision_to_text(prompts, patches)

    grids = attention.squeeze(1).reshape(-1, rows, cols).cpu().numpy()
    return [
        AttentionMap(
            support_index=index,
            label=int(episode.support_labels[index]),
            class_id=int(episode.support_class_ids[index]),
            grid=grids[index].tolist(),
        )
        for index in range(len(grids))
    ]


def write_records(path: Union[str, Path], records: Iterable[Union[BaseModel, Dict[str, Any]]]) -> Path:
    """Line-delimited JSON, one record per line"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for record in records:
            data = record.model_dump(mode="json") if isinstance(record, BaseModel) else record
            f.write(json.dumps(data, sort_keys=True) + "\n")
    return path


def write_mmc(report: MmcReport, path: Union[str, Path]) -> Path:
    """Columns: channel, mmc"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame({"channel": np.arange(len(report.mmc)), "mmc": report.mmc}).to_csv(path, index=False)
    return path


def write_attention(maps: List[AttentionMap], path: Union[str, Path]) -> Path:
    """Columns: support_index, label, class_id, row, col, value"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = [
        {
            "support_index": item.support_index,
            "label": item.label,
            "class_id": item.class_id,
            "row": r,
            "col": c,
            "value": value,
        }
        for item in maps
        for r, line in enumerate(item.grid)
        for c, value in enumerate(line)
    ]
    pd.DataFrame(rows, columns=["support_index", "label", "class_id", "row", "col", "value"]).to_csv(path, index=False)
    return path
