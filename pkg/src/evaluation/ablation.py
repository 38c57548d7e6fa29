"""
Ablation harness: component rows, fusion variants and hyperparameter sweeps under matched seeds
"""
import copy
import logging
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
import torch
from pydantic import BaseModel, Field

from src.config import RunConfig, with_overrides
from src.data.synth_data import Dataset
from src.errors import AblationConfigError, ConfigError
from src.evaluation.evaluator import collect_query_features, compute_mmc, evaluate, write_records
from src.models.bkp import CROSS_ATTENTION_MODES
from src.models.meta_head import build_model
from src.training.trainer import finetune, pretrain

logger = logging.getLogger(__name__)

# Sections and keys a cell may not touch: every cell shares the dataset, the
# pretrained backbone and the episode streams of its seed
FROZEN_SECTIONS = ("data", "backbone", "eval", "run")
FROZEN_KEYS = ("train.seed", "train.pretrain_epochs", "train.pretrain_batch_size", "train.pretrain_lr")

# (name, text.prompt, bkp.mode, sad.enabled), ordered from the bare baseline to the full model
COMPONENT_ROWS = [
    ("baseline", "name", "concat", False),
    ("meta_prompt", "meta", "concat", False),
    ("meta_prompt+text_to_vision", "meta", "text_to_vision", False),
    ("meta_prompt+vision_to_text", "meta", "vision_to_text", False),
    ("meta_prompt+bidirectional", "meta", "bidirectional", False),
    ("bidirectional+sad", "name", "bidirectional", True),
    ("full", "meta", "bidirectional", True),
]

FUSION_ROWS = [
    ("dot", "dot"),
    ("add", "add"),
    ("concat", "concat"),
    ("cross_attention", "bidirectional"),
]

SWEEPS: Dict[str, List[Any]] = {
    "text.prefix_length": [0, 2, 4, 8, 16],
    "bkp.mu": [0.0, 0.1, 0.2, 0.5, 1.0],
    "loss.gamma": [0.0, 0.1, 0.5, 1.0, 2.0],
    "sad.samples": [4, 8, 16, 32, 64],
    "sad.depth": [1, 2, 3],
}

ProgressCallback = Callable[[str, int, int], None]


class AblationCell(BaseModel):
    """One configuration of the grid, as dotted-key overrides of the base config"""

    name: str
    overrides: Dict[str, Any] = Field(default_factory=dict)
    row: Optional[int] = None


class AblationGrid(BaseModel):
    name: str
    cells: List[AblationCell]


class AblationRow(BaseModel):
    """Result of one cell under one seed"""

    cell: str
    row: Optional[int] = None
    seed: int
    mean_accuracy: float
    ci95: float
    n_episodes: int
    best_val_accuracy: Optional[float] = None
    finetune_episodes_run: int
    train_stream_digest: str
    eval_stream_digest: str
    mmc_cv: Optional[float] = None
    overrides: Dict[str, Any] = Field(default_factory=dict)


class AblationTable(BaseModel):
    grid: str
    seeds: List[int]
    rows: List[AblationRow] = Field(default_factory=list)

    def accuracy(self, cell: str, seed: int) -> float:
        for row in self.rows:
            if row.cell == cell and row.seed == seed:
                return row.mean_accuracy
        raise KeyError(f"no result for cell '{cell}' and seed {seed}")

    def wins(self, cell: str, other: str) -> int:
        """Number of seeds on which `cell` scores at least as well as `other`"""
        return sum(self.accuracy(cell, seed) >= self.accuracy(other, seed) for seed in self.seeds)


def component_grid() -> AblationGrid:
    cells = [
        AblationCell(
            name=name,
            row=index,
            overrides={"text.prompt": prompt, "bkp.mode": mode, "sad.enabled": sad},
        )
        for index, (name, prompt, mode, sad) in enumerate(COMPONENT_ROWS, 1)
    ]
    return AblationGrid(name="components", cells=cells)


def fusion_grid() -> AblationGrid:
    cells = [
        AblationCell(name=name, row=index, overrides={"text.prompt": "meta", "bkp.mode": mode})
        for index, (name, mode) in enumerate(FUSION_ROWS, 1)
    ]
    return AblationGrid(name="fusion", cells=cells)


def sweep_grid(key: str, values: Optional[Sequence[Any]] = None) -> AblationGrid:
    if values is None:
        if key not in SWEEPS:
            raise AblationConfigError(f"no default sweep for '{key}' (known: {', '.join(SWEEPS)})")
        values = SWEEPS[key]
    cells = [
        AblationCell(name=f"{key}={value}", row=index, overrides={key: value})
        for index, value in enumerate(values, 1)
    ]
    return AblationGrid(name=f"sweep:{key}", cells=cells)


def grid_from_preset(preset: str) -> AblationGrid:
    """`components`, `fusion` or `sweep:<section.key>`"""
    if preset == "components":
        return component_grid()
    if preset == "fusion":
        return fusion_grid()
    if preset.startswith("sweep:"):
        return sweep_grid(preset.split(":", 1)[1])
    raise AblationConfigError(f"unknown ablation preset '{preset}'")


def resolve_cell(base_config: RunConfig, cell: AblationCell) -> RunConfig:
    """Apply a cell's overrides, rejecting combinations that cannot be trained"""
    for key in cell.overrides:
        if key.split(".", 1)[0] in FROZEN_SECTIONS or key in FROZEN_KEYS:
            raise AblationConfigError(f"cell '{cell.name}': '{key}' is shared by every cell and cannot vary")
    try:
        config = with_overrides(base_config, cell.overrides)
    except ConfigError as e:
        raise AblationConfigError(f"cell '{cell.name}': {e}") from e

    touched = set(cell.overrides)
    if touched & {"sad.samples", "sad.depth", "sad.train_mode"} and not config.sad.enabled:
        raise AblationConfigError(f"cell '{cell.name}': filter settings vary while SAD is disabled")
    if "bkp.mu" in touched and config.bkp.mode not in CROSS_ATTENTION_MODES:
        raise AblationConfigError(f"cell '{cell.name}': bkp.mu has no effect in '{config.bkp.mode}' mode")
    if "text.prefix_length" in touched and config.text.prompt != "meta":
        raise AblationConfigError(f"cell '{cell.name}': prefix tokens need text.prompt=meta")
    return config


def seed_config(base_config: RunConfig, seed: int) -> RunConfig:
    """The base config with training and evaluation streams keyed on `seed`"""
    return with_overrides(base_config, {"train.seed": seed, "eval.seed": seed})


def pretrained_backbone(base_config: RunConfig, dataset: Dataset, seed: int) -> Dict[str, torch.Tensor]:
    config = seed_config(base_config, seed)
    model = build_model(config)
    pretrain(model, dataset, config)
    return copy.deepcopy(model.backbone.state_dict())


def run_ablation(
    grid: AblationGrid,
    base_config: RunConfig,
    dataset: Dataset,
    seeds: Sequence[int],
    with_mmc: bool = False,
    progress: Optional[ProgressCallback] = None,
) -> AblationTable:
    """
    Train and evaluate every cell of `grid` once per seed

    Cells are resolved before any training so an incompatible cell fails the
    whole grid up front. Per seed, the backbone is pre-trained once and copied
    into every cell, so cells differ only by their overrides.
    """
    if not seeds:
        raise AblationConfigError("at least one seed is required")
    resolved = [(cell, resolve_cell(base_config, cell)) for cell in grid.cells]
    table = AblationTable(grid=grid.name, seeds=list(seeds))
    total = len(seeds) * len(resolved)

    for seed in seeds:
        logger.info("Pre-training shared backbone for seed %d", seed)
        backbone_state = pretrained_backbone(base_config, dataset, seed)
        for cell, cell_config in resolved:
            config = seed_config(cell_config, seed)
            ev = config.eval
            model = build_model(config)
            model.backbone.load_state_dict(backbone_state)
            result = finetune(model, dataset, config)
            report = evaluate(
                model,
                dataset,
                split=ev.split,
                n_episodes=ev.n_episodes,
                n_way=ev.n_way,
                k_shot=ev.k_shot,
                n_query=ev.n_query,
                seed=ev.seed,
                tag="eval",
                workers=ev.workers,
            )
            mmc_cv = compute_mmc(collect_query_features(model, dataset, "novel")).cv if with_mmc else None
            row = AblationRow(
                cell=cell.name,
                row=cell.row,
                seed=seed,
                mean_accuracy=report.mean_accuracy,
                ci95=report.ci95,
                n_episodes=report.n_episodes,
                best_val_accuracy=result.best_val_accuracy,
                finetune_episodes_run=len(result.history),
                train_stream_digest=result.stream_digest,
                eval_stream_digest=report.stream_digest,
                mmc_cv=mmc_cv,
                overrides=cell.overrides,
            )
            table.rows.append(row)
            logger.info("%s seed %d: %.2f +- %.2f", cell.name, seed, row.mean_accuracy, row.ci95)
            if progress is not None:
                progress(cell.name, len(table.rows), total)
    return table


def summarize(table: AblationTable) -> pd.DataFrame:
    """One line per cell, aggregated over seeds, in grid order"""
    frame = pd.DataFrame([row.model_dump() for row in table.rows])
    if frame.empty:
        return pd.DataFrame(columns=["cell", "row", "n_seeds", "mean_accuracy", "std_accuracy", "mean_ci95"])
    summary = (
        frame.groupby("cell", sort=False)
        .agg(
            row=("row", "first"),
            n_seeds=("seed", "nunique"),
            mean_accuracy=("mean_accuracy", "mean"),
            std_accuracy=("mean_accuracy", lambda values: float(np.std(values))),
            mean_ci95=("ci95", "mean"),
        )
        .reset_index()
    )
    if frame["mmc_cv"].notna().any():
        summary["mean_mmc_cv"] = frame.groupby("cell", sort=False)["mmc_cv"].mean().to_numpy()
    return summary


def generate_report(table: AblationTable) -> str:
    """Plain-text report of an ablation table"""
    report = []
    report.append("=" * 80)
    report.append(f"BIKOP ABLATION REPORT - {table.grid}")
    report.append("=" * 80)
    report.append("")
    report.append(f"Seeds: {', '.join(str(seed) for seed in table.seeds)}")
    report.append(f"Cells: {len({row.cell for row in table.rows})}")
    report.append("")

    for _, line in summarize(table).iterrows():
        label = f"{int(line['row'])}." if pd.notna(line["row"]) else "-"
        report.append(f"{label} {line['cell']}")
        report.append(f"   Accuracy: {line['mean_accuracy']:.2f} (seed std {line['std_accuracy']:.2f})")
        report.append(f"   Mean CI95: +-{line['mean_ci95']:.2f}")
        if "mean_mmc_cv" in line:
            report.append(f"   MMC cv: {line['mean_mmc_cv']:.4f}")
        for row in table.rows:
            if row.cell == line["cell"]:
                report.append(f"   seed {row.seed}: {row.mean_accuracy:.2f} +- {row.ci95:.2f}")
        report.append("")

    return "\n".join(report)


def write_ablation(table: AblationTable, directory: Union[str, Path]) -> Dict[str, Path]:
    """ablation.jsonl (one row per cell and seed), ablation_summary.csv and ablation_report.txt"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {
        "records": write_records(directory / "ablation.jsonl", table.rows),
        "summary": directory / "ablation_summary.csv",
        "report": directory / "ablation_report.txt",
    }
    summarize(table).to_csv(paths["summary"], index=False)
    paths["report"].write_text(generate_report(table) + "\n")
    return paths
