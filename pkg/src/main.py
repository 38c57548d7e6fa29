"""
BiKop command-line entry point
"""
import argparse
import os
import sys
from pathlib import Path
from typing import Callable, Dict, Optional, Sequence

import yaml
from dotenv import load_dotenv
from rich.progress import BarColumn, Progress, SpinnerColumn, TextColumn
from rich.table import Table

from src.config import RunConfig, build_config, inference_config, parse_config
from src.data.storage import load_dataset, save_dataset
from src.data.synth_data import Dataset, generate_dataset, sample_episode
from src.errors import AblationConfigError, ConfigError, DatasetError, MissingArtifactError
from src.evaluation.ablation import grid_from_preset, run_ablation, write_ablation
from src.evaluation.evaluator import (
    collect_query_features,
    compute_mmc,
    dump_attention,
    evaluate,
    write_attention,
    write_mmc,
    write_records,
)
from src.models.meta_head import BiKop, build_model
from src.training.checkpoint import load_checkpoint, parameter_digest, restore_model, save_checkpoint
from src.training.trainer import finetune, pretrain
from src.utils import console, episode_rng, set_deterministic, setup_logging

# Load environment variables
load_dotenv()

DEFAULT_RUN_ROOT = "runs"
EXIT_OK, EXIT_USAGE, EXIT_FAILURE = 0, 1, 2


class UsageError(Exception):
    """Bad command line"""


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(message)


class RunDirectory:
    """
    Fixed layout of one run

        <root>/<run.name>/
            config.<command>.echo.yaml
            data/manifest.json, data/images.bin
            checkpoints/pretrain.ckpt, checkpoints/finetune.ckpt
            metrics/*.jsonl, *.csv, *.txt
    """

    def __init__(self, root: Path, name: str):
        self.path = root / name

    @property
    def data(self) -> Path:
        return self.path / "data"

    @property
    def checkpoints(self) -> Path:
        return self.path / "checkpoints"

    @property
    def metrics(self) -> Path:
        return self.path / "metrics"

    def checkpoint(self, stage: str) -> Path:
        return self.checkpoints / f"{stage}.ckpt"

    def claim(self, path: Path, force: bool) -> Path:
        """Refuse to overwrite an artifact unless forced"""
        if path.exists() and not force:
            raise FileExistsError(f"{path} already exists (pass --force to replace it)")
        return path

    def begin(self, command: str, config: RunConfig, outputs: Sequence[Path], force: bool) -> None:
        """Claim every output of `command`, then record the config it runs with"""
        for path in outputs:
            self.claim(path, force)
        self.write_echo(command, config)

    def write_echo(self, command: str, config: RunConfig) -> Path:
        self.path.mkdir(parents=True, exist_ok=True)
        path = self.path / f"config.{command}.echo.yaml"
        with open(path, "w") as f:
            yaml.safe_dump(config.echo(), f, sort_keys=True)
        return path


def _load_run_dataset(run: RunDirectory, config: RunConfig) -> Dataset:
    if not (run.data / "manifest.json").is_file():
        raise MissingArtifactError(str(run.data), "run gen-data first")
    dataset = load_dataset(run.data)
    if dataset.config.model_dump() != config.data.model_dump():
        raise ConfigError("data", f"differs from the dataset stored in {run.data}")
    return dataset


def _load_model(run: RunDirectory, args: argparse.Namespace, config: RunConfig, stage: str = "finetune") -> BiKop:
    """Trained weights under the run's inference settings"""
    path = Path(args.checkpoint) if args.checkpoint else run.checkpoint(stage)
    if not path.is_file():
        raise MissingArtifactError(str(path), f"run {stage} first or pass --checkpoint")
    checkpoint = load_checkpoint(path)
    return restore_model(checkpoint, config=inference_config(build_config(checkpoint.config), config))


def _progress() -> Progress:
    return Progress(
        SpinnerColumn(),
        TextColumn("[progress.description]{task.description}"),
        BarColumn(),
        TextColumn("{task.completed}/{task.total}"),
        console=console,
    )


def cmd_gen_data(config: RunConfig, run: RunDirectory, args: argparse.Namespace) -> None:
    run.begin(args.command, config, [run.data / "manifest.json", run.data / "images.bin"], args.force)
    with _progress() as progress:
        progress.add_task("Rendering synthetic dataset...", total=None)
        dataset = generate_dataset(config.data)
    save_dataset(dataset, run.data)
    counts = ", ".join(f"{split}={len(ids)}" for split, ids in dataset.splits.items())
    console.print(f"[green]✓ Dataset with {len(dataset.images)} images ({counts}) saved to {run.data}[/green]")


def cmd_pretrain(config: RunConfig, run: RunDirectory, args: argparse.Namespace) -> None:
    dataset = _load_run_dataset(run, config)
    path = run.checkpoint("pretrain")
    run.begin(args.command, config, [path, run.metrics / "pretrain.jsonl"], args.force)
    model = build_model(config)
    with _progress() as progress:
        task = progress.add_task("Pre-training backbone...", total=config.train.pretrain_epochs)
        result = pretrain(model, dataset, config, lambda done, total: progress.update(task, completed=done))
    save_checkpoint(model, path, config.echo(), "pretrain", extra={"losses": result.losses})
    write_records(
        run.metrics / "pretrain.jsonl",
        [
            {"epoch": epoch + 1, "loss": loss, "accuracy": accuracy}
            for epoch, (loss, accuracy) in enumerate(zip(result.losses, result.accuracies))
        ],
    )
    console.print(f"[green]✓ Pre-trained checkpoint saved to {path}[/green]")


def cmd_finetune(config: RunConfig, run: RunDirectory, args: argparse.Namespace) -> None:
    dataset = _load_run_dataset(run, config)
    source = Path(args.checkpoint) if args.checkpoint else run.checkpoint("pretrain")
    if not source.is_file():
        raise MissingArtifactError(str(source), "run pretrain first or pass --checkpoint")
    path = run.checkpoint("finetune")
    run.begin(
        args.command,
        config,
        [path, run.metrics / "finetune.jsonl", run.metrics / "validation.jsonl"],
        args.force,
    )

    model = build_model(config)
    pretrained = load_checkpoint(source)
    model.backbone.load_state_dict(
        {name[len("backbone.") :]: tensor for name, tensor in pretrained.tensors.items() if name.startswith("backbone.")}
    )
    with _progress() as progress:
        task = progress.add_task("Episodic fine-tuning...", total=config.train.finetune_episodes)
        result = finetune(model, dataset, config, lambda done, total: progress.update(task, completed=done))
    save_checkpoint(
        model,
        path,
        config.echo(),
        "finetune",
        extra={
            "source_checkpoint": str(source),
            "best_episode": result.best_episode,
            "best_val_accuracy": result.best_val_accuracy,
            "train_stream_digest": result.stream_digest,
        },
    )
    write_records(run.metrics / "finetune.jsonl", result.history)
    write_records(run.metrics / "validation.jsonl", result.validation)
    if result.stopped_early:
        console.print(f"[yellow]Early stopping after {len(result.history)} episodes[/yellow]")
    console.print(f"[green]✓ Fine-tuned checkpoint saved to {path}[/green]")


def cmd_eval(config: RunConfig, run: RunDirectory, args: argparse.Namespace) -> None:
    dataset = _load_run_dataset(run, config)
    model = _load_model(run, args, config)
    ev = config.eval
    output = run.metrics / f"eval_{ev.split}_{ev.k_shot}shot.jsonl"
    run.begin(args.command, config, [output], args.force)
    digest_before = parameter_digest(model)
    with _progress() as progress:
        progress.add_task(f"Evaluating {ev.n_episodes} {ev.n_way}-way {ev.k_shot}-shot episodes...", total=None)
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
            config_echo=config.echo(),
        )
    if parameter_digest(model) != digest_before:
        raise RuntimeError("evaluation modified model parameters")

    write_records(output, [report])
    table = Table(title="Evaluation")
    for column in ("split", "episodes", "N-way", "K-shot", "accuracy"):
        table.add_column(column)
    table.add_row(
        ev.split, str(report.n_episodes), str(ev.n_way), str(ev.k_shot), f"{report.mean_accuracy:.2f} ± {report.ci95:.2f}"
    )
    console.print(table)
    console.print(f"[green]✓ Evaluation report saved to {run.metrics}[/green]")


def cmd_ablate(config: RunConfig, run: RunDirectory, args: argparse.Namespace) -> None:
    dataset = _load_run_dataset(run, config)
    grid = grid_from_preset(args.preset)
    directory = run.metrics / grid.name.replace(":", "_")
    run.begin(
        args.command,
        config,
        [directory / name for name in ("ablation.jsonl", "ablation_summary.csv", "ablation_report.txt")],
        args.force,
    )

    with _progress() as progress:
        task = progress.add_task(f"Ablation '{grid.name}'...", total=len(grid.cells) * len(args.seeds))
        table = run_ablation(
            grid,
            config,
            dataset,
            args.seeds,
            with_mmc=args.mmc,
            progress=lambda cell, done, total: progress.update(task, completed=done, description=cell),
        )
    paths = write_ablation(table, directory)

    summary = Table(title=f"Ablation: {grid.name}")
    for column in ("#", "cell", *(f"seed {seed}" for seed in table.seeds)):
        summary.add_column(column)
    for cell in grid.cells:
        scores = [
            f"{row.mean_accuracy:.2f} ± {row.ci95:.2f}" for seed in table.seeds for row in table.rows
            if row.cell == cell.name and row.seed == seed
        ]
        summary.add_row(str(cell.row or "-"), cell.name, *scores)
    console.print(summary)
    console.print(f"[green]✓ Ablation results saved to {paths['summary'].parent}[/green]")


def cmd_mmc(config: RunConfig, run: RunDirectory, args: argparse.Namespace) -> None:
    dataset = _load_run_dataset(run, config)
    model = _load_model(run, args, config)
    outputs = [run.metrics / "mmc.csv", run.metrics / "mmc.jsonl"]
    run.begin(args.command, config, outputs, args.force)
    report = compute_mmc(collect_query_features(model, dataset, "novel"))
    write_mmc(report, outputs[0])
    write_records(outputs[1], [{"cv": report.cv, "n_features": report.n_features}])
    console.print(f"[green]✓ MMC over {report.n_features} novel images, cv = {report.cv:.4f}[/green]")


def cmd_dump_attention(config: RunConfig, run: RunDirectory, args: argparse.Namespace) -> None:
    dataset = _load_run_dataset(run, config)
    model = _load_model(run, args, config)
    output = run.metrics / f"attention_episode{args.episode}.csv"
    run.begin(args.command, config, [output], args.force)
    ev = config.eval
    episode = sample_episode(
        dataset, ev.split, ev.n_way, ev.k_shot, ev.n_query, episode_rng(ev.seed, "eval", args.episode)
    )
    maps = dump_attention(model, episode)
    path = write_attention(maps, output)
    console.print(f"[green]✓ {len(maps)} attention maps saved to {path}[/green]")


COMMANDS: Dict[str, Callable[[RunConfig, RunDirectory, argparse.Namespace], None]] = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "mmc": cmd_mmc,
    "dump-attention": cmd_dump_attention,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="python -m src.main", description="BiKop few-shot learner")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        cmd = sub.add_parser(name)
        cmd.add_argument("--config", default=None, help="YAML config file")
        cmd.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="SECTION.KEY=VALUE",
            help="override one config key (repeatable)",
        )
        cmd.add_argument(
            "--run-root",
            default=None,
            help=f"directory holding runs (default: $BIKOP_RUN_ROOT or {DEFAULT_RUN_ROOT})",
        )
        cmd.add_argument("--force", action="store_true", help="replace existing artifacts")
        if name in ("finetune", "eval", "mmc", "dump-attention"):
            cmd.add_argument("--checkpoint", default=None, help="checkpoint to start from")
        if name == "ablate":
            cmd.add_argument("--preset", default="components", help="components, fusion or sweep:<section.key>")
            cmd.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
            cmd.add_argument("--mmc", action="store_true", help="also record cv(MMC) per cell")
        if name == "dump-attention":
            cmd.add_argument("--episode", type=int, default=0, help="index into the eval episode stream")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Run one command; returns the process exit status"""
    try:
        args = build_parser().parse_args(argv)
        config = parse_config(args.config, args.overrides)
    except (UsageError, ConfigError) as e:
        console.print(f"[red]✗ Error: {e}[/red]")
        return EXIT_USAGE

    setup_logging(config.run.log_level)
    set_deterministic(config.train.seed, config.train.deterministic)
    run_root = Path(args.run_root or os.getenv("BIKOP_RUN_ROOT") or DEFAULT_RUN_ROOT)
    run = RunDirectory(run_root, config.run.name)

    console.print(f"\n[bold blue]BiKop {args.command}[/bold blue] [cyan]{run.path}[/cyan]\n")
    try:
        COMMANDS[args.command](config, run, args)
    except (ConfigError, AblationConfigError) as e:
        console.print(f"\n[red]✗ Error: {e}[/red]")
        return EXIT_USAGE
    except (MissingArtifactError, DatasetError) as e:
        console.print(f"\n[red]✗ Error: {e}[/red]")
        return EXIT_FAILURE
    except Exception as e:
        console.print(f"\n[red]✗ Error: {e}[/red]")
        console.print_exception(show_locals=False)
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
