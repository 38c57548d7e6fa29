"""
Two-stage training: supervised pre-training on base classes, then episodic fine-tuning
"""
import copy
import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from src.config import RunConfig, TrainConfig
from src.data.synth_data import Dataset, Episode, sample_episode
from src.errors import DatasetError, TrainingDivergedError
from src.evaluation.evaluator import evaluate
from src.models.meta_head import BiKop, EpisodeLosses
from src.utils import derive_seed, episode_rng, seeded, stream_digest, torch_generator

logger = logging.getLogger(__name__)

ProgressCallback = Callable[[int, int], None]


@dataclass
class PretrainResult:
    losses: List[float] = field(default_factory=list)
    accuracies: List[float] = field(default_factory=list)


@dataclass
class FinetuneResult:
    history: List[Dict[str, float]] = field(default_factory=list)
    validation: List[Dict[str, float]] = field(default_factory=list)
    best_val_accuracy: Optional[float] = None
    best_episode: Optional[int] = None
    stopped_early: bool = False
    episode_digests: List[str] = field(default_factory=list)

    @property
    def stream_digest(self) -> str:
        """Digest of the training episodes actually consumed"""
        return stream_digest(self.episode_digests)


def build_param_groups(model: BiKop, config: TrainConfig) -> List[Dict[str, Any]]:
    """
    AdamW parameter groups: base, BKP (x lr_mult_bkp) and SAD (x lr_mult_sad)

    The frozen text encoder is never part of any group.
    """
    frozen = {id(p) for p in model.text.encoder.parameters()}
    bkp = [p for p in model.bkp.parameters() if p.requires_grad]
    sad = [p for p in model.sad.parameters() if p.requires_grad]
    grouped = {id(p) for p in bkp + sad}
    base = [p for p in model.parameters() if p.requires_grad and id(p) not in grouped and id(p) not in frozen]

    groups = [
        {"name": "base", "params": base, "lr": config.base_lr},
        {"name": "bkp", "params": bkp, "lr": config.base_lr * config.lr_mult_bkp},
        {"name": "sad", "params": sad, "lr": config.base_lr * config.lr_mult_sad},
    ]
    return groups


def build_optimizer(model: BiKop, config: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(build_param_groups(model, config), lr=config.base_lr, weight_decay=config.weight_decay)


def _check_finite(loss: torch.Tensor, stage: str, step: int, details: Dict[str, float]) -> None:
    if not torch.isfinite(loss):
        raise TrainingDivergedError(f"{stage} loss became non-finite at step {step}: {details}")


def pretrain(
    model: BiKop,
    dataset: Dataset,
    config: RunConfig,
    progress: Optional[ProgressCallback] = None,
) -> PretrainResult:
    """
    Supervised base-class classification on top of the backbone

    Only the backbone is updated; the linear head is thrown away afterwards.
    """
    train = config.train
    result = PretrainResult()
    if train.pretrain_epochs == 0:
        return result

    base_classes = dataset.split_classes("base")
    if not base_classes:
        raise DatasetError("base split is empty")
    image_ids = torch.as_tensor(dataset.split_image_ids("base"))
    remap = {class_id: index for index, class_id in enumerate(base_classes)}
    targets = torch.as_tensor([remap[int(c)] for c in dataset.image_labels[image_ids.numpy()]])
    images = torch.as_tensor(dataset.images[image_ids.numpy()], dtype=model.dtype)

    with seeded(derive_seed(train.seed, "pretrain", 0)):
        head = nn.Linear(config.backbone.dim, len(base_classes)).to(model.dtype)
    optimizer = torch.optim.AdamW(
        list(model.backbone.parameters()) + list(head.parameters()),
        lr=train.pretrain_lr,
        weight_decay=train.weight_decay,
    )

    model.train()
    for epoch in range(train.pretrain_epochs):
        order = torch.randperm(len(images), generator=torch_generator(derive_seed(train.seed, "pretrain", epoch + 1)))
        total_loss, correct = 0.0, 0
        for step, start in enumerate(range(0, len(order), train.pretrain_batch_size)):
            batch = order[start : start + train.pretrain_batch_size]
            logits = head(model.backbone.encode_query(images[batch]))
            loss = F.cross_entropy(logits, targets[batch])
            _check_finite(loss, "pretrain", step, {"epoch": epoch, "loss": float(loss)})

            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()

            total_loss += float(loss) * len(batch)
            correct += int((logits.argmax(dim=-1) == targets[batch]).sum())

        result.losses.append(total_loss / len(images))
        result.accuracies.append(correct / len(images))
        logger.info(
            "pretrain epoch %d/%d loss=%.4f acc=%.2f%%",
            epoch + 1,
            train.pretrain_epochs,
            result.losses[-1],
            100 * result.accuracies[-1],
        )
        if progress is not None:
            progress(epoch + 1, train.pretrain_epochs)
    return result


def finetune_step(
    model: BiKop,
    optimizer: torch.optim.Optimizer,
    episode: Episode,
    generator: Optional[torch.Generator] = None,
    step: int = 0,
) -> EpisodeLosses:
    """One optimizer step on L_total of one episode"""
    model.train()
    losses = model.forward_episode(episode, generator=generator, mode="train").losses
    _check_finite(
        losses.total,
        "finetune",
        step,
        {"cls": float(losses.cls), "adv": float(losses.adv), "total": float(losses.total)},
    )
    optimizer.zero_grad(set_to_none=True)
    losses.total.backward()
    optimizer.step()
    return losses


def finetune(
    model: BiKop,
    dataset: Dataset,
    config: RunConfig,
    progress: Optional[ProgressCallback] = None,
) -> FinetuneResult:
    """
    Episodic fine-tuning on base-split episodes with early stopping on the val split

    Returns:
        FinetuneResult; the model holds the best validated weights afterwards
    """
    train = config.train
    optimizer = build_optimizer(model, train)
    result = FinetuneResult()

    can_validate = train.val_episodes > 0 and len(dataset.split_classes("val")) >= train.n_way
    if train.val_episodes > 0 and not can_validate:
        logger.warning("val split has fewer than %d classes, early stopping disabled", train.n_way)

    best_state: Optional[Dict[str, torch.Tensor]] = None
    stale = 0
    for index in range(train.finetune_episodes):
        episode = sample_episode(
            dataset, "base", train.n_way, train.k_shot, train.n_query, episode_rng(train.seed, "train", index)
        )
        generator = torch_generator(derive_seed(train.seed, "gumbel", index))
        losses = finetune_step(model, optimizer, episode, generator, step=index)
        result.episode_digests.append(episode.digest())
        result.history.append(
            {"episode": index, "loss_cls": float(losses.cls), "loss_adv": float(losses.adv), "loss_total": float(losses.total)}
        )
        if progress is not None:
            progress(index + 1, train.finetune_episodes)

        if can_validate and (index + 1) % train.val_every == 0:
            report = evaluate(
                model,
                dataset,
                split="val",
                n_episodes=train.val_episodes,
                n_way=train.n_way,
                k_shot=1,
                n_query=train.n_query,
                seed=train.seed,
                tag="val",
                workers=config.eval.workers,
            )
            result.validation.append({"episode": index + 1, "accuracy": report.mean_accuracy, "ci95": report.ci95})
            logger.info("episode %d val acc=%.2f +- %.2f", index + 1, report.mean_accuracy, report.ci95)
            if result.best_val_accuracy is None or report.mean_accuracy > result.best_val_accuracy:
                result.best_val_accuracy = report.mean_accuracy
                result.best_episode = index + 1
                best_state = copy.deepcopy(model.state_dict())
                stale = 0
            else:
                stale += 1
                if stale >= train.patience:
                    result.stopped_early = True
                    logger.info("early stopping after %d episodes", index + 1)
                    break

    if best_state is not None:
        model.load_state_dict(best_state)
    return result
