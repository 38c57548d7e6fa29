"""
Prototypes, cosine classification, the three losses and the full episode forward pass
"""
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from src.config import RunConfig
from src.data.synth_data import Episode
from src.errors import ShapeError, UnevenShotsError, ZeroNormError
from src.models.backbone import Backbone
from src.models.bkp import KnowledgePermeation, Permeation
from src.models.sad import FilterNet, disentangle
from src.models.text_knowledge import TextKnowledge
from src.utils import derive_seed, seeded


@dataclass
class EpisodeLosses:
    cls: torch.Tensor
    adv: torch.Tensor
    total: torch.Tensor


@dataclass
class EpisodeOutput:
    prototypes: torch.Tensor
    relevant_prototypes: torch.Tensor
    irrelevant_prototypes: torch.Tensor
    query_features: torch.Tensor
    logits: torch.Tensor
    losses: Optional[EpisodeLosses] = None
    prompt_attention: Optional[torch.Tensor] = None


def compute_prototypes(features: torch.Tensor, labels: torch.Tensor, n_way: int) -> torch.Tensor:
    """Per-class mean of the support features; every label must appear equally often"""
    counts = torch.bincount(labels, minlength=n_way)
    if labels.numel() == 0 or len(counts) != n_way or not bool((counts == counts[0]).all()) or counts[0] == 0:
        raise UnevenShotsError(f"support label counts {counts.tolist()} are not uniform over {n_way} classes")
    one_hot = F.one_hot(labels, n_way).to(features.dtype)
    return one_hot.transpose(0, 1) @ features / counts[0]


def cosine_logits(queries: torch.Tensor, prototypes: torch.Tensor, tau: float) -> torch.Tensor:
    """cos(F^q, p_c) / tau for every query/prototype pair"""
    if queries.shape[-1] != prototypes.shape[-1]:
        raise ShapeError(f"feature widths differ: {queries.shape[-1]} vs {prototypes.shape[-1]}")
    query_norm = queries.norm(dim=-1, keepdim=True)
    proto_norm = prototypes.norm(dim=-1, keepdim=True)
    if bool((query_norm == 0).any()) or bool((proto_norm == 0).any()):
        raise ZeroNormError("cosine similarity is undefined for a zero-norm vector")
    return (queries / query_norm) @ (prototypes / proto_norm).transpose(0, 1) / tau


def loss_cls(queries: torch.Tensor, relevant: torch.Tensor, labels: torch.Tensor, tau: float) -> torch.Tensor:
    """Mean -log softmax at the true class against the relevant prototypes"""
    return F.cross_entropy(cosine_logits(queries, relevant, tau), labels)


def loss_adv(queries: torch.Tensor, irrelevant: torch.Tensor, labels: torch.Tensor, tau: float) -> torch.Tensor:
    """Mean +log softmax at the true class against the irrelevant prototypes"""
    return -F.cross_entropy(cosine_logits(queries, irrelevant, tau), labels)


def loss_total(cls: torch.Tensor, adv: torch.Tensor, gamma: float) -> torch.Tensor:
    return cls + gamma * adv


class BiKop(nn.Module):
    """Backbone, text knowledge, permeation and disentanglement wired into one episode learner"""

    def __init__(self, config: RunConfig, vocab_size: int):
        super().__init__()
        self.config = config
        dim = config.backbone.dim
        self.backbone = Backbone(config.backbone)
        self.text = TextKnowledge(config.text, vocab_size, dim)
        self.bkp = KnowledgePermeation(config.bkp, dim)
        self.sad = FilterNet(config.sad, dim, config.samples)

    @property
    def dtype(self) -> torch.dtype:
        return self.backbone.patch_projection.weight.dtype

    def _tensor(self, array: np.ndarray) -> torch.Tensor:
        return torch.as_tensor(array, dtype=self.dtype, device=self.backbone.patch_projection.weight.device)

    def _labels(self, array: np.ndarray) -> torch.Tensor:
        return torch.as_tensor(array, dtype=torch.long, device=self.backbone.patch_projection.weight.device)

    def prompt_embeddings(self, episode: Episode) -> torch.Tensor:
        """(N, dim) prompt embedding per episode label"""
        slots = [episode.slot(label) for label in range(episode.n_way)]
        return self.text(slots, episode.name_tokens)

    def support_permeation(self, episode: Episode) -> Permeation:
        """Lower layers plus BKP for every support image"""
        patches = self.backbone.encode_lower(self.backbone.patchify(self._tensor(episode.support_images)))
        prompts = self.prompt_embeddings(episode)[self._labels(episode.support_labels)].unsqueeze(1)
        return self.bkp(patches, prompts)

    def support_features(self, episode: Episode) -> Tuple[torch.Tensor, Optional[torch.Tensor]]:
        """(F^s (NK, dim), A_T or None)"""
        if self.config.text.prompt == "none":
            patches = self.backbone.encode_lower(self.backbone.patchify(self._tensor(episode.support_images)))
            return self.backbone.encode_upper(patches), None
        permeation = self.support_permeation(episode)
        return self.backbone.encode_joint(permeation.patches, permeation.prompt), permeation.prompt_attention

    def forward_episode(
        self,
        episode: Episode,
        generator: Optional[torch.Generator] = None,
        mode: str = "eval",
    ) -> EpisodeOutput:
        """
        Run one episode end to end

        Args:
            episode: sampled task
            generator: Gumbel noise source for the training-time filter
            mode: "train" samples filters and computes losses; "eval" uses the
                deterministic top-m filter

        Returns:
            EpisodeOutput with logits against p_hat (or p if configured)
        """
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got '{mode}'")
        support, prompt_attention = self.support_features(episode)
        prototypes = compute_prototypes(support, self._labels(episode.support_labels), episode.n_way)

        if self.config.sad.enabled:
            mask = (
                self.sad.sample_filter(prototypes, generator=generator)
                if mode == "train"
                else self.sad.eval_filter(prototypes)
            )
            relevant, irrelevant = disentangle(prototypes, mask)
        else:
            relevant, irrelevant = prototypes, torch.zeros_like(prototypes)

        queries = self.backbone.encode_query(self._tensor(episode.query_images))
        tau = self.config.loss.tau
        use_full = mode == "eval" and (
            self.config.sad.eval_prototype == "full" or not self.config.sad.enabled
        )
        logits = cosine_logits(queries, prototypes if use_full else relevant, tau)

        losses = None
        if mode == "train":
            labels = self._labels(episode.query_labels)
            cls = F.cross_entropy(logits, labels)
            gamma = self.config.loss.gamma
            if self.config.sad.enabled and gamma > 0:
                adv = loss_adv(queries, irrelevant, labels, tau)
            else:
                adv = torch.zeros((), dtype=cls.dtype, device=cls.device)
            losses = EpisodeLosses(cls=cls, adv=adv, total=loss_total(cls, adv, gamma))

        return EpisodeOutput(
            prototypes=prototypes,
            relevant_prototypes=relevant,
            irrelevant_prototypes=irrelevant,
            query_features=queries,
            logits=logits,
            losses=losses,
            prompt_attention=prompt_attention,
        )


def build_model(config: RunConfig) -> BiKop:
    """Fresh model whose initialization depends only on `config.train.seed`"""
    vocab_size = len(config.data.shape_vocab) + len(config.data.palette_vocab)
    with seeded(derive_seed(config.train.seed, "init")):
        return BiKop(config, vocab_size)
