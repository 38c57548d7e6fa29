"""
Meta-class-specific prompts and their encoding into prompt embeddings
"""
from typing import Sequence

import torch
import torch.nn as nn

from src.config import TextConfig
from src.errors import PromptSlotError, ShapeError


class FrozenTextEncoder(nn.Module):
    """
    Deterministic stand-in for a pretrained language model

    Seeded-random token embeddings and a two-layer mixer over the mean token
    embedding. Nothing here is ever trainable.
    """

    def __init__(self, vocab_size: int, token_dim: int = 32, seed: int = 7):
        super().__init__()
        generator = torch.Generator().manual_seed(seed)
        self.token_embedding = nn.Embedding(vocab_size, token_dim)
        self.mixer = nn.Sequential(
            nn.Linear(token_dim, token_dim),
            nn.Tanh(),
            nn.Linear(token_dim, token_dim),
            nn.Tanh(),
        )
        with torch.no_grad():
            self.token_embedding.weight.copy_(torch.randn(vocab_size, token_dim, generator=generator))
            for layer in self.mixer:
                if isinstance(layer, nn.Linear):
                    bound = token_dim**-0.5
                    layer.weight.copy_((torch.rand(layer.weight.shape, generator=generator) * 2 - 1) * bound)
                    layer.bias.copy_((torch.rand(layer.bias.shape, generator=generator) * 2 - 1) * bound)
        self.requires_grad_(False)

    def embed_tokens(self, tokens: Sequence[int]) -> torch.Tensor:
        index = torch.as_tensor(list(tokens), dtype=torch.long, device=self.token_embedding.weight.device)
        return self.token_embedding(index)

    def forward(self, sequence: torch.Tensor) -> torch.Tensor:
        """(..., length, token_dim) -> (..., token_dim)"""
        return self.mixer(sequence.mean(dim=-2))


class PromptBank(nn.Module):
    """Learnable prefix tokens, `prefix_length` per episode slot"""

    def __init__(self, n_slots: int, prefix_length: int, token_dim: int, init_std: float = 0.02):
        super().__init__()
        self.prefix = nn.Parameter(torch.randn(n_slots, prefix_length, token_dim) * init_std)

    @property
    def n_slots(self) -> int:
        return self.prefix.shape[0]

    @property
    def prefix_length(self) -> int:
        return self.prefix.shape[1]


class TextKnowledge(nn.Module):
    """Builds prompts E_n and encodes them to T_n = H(G(E_n))"""

    def __init__(self, config: TextConfig, vocab_size: int, dim: int):
        super().__init__()
        self.config = config
        self.encoder = FrozenTextEncoder(vocab_size, config.token_dim, config.encoder_seed)
        self.prompt_bank = PromptBank(
            config.n_slots,
            config.prefix_length if config.prompt == "meta" else 0,
            config.token_dim,
            config.init_std,
        )
        self.projection = nn.Linear(config.token_dim, dim)

    def build_prompt(self, slot: int, name_tokens: Sequence[int]) -> torch.Tensor:
        """Prefix tokens of `slot` followed by the name token embeddings"""
        if not 0 <= slot < self.prompt_bank.n_slots:
            raise PromptSlotError(f"prompt slot {slot} outside [0, {self.prompt_bank.n_slots})")
        if len(name_tokens) == 0:
            raise ShapeError("class name must contain at least one token")
        names = self.encoder.embed_tokens(name_tokens).to(self.prompt_bank.prefix.dtype)
        return torch.cat([self.prompt_bank.prefix[slot], names], dim=0)

    def encode_prompt(self, prompt: torch.Tensor) -> torch.Tensor:
        """(length, token_dim) prompt -> (dim,) embedding"""
        if prompt.dim() != 2 or prompt.shape[-1] != self.config.token_dim:
            raise ShapeError(f"prompt must be (length, {self.config.token_dim}), got {tuple(prompt.shape)}")
        return self.projection(self.encoder(prompt))

    def forward(self, slots: Sequence[int], names: Sequence[Sequence[int]]) -> torch.Tensor:
        """Prompt embeddings for a whole episode, one row per label"""
        return torch.stack(
            [self.encode_prompt(self.build_prompt(slot, name)) for slot, name in zip(slots, names)]
        )
