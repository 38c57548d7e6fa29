"""
Semantic adversarial disentanglement: prototype-conditioned channel filters
"""
from typing import NamedTuple, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from src.config import SadConfig
from src.errors import NonFiniteError, ShapeError


class DisentangledPrototype(NamedTuple):
    relevant: torch.Tensor
    irrelevant: torch.Tensor


def sample_gumbel(shape, generator: Optional[torch.Generator] = None, dtype=torch.float32, eps: float = 1e-20):
    u = torch.rand(shape, generator=generator, dtype=dtype)
    return -torch.log(-torch.log(u + eps) + eps)


def max_of_gumbel_softmax(
    logits: torch.Tensor,
    samples: int,
    temperature: float = 1.0,
    hard: bool = True,
    generator: Optional[torch.Generator] = None,
    noise: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """
    Element-wise maximum over `samples` Gumbel-Softmax draws

    Args:
        logits: (..., C) channel logits
        noise: optional fixed Gumbel noise of shape (..., samples, C)

    Returns:
        (..., C) filter in [0, 1]; in hard mode exactly {0, 1} with
        straight-through gradients from the relaxed draws
    """
    if not torch.isfinite(logits).all():
        raise NonFiniteError("filter logits contain NaN or inf")
    shape = (*logits.shape[:-1], samples, logits.shape[-1])
    if noise is None:
        noise = sample_gumbel(shape, generator=generator, dtype=logits.dtype).to(logits.device)
    elif tuple(noise.shape) != shape:
        raise ShapeError(f"noise must have shape {shape}, got {tuple(noise.shape)}")
    soft = F.softmax((logits.unsqueeze(-2) + noise) / temperature, dim=-1)
    relaxed = soft.max(dim=-2).values
    if not hard:
        return relaxed
    one_hot = F.one_hot(soft.argmax(dim=-1), logits.shape[-1]).to(logits.dtype)
    # forward value is the exact 0/1 mask, gradient is that of the relaxed maximum
    return one_hot.max(dim=-2).values + (relaxed - relaxed.detach())


def top_m_filter(logits: torch.Tensor, samples: int) -> torch.Tensor:
    """Indicator of the top-min(m, C) logits, ties going to the lower channel index"""
    keep = min(samples, logits.shape[-1])
    order = torch.sort(logits, dim=-1, descending=True, stable=True).indices[..., :keep]
    return torch.zeros_like(logits).scatter(-1, order, 1.0)


def disentangle(prototype: torch.Tensor, mask: torch.Tensor) -> DisentangledPrototype:
    """p_hat = p * f,  p_check = p * (1 - f)"""
    if prototype.shape != mask.shape:
        raise ShapeError(f"prototype {tuple(prototype.shape)} and filter {tuple(mask.shape)} differ")
    return DisentangledPrototype(prototype * mask, prototype * (1 - mask))


class FilterNet(nn.Module):
    """MLP D mapping a prototype to C_d channel logits, plus the filter samplers"""

    def __init__(self, config: SadConfig, dim: int, samples: int):
        super().__init__()
        self.config = config
        self.samples = samples
        self.temperature = config.temperature
        hidden = dim * config.hidden_ratio
        if config.depth == 1:
            layers = [nn.Linear(dim, dim)]
        else:
            layers = [nn.Linear(dim, hidden), nn.GELU()]
            for _ in range(config.depth - 2):
                layers += [nn.Linear(hidden, hidden), nn.GELU()]
            layers.append(nn.Linear(hidden, dim))
        self.mlp = nn.Sequential(*layers)

    def forward(self, prototypes: torch.Tensor) -> torch.Tensor:
        return self.mlp(prototypes)

    def sample_filter(
        self,
        prototypes: torch.Tensor,
        generator: Optional[torch.Generator] = None,
        hard: Optional[bool] = None,
        noise: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        """Stochastic training-time filter f = max_j GumbelSoftmax(D(p))"""
        if hard is None:
            hard = self.config.train_mode == "hard"
        return max_of_gumbel_softmax(
            self(prototypes), self.samples, self.temperature, hard=hard, generator=generator, noise=noise
        )

    def eval_filter(self, prototypes: torch.Tensor) -> torch.Tensor:
        """Deterministic filter: top-m channels of D(p)"""
        return top_m_filter(self(prototypes), self.samples)
