"""
Patch embedding and a pre-norm transformer encoder split at the permeation layer
"""
from typing import List, Optional, Tuple

import torch
import torch.nn as nn
from einops import rearrange
from einops.layers.torch import Rearrange

from src.config import BackboneConfig
from src.errors import ShapeError


class FeedForward(nn.Module):
    def __init__(self, dim: int, hidden_dim: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden_dim)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden_dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.act(self.fc1(x)))


class MultiHeadSelfAttention(nn.Module):
    """Multi-head self-attention that also returns its attention maps"""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.to_qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        q, k, v = (
            rearrange(t, "b n (h d) -> b h n d", h=self.heads) for t in self.to_qkv(x).chunk(3, dim=-1)
        )
        attn = torch.softmax(torch.matmul(q, k.transpose(-1, -2)) * self.scale, dim=-1)
        out = rearrange(torch.matmul(attn, v), "b h n d -> b n (h d)")
        return self.proj(out), attn


class TransformerLayer(nn.Module):
    """Pre-norm layer: x + MSA(LN(x)), then x + FFN(LN(x))"""

    def __init__(self, dim: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim, dim * mlp_ratio)

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        out, attn = self.attn(self.norm1(x))
        x = x + out
        x = x + self.ffn(self.norm2(x))
        return x, attn


class Backbone(nn.Module):
    """
    Vision transformer without a class token

    Layers 1..l_split run on patch tokens alone; layers l_split+1..L run on the
    joint sequence of permeated patches and the prompt token.
    """

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        patch = config.patch_size
        self.to_patches = Rearrange("b c (h p1) (w p2) -> b (h w) (p1 p2 c)", p1=patch, p2=patch)
        self.patch_projection = nn.Linear(config.in_channels * patch * patch, config.dim)
        self.pos_embedding = (
            nn.Parameter(torch.zeros(1, config.n_patches, config.dim))
            if config.use_positional_embedding
            else None
        )
        self.layers = nn.ModuleList(
            [TransformerLayer(config.dim, config.heads, config.mlp_ratio) for _ in range(config.depth)]
        )
        self._init_parameters()

    @staticmethod
    def _init_module(module: nn.Module) -> None:
        if isinstance(module, nn.Linear):
            nn.init.trunc_normal_(module.weight, mean=0.0, std=0.02)
            if module.bias is not None:
                nn.init.zeros_(module.bias)
        elif isinstance(module, nn.LayerNorm):
            nn.init.ones_(module.weight)
            nn.init.zeros_(module.bias)

    def _init_parameters(self) -> None:
        self.apply(self._init_module)
        if self.pos_embedding is not None:
            nn.init.trunc_normal_(self.pos_embedding, mean=0.0, std=0.02)

    @property
    def lower_layers(self) -> List[TransformerLayer]:
        return list(self.layers[: self.config.l_split])

    @property
    def upper_layers(self) -> List[TransformerLayer]:
        return list(self.layers[self.config.l_split :])

    def patchify(self, images: torch.Tensor) -> torch.Tensor:
        """(B, C, H, W) images -> (B, M, dim) patch tokens in raster order"""
        if images.dim() != 4 or images.shape[1] != self.config.in_channels:
            raise ShapeError(f"expected (B, {self.config.in_channels}, H, W) images, got {tuple(images.shape)}")
        height, width = images.shape[-2:]
        if height % self.config.patch_size or width % self.config.patch_size:
            raise ShapeError(f"image {height}x{width} is not divisible by patch size {self.config.patch_size}")
        tokens = self.patch_projection(self.to_patches(images))
        if self.pos_embedding is not None:
            if tokens.shape[1] != self.pos_embedding.shape[1]:
                raise ShapeError(
                    f"{tokens.shape[1]} patches but positional embedding covers {self.pos_embedding.shape[1]}"
                )
            tokens = tokens + self.pos_embedding
        return tokens

    @staticmethod
    def _run(
        layers: List[TransformerLayer], x: torch.Tensor, attention: Optional[List[torch.Tensor]]
    ) -> torch.Tensor:
        for layer in layers:
            x, attn = layer(x)
            if attention is not None:
                attention.append(attn)
        return x

    def encode_lower(
        self, tokens: torch.Tensor, attention: Optional[List[torch.Tensor]] = None
    ) -> torch.Tensor:
        """Layers 1..l_split: Z_l"""
        self._check_tokens(tokens)
        return self._run(self.lower_layers, tokens, attention)

    def encode_joint(
        self,
        patches: torch.Tensor,
        prompt: torch.Tensor,
        attention: Optional[List[torch.Tensor]] = None,
    ) -> torch.Tensor:
        """
        F^s = GAP(MSA([Z_hat; T_hat]))

        Args:
            patches: (B, M, dim) permeated patch tokens
            prompt: (B, 1, dim) permeated prompt token

        Returns:
            (B, dim) joint support features
        """
        self._check_tokens(patches)
        if prompt.dim() != 3 or prompt.shape[0] != patches.shape[0] or prompt.shape[1:] != (1, self.config.dim):
            raise ShapeError(f"prompt must be (B, 1, {self.config.dim}), got {tuple(prompt.shape)}")
        x = self._run(self.upper_layers, torch.cat([patches, prompt], dim=1), attention)
        if not self.config.pool_prompt_token:
            x = x[:, :-1]
        return x.mean(dim=1)

    def encode_upper(self, patches: torch.Tensor) -> torch.Tensor:
        """Layers l_split+1..L on patches alone, then GAP"""
        self._check_tokens(patches)
        return self._run(self.upper_layers, patches, None).mean(dim=1)

    def encode_query(
        self, images: torch.Tensor, attention: Optional[List[torch.Tensor]] = None
    ) -> torch.Tensor:
        """F^q: all L layers with no prompt token, then GAP over the M patches"""
        return self._run(list(self.layers), self.patchify(images), attention).mean(dim=1)

    def _check_tokens(self, tokens: torch.Tensor) -> None:
        if tokens.dim() != 3 or tokens.shape[-1] != self.config.dim:
            raise ShapeError(f"expected (B, M, {self.config.dim}) tokens, got {tuple(tokens.shape)}")
