"""
Bidirectional knowledge permeation between patch features and the prompt embedding
"""
import math
from typing import NamedTuple, Optional

import torch
import torch.nn as nn

from src.config import BkpConfig
from src.errors import ShapeError

CROSS_ATTENTION_MODES = ("bidirectional", "text_to_vision", "vision_to_text")
FUSION_KINDS = ("dot", "add", "concat")


class Permeation(NamedTuple):
    patches: torch.Tensor
    prompt: torch.Tensor
    patch_attention: Optional[torch.Tensor] = None
    prompt_attention: Optional[torch.Tensor] = None


class KnowledgePermeation(nn.Module):
    """
    Single-head cross-attention with one parameter set shared by both directions

    text -> vision:  A_Z = softmax((Z Wq)(T Wk)^T / sqrt(d)),  Z_hat = Z + mu * X(A_Z T Wv)
    vision -> text:  A_T = softmax((T Wq)(Z Wk)^T / sqrt(d)),  T_hat = T + mu * X(A_T Z Wv)
    """

    def __init__(self, config: BkpConfig, dim: int):
        super().__init__()
        self.config = config
        self.dim = dim
        self.mu = config.mu
        self.w_q = nn.Linear(dim, dim, bias=False)
        self.w_k = nn.Linear(dim, dim, bias=False)
        self.w_v = nn.Linear(dim, dim, bias=False)
        self.mlp = nn.Sequential(
            nn.Linear(dim, dim * config.hidden_ratio),
            nn.GELU(),
            nn.Linear(dim * config.hidden_ratio, dim),
        )

    def _check(self, patches: torch.Tensor, prompt: torch.Tensor) -> None:
        if patches.dim() != 3 or patches.shape[-1] != self.dim:
            raise ShapeError(f"patches must be (B, M, {self.dim}), got {tuple(patches.shape)}")
        if prompt.dim() != 3 or prompt.shape[0] != patches.shape[0] or prompt.shape[1:] != (1, self.dim):
            raise ShapeError(f"prompt must be (B, 1, {self.dim}), got {tuple(prompt.shape)}")

    def text_to_vision(self, patches: torch.Tensor, prompt: torch.Tensor):
        """Returns (Z_hat (B, M, d), A_Z (B, M, 1))"""
        self._check(patches, prompt)
        logits = torch.matmul(self.w_q(patches), self.w_k(prompt).transpose(-1, -2)) / math.sqrt(self.dim)
        # key axis is the singleton text axis; "query" normalizes over patches instead
        axis = -1 if self.config.attention_axis == "key" else -2
        attention = torch.softmax(logits, dim=axis)
        return patches + self.mu * self.mlp(torch.matmul(attention, self.w_v(prompt))), attention

    def vision_to_text(self, prompt: torch.Tensor, patches: torch.Tensor):
        """Returns (T_hat (B, 1, d), A_T (B, 1, M))"""
        self._check(patches, prompt)
        logits = torch.matmul(self.w_q(prompt), self.w_k(patches).transpose(-1, -2)) / math.sqrt(self.dim)
        attention = torch.softmax(logits, dim=-1)
        return prompt + self.mu * self.mlp(torch.matmul(attention, self.w_v(patches))), attention

    def permeate(self, patches: torch.Tensor, prompt: torch.Tensor) -> Permeation:
        """Both directions, each computed from the original (Z, T)"""
        new_patches, patch_attention = self.text_to_vision(patches, prompt)
        new_prompt, prompt_attention = self.vision_to_text(prompt, patches)
        return Permeation(new_patches, new_prompt, patch_attention, prompt_attention)

    def fuse_variant(self, patches: torch.Tensor, prompt: torch.Tensor, kind: str) -> Permeation:
        """Parameter-free fusion baselines: dot, add, concat"""
        self._check(patches, prompt)
        pooled = patches.mean(dim=1, keepdim=True)
        if kind == "dot":
            return Permeation(patches * prompt, prompt * pooled)
        if kind == "add":
            return Permeation(patches + prompt, prompt + pooled)
        if kind == "concat":
            return Permeation(patches, prompt)
        raise ValueError(f"unknown fusion kind '{kind}' (expected one of {FUSION_KINDS})")

    def forward(self, patches: torch.Tensor, prompt: torch.Tensor) -> Permeation:
        mode = self.config.mode
        if mode == "bidirectional":
            return self.permeate(patches, prompt)
        if mode == "text_to_vision":
            new_patches, attention = self.text_to_vision(patches, prompt)
            return Permeation(new_patches, prompt, patch_attention=attention)
        if mode == "vision_to_text":
            new_prompt, attention = self.vision_to_text(prompt, patches)
            return Permeation(patches, new_prompt, prompt_attention=attention)
        return self.fuse_variant(patches, prompt, mode)
