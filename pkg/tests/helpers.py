"""
Test helpers: central finite differences, hand-built episodes and straight-line reference computations
"""
import math
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from src.data.synth_data import Episode


def make_episode(
    n_way: int,
    k_shot: int,
    n_query: int,
    image_shape: Tuple[int, int, int],
    seed: int = 0,
    name_tokens: Optional[List[Tuple[int, ...]]] = None,
) -> Episode:
    """Random-image episode with label-major support and query sets"""
    rng = np.random.default_rng(seed)
    if name_tokens is None:
        name_tokens = [(label % 2, 2 + (label // 2) % 2) for label in range(n_way)]
    n_support, n_queries = n_way * k_shot, n_way * n_query
    return Episode(
        split="novel",
        n_way=n_way,
        k_shot=k_shot,
        n_query=n_query,
        class_ids=np.arange(n_way, dtype=np.int64),
        name_tokens=list(name_tokens),
        support_images=rng.uniform(0.0, 1.0, size=(n_support, *image_shape)),
        support_labels=np.repeat(np.arange(n_way, dtype=np.int64), k_shot),
        support_image_ids=np.arange(n_support, dtype=np.int64),
        query_images=rng.uniform(0.0, 1.0, size=(n_queries, *image_shape)),
        query_labels=np.repeat(np.arange(n_way, dtype=np.int64), n_query),
        query_image_ids=np.arange(n_support, n_support + n_queries, dtype=np.int64),
        slot_assignment={label: label for label in range(n_way)},
    )


def central_difference(fn: Callable[[], torch.Tensor], tensor: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """d fn / d tensor by perturbing one entry at a time in place"""
    grad = torch.zeros_like(tensor)
    flat = tensor.data.view(-1)
    grad_flat = grad.view(-1)
    with torch.no_grad():
        for index in range(flat.numel()):
            original = flat[index].item()
            flat[index] = original + eps
            plus = float(fn())
            flat[index] = original - eps
            minus = float(fn())
            flat[index] = original
            grad_flat[index] = (plus - minus) / (2 * eps)
    return grad


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    scale = float(analytic.norm() + numeric.norm())
    return float((analytic - numeric).norm()) / max(scale, 1e-12)


def assert_gradients_match(
    fn: Callable[[], torch.Tensor],
    params: Dict[str, torch.Tensor],
    eps: float = 1e-5,
    tol: float = 1e-4,
) -> None:
    names = list(params)
    tensors = [params[name] for name in names]
    analytic = torch.autograd.grad(fn(), tensors, allow_unused=True)
    for name, tensor, grad in zip(names, tensors, analytic):
        grad = torch.zeros_like(tensor) if grad is None else grad
        numeric = central_difference(fn, tensor, eps)
        error = relative_error(grad, numeric)
        assert error < tol, f"{name}: relative error {error:.3e}"


# straight-line references, written against raw weights only


def ref_softmax(x: torch.Tensor) -> torch.Tensor:
    shifted = torch.exp(x - x.max(dim=-1, keepdim=True).values)
    return shifted / shifted.sum(dim=-1, keepdim=True)


def ref_layer_norm(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    mean = x.mean(dim=-1, keepdim=True)
    var = ((x - mean) ** 2).mean(dim=-1, keepdim=True)
    return (x - mean) / torch.sqrt(var + eps) * weight + bias


def ref_gelu(x: torch.Tensor) -> torch.Tensor:
    return 0.5 * x * (1.0 + torch.erf(x / math.sqrt(2.0)))


def ref_linear(x: torch.Tensor, layer) -> torch.Tensor:
    out = x @ layer.weight.T
    return out + layer.bias if layer.bias is not None else out


def ref_patches(image: torch.Tensor, patch: int) -> torch.Tensor:
    """(C, H, W) -> (M, P*P*C), raster patch order, row-major pixels with channels innermost"""
    _, height, width = image.shape
    rows = []
    for i in range(height // patch):
        for j in range(width // patch):
            block = image[:, i * patch : (i + 1) * patch, j * patch : (j + 1) * patch]
            rows.append(block.permute(1, 2, 0).reshape(-1))
    return torch.stack(rows)


def ref_transformer_layer(layer, x: torch.Tensor) -> torch.Tensor:
    """One pre-norm layer on a single (n, d) sequence"""
    dim = x.shape[-1]
    heads = layer.attn.heads
    head_dim = dim // heads
    h = ref_layer_norm(x, layer.norm1.weight, layer.norm1.bias)
    qkv = ref_linear(h, layer.attn.to_qkv)
    q, k, v = qkv[:, :dim], qkv[:, dim : 2 * dim], qkv[:, 2 * dim :]
    heads_out = []
    for head in range(heads):
        cols = slice(head * head_dim, (head + 1) * head_dim)
        weights = ref_softmax(q[:, cols] @ k[:, cols].T / math.sqrt(head_dim))
        heads_out.append(weights @ v[:, cols])
    x = x + ref_linear(torch.cat(heads_out, dim=-1), layer.attn.proj)
    h = ref_layer_norm(x, layer.norm2.weight, layer.norm2.bias)
    return x + ref_linear(ref_gelu(ref_linear(h, layer.ffn.fc1)), layer.ffn.fc2)


def ref_tokens(backbone, image: torch.Tensor) -> torch.Tensor:
    tokens = ref_linear(ref_patches(image, backbone.config.patch_size), backbone.patch_projection)
    if backbone.pos_embedding is not None:
        tokens = tokens + backbone.pos_embedding[0]
    return tokens


def ref_mlp(x: torch.Tensor, mlp) -> torch.Tensor:
    """Linear, GELU, Linear (possibly repeated) from an nn.Sequential"""
    for module in mlp:
        x = ref_gelu(x) if isinstance(module, torch.nn.GELU) else ref_linear(x, module)
    return x


def ref_cross_attention(bkp, queries: torch.Tensor, keys: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """queries + mu * X(softmax(q Wq (k Wk)^T / sqrt(d)) k Wv), softmax over keys"""
    dim = queries.shape[-1]
    attention = ref_softmax((queries @ bkp.w_q.weight.T) @ (keys @ bkp.w_k.weight.T).T / math.sqrt(dim))
    update = ref_mlp(attention @ (keys @ bkp.w_v.weight.T), bkp.mlp)
    return queries + bkp.mu * update, attention


def ref_prompt_embedding(text, slot: int, name_tokens: Sequence[int]) -> torch.Tensor:
    encoder = text.encoder
    sequence = torch.cat([text.prompt_bank.prefix[slot], encoder.token_embedding.weight[list(name_tokens)]])
    mixed = sequence.mean(dim=0)
    for module in encoder.mixer:
        mixed = torch.tanh(mixed) if isinstance(module, torch.nn.Tanh) else ref_linear(mixed, module)
    return ref_linear(mixed, text.projection)


def ref_top_m(logits: torch.Tensor, samples: int) -> torch.Tensor:
    values = logits.tolist()
    keep = sorted(range(len(values)), key=lambda i: (-values[i], i))[:samples]
    mask = torch.zeros_like(logits)
    mask[keep] = 1.0
    return mask


def ref_episode_logits(model, episode: Episode) -> torch.Tensor:
    """Eval-mode logits of a bidirectional, meta-prompt, SAD model computed step by step"""
    backbone = model.backbone
    dtype = model.dtype
    prompts = [
        ref_prompt_embedding(model.text, episode.slot(label), episode.name_tokens[label])
        for label in range(episode.n_way)
    ]

    support = []
    for image, label in zip(episode.support_images, episode.support_labels):
        z = ref_tokens(backbone, torch.as_tensor(image, dtype=dtype))
        for layer in backbone.lower_layers:
            z = ref_transformer_layer(layer, z)
        t = prompts[int(label)].unsqueeze(0)
        z_hat, _ = ref_cross_attention(model.bkp, z, t)
        t_hat, _ = ref_cross_attention(model.bkp, t, z)
        x = torch.cat([z_hat, t_hat])
        for layer in backbone.upper_layers:
            x = ref_transformer_layer(layer, x)
        support.append(x.mean(dim=0))

    prototypes = []
    for label in range(episode.n_way):
        rows = [f for f, l in zip(support, episode.support_labels) if int(l) == label]
        prototypes.append(sum(rows) / len(rows))

    relevant = [p * ref_top_m(ref_mlp(p, model.sad.mlp), model.sad.samples) for p in prototypes]

    logits = torch.zeros(len(episode.query_images), episode.n_way, dtype=dtype)
    for row, image in enumerate(episode.query_images):
        x = ref_tokens(backbone, torch.as_tensor(image, dtype=dtype))
        for layer in backbone.layers:
            x = ref_transformer_layer(layer, x)
        query = x.mean(dim=0)
        for col, proto in enumerate(relevant):
            cosine = (query @ proto) / (torch.sqrt(query @ query) * torch.sqrt(proto @ proto))
            logits[row, col] = cosine / model.config.loss.tau
    return logits
