"""Intra- and inter-coupling contrastive graphs over latent vectors.

Functions accept a single sample (latents of shape ``(C,)`` / ``(K, C)``) or a
batch (``(B, C)`` / ``(B, K, C)``); leading batch dimensions broadcast.
Everything is differentiable with torch autograd.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import ParameterError

NORM_EPS = 1e-12
NODE_MODES = ("self", "cross")


@dataclass
class IntraGraph:
    anchor_node: torch.Tensor  # (..., C, C)
    aug_nodes: torch.Tensor  # (..., K, C, C)
    edges: torch.Tensor  # (..., K)

    @property
    def nodes(self):
        """Anchor node followed by the K augmented nodes, ``(..., K+1, C, C)``."""
        return torch.cat([self.anchor_node.unsqueeze(-3), self.aug_nodes], dim=-3)


@dataclass
class InterGraph:
    nodes: torch.Tensor  # (..., K, C)
    edges: torch.Tensor  # (..., K, K)


def cosine_similarity(a, b):
    """Cosine of the angle between ``a`` and ``b`` along the last axis.

    Matrices must be flattened by the caller.  Pairs where either norm is below
    1e-12 get similarity 0 (and zero gradient) instead of a division error.
    """
    a = torch.as_tensor(a)
    b = torch.as_tensor(b)
    if a.shape[-1] != b.shape[-1]:
        raise ParameterError(f"width mismatch {a.shape[-1]} vs {b.shape[-1]}")
    na = torch.linalg.vector_norm(a, dim=-1)
    nb = torch.linalg.vector_norm(b, dim=-1)
    ok = (na >= NORM_EPS) & (nb >= NORM_EPS)
    denom = torch.where(ok, na * nb, torch.ones_like(na))
    cos = (a * b).sum(-1) / denom
    return torch.where(ok, cos.clamp(-1.0, 1.0), torch.zeros_like(cos))


def outer_node(latent, other=None):
    """``latent^T latent`` as a ``C x C`` node; with ``other``, ``latent^T other``."""
    latent = torch.as_tensor(latent)
    other = latent if other is None else torch.as_tensor(other)
    return latent.unsqueeze(-1) * other.unsqueeze(-2)


def build_intra_graph(anchor_latent, aug_latents, node_mode="self") -> IntraGraph:
    anchor_latent = torch.as_tensor(anchor_latent)
    aug_latents = torch.as_tensor(aug_latents)
    if aug_latents.ndim < 2 or aug_latents.shape[-2] < 1:
        raise ParameterError("need at least one augmented latent")
    if anchor_latent.shape[-1] != aug_latents.shape[-1]:
        raise ParameterError(f"latent width mismatch: anchor {anchor_latent.shape[-1]}, augmented {aug_latents.shape[-1]}")
    if node_mode not in NODE_MODES:
        raise ParameterError(f"node_mode must be one of {NODE_MODES}")
    anchor_node = outer_node(anchor_latent)
    if node_mode == "self":
        aug_nodes = outer_node(aug_latents)
    else:
        aug_nodes = outer_node(anchor_latent.unsqueeze(-2), aug_latents)
    flat_anchor = anchor_node.flatten(-2).unsqueeze(-2)
    edges = cosine_similarity(flat_anchor, aug_nodes.flatten(-2))
    return IntraGraph(anchor_node, aug_nodes, edges)


def build_inter_graph(aug_latents) -> InterGraph:
    aug_latents = torch.as_tensor(aug_latents)
    if aug_latents.ndim < 2 or aug_latents.shape[-2] < 2:
        raise ParameterError("inter graph needs K >= 2 augmented latents")
    edges = cosine_similarity(aug_latents.unsqueeze(-2), aug_latents.unsqueeze(-3))
    return InterGraph(aug_latents, edges)
