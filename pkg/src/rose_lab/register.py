"""TS-Register: a codebook of domain centers queried by a linear embedding of the raw window.

Pretraining snaps each embedding to its nearest center (straight-through to the
embedding, squared-distance loss to both sides). Downstream use averages the
Top-K nearest centers and rescales the resulting tokens with a rank-1 adapter.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn


class Register(nn.Module):
    def __init__(self, lookback: int, size: int, n_r: int, d_model: int, init_std: float = 0.02):
        super().__init__()
        if size < 1:
            raise ValueError("register size must be >= 1")
        self.n_r = n_r
        self.d_model = d_model
        self.dim = n_r * d_model
        self.embed = nn.Linear(lookback, self.dim)
        self.codebook = nn.Parameter(torch.randn(size, self.dim) * init_std)

    @property
    def size(self) -> int:
        return self.codebook.shape[0]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return embed(x, self)

    def freeze(self):
        for p in self.parameters():
            p.requires_grad_(False)


class LowRankAdapter(nn.Module):
    """A = u v^T, all-ones at initialization."""

    def __init__(self, n_r: int, d_model: int):
        super().__init__()
        self.u = nn.Parameter(torch.ones(n_r))
        self.v = nn.Parameter(torch.ones(d_model))

    def matrix(self) -> torch.Tensor:
        return torch.outer(self.u, self.v)

    def reset(self):
        with torch.no_grad():
            self.u.fill_(1.0)
            self.v.fill_(1.0)


@dataclass
class RegisterSelection:
    indices: torch.Tensor  # (B,) in pretraining, (B, k) downstream
    tokens: torch.Tensor  # (B, N_r, D)
    embedding: torch.Tensor  # x_e, (B, D_r)
    center: torch.Tensor  # selected (or averaged) center, (B, D_r)


class _StraightThrough(torch.autograd.Function):
    @staticmethod
    def forward(ctx, center, x_e):
        return center.clone()

    @staticmethod
    def backward(ctx, grad):
        return None, grad


def embed(x: torch.Tensor, register: Register) -> torch.Tensor:
    if x.shape[-1] != register.embed.in_features:
        raise ValueError(f"expected windows of length {register.embed.in_features}, got {x.shape[-1]}")
    return register.embed(x)


def center_distances(x_e: torch.Tensor, codebook: torch.Tensor) -> torch.Tensor:
    # explicit differences keep exact ties exact
    return ((x_e.unsqueeze(-2) - codebook) ** 2).sum(-1)


def nearest_center(x_e: torch.Tensor, codebook: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Index and value of the closest center; ties go to the lowest index."""
    with torch.no_grad():
        idx = torch.argmin(center_distances(x_e, codebook), dim=-1)
    return idx, codebook[idx]


def topk_indices(x_e: torch.Tensor, codebook: torch.Tensor, k: int) -> torch.Tensor:
    if not 1 <= k <= codebook.shape[0]:
        raise ValueError(f"k must lie in [1, {codebook.shape[0]}], got {k}")
    with torch.no_grad():
        order = torch.sort(center_distances(x_e, codebook), dim=-1, stable=True).indices
    return order[..., :k]


def topk_average(x_e: torch.Tensor, codebook: torch.Tensor, k: int) -> tuple[torch.Tensor, torch.Tensor]:
    idx = topk_indices(x_e, codebook, k)
    return idx, codebook[idx].mean(dim=-2)


def register_loss(x_e: torch.Tensor, center: torch.Tensor) -> torch.Tensor:
    """Squared distance per window, averaged over any batch axis. Gradient reaches both arguments."""
    return ((x_e - center) ** 2).sum(-1).mean()


def straight_through(center: torch.Tensor, x_e: torch.Tensor) -> torch.Tensor:
    """Forward value is ``center``; the incoming gradient goes to ``x_e`` only."""
    return _StraightThrough.apply(center, x_e)


def center_to_tokens(center: torch.Tensor, n_r: int, d_model: int) -> torch.Tensor:
    if center.shape[-1] != n_r * d_model:
        raise ValueError(f"center width {center.shape[-1]} != {n_r} x {d_model}")
    return center.reshape(*center.shape[:-1], n_r, d_model)


def adapt_tokens(tokens: torch.Tensor, adapter: LowRankAdapter) -> torch.Tensor:
    return tokens * adapter.matrix()


def selection_histogram(register: Register, x, k: int, batch_size: int = 1024) -> np.ndarray:
    """How often each center lands in a window's Top-K, over a (N, L) batch of windows."""
    x = torch.as_tensor(np.asarray(x), dtype=register.codebook.dtype)
    counts = np.zeros(register.size, dtype=np.int64)
    with torch.no_grad():
        for lo in range(0, x.shape[0], batch_size):
            idx = topk_indices(embed(x[lo:lo + batch_size], register), register.codebook, k)
            counts += np.bincount(idx.reshape(-1).numpy(), minlength=register.size)
    return counts


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine similarity is undefined for a zero vector")
    return float(np.dot(a, b) / (na * nb))
