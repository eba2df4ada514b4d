"""ID embeddings, attention fusion, prediction heads and losses."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


class IdEmbeddings(nn.Module):
    """Trainable user and item tables; rows follow the sorted entity ids."""

    def __init__(self, users: Sequence[str], items: Sequence[str], d: int, seed: int = 0,
                 dtype: torch.dtype = torch.float32):
        super().__init__()
        self.user_ids = list(users)
        self.item_ids = list(items)
        self.user_index = {u: i for i, u in enumerate(self.user_ids)}
        self.item_index = {v: i for i, v in enumerate(self.item_ids)}
        g = torch.Generator().manual_seed(seed)
        self.user = nn.Parameter((torch.randn(len(users), d, generator=g, dtype=torch.float64) * 0.1).to(dtype))
        self.item = nn.Parameter((torch.randn(len(items), d, generator=g, dtype=torch.float64) * 0.1).to(dtype))

    def rows(self, users: Sequence[str], items: Sequence[str]) -> tuple[torch.Tensor, torch.Tensor]:
        try:
            u = [self.user_index[x] for x in users]
        except KeyError as e:
            raise KeyError(f"user {e.args[0]!r} is not in the ID table") from None
        try:
            i = [self.item_index[x] for x in items]
        except KeyError as e:
            raise KeyError(f"item {e.args[0]!r} is not in the ID table") from None
        return torch.tensor(u, dtype=torch.long), torch.tensor(i, dtype=torch.long)


class PredictHead(nn.Module):
    """``Linear(in, d) -> GELU -> dropout -> Linear(d, 1)``; output is not clamped."""

    def __init__(self, in_features: int, hidden: int, dropout: float = 0.0, seed: int = 0,
                 dtype: torch.dtype = torch.float32):
        super().__init__()
        self.in_features = in_features
        self.dropout = dropout
        g = torch.Generator().manual_seed(seed)
        self.hidden = nn.Linear(in_features, hidden, dtype=dtype)
        self.out = nn.Linear(hidden, 1, dtype=dtype)
        with torch.no_grad():
            for lin in (self.hidden, self.out):
                bound = 1.0 / math.sqrt(lin.in_features)
                lin.weight.copy_(torch.empty_like(lin.weight, dtype=torch.float64).uniform_(-bound, bound, generator=g))
                lin.bias.zero_()

    def forward(self, x: torch.Tensor, generator: torch.Generator | None = None) -> torch.Tensor:
        if x.shape[-1] != self.in_features:
            raise ValueError(f"head expects width {self.in_features}, got {x.shape[-1]}")
        h = F.gelu(self.hidden(x))
        if self.training and self.dropout > 0:
            keep = torch.rand(h.shape, generator=generator, dtype=h.dtype) >= self.dropout
            h = h * keep / (1.0 - self.dropout)
        return self.out(h).squeeze(-1)


def predict(features: torch.Tensor, head: PredictHead) -> torch.Tensor:
    return head(features)


class Fusion(nn.Module):
    """Attention of an ID embedding over k content embeddings.

    Without projections this is parameter-free: ``softmax(q.c_j / sqrt(d))``
    weights, plus the query itself when ``residual`` is set.
    """

    def __init__(self, d: int, residual: bool = True, projections: bool = False, seed: int = 0,
                 dtype: torch.dtype = torch.float32):
        super().__init__()
        self.d = d
        self.residual = residual
        self.projections = projections
        if projections:
            g = torch.Generator().manual_seed(seed)
            eye = torch.eye(d, dtype=torch.float64)
            noise = lambda: torch.randn(d, d, generator=g, dtype=torch.float64) * 0.02  # noqa: E731
            self.wq = nn.Parameter((eye + noise()).to(dtype))
            self.wk = nn.Parameter((eye + noise()).to(dtype))
            self.wv = nn.Parameter((eye + noise()).to(dtype))

    def forward(self, query: torch.Tensor, contents: torch.Tensor) -> torch.Tensor:
        q, k, v = query, contents, contents
        if self.projections:
            q, k, v = query @ self.wq.T, contents @ self.wk.T, contents @ self.wv.T
        return fuse(q, k, residual=self.residual, values=v, query_residual=query)


def fuse(query: torch.Tensor, contents: torch.Tensor, residual: bool = True,
         values: torch.Tensor | None = None, query_residual: torch.Tensor | None = None) -> torch.Tensor:
    """Fuse ``(..., d)`` queries with ``(..., k, d)`` contents."""
    if contents.shape[-2] == 0:
        raise ValueError("fuse needs at least one content embedding")
    if contents.shape[-1] != query.shape[-1]:
        raise ValueError("query and contents must share width")
    values = contents if values is None else values
    d = query.shape[-1]
    scores = (contents @ query.unsqueeze(-1)).squeeze(-1) / math.sqrt(d)
    weights = torch.softmax(scores, dim=-1)
    out = (weights.unsqueeze(-1) * values).sum(dim=-2)
    if residual:
        out = out + (query if query_residual is None else query_residual)
    return out


def mse_loss(predictions, targets) -> torch.Tensor:
    predictions = torch.as_tensor(predictions)
    targets = torch.as_tensor(targets, dtype=predictions.dtype)
    if predictions.numel() == 0 or predictions.shape != targets.shape:
        raise ValueError("mse_loss needs equal, non-zero lengths")
    return ((predictions - targets) ** 2).mean()


def sq_dist(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return ((a - b) ** 2).sum(dim=-1)


def triplet_loss(anchor_v_i, p_u_pos, p_u_neg, anchor_v_u, p_i_pos, p_i_neg, margin: float = 1.0) -> torch.Tensor:
    """Two hinge terms with squared Euclidean distance, averaged over the batch."""
    if margin <= 0:
        raise ValueError("margin must be positive")
    item_side = F.relu(margin + sq_dist(anchor_v_i, p_u_pos) - sq_dist(anchor_v_i, p_u_neg))
    user_side = F.relu(margin + sq_dist(anchor_v_u, p_i_pos) - sq_dist(anchor_v_u, p_i_neg))
    return (item_side + user_side).mean()


def total_loss(l_rec, l_cl, lam: float):
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    return l_rec + lam * l_cl


def sample_negatives(entity_rows: Sequence[int], table_size: int, rng: np.random.Generator) -> list[int]:
    """For each position pick the row of another in-batch interaction with a different entity.

    Falls back to a uniformly drawn table row when the whole batch shares one entity.
    """
    rows = list(entity_rows)
    out = []
    for j, row in enumerate(rows):
        candidates = [r for m, r in enumerate(rows) if m != j and r != row]
        if candidates:
            out.append(int(candidates[rng.integers(len(candidates))]))
        elif table_size > 1:
            pick = int(rng.integers(table_size - 1))
            out.append(pick if pick < row else pick + 1)
        else:
            out.append(row)
    return out
