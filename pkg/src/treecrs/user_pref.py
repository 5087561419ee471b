"""User preference modeling from dialogue tokens and mentioned entities.

The two views (contextual token vectors, graph entity vectors) are projected
to a shared width, mixed through a learned cross-attention matrix, and
collapsed to one user vector by an attention-sum aggregator.  Scores over the
item catalog come from a softmax against projected item embeddings.
"""

from __future__ import annotations

import torch
from torch import nn

CLIP_EPS = 1e-12


class CrossInteraction(nn.Module):
    """Bidirectional mixing of token and entity representations.

    Produces ``C_mix = C' + norm(A) E'`` and ``E_mix = E' + norm(A)^T C'``
    where ``A = C' W E'^T`` and ``norm`` is a row-wise softmax (identity when
    ``normalize`` is off).  With no entities the token side passes through
    unchanged and the entity side is an empty ``(0, d)`` matrix.
    """

    def __init__(self, d_text: int, d_ent: int, d: int):
        super().__init__()
        self.d = d
        self.project_tokens = nn.Linear(d_text, d, bias=False)
        self.project_entities = nn.Linear(d_ent, d, bias=False)
        self.interaction = nn.Parameter(torch.randn(d, d, dtype=torch.float64) * d**-0.5)
        self.double()

    def forward(
        self, tokens: torch.Tensor, entities: torch.Tensor, normalize: bool = True
    ) -> tuple[torch.Tensor, torch.Tensor]:
        if tokens.ndim != 2 or tokens.shape[0] == 0:
            raise ValueError("tokens must be a non-empty (n_C, d_text) matrix")
        if entities.ndim != 2:
            raise ValueError("entities must be a (n_E, d_ent) matrix")
        c = self.project_tokens(tokens)
        e = self.project_entities(entities)
        if e.shape[0] == 0:
            return c, e
        affinity = c @ self.interaction @ e.T
        if normalize:
            token_to_entity = torch.softmax(affinity, dim=1)
            entity_to_token = torch.softmax(affinity.T, dim=1)
        else:
            token_to_entity = affinity
            entity_to_token = affinity.T
        return c + token_to_entity @ e, e + entity_to_token @ c


class AttentionSum(nn.Module):
    """Self-attention aggregation of a sequence into one vector.

    Every position attends over the whole sequence and the attended values
    are summed across positions::

        ASum(X) = sum_i sum_j softmax_j(x_i W_Q (x_j W_K)^T / sqrt(d)) x_j W_V
    """

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.query = nn.Linear(dim, dim, bias=False)
        self.key = nn.Linear(dim, dim, bias=False)
        self.value = nn.Linear(dim, dim, bias=False)
        self.double()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 2 or x.shape[0] == 0:
            raise ValueError("AttentionSum needs a non-empty (n, d) matrix")
        if x.shape[1] != self.dim:
            raise ValueError(f"expected width {self.dim}, got {x.shape[1]}")
        scores = self.query(x) @ self.key(x).T / self.dim**0.5
        weights = torch.softmax(scores, dim=1)
        return (weights @ self.value(x)).sum(dim=0)


class ItemScorer(nn.Module):
    """Softmax distribution of a user vector over projected item embeddings."""

    def __init__(self, d_ent: int, d: int):
        super().__init__()
        self.project_items = nn.Linear(d_ent, d, bias=False)
        self.double()

    def forward(self, user: torch.Tensor, item_embeddings: torch.Tensor) -> torch.Tensor:
        if item_embeddings.ndim != 2 or item_embeddings.shape[0] < 2:
            raise ValueError("scoring needs at least 2 item embeddings")
        if user.ndim != 1:
            raise ValueError("user must be a 1-d vector")
        logits = self.project_items(item_embeddings) @ user
        return torch.softmax(logits, dim=0)


def user_loss(scores: torch.Tensor, labels: torch.Tensor, reduction: str = "sum") -> torch.Tensor:
    """Multi-label binary cross-entropy over softmax-normalized score rows.

    Scores are clipped to ``[CLIP_EPS, 1 - CLIP_EPS]`` before the logs so a
    saturated softmax cannot produce infinities.
    """
    if scores.shape != labels.shape or scores.ndim != 2:
        raise ValueError("scores and labels must be matching (batch, n_items) matrices")
    if reduction not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {reduction!r}")
    clipped = scores.clamp(CLIP_EPS, 1.0 - CLIP_EPS)
    per_cell = labels * torch.log(clipped) + (1.0 - labels) * torch.log(1.0 - clipped)
    total = -per_cell.sum()
    if reduction == "mean":
        return total / scores.shape[0]
    return total
