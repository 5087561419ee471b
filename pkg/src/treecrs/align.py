"""Contrastive alignment between graph-side and tree-side aggregates.

Conversations whose mentioned-entity sequences match form positive pairs; the
loss pulls their entity aggregate and tree aggregate together against the
rest of the batch.
"""

from __future__ import annotations

import warnings

import torch
from torch import nn

from treecrs.user_pref import AttentionSum

DENOM_EPS = 1e-12


class EntityAggregate(nn.Module):
    """Attention-sum over retrieved entity rows, projected to the fusion width.

    Has its own attention parameters (not shared with the user aggregator).
    With no mentioned entities the learned null vector stands in.
    """

    def __init__(self, d_ent: int, d: int):
        super().__init__()
        self.asum = AttentionSum(d_ent)
        self.project = nn.Linear(d_ent, d, bias=False)
        self.null_entity = nn.Parameter(torch.zeros(d, dtype=torch.float64))
        self.double()

    def forward(self, entity_rows: torch.Tensor) -> torch.Tensor:
        if entity_rows.ndim != 2:
            raise ValueError("entity_rows must be a (n_E, d_ent) matrix")
        if entity_rows.shape[0] == 0:
            return self.null_entity
        return self.project(self.asum(entity_rows))


def contrast_mask(entity_seqs: list[tuple], order_sensitive: bool = True) -> torch.Tensor:
    """Binary ``(b, b)`` mask: 1 where two conversations mention the same entities.

    Equality is over the ordered mention sequences by default; set
    ``order_sensitive=False`` to compare as sets instead.
    """
    keys: list[object] = []
    for seq in entity_seqs:
        keys.append(tuple(seq) if order_sensitive else frozenset(seq))
    b = len(keys)
    mask = torch.zeros((b, b), dtype=torch.float64)
    for i in range(b):
        for j in range(b):
            if keys[i] == keys[j]:
                mask[i, j] = 1.0
    return mask


def align_loss(
    entity_agg: torch.Tensor,
    tree_agg: torch.Tensor,
    mask: torch.Tensor,
    tau: float = 0.07,
    normalize: bool = True,
    literal_denominator: bool = False,
) -> torch.Tensor:
    """InfoNCE over positive pairs, summed.

    Each positive pair ``(i, j)`` contributes ``-log softmax_j(s_i / tau)``
    where ``s_ik`` is the (optionally L2-normalized) dot product between
    entity aggregate ``i`` and tree aggregate ``k``.  ``literal_denominator``
    restricts the denominator to negative pairs only (with an epsilon guard),
    which is not a proper log-softmax and is off by default.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if entity_agg.shape != tree_agg.shape or entity_agg.ndim != 2:
        raise ValueError("entity and tree aggregates must be matching (b, d) matrices")
    b = entity_agg.shape[0]
    if mask.shape != (b, b):
        raise ValueError(f"mask must be ({b}, {b})")
    if float(mask.sum()) == 0.0:
        warnings.warn("no positive pairs in contrastive batch; alignment loss is 0", stacklevel=2)
        return entity_agg.new_zeros(())

    e = entity_agg
    t = tree_agg
    if normalize:
        e = e / torch.linalg.norm(e, dim=1, keepdim=True).clamp_min(DENOM_EPS)
        t = t / torch.linalg.norm(t, dim=1, keepdim=True).clamp_min(DENOM_EPS)
    logits = (e @ t.T) / tau
    exp = torch.exp(logits)
    if literal_denominator:
        denom = ((1.0 - mask) * exp).sum(dim=1, keepdim=True) + DENOM_EPS
    else:
        denom = exp.sum(dim=1, keepdim=True)
    log_prob = logits - torch.log(denom)
    return -(mask * log_prob).sum()
