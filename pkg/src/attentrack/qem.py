"""Query enhancement: current query inputs attend over previous-frame object features."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .attention import CrossAttentionLayer, Module
from .numcore import DimensionError, Tensor


@dataclass
class EnhancedQueries:
    embeddings: Tensor
    newborn_mask: np.ndarray  # True rows are untouched copies of the input


class QueryEnhancer(Module):
    def __init__(self, d: int, rng: np.random.Generator):
        self.attn = CrossAttentionLayer(d, rng, zero_out=True)
        self.d = d

    def __call__(self, curr_qin: Tensor, prev_feats: Tensor, newborn_mask=None) -> EnhancedQueries:
        return enhance_queries(self, curr_qin, prev_feats, newborn_mask)


def enhance_queries(qem: QueryEnhancer, curr_qin: Tensor, prev_feats: Tensor,
                    newborn_mask=None) -> EnhancedQueries:
    """Enhance ``curr_qin`` with ``prev_feats``; rows flagged new-born pass through exactly.

    ``newborn_mask=None`` enhances every row (when there is anything to attend to).
    """
    m = curr_qin.shape[0]
    if curr_qin.data.ndim != 2 or curr_qin.shape[1] != qem.d:
        raise DimensionError(f"QEM width {qem.d}, got current queries {curr_qin.shape}")
    p = prev_feats.shape[0] if prev_feats.data.ndim == 2 else 0
    if p and prev_feats.shape[1] != qem.d:
        raise DimensionError(f"QEM width {qem.d}, got previous features {prev_feats.shape}")
    if newborn_mask is None:
        mask = np.zeros(m, dtype=bool)
    else:
        mask = np.asarray(newborn_mask, dtype=bool).copy()
        if mask.shape != (m,):
            raise DimensionError(f"newborn mask of length {mask.shape} for {m} queries")
    if p == 0 or m == 0 or mask.all():
        return EnhancedQueries(curr_qin, np.ones(m, dtype=bool) if p == 0 else mask)
    enhanced = qem.attn(curr_qin, prev_feats)
    if mask.any():
        enhanced = nc.where_rows(mask, curr_qin, enhanced)
    return EnhancedQueries(enhanced, mask)
