"""Transformer data association between previous-frame tracks and current-frame queries.

Previous-frame features are refreshed by two cross-attention layers (heading first,
then appearance), current-frame query inputs go through a 2-layer MLP with a zero
"dead" row appended, and the two sides are scored with a plain dot product. The score
matrix is N x (M+1); the last column is the dead column.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import numcore as nc
from .attention import CrossAttentionLayer, HeadingEmbedding, Mlp2, Module
from .numcore import ContractViolation, DimensionError, Tensor


class EmptyFrameError(ValueError):
    """Association needs at least one previous-frame object."""


@dataclass
class AssociationMatrix:
    scores: Tensor  # N x (M+1)

    def __post_init__(self):
        if self.scores.data.ndim != 2 or self.scores.shape[1] < 1:
            raise DimensionError(f"association matrix must be N x (M+1), got {self.scores.shape}")

    @property
    def n_tracks(self) -> int:
        return self.scores.shape[0]

    @property
    def n_queries(self) -> int:
        return self.scores.shape[1] - 1

    @property
    def dead_column(self) -> int:
        return self.scores.shape[1] - 1

    def numpy(self) -> np.ndarray:
        return self.scores.data


@dataclass
class AssociationDecision:
    """Per-track outcome (query index or ``None`` for dead) and its inverse.

    ``query_to_track[j] is None`` means query ``j`` is new-born.
    """

    track_to_query: list[Optional[int]]
    query_to_track: list[Optional[int]]
    scores: list[float]  # raw score of each track's chosen column (dead column for dead tracks)

    @classmethod
    def from_tracks(cls, track_to_query, n_queries: int, scores) -> AssociationDecision:
        q2t: list[Optional[int]] = [None] * n_queries
        for i, j in enumerate(track_to_query):
            if j is None:
                continue
            if q2t[j] is not None:
                raise ContractViolation(f"query {j} claimed by tracks {q2t[j]} and {i}")
            q2t[j] = i
        return cls(list(track_to_query), q2t, list(scores))

    @property
    def n_tracks(self) -> int:
        return len(self.track_to_query)

    @property
    def n_queries(self) -> int:
        return len(self.query_to_track)

    def is_dead(self, track: int) -> bool:
        return self.track_to_query[track] is None

    def newborn(self) -> list[int]:
        return [j for j, t in enumerate(self.query_to_track) if t is None]

    def column(self, track: int) -> int:
        """Score-matrix column of a track's outcome (dead maps to the last column)."""
        j = self.track_to_query[track]
        return self.n_queries if j is None else j

    def check(self) -> None:
        seen: dict[int, int] = {}
        for i, j in enumerate(self.track_to_query):
            if j is None:
                continue
            if not 0 <= j < self.n_queries:
                raise ContractViolation(f"track {i} matched to out-of-range query {j}")
            if j in seen:
                raise ContractViolation(f"query {j} matched to tracks {seen[j]} and {i}")
            seen[j] = i
            if self.query_to_track[j] != i:
                raise ContractViolation(f"query_to_track[{j}] != {i}")
        for j, i in enumerate(self.query_to_track):
            if i is not None and self.track_to_query[i] != j:
                raise ContractViolation(f"track_to_query[{i}] != {j}")


class DAModule(Module):
    """One association head: H-cross, Q-cross and the target MLP."""

    def __init__(self, d: int, hidden: int, rng: np.random.Generator):
        self.heading = HeadingEmbedding(d, rng)
        self.h_cross = CrossAttentionLayer(d, rng)
        self.q_cross = CrossAttentionLayer(d, rng)
        self.target_mlp = Mlp2(d, hidden, d, rng)
        self.d = d

    def update_query_features(self, prev_qfeat: Tensor, prev_qin: Tensor, headings) -> Tensor:
        """H-cross over heading embeddings, then Q-cross over ``prev_qin``.

        ``prev_qin`` may carry extra rows (the fine head passes Q-in and Q-feat stacked).
        """
        n = prev_qfeat.shape[0] if prev_qfeat.data.ndim == 2 else 0
        if n == 0:
            raise EmptyFrameError("no previous-frame objects; skip association")
        headings = np.atleast_1d(np.asarray(headings, dtype=np.float64))
        if headings.shape != (n,):
            raise DimensionError(f"{n} previous features but {headings.shape[0]} headings")
        x = self.h_cross(prev_qfeat, self.heading(headings))
        return self.q_cross(x, prev_qin)

    def refine_targets(self, curr_qin: Tensor) -> Tensor:
        """Target MLP over the current queries with the zero dead query appended first."""
        dead = Tensor(np.zeros((1, self.d)))
        if curr_qin.data.ndim == 2 and curr_qin.shape[0] > 0:
            rows = nc.concat_rows([curr_qin, dead])
        else:
            rows = dead
        return self.target_mlp(rows)

    def __call__(self, prev_qfeat, prev_qin, headings, curr_qin) -> AssociationMatrix:
        return associate(self.update_query_features(prev_qfeat, prev_qin, headings),
                         self.refine_targets(curr_qin))


def associate(updated: Tensor, targets: Tensor) -> AssociationMatrix:
    """Raw dot-product scores; softmax only ever appears inside the loss."""
    if updated.data.ndim != 2 or targets.data.ndim != 2 or updated.shape[1] != targets.shape[1]:
        raise DimensionError(f"associate: widths differ, {updated.shape} vs {targets.shape}")
    return AssociationMatrix(nc.matmul(updated, nc.transpose(targets)))


def raw_association(prev_feat: Tensor, curr_feat: Tensor) -> AssociationMatrix:
    """Association without the transformer: features dotted directly, dead score fixed at 0."""
    d = prev_feat.shape[1]
    rows = nc.concat_rows([curr_feat, Tensor(np.zeros((1, d)))]) if curr_feat.shape[0] else Tensor(np.zeros((1, d)))
    return associate(prev_feat, rows)


def association_loss(matrix: AssociationMatrix, gt) -> Tensor:
    """Mean row-wise cross-entropy against the target column of each track."""
    gt = np.asarray(gt, dtype=np.int64)
    if gt.shape != (matrix.n_tracks,):
        raise DimensionError(f"{matrix.n_tracks} rows but {gt.shape} labels")
    return nc.cross_entropy(matrix.scores, gt)


def greedy_match(matrix: AssociationMatrix | np.ndarray) -> AssociationDecision:
    """Repeatedly take the largest remaining score.

    The chosen track's row is retired; the chosen column is retired too unless it is
    the dead column, which any number of tracks may share. Ties go to the lower row,
    then the lower column.
    """
    s = np.array(matrix.numpy() if isinstance(matrix, AssociationMatrix) else matrix, dtype=np.float64)
    if s.ndim != 2 or s.shape[1] < 1:
        raise DimensionError(f"greedy_match needs an N x (M+1) matrix, got {s.shape}")
    n, cols = s.shape
    m = cols - 1
    t2q: list[Optional[int]] = [None] * n
    chosen = [0.0] * n
    work = s.copy()
    for _ in range(n):
        flat = int(np.argmax(work))
        i, j = divmod(flat, cols)
        chosen[i] = float(s[i, j])
        t2q[i] = None if j == m else j
        work[i, :] = -np.inf
        if j != m:
            work[:, j] = -np.inf
    return AssociationDecision.from_tracks(t2q, m, chosen)


def fuse_dual_da(coarse: tuple[AssociationMatrix, AssociationDecision],
                 fine: tuple[AssociationMatrix, AssociationDecision]) -> AssociationDecision:
    """Combine the coarse and fine heads' decisions.

    Tracks where both heads agree keep the (fine) outcome. For the rest each head's
    proposal is a candidate weighted by its own raw score; candidates are granted in
    descending score order over the queries still free, so the higher-scored proposal
    wins unless its query is already taken. Tracks left without a grant are dead.
    """
    (cm, cd), (fm, fd) = coarse, fine
    if (cd.n_tracks, cd.n_queries) != (fd.n_tracks, fd.n_queries) or \
            (cm.n_tracks, cm.n_queries) != (fm.n_tracks, fm.n_queries) or \
            (cm.n_tracks, cm.n_queries) != (cd.n_tracks, cd.n_queries):
        raise ContractViolation(
            f"dual DA shapes differ: coarse {cm.n_tracks}x{cm.n_queries}, fine {fm.n_tracks}x{fm.n_queries}")
    cs, fs = cm.numpy(), fm.numpy()
    n, m = fd.n_tracks, fd.n_queries
    t2q: list[Optional[int]] = [None] * n
    scores = [0.0] * n
    done = [False] * n
    taken: set[int] = set()
    for i in range(n):
        if cd.track_to_query[i] == fd.track_to_query[i]:
            j = fd.track_to_query[i]
            t2q[i], scores[i], done[i] = j, float(fs[i, fd.column(i)]), True
            if j is not None:
                taken.add(j)
    candidates = []
    for i in range(n):
        if done[i]:
            continue
        candidates.append((-float(fs[i, fd.column(i)]), i, 0, fd.track_to_query[i]))
        candidates.append((-float(cs[i, cd.column(i)]), i, 1, cd.track_to_query[i]))
    # ties: fine proposal (0) before coarse (1)
    candidates.sort(key=lambda c: (c[0], c[1], c[2]))
    for neg, i, _, j in candidates:
        if done[i] or (j is not None and j in taken):
            continue
        t2q[i], scores[i], done[i] = j, -neg, True
        if j is not None:
            taken.add(j)
    for i in range(n):
        if not done[i]:
            scores[i] = float(fs[i, m])
    return AssociationDecision.from_tracks(t2q, m, scores)
