"""Brute-force reference checks shared by the unit and acceptance suites."""

import itertools

import numpy as np


def decisions(n, m):
    """Every valid per-track outcome list for ``n`` tracks and ``m`` queries (None = dead)."""
    for k in range(min(n, m) + 1):
        for rows in itertools.combinations(range(n), k):
            for cols in itertools.permutations(range(m), k):
                out = [None] * n
                for i, j in zip(rows, cols):
                    out[i] = j
                yield out


def greedy_violations(s, t2q):
    """Problems with ``t2q`` as a greedy answer on score matrix ``s`` (empty list = valid).

    Checks totality, query exclusivity, and that replaying the assignments from the
    highest score down, each one was the first (row, then column) global maximum of
    what remained at its step.
    """
    s = np.asarray(s, dtype=float)
    n, cols = s.shape
    dead = cols - 1
    problems = []
    if len(t2q) != n:
        return [f"{len(t2q)} outcomes for {n} tracks"]
    claimed = [j for j in t2q if j is not None]
    if len(claimed) != len(set(claimed)):
        problems.append(f"query claimed twice: {t2q}")
    picks = [(i, dead if j is None else j) for i, j in enumerate(t2q)]
    picks.sort(key=lambda p: (-s[p], p[0], p[1]))
    rows_left, cols_left = set(range(n)), set(range(cols))
    for i, j in picks:
        avail = [(r, c) for r in sorted(rows_left) for c in sorted(cols_left)]
        best = max(s[a] for a in avail)
        first = next(a for a in avail if s[a] == best)
        if (i, j) != first:
            problems.append(f"step picked {(i, j)}={s[i, j]} but {first}={best} was available")
            break
        rows_left.discard(i)
        if j != dead:
            cols_left.discard(j)
    return problems


def best_assignment(s):
    """Max-sum assignment with a shared dead column, by enumeration."""
    s = np.asarray(s, dtype=float)
    n, cols = s.shape
    best, arg = -np.inf, None
    for t2q in decisions(n, cols - 1):
        total = sum(s[i, cols - 1 if j is None else j] for i, j in enumerate(t2q))
        if total > best:
            best, arg = total, t2q
    return arg, best


def fusion_violations(cs, cdec, fs, fdec, out):
    """Problems with ``out`` as the fusion of coarse and fine proposals.

    Agreeing tracks must keep the shared outcome. A conflicting track must end with
    its higher-scored proposal unless another track holds that query with at least
    the same claim (an agreed track, or a grant of a score not lower); the same goes
    for the lower proposal before a track may end dead with both proposals taken.
    """
    n = len(fdec)
    dead = fs.shape[1] - 1
    problems = []
    claimed = [j for j in out if j is not None]
    if len(claimed) != len(set(claimed)):
        problems.append(f"query claimed twice: {out}")

    def col(j):
        return dead if j is None else j

    agreed = {i for i in range(n) if cdec[i] == fdec[i]}
    for i in agreed:
        if out[i] != fdec[i]:
            problems.append(f"track {i}: both heads say {fdec[i]} but output {out[i]}")
    for i in range(n):
        if i in agreed:
            continue
        props = sorted([(fs[i, col(fdec[i])], 0, fdec[i]), (cs[i, col(cdec[i])], 1, cdec[i])],
                       key=lambda p: (-p[0], p[1]))
        if out[i] not in (fdec[i], cdec[i], None):
            problems.append(f"track {i}: output {out[i]} is neither proposal nor dead")
            continue
        for score, _, j in props:
            if out[i] == j:
                break
            holder = next((k for k in range(n) if k != i and out[k] == j), None) if j is not None else None
            if holder is None:
                problems.append(f"track {i}: proposal {j} ({score}) was free but not granted")
                break
            if holder not in agreed:
                hs = max(fs[holder, col(j)] if fdec[holder] == j else -np.inf,
                         cs[holder, col(j)] if cdec[holder] == j else -np.inf)
                if hs < score:
                    problems.append(f"track {i}: query {j} went to track {holder} with lower score {hs} < {score}")
                    break
    return problems
