"""Search over injective matchings and the non-learned matchers.

A matching is an integer array ``m`` with ``m[i]`` the source index of
target part ``i``. Beam search visits targets in ``target_order`` and
holds partial matchings as prefixes of source indices in that order.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

MAX_BRUTE_FORCE = 8


class PrefixScorer(Protocol):
    def extend(self, assign: np.ndarray, targets: Sequence[int], t_new: int) -> np.ndarray:
        """Score increments (nb, n_source) for appending target ``t_new``."""


@dataclass(frozen=True)
class PartialMatching:
    assignment: tuple[int, ...]
    score: float

    @property
    def used(self) -> frozenset[int]:
        return frozenset(self.assignment)


@dataclass
class BeamResult:
    matching: np.ndarray
    score: float
    target_order: np.ndarray
    trace: list[list[PartialMatching]] = field(default_factory=list)


def prune(assign: np.ndarray, scores: np.ndarray, capacity: int) -> np.ndarray:
    """Indices of the ``capacity`` best rows: score descending, then the
    lexicographically smallest prefix."""
    keys = tuple(assign[:, c] for c in range(assign.shape[1] - 1, -1, -1)) + (-scores,)
    return np.lexsort(keys)[:capacity]


def expand(scorer: PrefixScorer, assign: np.ndarray, scores: np.ndarray, targets: Sequence[int],
           t_new: int, n_source: int) -> tuple[np.ndarray, np.ndarray]:
    """All injective one-target extensions of the rows of ``assign``."""
    nb, depth = assign.shape
    gain = scorer.extend(assign, targets, t_new)
    free = np.ones((nb, n_source), dtype=bool)
    if depth:
        np.put_along_axis(free, assign, False, axis=1)
    rows, srcs = np.nonzero(free)
    new_assign = np.concatenate([assign[rows], srcs[:, None]], axis=1)
    return new_assign, scores[rows] + gain[rows, srcs]


def resolve_order(n_target: int, target_order=None, rng=None) -> np.ndarray:
    if target_order is None or (isinstance(target_order, str) and target_order == "fixed"):
        return np.arange(n_target)
    if isinstance(target_order, str):
        if target_order != "shuffle":
            raise ValueError(f"target_order must be 'shuffle', 'fixed' or a permutation, got {target_order!r}")
        return np.random.default_rng(rng).permutation(n_target)
    order = np.asarray(target_order, dtype=np.intp)
    if sorted(order.tolist()) != list(range(n_target)):
        raise ValueError(f"target_order is not a permutation of range({n_target})")
    return order


def beam_search(scorer: PrefixScorer, n_source: int, n_target: int, beam_size: int = 100,
                target_order=None, keep_trace: bool = False) -> BeamResult:
    """Approximate argmax over injective matchings, one target per step."""
    if n_target > n_source:
        raise ValueError(f"cannot match {n_target} targets injectively into {n_source} sources")
    if beam_size < 1:
        raise ValueError("beam size must be >= 1")
    order = resolve_order(n_target, target_order)
    assign = np.zeros((1, 0), dtype=np.intp)
    scores = np.zeros(1)
    trace = []
    for depth, t in enumerate(order):
        cand, cand_scores = expand(scorer, assign, scores, order[:depth], int(t), n_source)
        keep = prune(cand, cand_scores, beam_size)
        assign, scores = cand[keep], cand_scores[keep]
        if keep_trace:
            trace.append([PartialMatching(tuple(int(x) for x in a), float(s)) for a, s in zip(assign, scores)])
    matching = np.empty(n_target, dtype=np.intp)
    matching[order] = assign[0]
    return BeamResult(matching, float(scores[0]), order, trace)


def score_assignments(scorer: PrefixScorer, assign: np.ndarray, order: Sequence[int]) -> np.ndarray:
    """Total scores of full prefixes ``assign`` (rows, in ``order``)."""
    scores = np.zeros(assign.shape[0])
    rows = np.arange(assign.shape[0])
    for depth, t in enumerate(order):
        gain = scorer.extend(assign[:, :depth], order[:depth], int(t))
        scores += gain[rows, assign[:, depth]]
    return scores


def brute_force_best(scorer: PrefixScorer, n_source: int, n_target: int | None = None) -> tuple[np.ndarray, float]:
    """Exact argmax by enumeration; first (lexicographic) maximum wins."""
    n_target = n_source if n_target is None else n_target
    if n_source > MAX_BRUTE_FORCE:
        raise ValueError(f"brute force limited to {MAX_BRUTE_FORCE} parts, got {n_source}")
    if n_target > n_source:
        raise ValueError("more targets than sources")
    perms = np.array(list(itertools.permutations(range(n_source), n_target)), dtype=np.intp)
    scores = score_assignments(scorer, perms, list(range(n_target)))
    best = int(np.argmax(scores))
    return perms[best], float(scores[best])


def hungarian(weights) -> np.ndarray:
    """Maximum-weight assignment of every row to a distinct column.

    ``weights`` is (n_rows, n_cols) with n_rows <= n_cols; wider matrices
    leave columns unused (equivalent to padding with rows of -inf).
    Returns the column chosen for each row.
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 2:
        raise ValueError(f"expected a 2-D weight matrix, got shape {w.shape}")
    n, m = w.shape
    if n > m:
        raise ValueError(f"more rows ({n}) than columns ({m}); transpose the problem")
    if not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite")
    cost = (-w).tolist()
    inf = math.inf
    u = [0.0] * (n + 1)
    v = [0.0] * (m + 1)
    p = [0] * (m + 1)  # p[j]: row matched to column j (1-based, 0 = free)
    way = [0] * (m + 1)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = [inf] * (m + 1)
        used = [False] * (m + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta, j1 = inf, 0
            row = cost[i0 - 1]
            ui0 = u[i0]
            for j in range(1, m + 1):
                if not used[j]:
                    cur = row[j - 1] - ui0 - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta, j1 = minv[j], j
            for j in range(m + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    out = np.full(n, -1, dtype=np.intp)
    for j in range(1, m + 1):
        if p[j]:
            out[p[j] - 1] = j - 1
    return out


def match_hungarian(local) -> np.ndarray:
    """Matching (target -> source) maximizing the sum of ``local[source, target]``."""
    return hungarian(np.asarray(local).T)


def matching_weight(local, matching) -> float:
    local = np.asarray(local)
    return float(sum(local[s, t] for t, s in enumerate(matching)))


# --- baselines ------------------------------------------------------------------------

def random_matching(n_source: int, n_target: int, rng) -> np.ndarray:
    return np.random.default_rng(rng).permutation(n_source)[:n_target]


def argmax_assignment(scores) -> np.ndarray:
    """Independent best source per target (columns of a (Ks, Kt) matrix);
    ties go to the lowest source index."""
    return np.argmax(np.asarray(scores), axis=0).astype(np.intp)


def nn_rgb_baseline(src_patches, tgt_patches, one_to_one: bool = False) -> np.ndarray:
    """Nearest raw patch by Euclidean distance for every target part."""
    a = np.asarray(src_patches, dtype=np.float64).reshape(len(src_patches), -1)
    b = np.asarray(tgt_patches, dtype=np.float64).reshape(len(tgt_patches), -1)
    dist = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))
    return match_hungarian(-dist) if one_to_one else argmax_assignment(-dist)


def cosine_matrix(a, b) -> np.ndarray:
    """Cosine similarities; any pair involving a zero vector scores 0."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    denom = np.outer(na, nb)
    dots = a @ b.T
    return np.divide(dots, denom, out=np.zeros_like(dots), where=denom > 0)


def amn_nn_baseline(src_emb, tgt_emb, one_to_one: bool = False) -> np.ndarray:
    sims = cosine_matrix(src_emb, tgt_emb)
    return match_hungarian(sims) if one_to_one else argmax_assignment(sims)


def affine_residual(src_pts, tgt_pts) -> float:
    """Squared error of the least-squares affine map src -> tgt (0 for < 3 points)."""
    src_pts = np.asarray(src_pts, dtype=np.float64)
    tgt_pts = np.asarray(tgt_pts, dtype=np.float64)
    if len(src_pts) < 3:
        return 0.0
    x = np.hstack([src_pts, np.ones((len(src_pts), 1))])
    coef, *_ = np.linalg.lstsq(x, tgt_pts, rcond=None)
    r = x @ coef - tgt_pts
    return float((r * r).sum())


class AffineScorer:
    """Prefix score = -(residual of the best affine fit of matched target
    locations from their source locations); prefixes shorter than 3 score 0."""

    def __init__(self, src_locs, tgt_locs):
        self.src = np.asarray(src_locs, dtype=np.float64)
        self.tgt = np.asarray(tgt_locs, dtype=np.float64)

    def _residuals(self, src_idx: np.ndarray, tgt_idx: Sequence[int]) -> np.ndarray:
        n = src_idx.shape[-1]
        if n < 3:
            return np.zeros(src_idx.shape[:-1])
        x = self.src[src_idx]
        x = np.concatenate([x, np.ones(x.shape[:-1] + (1,))], axis=-1)
        y = self.tgt[np.asarray(tgt_idx)]
        # least-norm solution, so collinear prefixes are fitted rather than rejected
        coef = np.linalg.pinv(x) @ y
        r = x @ coef - y
        return (r * r).sum(axis=(-2, -1))

    def extend(self, assign: np.ndarray, targets: Sequence[int], t_new: int) -> np.ndarray:
        nb, depth = assign.shape
        ks = self.src.shape[0]
        parent = self._residuals(assign, list(targets))
        ext = np.concatenate([np.repeat(assign[:, None, :], ks, axis=1),
                              np.broadcast_to(np.arange(ks)[None, :, None], (nb, ks, 1))], axis=2)
        child = self._residuals(ext, list(targets) + [t_new])
        return -(child - parent[:, None])


def affine_baseline(src_locs, tgt_locs, beam_size: int = 100, target_order=None) -> np.ndarray:
    scorer = AffineScorer(src_locs, tgt_locs)
    return beam_search(scorer, len(scorer.src), len(scorer.tgt), beam_size, target_order).matching


# --- locally normalized sequential decoding -------------------------------------------

def sequential_conditionals(scores, target_order, assignment) -> list[np.ndarray]:
    """Per-step distributions P(m(i) = j | earlier choices) of a locally
    normalized decoder that softmaxes ``scores[:, i]`` over still-unused
    sources. Entry t is a full-length vector with zeros on used sources."""
    scores = np.asarray(scores, dtype=np.float64)
    used = np.zeros(scores.shape[0], dtype=bool)
    dists = []
    for t, s in zip(target_order, assignment):
        col = scores[:, t]
        free = np.flatnonzero(~used)
        z = np.exp(col[free] - col[free].max())
        p = np.zeros_like(col)
        p[free] = z / z.sum()
        dists.append(p)
        used[s] = True
    return dists


def greedy_local_decode(scores, target_order=None) -> tuple[np.ndarray, list[float]]:
    """Greedy constrained decoding; returns the matching and the probability
    of each chosen source."""
    scores = np.asarray(scores, dtype=np.float64)
    ks, kt = scores.shape
    order = resolve_order(kt, target_order)
    used = np.zeros(ks, dtype=bool)
    chosen, probs = [], []
    for t in order:
        col = scores[:, t]
        free = np.flatnonzero(~used)
        z = np.exp(col[free] - col[free].max())
        p = z / z.sum()
        k = int(np.argmax(p))
        chosen.append(int(free[k]))
        probs.append(float(p[k]))
        used[free[k]] = True
    matching = np.empty(kt, dtype=np.intp)
    matching[order] = chosen
    return matching, probs
