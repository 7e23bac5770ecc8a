"""Fuzzy information entropy similarity between users and Top-K neighbor selection.

A user's relationship matrix over a set of services holds, for each pair of
services, exp(-|r_x - r_y| / 2) when the two ratings differ by less than a
median threshold and 0 otherwise.  Entropies are computed from row means of
these matrices; two users are compared over their co-rated services only so
that both matrices share one index set.
"""
from __future__ import annotations

import csv
import logging
import math
from collections.abc import Mapping
from dataclasses import dataclass, field

import numpy as np
from numba import njit, prange

from .dataset import QosMatrix

_logger = logging.getLogger(__name__)

R_MED_MODES = ("user", "global")


@dataclass(frozen=True)
class SimilarityConfig:
    r_med_mode: str = "user"
    min_corated: int = 2
    pair_cap: int = 1000

    def __post_init__(self):
        if self.r_med_mode not in R_MED_MODES:
            raise ValueError(f"r_med_mode must be one of {R_MED_MODES}, got {self.r_med_mode!r}")
        if self.min_corated < 2:
            raise ValueError("min_corated must be at least 2")
        if self.pair_cap < self.min_corated:
            raise ValueError("pair_cap must be >= min_corated")


@dataclass(frozen=True, eq=False)
class RelationshipMatrix:
    index_set: tuple
    cells: np.ndarray

    @property
    def size(self) -> int:
        return len(self.index_set)


@dataclass(frozen=True)
class EntropyProfile:
    user_id: int
    fie: float


@dataclass(frozen=True)
class NeighborSet:
    user_id: int
    neighbors: tuple = ()  # (neighbor_id, similarity, weight) triples

    @property
    def ids(self) -> list[int]:
        return [n for n, _, _ in self.neighbors]

    @property
    def weights(self) -> list[float]:
        return [w for _, _, w in self.neighbors]


@dataclass
class SimilarityDiagnostics:
    pairs: int = 0
    below_threshold: int = 0
    capped: int = 0
    clamp_events: int = 0


def relationship_value(r_ux: float, r_uy: float, r_med: float) -> float:
    if not r_med > 0:
        raise ValueError(f"r_med must be positive, got {r_med}")
    diff = abs(r_ux - r_uy)
    return math.exp(-0.5 * diff) if diff < r_med else 0.0


def relationship_matrix(user_ratings: Mapping, r_med: float) -> RelationshipMatrix:
    """Relationship matrix over the services of ``user_ratings`` (in mapping order)."""
    if not user_ratings:
        raise ValueError("relationship matrix needs a non-empty index set")
    if not r_med > 0:
        raise ValueError(f"r_med must be positive, got {r_med}")
    index_set = tuple(user_ratings.keys())
    r = np.array([user_ratings[s] for s in index_set], dtype=np.float64)
    diff = np.abs(r[:, None] - r[None, :])
    cells = np.where(diff < r_med, np.exp(-0.5 * diff), 0.0)
    return RelationshipMatrix(index_set, cells)


def _cells(m) -> np.ndarray:
    return m.cells if isinstance(m, RelationshipMatrix) else np.asarray(m, dtype=np.float64)


def _entropy_of_rows(row_sums: np.ndarray) -> float:
    n = row_sums.size
    return float(-np.mean(np.log(row_sums / n)))


def fuzzy_entropy(m) -> float:
    cells = _cells(m)
    return _entropy_of_rows(cells.sum(axis=1))


def _check_aligned(ma, mb):
    if isinstance(ma, RelationshipMatrix) and isinstance(mb, RelationshipMatrix):
        if ma.index_set != mb.index_set:
            raise ValueError("relationship matrices are defined over different service sets")
    a, b = _cells(ma), _cells(mb)
    if a.shape != b.shape:
        raise ValueError(f"relationship matrix shapes differ: {a.shape} vs {b.shape}")
    return a, b


def fuzzy_joint_entropy(ma, mb) -> float:
    a, b = _check_aligned(ma, mb)
    return _entropy_of_rows(np.minimum(a, b).sum(axis=1))


def fuzzy_mutual_information(ma, mb) -> float:
    _check_aligned(ma, mb)
    return fuzzy_entropy(ma) + fuzzy_entropy(mb) - fuzzy_joint_entropy(ma, mb)


def normalized_similarity(fh_a: float, fh_b: float, fh_joint: float) -> tuple[float, bool]:
    """Normalized FMI similarity clamped to [0, 1]; also reports whether clamping fired."""
    return _normalize(fh_a, fh_b, fh_joint)


# ---------------------------------------------------------------------------
# compiled kernels

@njit(cache=True)
def _normalize(fa, fb, fab):
    denom = fa + fb
    if denom == 0.0:
        return 1.0, False
    s = 2.0 * (fa + fb - fab) * math.exp(-abs(fa - fb)) / denom
    if s < 0.0:
        return 0.0, True
    if s > 1.0:
        return 1.0, True
    return s, False


@njit(cache=True)
def _entropy_kernel(r, med):
    n = r.size
    rows = np.ones(n)
    for x in range(n):
        for y in range(x + 1, n):
            d = abs(r[x] - r[y])
            if d < med:
                v = math.exp(-0.5 * d)
                rows[x] += v
                rows[y] += v
    h = 0.0
    for x in range(n):
        h -= math.log(rows[x] / n)
    return h / n


@njit(cache=True)
def _pair_entropies(ra, rb, med_a, med_b):
    n = ra.size
    row_a = np.ones(n)
    row_b = np.ones(n)
    row_ab = np.ones(n)
    for x in range(n):
        for y in range(x + 1, n):
            d = abs(ra[x] - ra[y])
            va = math.exp(-0.5 * d) if d < med_a else 0.0
            d = abs(rb[x] - rb[y])
            vb = math.exp(-0.5 * d) if d < med_b else 0.0
            vm = min(va, vb)
            row_a[x] += va
            row_a[y] += va
            row_b[x] += vb
            row_b[y] += vb
            row_ab[x] += vm
            row_ab[y] += vm
    ha = 0.0
    hb = 0.0
    hab = 0.0
    for x in range(n):
        ha -= math.log(row_a[x] / n)
        hb -= math.log(row_b[x] / n)
        hab -= math.log(row_ab[x] / n)
    return ha / n, hb / n, hab / n


@njit(cache=True)
def _splitmix64(state):
    state = state + np.uint64(0x9E3779B97F4A7C15)
    z = state
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return state, z ^ (z >> np.uint64(31))


@njit(cache=True)
def _subsample(idx, count, cap, key):
    """Seeded partial Fisher-Yates over idx[:count]; returns sorted first ``cap``."""
    state = np.uint64(key)
    for t in range(cap):
        state, z = _splitmix64(state)
        j = t + np.int64(z % np.uint64(count - t))
        tmp = idx[t]
        idx[t] = idx[j]
        idx[j] = tmp
    return np.sort(idx[:cap])


@njit(cache=True)
def _pair_similarity(row_a, row_b, a, b, num_users, global_med, use_global, min_corated, cap):
    """Returns (similarity, clamped, below_threshold, capped) for one user pair."""
    n_services = row_a.size
    idx = np.empty(n_services, dtype=np.int64)
    count = 0
    for s in range(n_services):
        if not np.isnan(row_a[s]) and not np.isnan(row_b[s]):
            idx[count] = s
            count += 1
    if count < min_corated:
        return 0.0, False, True, False
    capped = False
    if count > cap:
        lo = min(a, b)
        hi = max(a, b)
        sel = _subsample(idx, count, cap, np.uint64(lo) * np.uint64(num_users) + np.uint64(hi))
        count = cap
        capped = True
    else:
        sel = idx[:count]
    ra = np.empty(count)
    rb = np.empty(count)
    for t in range(count):
        ra[t] = row_a[sel[t]]
        rb[t] = row_b[sel[t]]
    if use_global:
        med_a = global_med
        med_b = global_med
    else:
        med_a = np.median(ra)
        med_b = np.median(rb)
    fa, fb, fab = _pair_entropies(ra, rb, med_a, med_b)
    s, clamped = _normalize(fa, fb, fab)
    return s, clamped, False, capped


@njit(parallel=True, cache=True)
def _similarity_pairs(dense, pair_a, pair_b, global_med, use_global, min_corated, cap):
    n_pairs = pair_a.size
    num_users = dense.shape[0]
    sims = np.zeros(n_pairs)
    flags = np.zeros((n_pairs, 3), dtype=np.bool_)
    for p in prange(n_pairs):
        a = pair_a[p]
        b = pair_b[p]
        s, c, bt, cp = _pair_similarity(dense[a], dense[b], a, b, num_users,
                                        global_med, use_global, min_corated, cap)
        sims[p] = s
        flags[p, 0] = c
        flags[p, 1] = bt
        flags[p, 2] = cp
    return sims, flags


# ---------------------------------------------------------------------------
# public pipeline

def _global_median(train: QosMatrix) -> float:
    return float(np.median(train.values)) if len(train) else 1.0


def _run_pairs(dense, pair_a, pair_b, train, config, diag):
    sims, flags = _similarity_pairs(
        dense, np.asarray(pair_a, dtype=np.int64), np.asarray(pair_b, dtype=np.int64),
        _global_median(train), config.r_med_mode == "global", config.min_corated, config.pair_cap)
    if diag is not None:
        diag.pairs += int(sims.size)
        diag.clamp_events += int(flags[:, 0].sum())
        diag.below_threshold += int(flags[:, 1].sum())
        diag.capped += int(flags[:, 2].sum())
    return sims


def fie_similarity(a: int, b: int, train: QosMatrix, config: SimilarityConfig = SimilarityConfig()) -> float:
    if a == b:
        raise ValueError("self-similarity is excluded from neighbor selection")
    for u in (a, b):
        if not 0 <= u < train.num_users:
            raise ValueError(f"user {u} out of range")
    rows = np.full((train.num_users, train.num_services), np.nan)
    for u in (a, b):
        mask = train.users == u
        rows[u, train.services[mask]] = train.values[mask]
    return float(_run_pairs(rows, [a], [b], train, config, None)[0])


def user_entropy(u: int, train: QosMatrix, config: SimilarityConfig = SimilarityConfig()) -> EntropyProfile:
    """Standalone FIE of one user over all of that user's training ratings."""
    r = train.values[train.users == u]
    if r.size == 0:
        raise ValueError(f"user {u} has no training ratings")
    med = _global_median(train) if config.r_med_mode == "global" else float(np.median(r))
    return EntropyProfile(u, float(_entropy_kernel(r, med)))


def similarity_matrix(train: QosMatrix, config: SimilarityConfig = SimilarityConfig(),
                      diagnostics: SimilarityDiagnostics | None = None) -> np.ndarray:
    """Symmetric user x user similarity matrix with a zero diagonal."""
    m = train.num_users
    pair_a, pair_b = np.triu_indices(m, k=1)
    sims = _run_pairs(train.dense(), pair_a, pair_b, train, config, diagnostics)
    out = np.zeros((m, m))
    out[pair_a, pair_b] = sims
    out[pair_b, pair_a] = sims
    if diagnostics is not None:
        _logger.info("similarity: %d pairs, %d below co-rating threshold, %d capped, %d clamped",
                     diagnostics.pairs, diagnostics.below_threshold, diagnostics.capped,
                     diagnostics.clamp_events)
    return out


def _select(i: int, sims_row: np.ndarray, k: int) -> NeighborSet:
    if k < 1:
        raise ValueError("K must be >= 1")
    cand = np.flatnonzero(sims_row > 0)
    cand = cand[cand != i]
    # lexsort: last key is primary -> descending similarity, then ascending id
    order = np.lexsort((cand, -sims_row[cand]))
    chosen = cand[order][:k]
    if chosen.size == 0:
        return NeighborSet(i, ())
    s = sims_row[chosen]
    w = s / s.sum()
    return NeighborSet(i, tuple((int(a), float(sa), float(wa)) for a, sa, wa in zip(chosen, s, w)))


def top_k_neighbors(i: int, k: int, train: QosMatrix,
                    config: SimilarityConfig = SimilarityConfig()) -> NeighborSet:
    if k < 1:
        raise ValueError("K must be >= 1")
    others = np.array([u for u in range(train.num_users) if u != i], dtype=np.int64)
    sims_row = np.zeros(train.num_users)
    if others.size:
        sims_row[others] = _run_pairs(train.dense(), np.full(others.size, i), others, train, config, None)
    return _select(i, sims_row, k)


@dataclass
class NeighborTable:
    """Neighbor sets for every user of a training matrix."""

    sets: list
    k: int
    diagnostics: SimilarityDiagnostics = field(default_factory=SimilarityDiagnostics)

    @property
    def num_users(self) -> int:
        return len(self.sets)

    def __getitem__(self, user_id: int) -> NeighborSet:
        return self.sets[user_id]

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Padded (index, weight) arrays of shape (num_users, k); padding index is -1."""
        idx = np.full((self.num_users, self.k), -1, dtype=np.int64)
        w = np.zeros((self.num_users, self.k))
        for ns in self.sets:
            for t, (a, _, wa) in enumerate(ns.neighbors):
                idx[ns.user_id, t] = a
                w[ns.user_id, t] = wa
        return idx, w

    @classmethod
    def from_similarity(cls, sims: np.ndarray, k: int,
                        diagnostics: SimilarityDiagnostics | None = None) -> "NeighborTable":
        sets = [_select(i, sims[i], k) for i in range(sims.shape[0])]
        return cls(sets, k, diagnostics or SimilarityDiagnostics())

    @classmethod
    def empty(cls, num_users: int, k: int = 1) -> "NeighborTable":
        return cls([NeighborSet(i, ()) for i in range(num_users)], k)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["user_id", "neighbor_id", "similarity", "weight"])
            for ns in self.sets:
                for a, s, w in ns.neighbors:
                    writer.writerow([ns.user_id, a, repr(s), repr(w)])

    @classmethod
    def read_csv(cls, path, num_users: int, k: int | None = None) -> "NeighborTable":
        rows: dict[int, list] = {i: [] for i in range(num_users)}
        with open(path, "r", newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != ["user_id", "neighbor_id", "similarity", "weight"]:
                raise ValueError(f"{path}: unexpected neighbor header {header}")
            for line in reader:
                u, a = int(line[0]), int(line[1])
                if not (0 <= u < num_users and 0 <= a < num_users) or u == a:
                    raise ValueError(f"{path}: invalid neighbor row {line}")
                rows[u].append((a, float(line[2]), float(line[3])))
        longest = max((len(v) for v in rows.values()), default=0)
        k = k if k is not None else max(longest, 1)
        if longest > k:
            raise ValueError(f"{path}: neighbor list longer than K={k}")
        return cls([NeighborSet(i, tuple(rows[i])) for i in range(num_users)], k)


def compute_neighbors(train: QosMatrix, k: int,
                      config: SimilarityConfig = SimilarityConfig()) -> NeighborTable:
    diag = SimilarityDiagnostics()
    sims = similarity_matrix(train, config, diag)
    return NeighborTable.from_similarity(sims, k, diag)
