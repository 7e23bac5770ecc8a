"""Reference predictors: UMEAN, IMEAN, UIPCC, PMF and BiasedMF."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np
from numba import njit

from .dataset import QosMatrix
from .model import BIASEDMF_MIX, PMF_MIX, FactorModel, SgdSettings, sgd_fit

_logger = logging.getLogger(__name__)

METHODS = ("umean", "imean", "uipcc", "pmf", "biasedmf")


def _means(train: QosMatrix, axis: str) -> tuple[np.ndarray, np.ndarray]:
    ids, size = (train.users, train.num_users) if axis == "user" else (train.services, train.num_services)
    counts = np.bincount(ids, minlength=size)
    sums = np.bincount(ids, weights=train.values, minlength=size)
    means = np.full(size, train.global_mean if len(train) else np.nan)
    ok = counts > 0
    means[ok] = sums[ok] / counts[ok]
    return means, counts


def umean_predict(i: int, j: int, train: QosMatrix) -> float:
    return float(_means(train, "user")[0][i])


def imean_predict(i: int, j: int, train: QosMatrix) -> float:
    return float(_means(train, "service")[0][j])


class MeanModel:
    """UMEAN (``axis="user"``) or IMEAN (``axis="service"``)."""

    def __init__(self, axis: str = "user"):
        if axis not in ("user", "service"):
            raise ValueError("axis must be 'user' or 'service'")
        self.axis = axis
        self.means = None

    @property
    def method(self) -> str:
        return "umean" if self.axis == "user" else "imean"

    def fit(self, train: QosMatrix) -> "MeanModel":
        if not len(train):
            raise ValueError("cannot fit on an empty matrix")
        self.means, _ = _means(train, self.axis)
        return self

    def predict(self, users, services) -> np.ndarray:
        ids = np.asarray(users if self.axis == "user" else services, dtype=np.int64)
        return self.means[ids]

    def predict_matrix(self, test: QosMatrix) -> np.ndarray:
        return self.predict(test.users, test.services)


# ---------------------------------------------------------------------------
# UIPCC

@dataclass(frozen=True)
class UipccConfig:
    top_k: int = 10
    blend: float = 0.5          # weight of the user-based part
    min_corated: int = 2
    candidates: int = 1000      # similar services kept per service

    def __post_init__(self):
        if self.top_k < 1 or self.candidates < 1:
            raise ValueError("top_k and candidates must be >= 1")
        if not 0.0 <= self.blend <= 1.0:
            raise ValueError("blend must lie in [0, 1]")
        if self.min_corated < 2:
            raise ValueError("min_corated must be >= 2")


def pcc_similarity(dense: np.ndarray, means: np.ndarray, min_corated: int = 2,
                   cols: slice | None = None) -> np.ndarray:
    """Significance-weighted PCC between rows of ``dense`` (NaN = missing).

    Deviations are taken from each row's overall mean; only co-observed
    columns contribute.  Pairs with fewer than ``min_corated`` co-observed
    columns, or a zero denominator, get similarity 0.
    """
    mask = ~np.isnan(dense)
    c = np.where(mask, dense - means[:, None], 0.0)
    m = mask.astype(np.float64)
    c2 = c * c
    rows = slice(None) if cols is None else cols
    num = c[rows] @ c.T
    den = np.sqrt(c2[rows] @ m.T) * np.sqrt(m[rows] @ c2.T)
    co = m[rows] @ m.T
    counts = m.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        sim = np.where((co >= min_corated) & (den > 0), num / den, 0.0)
        sig = np.where(co > 0, 2.0 * co / (counts[rows][:, None] + counts[None, :]), 0.0)
    sim = sim * sig
    if cols is None:
        np.fill_diagonal(sim, 0.0)
    else:
        r = np.arange(sim.shape[0])
        sim[r, r + cols.start] = 0.0
    return sim


def _ranked_candidates(dense, means, min_corated, limit, block=512):
    """Positive-similarity candidates per row, sorted by descending similarity."""
    n = dense.shape[0]
    limit = min(limit, max(n - 1, 1))
    cand = np.full((n, limit), -1, dtype=np.int64)
    csim = np.zeros((n, limit))
    for start in range(0, n, block):
        stop = min(start + block, n)
        sim = pcc_similarity(dense, means, min_corated, slice(start, stop))
        for r in range(stop - start):
            row = sim[r]
            pos = np.flatnonzero(row > 0)
            if pos.size > limit:
                pos = pos[np.argpartition(-row[pos], limit - 1)[:limit]]
            order = np.lexsort((pos, -row[pos]))
            pos = pos[order]
            cand[start + r, :pos.size] = pos
            csim[start + r, :pos.size] = row[pos]
    return cand, csim


@njit(cache=True)
def _cf_predict(rows, cols, cand, csim, dense, means, k):
    out = np.zeros(rows.size)
    conf = np.zeros(rows.size)
    ok = np.zeros(rows.size, dtype=np.bool_)
    for t in range(rows.size):
        r = rows[t]
        c = cols[t]
        total = 0.0
        wsum = 0.0
        sq = 0.0
        used = 0
        for l in range(cand.shape[1]):
            a = cand[r, l]
            if a < 0:
                break
            v = dense[a, c]
            if np.isnan(v):
                continue
            s = csim[r, l]
            total += s * (v - means[a])
            wsum += s
            sq += s * s
            used += 1
            if used == k:
                break
        if wsum > 0:
            out[t] = means[r] + total / wsum
            conf[t] = sq / wsum
            ok[t] = True
    return out, conf, ok


class UIPCC:
    """Hybrid user- and service-based PCC collaborative filtering."""

    method = "uipcc"

    def __init__(self, config: UipccConfig = UipccConfig()):
        self.config = config

    def fit(self, train: QosMatrix) -> "UIPCC":
        if not len(train):
            raise ValueError("cannot fit on an empty matrix")
        cfg = self.config
        self.dense = train.dense()
        self.dense_t = np.ascontiguousarray(self.dense.T)
        self.user_means, ucount = _means(train, "user")
        self.service_means, scount = _means(train, "service")
        self.user_known = ucount > 0
        self.service_known = scount > 0
        self.global_mean = train.global_mean
        self.user_cand, self.user_sim = _ranked_candidates(
            self.dense, self.user_means, cfg.min_corated, train.num_users)
        self.service_cand, self.service_sim = _ranked_candidates(
            self.dense_t, self.service_means, cfg.min_corated, cfg.candidates)
        return self

    def predict(self, users, services) -> np.ndarray:
        users = np.asarray(users, dtype=np.int64)
        services = np.asarray(services, dtype=np.int64)
        k = self.config.top_k
        lam = self.config.blend
        pu, cu, oku = _cf_predict(users, services, self.user_cand, self.user_sim,
                                  self.dense, self.user_means, k)
        pi, ci, oki = _cf_predict(services, users, self.service_cand, self.service_sim,
                                  self.dense_t, self.service_means, k)
        out = np.empty(users.size)
        both = oku & oki
        wu = np.zeros(users.size)
        denom = cu * lam + ci * (1.0 - lam)
        np.divide(cu * lam, denom, out=wu, where=both & (denom > 0))
        wu[both & (denom <= 0)] = lam
        out[both] = wu[both] * pu[both] + (1.0 - wu[both]) * pi[both]
        only_u = oku & ~oki
        only_i = oki & ~oku
        out[only_u] = pu[only_u]
        out[only_i] = pi[only_i]
        neither = ~(oku | oki)
        if neither.any():
            um = np.where(self.user_known[users[neither]], self.user_means[users[neither]], np.nan)
            im = np.where(self.service_known[services[neither]], self.service_means[services[neither]], np.nan)
            fb = lam * um + (1.0 - lam) * im
            fb = np.where(np.isnan(fb), np.where(np.isnan(um), im, um), fb)
            out[neither] = np.where(np.isnan(fb), self.global_mean, fb)
        return out

    def predict_matrix(self, test: QosMatrix) -> np.ndarray:
        return self.predict(test.users, test.services)


def uipcc_predict(i: int, j: int, train: QosMatrix, config: UipccConfig = UipccConfig()) -> float:
    return float(UIPCC(config).fit(train).predict([i], [j])[0])


# ---------------------------------------------------------------------------
# latent factor baselines

@dataclass(frozen=True)
class MFConfig:
    dim: int = 10
    lam: float = 30.0
    eta: float = 0.01
    eta_decay: float = 0.95
    max_iters: int = 300
    tol: float = 1e-6
    init_seed: int = 0
    init_scale: float | None = None
    reg_mode: str = "objective"

    def __post_init__(self):
        if self.dim < 1 or self.max_iters < 1:
            raise ValueError("dim and max_iters must be >= 1")
        if self.lam < 0 or not self.eta > 0:
            raise ValueError("lam must be >= 0 and eta > 0")

    def settings(self) -> SgdSettings:
        return SgdSettings(self.dim, self.lam, 0.0, self.eta, self.eta_decay, self.max_iters,
                           self.tol, self.init_seed, self.init_scale, self.reg_mode, False)


def pmf_train(train: QosMatrix, config: MFConfig = MFConfig(), log_every: int = 0) -> FactorModel:
    params, trace = sgd_fit(train, config.settings(), PMF_MIX, log_every=log_every)
    return FactorModel("pmf", params, PMF_MIX, np.zeros(train.num_users), train.value_range,
                       asdict(config), train.fingerprint(), trace)


def biasedmf_train(train: QosMatrix, config: MFConfig = MFConfig(), log_every: int = 0) -> FactorModel:
    params, trace = sgd_fit(train, config.settings(), BIASEDMF_MIX, log_every=log_every)
    return FactorModel("biasedmf", params, BIASEDMF_MIX, np.zeros(train.num_users), train.value_range,
                       asdict(config), train.fingerprint(), trace)
