"""Region-biased matrix factorization with a fuzzy-entropy neighborhood regularizer.

Prediction for user i and service j::

    q_hat = alpha * <U_i, S_j> + (1 - alpha) * (mu_i + b_i + p_j)

Training minimizes squared error on observed entries plus L2 weight decay
(``lam``) and a penalty (``gamma``) pulling U_i toward the similarity-weighted
average of its neighbors' factors.  The same SGD kernel also trains the PMF
and BiasedMF baselines through the mixing weights of :class:`Mix`.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from numba import njit

from .dataset import QosMatrix
from .region import BiasVectors, RegionModel
from .similarity import NeighborTable

_logger = logging.getLogger(__name__)

REG_MODES = ("objective", "entry")
DIVERGENCE_LOSS = 1e12


class TrainingError(RuntimeError):
    def __init__(self, epoch: int, last_finite_loss: float, reason: str = "diverged"):
        super().__init__(f"training {reason} at epoch {epoch} (last finite loss {last_finite_loss:.6g})")
        self.epoch = epoch
        self.last_finite_loss = last_finite_loss


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class FiemfHyperparams:
    alpha: float = 0.15
    lam: float = 18.0
    gamma: float = 18.0
    dim: int = 10
    k: int = 10
    eta: float = 0.01
    eta_decay: float = 0.95
    max_iters: int = 300
    tol: float = 1e-6
    init_seed: int = 0
    init_scale: float | None = None  # None -> 0.1 * sqrt(global_mean / dim)
    reg_mode: str = "objective"
    cross_terms: bool = False

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.lam < 0 or self.gamma < 0:
            raise ValueError("lam and gamma must be non-negative")
        if self.dim < 1 or self.k < 1 or self.max_iters < 1:
            raise ValueError("dim, k and max_iters must be >= 1")
        if not self.eta > 0:
            raise ValueError("eta must be positive")
        if not 0 < self.eta_decay <= 1:
            raise ValueError("eta_decay must lie in (0, 1]")
        if self.init_scale is not None and not self.init_scale > 0:
            raise ValueError("init_scale must be positive")
        if self.reg_mode not in REG_MODES:
            raise ValueError(f"reg_mode must be one of {REG_MODES}")


@dataclass(frozen=True)
class Mix:
    """Weights of the interaction and bias terms in a prediction."""

    w_int: float
    w_bias: float
    use_bias: bool

    @classmethod
    def fiemf(cls, alpha: float) -> "Mix":
        return cls(alpha, 1.0 - alpha, True)


PMF_MIX = Mix(1.0, 0.0, False)
BIASEDMF_MIX = Mix(1.0, 1.0, True)


@dataclass
class FiemfParams:
    U: np.ndarray
    S: np.ndarray
    biases: BiasVectors

    @property
    def b(self) -> np.ndarray:
        return self.biases.b

    @property
    def p(self) -> np.ndarray:
        return self.biases.p

    def copy(self) -> "FiemfParams":
        return FiemfParams(self.U.copy(), self.S.copy(), BiasVectors(self.b.copy(), self.p.copy()))

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in (self.U, self.S, self.b, self.p))


@dataclass
class TrainTrace:
    initial_loss: float
    losses: list = field(default_factory=list)   # objective after each epoch
    etas: list = field(default_factory=list)
    deltas: list = field(default_factory=list)   # mean |param change| per epoch
    converged: bool = False
    seconds: float = 0.0

    @property
    def epochs(self) -> int:
        return len(self.losses)


def default_init_scale(global_mean: float, dim: int) -> float:
    return 0.1 * float(np.sqrt(max(global_mean, 1e-12) / dim))


def init_params(num_users: int, num_services: int, dim: int, scale: float, rng) -> FiemfParams:
    U = rng.uniform(0.0, scale, size=(num_users, dim))
    S = rng.uniform(0.0, scale, size=(num_services, dim))
    return FiemfParams(U, S, BiasVectors.zeros(num_users, num_services))


def neighbor_arrays(neighbors, num_users: int) -> tuple[np.ndarray, np.ndarray]:
    """Normalize a NeighborTable / (idx, w) pair / None into padded arrays."""
    if neighbors is None:
        return np.full((num_users, 1), -1, dtype=np.int64), np.zeros((num_users, 1))
    if isinstance(neighbors, NeighborTable):
        idx, w = neighbors.arrays()
    else:
        idx, w = neighbors
        idx = np.asarray(idx, dtype=np.int64)
        w = np.asarray(w, dtype=np.float64)
    if idx.shape != w.shape or idx.shape[0] != num_users:
        raise ValueError("neighbor arrays must have shape (num_users, K)")
    return idx, w


def _neighbor_average(U: np.ndarray, idx: np.ndarray, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    safe = np.where(idx < 0, 0, idx)
    w = np.where(idx < 0, 0.0, w)
    avg = np.einsum("ik,ikd->id", w, U[safe])
    has = (idx >= 0).any(axis=1)
    return avg, has


# ---------------------------------------------------------------------------
# prediction and objective

def predict(i: int, j: int, params: FiemfParams, mu_i: float, alpha: float) -> float:
    m, n = params.U.shape[0], params.S.shape[0]
    if not (0 <= i < m and 0 <= j < n):
        raise ValueError(f"index ({i}, {j}) out of range for {m} x {n} model")
    inter = float(params.U[i] @ params.S[j])
    return alpha * inter + (1.0 - alpha) * (mu_i + params.b[i] + params.p[j])


def _predict_entries(users, services, params: FiemfParams, mu, mix: Mix) -> np.ndarray:
    out = mix.w_int * np.einsum("nd,nd->n", params.U[users], params.S[services])
    if mix.w_bias:
        base = mu[users]
        if mix.use_bias:
            base = base + params.b[users] + params.p[services]
        out = out + mix.w_bias * base
    return out


def mix_objective(train: QosMatrix, params: FiemfParams, mu, nbr_idx, nbr_w,
                  lam: float, gamma: float, mix: Mix, anchor: np.ndarray | None = None) -> float:
    """Full training objective for any mixing of interaction and bias terms.

    ``anchor`` replaces U inside the neighbor averages (held constant), which is
    the function whose gradient the local-only neighbor update follows.
    """
    mu = np.zeros(train.num_users) if mu is None else np.asarray(mu, dtype=np.float64)
    e = train.values - _predict_entries(train.users, train.services, params, mu, mix)
    loss = 0.5 * float(e @ e)
    reg = np.sum(params.U ** 2) + np.sum(params.S ** 2)
    if mix.use_bias:
        reg += np.sum(params.b ** 2) + np.sum(params.p ** 2)
    loss += 0.5 * lam * float(reg)
    if gamma:
        avg, has = _neighbor_average(params.U if anchor is None else anchor, nbr_idx, nbr_w)
        diff = (params.U - avg)[has]
        loss += 0.5 * gamma * float(np.sum(diff ** 2))
    return loss


def objective(train: QosMatrix, params: FiemfParams, neighbors, hyper: FiemfHyperparams,
              mu=None, anchor: np.ndarray | None = None) -> float:
    idx, w = neighbor_arrays(neighbors, train.num_users)
    return mix_objective(train, params, mu, idx, w, hyper.lam, hyper.gamma,
                         Mix.fiemf(hyper.alpha), anchor)


def mix_gradient(train: QosMatrix, params: FiemfParams, mu, nbr_idx, nbr_w,
                 lam: float, gamma: float, mix: Mix, cross_terms: bool) -> FiemfParams:
    """Batch gradient of :func:`mix_objective`.

    Without ``cross_terms`` the neighbor averages are treated as constants, so
    U_i only receives the gradient of its own regularizer term.
    """
    mu = np.zeros(train.num_users) if mu is None else np.asarray(mu, dtype=np.float64)
    u, s = train.users, train.services
    e = train.values - _predict_entries(u, s, params, mu, mix)
    gU = lam * params.U
    gS = lam * params.S
    np.add.at(gU, u, -mix.w_int * e[:, None] * params.S[s])
    np.add.at(gS, s, -mix.w_int * e[:, None] * params.U[u])
    if mix.use_bias:
        gb = lam * params.b - mix.w_bias * np.bincount(u, weights=e, minlength=train.num_users)
        gp = lam * params.p - mix.w_bias * np.bincount(s, weights=e, minlength=train.num_services)
    else:
        gb, gp = np.zeros_like(params.b), np.zeros_like(params.p)
    if gamma:
        avg, has = _neighbor_average(params.U, nbr_idx, nbr_w)
        diff = np.where(has[:, None], params.U - avg, 0.0)
        gU += gamma * diff
        if cross_terms:
            rows, cols = np.nonzero(nbr_idx >= 0)
            np.add.at(gU, nbr_idx[rows, cols], -gamma * nbr_w[rows, cols][:, None] * diff[rows])
    return FiemfParams(gU, gS, BiasVectors(gb, gp))


def full_gradient(train: QosMatrix, params: FiemfParams, neighbors, hyper: FiemfHyperparams,
                  mu=None) -> FiemfParams:
    idx, w = neighbor_arrays(neighbors, train.num_users)
    return mix_gradient(train, params, mu, idx, w, hyper.lam, hyper.gamma,
                        Mix.fiemf(hyper.alpha), hyper.cross_terms)


def gradients(i: int, j: int, residual: float, params: FiemfParams, neighbors,
              hyper: FiemfHyperparams, user_share: float = 1.0, service_share: float = 1.0,
              mix: Mix | None = None) -> dict:
    """Per-entry stochastic gradient contributions for observed entry (i, j).

    With both shares at 1 these are the per-entry update directions written
    out term by term; the trainer's default ``reg_mode="objective"`` passes
    ``1/count`` shares so one epoch applies each regularizer exactly once.
    The returned dict holds "U", "S", "b", "p" and, when cross terms are on,
    "U_neighbors" mapping neighbor id -> gradient.
    """
    mix = mix or Mix.fiemf(hyper.alpha)
    idx, w = neighbor_arrays(neighbors, params.U.shape[0])
    e = residual
    Ui, Sj = params.U[i], params.S[j]
    lam_u, lam_s = hyper.lam * user_share, hyper.lam * service_share
    g = {
        "U": lam_u * Ui - mix.w_int * e * Sj,
        "S": lam_s * Sj - mix.w_int * e * Ui,
        "b": lam_u * params.b[i] - mix.w_bias * e if mix.use_bias else 0.0,
        "p": lam_s * params.p[j] - mix.w_bias * e if mix.use_bias else 0.0,
    }
    row = idx[i]
    if hyper.gamma and np.any(row >= 0):
        gam = hyper.gamma * user_share
        avg = sum(w[i, t] * params.U[a] for t, a in enumerate(row) if a >= 0)
        diff = Ui - avg
        g["U"] = g["U"] + gam * diff
        if hyper.cross_terms:
            g["U_neighbors"] = {int(a): -gam * w[i, t] * diff for t, a in enumerate(row) if a >= 0}
    return g


# ---------------------------------------------------------------------------
# SGD

@njit(cache=True)
def _sgd_epoch(users, services, values, order, U, S, b, p, mu, w_int, w_bias, use_bias,
               reg_u, reg_s, reg_n, nbr_idx, nbr_w, eta, cross):
    d = U.shape[1]
    k = nbr_idx.shape[1]
    avg = np.zeros(d)
    ui = np.zeros(d)
    for t in range(order.size):
        e_idx = order[t]
        i = users[e_idx]
        j = services[e_idx]
        dot = 0.0
        for f in range(d):
            dot += U[i, f] * S[j, f]
        base = mu[i]
        if use_bias:
            base += b[i] + p[j]
        e = values[e_idx] - (w_int * dot + w_bias * base)

        has_nbr = False
        if reg_n[i] != 0.0:
            for f in range(d):
                avg[f] = 0.0
            for c in range(k):
                a = nbr_idx[i, c]
                if a >= 0:
                    has_nbr = True
                    for f in range(d):
                        avg[f] += nbr_w[i, c] * U[a, f]

        for f in range(d):
            ui[f] = U[i, f]
        for f in range(d):
            g_u = reg_u[i] * ui[f] - w_int * e * S[j, f]
            if has_nbr:
                g_u += reg_n[i] * (ui[f] - avg[f])
            g_s = reg_s[j] * S[j, f] - w_int * e * ui[f]
            U[i, f] -= eta * g_u
            S[j, f] -= eta * g_s
        if cross and has_nbr:
            for c in range(k):
                a = nbr_idx[i, c]
                if a >= 0:
                    for f in range(d):
                        U[a, f] += eta * reg_n[i] * nbr_w[i, c] * (ui[f] - avg[f])
        if use_bias:
            g_b = reg_u[i] * b[i] - w_bias * e
            g_p = reg_s[j] * p[j] - w_bias * e
            b[i] -= eta * g_b
            p[j] -= eta * g_p


@dataclass(frozen=True)
class SgdSettings:
    dim: int
    lam: float
    gamma: float
    eta: float
    eta_decay: float
    max_iters: int
    tol: float
    init_seed: int
    init_scale: float | None
    reg_mode: str
    cross_terms: bool

    @classmethod
    def from_hyper(cls, h: FiemfHyperparams) -> "SgdSettings":
        return cls(h.dim, h.lam, h.gamma, h.eta, h.eta_decay, h.max_iters, h.tol,
                   h.init_seed, h.init_scale, h.reg_mode, h.cross_terms)


def regularizer_shares(train: QosMatrix, reg_mode: str) -> tuple[np.ndarray, np.ndarray]:
    """Fraction of each user's / service's regularizer applied per visited entry."""
    if reg_mode == "entry":
        return np.ones(train.num_users), np.ones(train.num_services)
    nu = train.user_counts().astype(np.float64)
    ns = train.service_counts().astype(np.float64)
    return np.divide(1.0, nu, out=np.zeros_like(nu), where=nu > 0), \
        np.divide(1.0, ns, out=np.zeros_like(ns), where=ns > 0)


def sgd_fit(train: QosMatrix, settings: SgdSettings, mix: Mix, mu=None,
            nbr_idx=None, nbr_w=None, log_every: int = 0) -> tuple[FiemfParams, TrainTrace]:
    """Shared SGD loop for FIEMF, PMF and BiasedMF.

    One generator (PCG64 seeded by ``init_seed``) draws U, then S, then one
    permutation of the training entries per epoch.
    """
    if not len(train):
        raise ValueError("cannot train on an empty matrix")
    if mix.w_bias == 0.0:
        # biases receive no signal and stay at zero; alpha=1 FIEMF then runs exactly as PMF
        mix = Mix(mix.w_int, 0.0, False)
    m, n = train.num_users, train.num_services
    mu = np.zeros(m) if mu is None else np.ascontiguousarray(mu, dtype=np.float64)
    if nbr_idx is None:
        nbr_idx, nbr_w = neighbor_arrays(None, m)
    nbr_idx = np.ascontiguousarray(nbr_idx, dtype=np.int64)
    nbr_w = np.ascontiguousarray(nbr_w, dtype=np.float64)

    rng = np.random.Generator(np.random.PCG64(settings.init_seed))
    scale = settings.init_scale or default_init_scale(train.global_mean, settings.dim)
    params = init_params(m, n, settings.dim, scale, rng)

    share_u, share_s = regularizer_shares(train, settings.reg_mode)
    reg_u = settings.lam * share_u
    reg_s = settings.lam * share_s
    reg_n = settings.gamma * share_u

    users = np.ascontiguousarray(train.users)
    services = np.ascontiguousarray(train.services)
    values = np.ascontiguousarray(train.values)

    def loss_of(prm):
        return mix_objective(train, prm, mu, nbr_idx, nbr_w, settings.lam, settings.gamma, mix)

    trace = TrainTrace(initial_loss=loss_of(params))
    last_finite = trace.initial_loss
    eta = settings.eta
    n_params = params.U.size + params.S.size + (m + n if mix.use_bias else 0)
    start = time.perf_counter()
    for epoch in range(1, settings.max_iters + 1):
        before = params.copy()
        order = rng.permutation(len(train))
        _sgd_epoch(users, services, values, order, params.U, params.S, params.b, params.p, mu,
                   float(mix.w_int), float(mix.w_bias), bool(mix.use_bias),
                   reg_u, reg_s, reg_n, nbr_idx, nbr_w, float(eta), bool(settings.cross_terms))
        loss = loss_of(params) if params.is_finite() else float("nan")
        if not np.isfinite(loss) or loss > DIVERGENCE_LOSS:
            raise TrainingError(epoch, last_finite)
        last_finite = loss
        delta = (np.abs(params.U - before.U).sum() + np.abs(params.S - before.S).sum())
        if mix.use_bias:
            delta += np.abs(params.b - before.b).sum() + np.abs(params.p - before.p).sum()
        delta /= n_params
        trace.losses.append(loss)
        trace.etas.append(eta)
        trace.deltas.append(float(delta))
        if log_every and epoch % log_every == 0:
            _logger.info("epoch %d loss %.6g delta %.3g eta %.3g", epoch, loss, delta, eta)
        if delta < settings.tol:
            trace.converged = True
            break
        eta *= settings.eta_decay
    trace.seconds = time.perf_counter() - start
    return params, trace


# ---------------------------------------------------------------------------
# model wrapper and checkpoints

@dataclass
class FactorModel:
    """A trained factor model (FIEMF, PMF or BiasedMF)."""

    method: str
    params: FiemfParams
    mix: Mix
    mu: np.ndarray
    value_range: tuple
    hyper: dict
    fingerprint: str = ""
    trace: TrainTrace | None = None

    @property
    def num_users(self) -> int:
        return self.params.U.shape[0]

    @property
    def num_services(self) -> int:
        return self.params.S.shape[0]

    def predict_raw(self, users, services) -> np.ndarray:
        users = np.asarray(users, dtype=np.int64)
        services = np.asarray(services, dtype=np.int64)
        if users.size and (users.min() < 0 or users.max() >= self.num_users
                           or services.min() < 0 or services.max() >= self.num_services):
            raise ValueError("prediction index out of range")
        return _predict_entries(users, services, self.params, self.mu, self.mix)

    def predict(self, users, services, clamp: bool = True) -> np.ndarray:
        out = self.predict_raw(users, services)
        if clamp:
            out = np.clip(out, *self.value_range)
        return out

    def predict_matrix(self, test: QosMatrix, clamp: bool = True) -> np.ndarray:
        return self.predict(test.users, test.services, clamp)

    def save(self, path) -> None:
        meta = {
            "method": self.method,
            "num_users": self.num_users,
            "num_services": self.num_services,
            "dim": int(self.params.U.shape[1]),
            "mix": asdict(self.mix),
            "value_range": list(self.value_range),
            "hyper": self.hyper,
            "fingerprint": self.fingerprint,
        }
        with open(path, "wb") as fh:
            np.savez(fh, U=self.params.U, S=self.params.S, b=self.params.b, p=self.params.p,
                     mu=self.mu, meta=np.array(json.dumps(meta, sort_keys=True)))


def load_checkpoint(path, dataset: QosMatrix | None = None) -> FactorModel:
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        arrays = {k: data[k].copy() for k in ("U", "S", "b", "p", "mu")}
    if arrays["U"].shape != (meta["num_users"], meta["dim"]) or \
            arrays["S"].shape != (meta["num_services"], meta["dim"]):
        raise CheckpointError(f"{path}: factor shapes disagree with recorded dimensions")
    if dataset is not None and (dataset.num_users, dataset.num_services) != \
            (meta["num_users"], meta["num_services"]):
        raise CheckpointError(
            f"{path}: checkpoint is {meta['num_users']} x {meta['num_services']}, "
            f"dataset is {dataset.num_users} x {dataset.num_services}")
    params = FiemfParams(arrays["U"], arrays["S"], BiasVectors(arrays["b"], arrays["p"]))
    return FactorModel(meta["method"], params, Mix(**meta["mix"]), arrays["mu"],
                       tuple(meta["value_range"]), meta["hyper"], meta["fingerprint"])


def train(data: QosMatrix, neighbors, region_model: RegionModel | None,
          hyper: FiemfHyperparams = FiemfHyperparams(), log_every: int = 0) -> FactorModel:
    """Fit FIEMF on a training matrix with precomputed neighbors and region means.

    Without a region model every user is anchored at the global training mean.
    """
    mu = region_model.mu if region_model is not None else np.full(data.num_users, data.global_mean)
    if mu.shape != (data.num_users,):
        raise ValueError("region model does not match the training matrix")
    idx, w = neighbor_arrays(neighbors, data.num_users)
    params, trace = sgd_fit(data, SgdSettings.from_hyper(hyper), Mix.fiemf(hyper.alpha),
                            mu, idx, w, log_every)
    return FactorModel("fiemf", params, Mix.fiemf(hyper.alpha), np.asarray(mu, dtype=np.float64),
                       data.value_range, asdict(hyper), data.fingerprint(), trace)


def with_overrides(hyper: FiemfHyperparams, **kw) -> FiemfHyperparams:
    return replace(hyper, **{k: v for k, v in kw.items() if v is not None})
