"""Country-level user regions and the region-anchored bias model."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .dataset import QosMatrix, UserRegionTable


@dataclass
class BiasVectors:
    b: np.ndarray  # per user
    p: np.ndarray  # per service

    @classmethod
    def zeros(cls, num_users: int, num_services: int) -> "BiasVectors":
        return cls(np.zeros(num_users), np.zeros(num_services))


@dataclass(frozen=True, eq=False)
class RegionModel:
    """Region assignment plus the per-user region mean computed from training data.

    ``mu[i]`` pools every training entry of the users sharing user i's region.
    By default user i's own entries are left out; a user with no region-mates
    (or whose mates have no entries) falls back to the global training mean.
    """

    labels: tuple          # region label per user
    region_codes: np.ndarray
    region_names: tuple
    region_sums: np.ndarray
    region_counts: np.ndarray
    global_mean: float
    mu: np.ndarray
    include_self: bool = False

    @property
    def num_users(self) -> int:
        return len(self.labels)

    @property
    def region_means(self) -> dict:
        out = {}
        for r, name in enumerate(self.region_names):
            if self.region_counts[r]:
                out[name] = float(self.region_sums[r] / self.region_counts[r])
        return out

    def members(self, user_id: int) -> list[int]:
        """Region-mates of ``user_id``, excluding the user itself."""
        code = self.region_codes[user_id]
        return [int(u) for u in np.flatnonzero(self.region_codes == code) if u != user_id]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["region_label", "mean", "entry_count"])
            for r, name in enumerate(self.region_names):
                count = int(self.region_counts[r])
                mean = repr(float(self.region_sums[r] / count)) if count else ""
                writer.writerow([name, mean, count])


def assign_regions(table: UserRegionTable) -> dict:
    return {u: label for u, label in enumerate(table.labels)}


def build_region_model(train: QosMatrix, regions, include_self: bool = False) -> RegionModel:
    """Precompute region means for a training matrix.

    ``regions`` is a UserRegionTable or a sequence of labels indexed by user.
    """
    labels = tuple(regions.labels if isinstance(regions, UserRegionTable) else regions)
    if len(labels) != train.num_users:
        raise ValueError(f"region table covers {len(labels)} users, matrix has {train.num_users}")
    if not len(train):
        raise ValueError("region means need a non-empty training matrix")
    names = tuple(sorted(set(labels)))
    lookup = {name: r for r, name in enumerate(names)}
    codes = np.array([lookup[lbl] for lbl in labels], dtype=np.int64)

    user_sums = np.bincount(train.users, weights=train.values, minlength=train.num_users)
    user_counts = np.bincount(train.users, minlength=train.num_users).astype(np.float64)
    region_sums = np.bincount(codes, weights=user_sums, minlength=len(names))
    region_counts = np.bincount(codes, weights=user_counts, minlength=len(names))
    global_mean = train.global_mean

    sums = region_sums[codes]
    counts = region_counts[codes]
    if not include_self:
        sums = sums - user_sums
        counts = counts - user_counts
    mu = np.full(train.num_users, global_mean)
    ok = counts > 0
    mu[ok] = sums[ok] / counts[ok]
    return RegionModel(labels, codes, names, region_sums, region_counts.astype(np.int64),
                       global_mean, mu, include_self)


def region_mean(i: int, train: QosMatrix, regions, include_self: bool = False) -> float:
    return float(build_region_model(train, regions, include_self).mu[i])


def bias_predict(i: int, j: int, mu_i: float, biases: BiasVectors) -> float:
    if not 0 <= i < biases.b.size:
        raise ValueError(f"user {i} out of range")
    if not 0 <= j < biases.p.size:
        raise ValueError(f"service {j} out of range")
    return float(mu_i + biases.b[i] + biases.p[j])
