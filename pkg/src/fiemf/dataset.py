"""Loading, splitting and exporting WS-DREAM style QoS data."""
from __future__ import annotations

import csv
import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np

_logger = logging.getLogger(__name__)

DEFAULT_ID_COLUMN = "[User ID]"
DEFAULT_COUNTRY_COLUMN = "[Country]"


class DatasetError(ValueError):
    """Base class for dataset loading problems."""


class DatasetParseError(DatasetError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class DatasetFormatError(DatasetError):
    pass


class DatasetIntegrityError(DatasetError):
    def __init__(self, missing_ids):
        self.missing_ids = list(missing_ids)
        shown = ", ".join(str(i) for i in self.missing_ids[:20])
        more = "" if len(self.missing_ids) <= 20 else f" (+{len(self.missing_ids) - 20} more)"
        super().__init__(f"user ids missing from user list: {shown}{more}")


@dataclass(frozen=True, eq=False)
class QosMatrix:
    """Sparse user x service QoS observations.

    Entries are stored as three parallel arrays sorted by (user, service).
    """

    num_users: int
    num_services: int
    users: np.ndarray
    services: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        if self.num_users < 1 or self.num_services < 1:
            raise DatasetError("matrix dimensions must be positive")
        users = np.asarray(self.users, dtype=np.int64)
        services = np.asarray(self.services, dtype=np.int64)
        values = np.asarray(self.values, dtype=np.float64)
        if not (users.shape == services.shape == values.shape) or users.ndim != 1:
            raise DatasetError("users, services and values must be 1-d arrays of equal length")
        if users.size:
            if users.min() < 0 or users.max() >= self.num_users:
                raise DatasetError("user index out of range")
            if services.min() < 0 or services.max() >= self.num_services:
                raise DatasetError("service index out of range")
            if not np.all(np.isfinite(values)) or np.any(values <= 0):
                raise DatasetError("entry values must be finite and positive")
        key = users * self.num_services + services
        order = np.argsort(key, kind="stable")
        key = key[order]
        if key.size > 1 and np.any(key[1:] == key[:-1]):
            raise DatasetError("duplicate (user, service) entries")
        for name, arr in (("users", users), ("services", services), ("values", values)):
            arr = arr[order]
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def __len__(self) -> int:
        return int(self.values.size)

    def __eq__(self, other) -> bool:
        if not isinstance(other, QosMatrix):
            return NotImplemented
        return (
            self.num_users == other.num_users
            and self.num_services == other.num_services
            and np.array_equal(self.users, other.users)
            and np.array_equal(self.services, other.services)
            and np.array_equal(self.values, other.values)
        )

    __hash__ = None

    @property
    def value_range(self) -> tuple[float, float]:
        if not len(self):
            raise DatasetError("empty matrix has no value range")
        return float(self.values.min()), float(self.values.max())

    @property
    def global_mean(self) -> float:
        return float(self.values.mean())

    def dense(self, fill: float = np.nan) -> np.ndarray:
        out = np.full((self.num_users, self.num_services), fill, dtype=np.float64)
        out[self.users, self.services] = self.values
        return out

    def user_counts(self) -> np.ndarray:
        return np.bincount(self.users, minlength=self.num_users)

    def service_counts(self) -> np.ndarray:
        return np.bincount(self.services, minlength=self.num_services)

    def subset(self, index: np.ndarray) -> "QosMatrix":
        return QosMatrix(self.num_users, self.num_services,
                         self.users[index], self.services[index], self.values[index])

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(np.array([self.num_users, self.num_services], dtype=np.int64).tobytes())
        h.update(self.users.tobytes())
        h.update(self.services.tobytes())
        h.update(self.values.tobytes())
        return h.hexdigest()[:16]

    @classmethod
    def from_dense(cls, matrix) -> "QosMatrix":
        """Build from a dense array; non-positive or non-finite cells are missing."""
        arr = np.asarray(matrix, dtype=np.float64)
        if arr.ndim != 2:
            raise DatasetError("dense QoS matrix must be 2-d")
        with np.errstate(invalid="ignore"):
            mask = np.isfinite(arr) & (arr > 0)
        u, s = np.nonzero(mask)
        return cls(arr.shape[0], arr.shape[1], u, s, arr[u, s])


@dataclass(frozen=True)
class UserRegionTable:
    labels: tuple[str, ...]  # indexed by user id

    @property
    def num_users(self) -> int:
        return len(self.labels)

    @property
    def regions(self) -> list[str]:
        return sorted(set(self.labels))

    def __getitem__(self, user_id: int) -> str:
        return self.labels[user_id]


@dataclass(frozen=True)
class Split:
    train: QosMatrix
    test: QosMatrix
    density: float
    seed: int
    source_fingerprint: str = field(default="")


def load_rt_matrix(path) -> QosMatrix:
    """Read an rtMatrix-style text file.

    Cells equal to -1 (or any value <= 0) are treated as missing.
    """
    rows = []
    ncols = None
    with open(path, "r") as fh:
        for lineno, line in enumerate(fh, start=1):
            tokens = line.split()
            if not tokens:
                continue
            try:
                row = np.array([float(t) for t in tokens], dtype=np.float64)
            except ValueError as exc:
                raise DatasetParseError(lineno, f"non-numeric token ({exc})") from None
            if ncols is None:
                ncols = row.size
            elif row.size != ncols:
                raise DatasetParseError(lineno, f"expected {ncols} columns, found {row.size}")
            rows.append(row)
    if not rows:
        raise DatasetFormatError(f"{path}: empty QoS matrix file")
    dense = np.vstack(rows)
    if not np.all(np.isfinite(dense)):
        bad = int(np.argwhere(~np.isfinite(dense))[0, 0]) + 1
        raise DatasetParseError(bad, "non-finite value")
    matrix = QosMatrix.from_dense(dense)
    _logger.info("loaded %d x %d matrix with %d observed entries from %s",
                 matrix.num_users, matrix.num_services, len(matrix), path)
    return matrix


def write_rt_matrix(matrix: QosMatrix, path) -> None:
    dense = matrix.dense(fill=-1.0)
    with open(path, "w") as fh:
        for row in dense:
            fh.write("\t".join(repr(float(v)) if v != -1.0 else "-1" for v in row))
            fh.write("\n")


def _is_separator(line: str) -> bool:
    stripped = line.strip()
    return bool(stripped) and set(stripped) <= set("=-")


def load_user_regions(path, id_column: str = DEFAULT_ID_COLUMN,
                      country_column: str = DEFAULT_COUNTRY_COLUMN) -> UserRegionTable:
    """Read a tab-separated user list and map each user id to its country."""
    with open(path, "r", newline="") as fh:
        lines = [ln for ln in fh if ln.strip() and not _is_separator(ln)]
    if not lines:
        raise DatasetFormatError(f"{path}: empty user list")
    reader = csv.reader(lines, delimiter="\t")
    header = [h.strip() for h in next(reader)]
    for col in (id_column, country_column):
        if col not in header:
            raise DatasetFormatError(f"{path}: column {col!r} not found in header {header}")
    id_pos, country_pos = header.index(id_column), header.index(country_column)

    mapping: dict[int, str] = {}
    for offset, row in enumerate(reader, start=2):
        if len(row) <= max(id_pos, country_pos):
            raise DatasetFormatError(f"{path}: row {offset} has too few columns")
        try:
            uid = int(row[id_pos].strip())
        except ValueError:
            raise DatasetFormatError(f"{path}: row {offset} has non-integer user id {row[id_pos]!r}") from None
        if uid in mapping:
            raise DatasetFormatError(f"{path}: duplicate user id {uid}")
        mapping[uid] = row[country_pos].strip()
    if not mapping:
        raise DatasetFormatError(f"{path}: user list has no rows")
    if min(mapping) < 0:
        raise DatasetFormatError(f"{path}: negative user id")
    missing = [i for i in range(max(mapping) + 1) if i not in mapping]
    if missing:
        raise DatasetIntegrityError(missing)
    return UserRegionTable(tuple(mapping[i] for i in range(len(mapping))))


def split(source: QosMatrix, density: float, seed: int) -> Split:
    """Uniform entry-level train/test split.

    Uses numpy's PCG64 generator seeded with ``seed``; the first
    round(density * N) entries of a random permutation become training data.
    """
    if not 0.0 < density < 1.0:
        raise ValueError(f"density must lie in (0, 1), got {density}")
    n = len(source)
    n_train = int(np.floor(density * n + 0.5))
    rng = np.random.Generator(np.random.PCG64(seed))
    perm = rng.permutation(n)
    train_idx = np.sort(perm[:n_train])
    test_idx = np.sort(perm[n_train:])
    return Split(source.subset(train_idx), source.subset(test_idx), density, seed,
                 source.fingerprint())


def write_triplets(matrix: QosMatrix, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["user_id", "service_id", "value"])
        for u, s, v in zip(matrix.users.tolist(), matrix.services.tolist(), matrix.values.tolist()):
            writer.writerow([u, s, repr(v)])


def read_triplets(path, num_users: int, num_services: int) -> QosMatrix:
    with open(path, "r", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["user_id", "service_id", "value"]:
            raise DatasetFormatError(f"{path}: unexpected triplet header {header}")
        rows = list(reader)
    if rows:
        arr = np.array(rows, dtype=object)
        users = arr[:, 0].astype(np.int64)
        services = arr[:, 1].astype(np.int64)
        values = arr[:, 2].astype(np.float64)
    else:
        users = services = np.zeros(0, dtype=np.int64)
        values = np.zeros(0)
    return QosMatrix(num_users, num_services, users, services, values)
