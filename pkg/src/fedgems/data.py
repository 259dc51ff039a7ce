"""Synthetic datasets, public/private splits and client partitions."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Dataset:
    """Labelled samples. ``ids`` are stable sample ids from the generating dataset."""

    X: np.ndarray
    y: np.ndarray
    class_count: int
    ids: np.ndarray = field(default=None)

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.int64)
        if X.ndim != 2 or X.shape[0] != y.shape[0]:
            raise ValueError("X must be (n, d) and y must have n labels")
        if y.size and (y.min() < 0 or y.max() >= self.class_count):
            raise ValueError("labels out of range")
        if not np.all(np.isfinite(X)):
            raise ValueError("features must be finite")
        ids = np.arange(len(y)) if self.ids is None else np.asarray(self.ids, dtype=np.int64)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "ids", ids)

    def __len__(self) -> int:
        return int(self.y.shape[0])

    @property
    def input_dim(self) -> int:
        return int(self.X.shape[1])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.X[idx], self.y[idx], self.class_count, self.ids[idx])

    def label_counts(self) -> np.ndarray:
        return np.bincount(self.y, minlength=self.class_count)


@dataclass(frozen=True)
class SplitSpec:
    public_fraction: float = 0.5
    train_test_ratio: tuple = (5, 1)
    seed: int = 0
    # 0 keeps the public label mix equal to the overall one; larger values
    # tilt the public set toward low class ids.
    public_label_skew: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.public_fraction < 1.0:
            raise ValueError("public_fraction must lie in (0, 1)")
        if self.public_label_skew < 0:
            raise ValueError("public_label_skew must be >= 0")


@dataclass(frozen=True)
class PartitionPlan:
    client_count: int
    assignment: np.ndarray  # private sample position -> client id
    mode: str
    alpha: float | None = None

    def client_indices(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == k)

    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.client_count)


def generate_blobs(class_count, input_dim, samples_per_class, spread, seed) -> Dataset:
    """Isotropic Gaussian clusters around standard-normal class means."""
    if class_count < 1 or input_dim < 1 or samples_per_class < 1:
        raise ValueError("class_count, input_dim and samples_per_class must be >= 1")
    if not spread > 0:
        raise ValueError("spread must be positive")
    rng = np.random.default_rng(seed)
    means = rng.standard_normal((class_count, input_dim))
    y = np.repeat(np.arange(class_count), samples_per_class)
    X = means[y] + spread * rng.standard_normal((y.size, input_dim))
    order = rng.permutation(y.size)
    return Dataset(X[order], y[order], class_count)


def split_public_private(ds: Dataset, spec: SplitSpec):
    n = len(ds)
    if n < 2:
        raise ValueError("need at least 2 samples to split")
    n_pub = min(max(int(round(spec.public_fraction * n)), 1), n - 1)
    rng = np.random.default_rng(spec.seed)
    if spec.public_label_skew == 0:
        order = rng.permutation(n)
    else:
        # weighted sampling without replacement via exponential keys
        span = max(ds.class_count - 1, 1)
        w = np.exp(-spec.public_label_skew * ds.y / span)
        keys = rng.random(n) ** (1.0 / w)
        order = np.argsort(-keys, kind="stable")
    pub = np.sort(order[:n_pub])
    priv = np.sort(order[n_pub:])
    return ds.subset(pub), ds.subset(priv)


def partition_iid(private: Dataset, K: int, seed) -> PartitionPlan:
    n = len(private)
    if K < 1 or K > n:
        raise ValueError(f"cannot split {n} samples over {K} clients")
    perm = np.random.default_rng(seed).permutation(n)
    assignment = np.empty(n, dtype=np.int64)
    assignment[perm] = np.arange(n) % K
    return PartitionPlan(K, assignment, "iid")


def partition_dirichlet(private: Dataset, K: int, alpha: float, seed) -> PartitionPlan:
    """Per class, split samples over clients by proportions drawn from Dir(alpha)."""
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    n = len(private)
    if K < 2 or K > n:
        raise ValueError(f"cannot split {n} samples over {K} clients")
    rng = np.random.default_rng(seed)
    assignment = np.empty(n, dtype=np.int64)
    for c in range(private.class_count):
        idx = np.flatnonzero(private.y == c)
        props = rng.dirichlet(np.full(K, alpha))
        if idx.size == 0:
            continue
        idx = idx[rng.permutation(idx.size)]
        cuts = (np.cumsum(props)[:-1] * idx.size).astype(np.int64)
        for k, part in enumerate(np.split(idx, cuts)):
            assignment[part] = k
    sizes = np.bincount(assignment, minlength=K)
    for k in range(K):
        if sizes[k] == 0:
            donor = int(np.argmax(sizes))
            victim = np.flatnonzero(assignment == donor)[-1]
            assignment[victim] = k
            sizes[donor] -= 1
            sizes[k] += 1
    return PartitionPlan(K, assignment, "dirichlet", alpha)


def split_train_test(ds: Dataset, ratio=(5, 1), seed=0):
    """Shuffle then cut; test size is floored, the remainder goes to train."""
    n = len(ds)
    a, b = ratio
    if n < a + b:
        raise ValueError(f"need at least {a + b} samples, got {n}")
    n_test = (n * b) // (a + b)
    perm = np.random.default_rng(seed).permutation(n)
    return ds.subset(np.sort(perm[n_test:])), ds.subset(np.sort(perm[:n_test]))


def load_cifar(root, name="cifar10"):
    """Hook for real image data; not shipped."""
    raise NotImplementedError("CIFAR ingestion is not part of this package")


CSV_HEADER_PREFIX = ["owner", "split", "label"]


def write_split_csv(path, parts) -> None:
    """Write ``parts`` as rows ``owner, split, label, x0..x{d-1}``.

    ``parts`` is an iterable of ``(owner, split, Dataset)`` where owner is a
    client id or ``"public"`` and split is ``"train"`` or ``"test"``.
    """
    parts = list(parts)
    d = parts[0][2].input_dim
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER_PREFIX + [f"x{j}" for j in range(d)])
        for owner, split, ds in parts:
            for x, y in zip(ds.X, ds.y):
                w.writerow([owner, split, int(y)] + [repr(float(v)) for v in x])


def read_split_csv(path, class_count):
    """Inverse of `write_split_csv`: ``{(owner, split): Dataset}`` in file order."""
    rows: dict = {}
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if header[:3] != CSV_HEADER_PREFIX:
            raise ValueError(f"{path}: unexpected header {header[:3]}")
        for row in r:
            owner = row[0] if row[0] == "public" else int(row[0])
            rows.setdefault((owner, row[1]), []).append(row[2:])
    out = {}
    for key, items in rows.items():
        arr = np.array(items, dtype=np.float64)
        out[key] = Dataset(arr[:, 1:], arr[:, 0].astype(np.int64), class_count)
    return out


@dataclass
class FederatedData:
    """Everything a run needs: public train/test and per-client private train/test."""

    public_train: Dataset
    public_test: Dataset
    client_train: list
    client_test: list
    plan: PartitionPlan

    def csv_parts(self):
        yield "public", "train", self.public_train
        yield "public", "test", self.public_test
        for k, (tr, te) in enumerate(zip(self.client_train, self.client_test)):
            yield k, "train", tr
            if len(te):
                yield k, "test", te


def build_federated_data(ds: Dataset, split: SplitSpec, K: int, partition="iid",
                         alpha: float = 0.5, seed=0) -> FederatedData:
    public, private = split_public_private(ds, split)
    pub_train, pub_test = split_train_test(public, split.train_test_ratio, [seed, 11])
    if partition == "iid":
        plan = partition_iid(private, K, [seed, 12])
    elif partition == "dirichlet":
        plan = partition_dirichlet(private, K, alpha, [seed, 12])
    else:
        raise ValueError(f"unknown partition mode {partition!r}")
    a, b = split.train_test_ratio
    train, test = [], []
    for k in range(K):
        shard = private.subset(plan.client_indices(k))
        if len(shard) >= a + b:
            tr, te = split_train_test(shard, split.train_test_ratio, [seed, 13, k])
        else:
            tr, te = shard, shard.subset([])
        train.append(tr)
        test.append(te)
    return FederatedData(pub_train, pub_test, train, test, plan)


__all__ = [
    "Dataset", "SplitSpec", "PartitionPlan", "FederatedData", "generate_blobs",
    "split_public_private", "partition_iid", "partition_dirichlet", "split_train_test",
    "build_federated_data", "write_split_csv", "read_split_csv", "load_cifar",
]
