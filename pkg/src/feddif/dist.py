"""Class-distribution algebra for diffusion-based federated learning.

A PUE's local label histogram is a :class:`Dsi`; a model's cumulative
histogram over the PUEs that trained it is a :class:`Dol`.  The IID distance
of a model is the distance of its DoL from the uniform distribution.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

SIMPLEX_TOL = 1e-9
MAX_PARTITION_RETRIES = 100


class DegeneratePartition(ValueError):
    pass


class InfeasibleOptimalDsi(ValueError):
    pass


class DistanceMetric(str, enum.Enum):
    W1L2 = "w1l2"
    KLD = "kld"
    JSD = "jsd"


def _check_simplex(probs: np.ndarray, what: str) -> None:
    if probs.ndim != 1 or probs.size == 0:
        raise ValueError(f"{what}: probs must be a non-empty vector")
    if np.any(probs < -SIMPLEX_TOL) or np.any(probs > 1 + SIMPLEX_TOL):
        raise ValueError(f"{what}: probs outside [0, 1]")
    if abs(probs.sum() - 1.0) > SIMPLEX_TOL:
        raise ValueError(f"{what}: probs sum to {probs.sum()!r}, not 1")


@dataclass(frozen=True)
class Dsi:
    """Label distribution of one PUE's dataset plus its size."""

    probs: np.ndarray
    data_size: int

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=float)
        object.__setattr__(self, "probs", probs)
        _check_simplex(probs, "Dsi")
        if int(self.data_size) < 1:
            raise ValueError("Dsi: data_size must be >= 1")
        object.__setattr__(self, "data_size", int(self.data_size))

    @classmethod
    def from_labels(cls, labels, n_classes: int) -> "Dsi":
        labels = np.asarray(labels, dtype=int)
        counts = np.bincount(labels, minlength=n_classes).astype(float)
        return cls(counts / counts.sum(), int(labels.size))

    @property
    def n_classes(self) -> int:
        return self.probs.size

    @property
    def counts(self) -> np.ndarray:
        return self.probs * self.data_size


@dataclass(frozen=True)
class Dol:
    """Degree of learning: size-weighted label mix a model has trained on.

    ``chain_size == 0`` with an all-zero ``probs`` is the untrained sentinel.
    """

    probs: np.ndarray
    chain_size: int = 0

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=float)
        object.__setattr__(self, "probs", probs)
        object.__setattr__(self, "chain_size", int(self.chain_size))
        if self.chain_size < 0:
            raise ValueError("Dol: chain_size must be >= 0")
        if self.chain_size == 0:
            if np.any(probs != 0):
                raise ValueError("Dol: empty chain requires the zero vector")
        else:
            _check_simplex(probs, "Dol")

    @classmethod
    def empty(cls, n_classes: int) -> "Dol":
        return cls(np.zeros(n_classes), 0)

    @classmethod
    def from_dsi(cls, dsi: Dsi) -> "Dol":
        return cls(dsi.probs.copy(), dsi.data_size)

    @property
    def n_classes(self) -> int:
        return self.probs.size

    @property
    def is_empty(self) -> bool:
        return self.chain_size == 0


@dataclass
class DiffusionChain:
    """Ordered PUEs that trained one model within a communication round."""

    members: list = field(default_factory=list)
    total_size: int = 0

    def append(self, pue: int, data_size: int) -> None:
        self.members.append(int(pue))
        self.total_size += int(data_size)

    def __contains__(self, pue) -> bool:
        return pue in self.members

    def __len__(self) -> int:
        return len(self.members)

    @property
    def has_duplicates(self) -> bool:
        return len(set(self.members)) != len(self.members)


def uniform(n_classes: int) -> np.ndarray:
    return np.full(n_classes, 1.0 / n_classes)


def dol_update(prev: Dol, dsi: Dsi) -> Dol:
    if prev.n_classes != dsi.n_classes:
        raise ValueError("class count mismatch between DoL and DSI")
    size = prev.chain_size + dsi.data_size
    probs = (prev.chain_size * prev.probs + dsi.data_size * dsi.probs) / size
    # Keep the mixture on the simplex despite rounding.
    probs = np.clip(probs, 0.0, 1.0)
    probs = probs / probs.sum()
    return Dol(probs, size)


def fold_dols(dsis, n_classes: int) -> Dol:
    dol = Dol.empty(n_classes)
    for dsi in dsis:
        dol = dol_update(dol, dsi)
    return dol


def _kld_to_uniform(p: np.ndarray) -> float:
    c = p.size
    nz = p > 0
    return float(np.sum(p[nz] * np.log(p[nz] * c)))


def _jsd_to_uniform(p: np.ndarray) -> float:
    q = uniform(p.size)
    m = 0.5 * (p + q)
    nz = p > 0
    kl_pm = np.sum(p[nz] * np.log2(p[nz] / m[nz]))
    kl_qm = np.sum(q * np.log2(q / m))
    return float(max(0.5 * kl_pm + 0.5 * kl_qm, 0.0))


def distance_to_uniform(probs, metric=DistanceMetric.W1L2) -> float:
    """Distance of a probability vector from uniform under ``metric``.

    W1L2 is the Euclidean norm of ``probs - 1/C``.  KLD uses natural logs
    with ``0 log 0 = 0``; JSD uses base-2 logs, so it lies in [0, 1].
    """
    p = np.asarray(probs, dtype=float)
    metric = DistanceMetric(metric)
    if metric is DistanceMetric.W1L2:
        return float(np.linalg.norm(p - uniform(p.size)))
    if metric is DistanceMetric.KLD:
        return max(_kld_to_uniform(p), 0.0)
    return _jsd_to_uniform(p)


def max_distance(n_classes: int, metric=DistanceMetric.W1L2) -> float:
    """Distance of a one-hot vector from uniform, the largest possible value."""
    one_hot = np.zeros(n_classes)
    one_hot[0] = 1.0
    return distance_to_uniform(one_hot, metric)


def iid_distance(dol: Dol, metric=DistanceMetric.W1L2) -> float:
    if dol.is_empty:
        raise ValueError("IID distance is undefined for an untrained model")
    return distance_to_uniform(dol.probs, metric)


def decrement(prev: Dol, next: Dol, metric=DistanceMetric.W1L2) -> float:
    """Signed drop in IID distance from ``prev`` to ``next``; > 0 is progress."""
    return iid_distance(prev, metric) - iid_distance(next, metric)


def feasible_size_lower_bound(prev: Dol, n_classes: int) -> int:
    """Smallest data size for which the optimal DSI has no negative entry."""
    if prev.is_empty:
        return 1
    bound = np.max(n_classes * prev.chain_size * prev.probs - prev.chain_size)
    # Integer-valued bounds computed from float shares land a hair off.
    return max(1, int(np.ceil(bound - 1e-9)))


def optimal_dsi(prev: Dol, candidate_size: int, n_classes: int) -> Dsi:
    """DSI that moves ``prev`` exactly onto uniform with ``candidate_size`` samples."""
    candidate_size = int(candidate_size)
    lower = feasible_size_lower_bound(prev, n_classes)
    if candidate_size < lower:
        raise InfeasibleOptimalDsi(
            f"infeasible optimal DSI: size {candidate_size} is below the bound {lower}"
        )
    total = prev.chain_size + candidate_size
    probs = (total / n_classes - prev.chain_size * prev.probs) / candidate_size
    if prev.is_empty:
        probs = uniform(n_classes)
    probs = np.clip(probs, 0.0, None)
    return Dsi(probs / probs.sum(), candidate_size)


def closed_form_iid_distance(variation, chain_size: int) -> float:
    """W1L2 IID distance written through the per-class variation vector.

    ``variation[c]`` is the excess of class-``c`` samples over what an
    optimal chain of the same length would hold; only its spread matters.
    """
    if chain_size <= 0:
        raise ValueError("chain_size must be positive")
    phi = np.asarray(variation, dtype=float)
    return float(np.linalg.norm(phi - phi.mean()) / chain_size)


def variation_from_counts(class_counts) -> np.ndarray:
    """Variation vector of a chain whose trained class counts are ``class_counts``.

    Measured against an optimal chain of equal total size, so it sums to 0.
    """
    counts = np.asarray(class_counts, dtype=float)
    return counts - counts.sum() / counts.size


def dol_from_variation(variation, chain_size: int) -> Dol:
    """DoL implied by a variation vector and chain size.

    The optimal-chain size is ``chain_size - sum(variation)``; each class
    holds its uniform share of that plus its own variation.
    """
    phi = np.asarray(variation, dtype=float)
    optimal_size = chain_size - phi.sum()
    probs = (optimal_size / phi.size + phi) / chain_size
    return Dol(probs, chain_size)


def _equal_sizes(n: int, n_parts: int) -> np.ndarray:
    sizes = np.full(n_parts, n // n_parts, dtype=int)
    sizes[: n % n_parts] += 1
    return sizes


def _fit_margins(q: np.ndarray, rows: np.ndarray, cols: np.ndarray,
                 iters: int = 2000, tol: float = 1e-10) -> np.ndarray:
    """Scale ``q`` so its row sums are ``rows`` and column sums are ``cols``."""
    m = q * (rows / q.sum(axis=1))[:, None]
    for _ in range(iters):
        m *= (cols / m.sum(axis=0))[None, :]
        m *= (rows / m.sum(axis=1))[:, None]
        if np.max(np.abs(m.sum(axis=0) - cols)) <= tol * max(cols.max(), 1):
            break
    return m


def _round_margins(m: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Integer matrix near ``m`` with exactly the given integer margins.

    Rows are filled in turn against the column room still left, so the
    margins hold even when ``m`` only approximately fits them.
    """
    out = np.zeros(m.shape, dtype=int)
    room = cols.astype(int).copy()
    for i in range(m.shape[0]):
        need = int(rows[i])
        target = np.minimum(m[i], room)
        short = need - target.sum()
        if short > 0:
            spare = room - target
            target = target + short * spare / spare.sum()
        take = np.minimum(np.floor(target).astype(int), room)
        frac = target - take
        for c in np.argsort(-frac, kind="stable"):
            if take.sum() >= need:
                break
            if take[c] < room[c]:
                take[c] += 1
        # Totals agree, so any leftover fits in columns that still have room.
        while take.sum() < need:
            take[int(np.flatnonzero(take < room)[0])] += 1
        while take.sum() > need:
            take[int(np.argmax(np.where(take > 0, take - target, -np.inf)))] -= 1
        out[i] = take
        room -= take
    return out


def _draw_partition(by_class, n_classes, sizes, alpha, rng):
    supply = np.array([len(ix) for ix in by_class], dtype=int)
    present = supply > 0
    shares = rng.dirichlet(np.full(n_classes, alpha), size=len(sizes))
    # Small alpha can underflow whole entries to zero; keep the scaling defined.
    shares = np.maximum(shares, 1e-300) * present
    counts = np.zeros((len(sizes), n_classes), dtype=int)
    fitted = _fit_margins(shares[:, present], sizes.astype(float), supply[present].astype(float))
    counts[:, present] = _round_margins(fitted, sizes, supply[present])
    cursor = np.zeros(n_classes, dtype=int)
    parts = []
    for take in counts:
        idx = [by_class[c][cursor[c] : cursor[c] + take[c]] for c in range(n_classes)]
        cursor += take
        parts.append(np.sort(np.concatenate(idx)).astype(int))
    return parts


def dirichlet_partition(labels, n_parts: int, alpha: float, rng, n_classes=None):
    """Split sample indices into ``n_parts`` label-skewed, equal-size parts.

    Each part draws class shares from Dir(alpha * 1_C).  The share matrix is
    rescaled so rows match the part sizes and columns the class supplies,
    then rounded to integers with the same totals.  Parts are disjoint and
    cover every index, and the drawn skew is spread over all parts rather
    than left to whichever part is drawn last.

    Returns a list of ``(indices, Dsi)`` pairs.
    """
    labels = np.asarray(labels, dtype=int)
    if labels.size == 0:
        raise ValueError("labels must be non-empty")
    if n_parts < 1:
        raise ValueError("n_parts must be >= 1")
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    n_classes = int(n_classes or labels.max() + 1)
    sizes = _equal_sizes(labels.size, n_parts)
    if np.any(sizes == 0):
        raise DegeneratePartition("degenerate partition: fewer samples than parts")
    for _ in range(MAX_PARTITION_RETRIES):
        by_class = [rng.permutation(np.flatnonzero(labels == c)) for c in range(n_classes)]
        parts = _draw_partition(by_class, n_classes, sizes, alpha, rng)
        if all(p.size > 0 for p in parts):
            return [(p, Dsi.from_labels(labels[p], n_classes)) for p in parts]
    raise DegeneratePartition("degenerate partition: empty part after retries")


def stratified_partition(labels, n_parts: int, n_classes=None):
    """Deal each class round-robin so every part's DSI is as uniform as possible."""
    labels = np.asarray(labels, dtype=int)
    n_classes = int(n_classes or labels.max() + 1)
    buckets = [[] for _ in range(n_parts)]
    for c in range(n_classes):
        for j, ix in enumerate(np.flatnonzero(labels == c)):
            buckets[j % n_parts].append(ix)
    parts = [np.sort(np.asarray(b, dtype=int)) for b in buckets]
    if any(p.size == 0 for p in parts):
        raise DegeneratePartition("degenerate partition: fewer samples than parts")
    return [(p, Dsi.from_labels(labels[p], n_classes)) for p in parts]
