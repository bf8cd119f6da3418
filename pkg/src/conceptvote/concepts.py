"""Learning concept centers on the unit hypersphere.

Two fitting routes are provided: hard-assignment K-means (with ++-style
seeding and greedy Davies-Bouldin merging) and a soft-assignment mixture of
directional distributions fit by EM.  Both produce a :class:`ConceptBank` of
unit-norm centers.  The module also offers sparse binary encoding of feature
maps against a bank.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import EmptyClusterError, FormatError
from .features import FeatureMap

logger = logging.getLogger(__name__)

K_PRESETS = (64, 128, 256, 512)
DEFAULT_K = 256
DEFAULT_ETA = 30.0
DEFAULT_SPARSE_THRESHOLD = 0.7


@dataclass
class ConceptBank:
    """Unit-norm concept centers plus how they were learned."""

    centers: np.ndarray
    eta: float = DEFAULT_ETA
    method: str = "kmeans"
    k_init: int = 0
    merge_log: list = field(default_factory=list)

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=np.float64)
        if self.centers.ndim != 2:
            raise ValueError("centers must be a (K, D) array")

    def __len__(self) -> int:
        return self.centers.shape[0]

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    def validate(self) -> None:
        norms = np.linalg.norm(self.centers, axis=1)
        if not np.all(np.abs(norms - 1.0) <= 1e-6):
            raise ValueError("concept centers must be unit norm")
        if len(self) > 1:
            gram = self.centers @ self.centers.T
            np.fill_diagonal(gram, -np.inf)
            if gram.max() >= 1.0 - 1e-9:
                raise ValueError("two concept centers coincide")


@dataclass
class Assignment:
    """Hard labels and/or soft responsibilities of points to concepts."""

    hard: np.ndarray | None = None
    soft: np.ndarray | None = None


class KMeansResult(NamedTuple):
    bank: ConceptBank
    assignment: Assignment
    cost: float
    cost_trace: list[float]


class VmfResult(NamedTuple):
    bank: ConceptBank
    assignment: Assignment
    energy_trace: list[float]


class MergeResult(NamedTuple):
    bank: ConceptBank
    assignment: Assignment


def unit_sq_distances(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances between unit vectors, via 2(1 - dot)."""
    return np.maximum(0.0, 2.0 - 2.0 * (points @ centers.T))


def _normalize_rows(m: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    return m / norms


def _kmeanspp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    centers = np.empty((k, points.shape[1]))
    centers[0] = points[int(rng.integers(n))]
    d2 = unit_sq_distances(points, centers[:1]).ravel()
    for i in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centers[i] = points[idx]
        d2 = np.minimum(d2, unit_sq_distances(points, centers[i : i + 1]).ravel())
    return centers


def _spherical_cost(points, centers, labels) -> float:
    return float(np.sum(2.0 - 2.0 * np.einsum("ij,ij->i", points, centers[labels])))


def kmeans_fit(
    points: np.ndarray,
    k: int,
    seed: int,
    max_iters: int = 100,
    init_centers: np.ndarray | None = None,
) -> KMeansResult:
    """Hard-assignment clustering of unit vectors with unit-norm centers.

    Alternates nearest-center assignment with normalized-mean updates until
    the assignment stops changing.  The recorded cost trace (total squared
    distance, evaluated after each assignment step) is nonincreasing because
    re-normalizing a mean can only increase its dot product with the cluster
    members.  Empty clusters are re-seeded at the point farthest from their
    previous center.
    """
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if k < 1:
        raise ValueError("k must be >= 1")
    if n < k:
        raise ValueError(f"need at least k={k} points, got {n}")
    rng = np.random.default_rng(seed)
    if init_centers is not None:
        centers = _normalize_rows(np.array(init_centers, dtype=np.float64))
        if centers.shape != (k, points.shape[1]):
            raise ValueError("init_centers shape must be (k, dim)")
    else:
        centers = _kmeanspp_init(points, k, rng)

    labels = np.full(n, -1, dtype=np.int64)
    trace: list[float] = []
    for _ in range(max_iters):
        new_labels = np.argmax(points @ centers.T, axis=1)
        trace.append(_spherical_cost(points, centers, new_labels))
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for v in range(k):
            members = points[labels == v]
            if len(members) == 0:
                far = int(np.argmin(points @ centers[v]))
                logger.info("re-seeding empty cluster %d at point %d", v, far)
                centers[v] = points[far]
            else:
                centers[v] = members.mean(axis=0)
        centers = _normalize_rows(centers)

    bank = ConceptBank(centers=centers, method="kmeans", k_init=k)
    return KMeansResult(bank, Assignment(hard=labels), trace[-1], trace)


def davies_bouldin(bank: ConceptBank, assignment: Assignment, points: np.ndarray) -> np.ndarray:
    """Per-cluster compactness/separation index.

    For cluster k, DB(k) = max over m != k of (s_k + s_m) / ||c_k - c_m||
    where s_k is the mean squared distance of cluster k's members to its
    center.
    """
    labels = assignment.hard
    if labels is None:
        raise ValueError("davies_bouldin needs a hard assignment")
    k = len(bank)
    if k < 2:
        raise EmptyClusterError("index undefined for fewer than 2 clusters")
    sigma = np.empty(k)
    for v in range(k):
        members = points[labels == v]
        if len(members) == 0:
            raise EmptyClusterError(f"cluster {v} is empty; index undefined")
        sigma[v] = unit_sq_distances(members, bank.centers[v : v + 1]).mean()
    dist = np.sqrt(unit_sq_distances(bank.centers, bank.centers))
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = (sigma[:, None] + sigma[None, :]) / dist
    ratio[dist == 0.0] = np.inf  # coincident centers: no separation at all
    np.fill_diagonal(ratio, -np.inf)
    return ratio.max(axis=1)


def merge_by_db(
    bank: ConceptBank,
    assignment: Assignment,
    points: np.ndarray,
    threshold: float,
) -> MergeResult:
    """Greedily merge the worst cluster into its nearest neighbor.

    Repeats while the largest Davies-Bouldin value exceeds ``threshold`` and
    more than one cluster remains.  The merged center is the size-weighted
    normalized mean of the two centers; members are pooled without
    reassignment.  Every merge is appended to the bank's merge log.
    """
    labels = np.array(assignment.hard)
    centers = bank.centers.copy()
    counts = np.bincount(labels, minlength=len(bank)).astype(np.float64)
    log = list(bank.merge_log)

    while len(centers) > 1:
        db = davies_bouldin(
            ConceptBank(centers=centers, eta=bank.eta), Assignment(hard=labels), points
        )
        worst = int(np.argmax(db))
        if db[worst] <= threshold:
            break
        gram = centers @ centers.T
        np.fill_diagonal(gram, -np.inf)
        partner = int(np.argmax(gram[worst]))
        a, b = min(worst, partner), max(worst, partner)
        merged = counts[a] * centers[a] + counts[b] * centers[b]
        norm = np.linalg.norm(merged)
        centers[a] = merged / norm if norm > 0 else centers[a]
        counts[a] += counts[b]
        log.append({"kept": a, "removed": b, "db": float(db[worst])})
        centers = np.delete(centers, b, axis=0)
        counts = np.delete(counts, b)
        labels = np.where(labels == b, a, labels)
        labels = np.where(labels > b, labels - 1, labels)

    merged_bank = ConceptBank(
        centers=centers, eta=bank.eta, method=bank.method, k_init=bank.k_init, merge_log=log
    )
    return MergeResult(merged_bank, Assignment(hard=labels))


# ---------------------------------------------------------------------------
# Soft-assignment mixture fit
# ---------------------------------------------------------------------------


def vmf_e_step(points: np.ndarray, bank: ConceptBank) -> Assignment:
    """Soft assignment q = softmax(eta * <point, center>) per point.

    Computed with max-subtraction so large eta cannot overflow; each row
    sums to exactly 1 up to float rounding.
    """
    logits = bank.eta * (points @ bank.centers.T)
    logits -= logits.max(axis=1, keepdims=True)
    q = np.exp(logits)
    q /= q.sum(axis=1, keepdims=True)
    return Assignment(soft=q)


def vmf_m_step(
    points: np.ndarray,
    assignment: Assignment,
    prev_centers: np.ndarray | None = None,
) -> np.ndarray:
    """Responsibility-weighted normalized mean per concept.

    A concept with zero total responsibility is re-seeded at the point
    farthest from its previous center (requires ``prev_centers``).
    """
    q = assignment.soft
    if q is None:
        raise ValueError("vmf_m_step needs a soft assignment")
    totals = q.sum(axis=0)
    centers = q.T @ points
    for v in np.nonzero(totals == 0.0)[0]:
        if prev_centers is None:
            raise EmptyClusterError(f"concept {v} has zero responsibility")
        far = int(np.argmin(points @ prev_centers[v]))
        logger.info("re-seeding zero-responsibility concept %d at point %d", v, far)
        centers[v] = points[far]
    return _normalize_rows(centers)


def free_energy(points: np.ndarray, q: np.ndarray, centers: np.ndarray, eta: float) -> float:
    """Variational objective both EM half-steps decrease.

    Expected negative affinity minus assignment entropy; the distribution's
    normalizer depends only on the fixed eta, so it is dropped as a
    constant.
    """
    affinity = eta * (points @ centers.T)
    with np.errstate(divide="ignore", invalid="ignore"):
        ent = np.where(q > 0.0, q * np.log(q), 0.0)
    return float(np.sum(q * (-affinity)) + np.sum(ent))


def vmf_fit(
    points: np.ndarray,
    k: int,
    eta: float,
    seed: int,
    max_iters: int = 100,
    tol: float = 1e-6,
) -> VmfResult:
    """EM fit of a k-component directional mixture with shared concentration.

    Records the free energy after every half-step; the trace is
    nonincreasing to rounding.  Stops when the relative improvement over a
    full iteration drops below ``tol``.
    """
    points = np.asarray(points, dtype=np.float64)
    if k < 1:
        raise ValueError("k must be >= 1")
    if eta <= 0:
        raise ValueError("eta must be positive")
    rng = np.random.default_rng(seed)
    centers = _kmeanspp_init(points, k, rng)
    trace: list[float] = []
    assignment = Assignment()
    for _ in range(max_iters):
        assignment = vmf_e_step(points, ConceptBank(centers=centers, eta=eta))
        trace.append(free_energy(points, assignment.soft, centers, eta))
        centers = vmf_m_step(points, assignment, prev_centers=centers)
        trace.append(free_energy(points, assignment.soft, centers, eta))
        if len(trace) >= 4:
            prev, cur = trace[-4], trace[-2]
            if abs(prev - cur) <= tol * max(1.0, abs(prev)):
                break
    bank = ConceptBank(centers=centers, eta=eta, method="vmf", k_init=k)
    return VmfResult(bank, assignment, trace)


def mixture_cost(points: np.ndarray, bank: ConceptBank) -> float:
    """Summed per-point clustering cost of the soft-assignment view.

    Per point: -sum_v q_v * log(sum_u exp(eta * <point, center_u>)), with q
    the softmax over the same affinities; evaluated with max-subtraction.
    """
    logits = bank.eta * (points @ bank.centers.T)
    m = logits.max(axis=1)
    lse = m + np.log(np.exp(logits - m[:, None]).sum(axis=1))
    q = np.exp(logits - m[:, None])
    q /= q.sum(axis=1, keepdims=True)
    return float(-np.sum(q * lse[:, None]))


# ---------------------------------------------------------------------------
# Sparse encoding
# ---------------------------------------------------------------------------


def encode_sparse(
    fmap: FeatureMap, bank: ConceptBank, threshold: float = DEFAULT_SPARSE_THRESHOLD
) -> tuple[np.ndarray, float]:
    """Binary code per cell: bit v set iff distance to center v < threshold.

    Returns the (h, w, K) boolean grid and the mean number of active
    concepts per cell.
    """
    vecs = fmap.vectors()
    dist = np.sqrt(unit_sq_distances(vecs, bank.centers))
    codes = dist < threshold
    mean_active = float(codes.sum(axis=1).mean()) if len(vecs) else 0.0
    shape = (fmap.spec.grid_height, fmap.spec.grid_width, len(bank))
    return codes.reshape(shape), mean_active


@dataclass
class ActivationHistogram:
    """Distribution of per-cell active-concept counts across thresholds.

    ``counts[t]`` holds how many cells activate 0, 1, 2, or 3+ concepts at
    ``thresholds[t]``.  ``crossing`` is the smallest threshold whose modal
    count is at least 1, or None if no threshold qualifies.
    """

    thresholds: list[float]
    counts: np.ndarray
    crossing: float | None


def activation_histogram(
    maps: list[FeatureMap], bank: ConceptBank, thresholds: list[float]
) -> ActivationHistogram:
    if not thresholds:
        raise ValueError("thresholds must be nonempty")
    dists = [np.sqrt(unit_sq_distances(m.vectors(), bank.centers)) for m in maps]
    counts = np.zeros((len(thresholds), 4), dtype=np.int64)
    crossing = None
    for t, thr in enumerate(thresholds):
        active = np.concatenate([np.minimum((d < thr).sum(axis=1), 3) for d in dists])
        counts[t] = np.bincount(active, minlength=4)
        if crossing is None and counts[t].argmax() >= 1:
            crossing = float(thr)
    return ActivationHistogram(list(map(float, thresholds)), counts, crossing)


# ---------------------------------------------------------------------------
# Serialization: one-line JSON header, then raw little-endian f32 centers.
# ---------------------------------------------------------------------------


def save_bank(bank: ConceptBank, path) -> None:
    header = {
        "method": bank.method,
        "K": len(bank),
        "eta": bank.eta,
        "D": bank.dim,
        "merge_log": bank.merge_log,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode())
        fh.write(b"\n")
        fh.write(np.ascontiguousarray(bank.centers, dtype="<f4").tobytes())


def load_bank(path) -> ConceptBank:
    with open(path, "rb") as fh:
        line = fh.readline()
        try:
            header = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"bad bank header: {exc}", 0) from exc
        blob = fh.read()
    k, d = int(header["K"]), int(header["D"])
    if len(blob) != k * d * 4:
        raise FormatError(f"center block holds {len(blob)} bytes, header implies {k * d * 4}", len(line))
    centers = np.frombuffer(blob, dtype="<f4").reshape(k, d).astype(np.float64)
    return ConceptBank(
        centers=centers,
        eta=float(header["eta"]),
        method=str(header["method"]),
        k_init=int(header.get("K", k)),
        merge_log=list(header.get("merge_log", [])),
    )
