"""Activation-distance evidence for (concept, part) pairs.

For each pair we histogram the minimum concept distance over the pair's
support neighborhood, conditioned on the part being present (target) or
absent (reference).  The log ratio of the two histograms is the evidence a
concept activation contributes when voting for the part.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass

import numpy as np

from .concepts import ConceptBank
from .errors import FormatError, TrainingDataError
from .features import AnnotationSet, FeatureMap
from .lattice import Point, map_down
from .spatial import SpatialModel

logger = logging.getLogger(__name__)

DEFAULT_BINS = 100
DEFAULT_EPSILON = 1e-3
R_MAX = 2.0  # largest possible distance between unit vectors


@dataclass
class EvidenceEntry:
    """Target/reference histograms and their log-likelihood-ratio table.

    ``f_plus`` and ``f_minus`` are per-bin probability masses over
    [0, R_MAX] that each sum to 1; ``lambda_table[b]`` is exactly
    ``log((f_plus[b] + epsilon) / (f_minus[b] + epsilon))``.
    """

    f_plus: np.ndarray
    f_minus: np.ndarray
    epsilon: float
    lambda_table: np.ndarray
    n_pos: int = 0
    n_neg: int = 0

    @property
    def bins(self) -> int:
        return len(self.f_plus)

    @property
    def bin_width(self) -> float:
        return R_MAX / self.bins

    def quantile_r(self, q: float) -> float:
        """Upper edge of the first bin where the target CDF reaches ``q``."""
        cdf = np.cumsum(self.f_plus)
        b = int(np.searchsorted(cdf, q - 1e-12))
        b = min(b, self.bins - 1)
        return (b + 1) * self.bin_width

    def median_r(self) -> float:
        """Center of the bin where the target CDF reaches one half."""
        cdf = np.cumsum(self.f_plus)
        b = min(int(np.searchsorted(cdf, 0.5 - 1e-12)), self.bins - 1)
        return (b + 0.5) * self.bin_width


def bin_index(r, bins: int):
    """Bin containing distance ``r``; values past R_MAX clamp to the last bin."""
    idx = np.floor(np.asarray(r, dtype=np.float64) * bins / R_MAX).astype(np.int64)
    return np.clip(idx, 0, bins - 1)


def estimate_histograms(
    samples_pos: np.ndarray,
    samples_neg: np.ndarray,
    bins: int = DEFAULT_BINS,
    epsilon: float = DEFAULT_EPSILON,
) -> EvidenceEntry:
    """Build an evidence entry from raw min-distance samples."""
    samples_pos = np.asarray(samples_pos, dtype=np.float64)
    samples_neg = np.asarray(samples_neg, dtype=np.float64)
    if samples_pos.size == 0:
        raise TrainingDataError("no positive distance samples")
    if samples_neg.size == 0:
        raise TrainingDataError("no negative distance samples")
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    f_plus = np.bincount(bin_index(samples_pos, bins), minlength=bins) / samples_pos.size
    f_minus = np.bincount(bin_index(samples_neg, bins), minlength=bins) / samples_neg.size
    lam = np.log((f_plus + epsilon) / (f_minus + epsilon))
    return EvidenceEntry(
        f_plus=f_plus,
        f_minus=f_minus,
        epsilon=epsilon,
        lambda_table=lam,
        n_pos=int(samples_pos.size),
        n_neg=int(samples_neg.size),
    )


def lambda_of(entry: EvidenceEntry, r: float) -> float:
    """Evidence at distance ``r`` (piecewise constant per bin)."""
    if r < 0:
        raise ValueError("distance must be nonnegative")
    return float(entry.lambda_table[int(bin_index(r, entry.bins))])


def lambda_lookup(entry: EvidenceEntry, r: np.ndarray) -> np.ndarray:
    return entry.lambda_table[bin_index(r, entry.bins)]


def support_min_distance(
    fmap: FeatureMap, q: Point, support_offsets: list[tuple[int, int]], center: np.ndarray
) -> float | None:
    """Min distance to ``center`` over the support cells around ``q``.

    Returns None when every support offset lands outside the grid.
    """
    q4 = map_down(q, fmap.spec)
    feats = []
    for dx, dy in support_offsets:
        px, py = q4[0] + dx, q4[1] + dy
        if fmap.spec.contains_cell((px, py)):
            feats.append(fmap.data[py, px])
    if not feats:
        return None
    f = np.stack(feats).astype(np.float64)
    d2 = np.maximum(0.0, 2.0 - 2.0 * (f @ np.asarray(center, dtype=np.float64)))
    return float(np.sqrt(d2.min()))


@dataclass
class EvidenceModel:
    bins: int
    epsilon: float
    parts: list[str]
    entries: dict[tuple[int, str], EvidenceEntry]

    def entry(self, concept: int, part: str) -> EvidenceEntry:
        return self.entries[(concept, part)]


def _window_min_distances(
    dist: np.ndarray, spec, q: Point, supports: np.ndarray, window_radius: int
) -> np.ndarray:
    """Min distance per concept over each concept's support cells around q.

    ``dist`` is the (n_cells, K) distance matrix of the image, ``supports``
    a (K, W*W) boolean stack of the per-concept offset supports.  Offsets
    landing outside the grid are ignored; a concept whose support is fully
    outside yields +inf.
    """
    q4 = map_down(q, spec)
    r = window_radius
    ox, oy = np.meshgrid(np.arange(-r, r + 1), np.arange(-r, r + 1))
    px = q4[0] + ox.ravel()
    py = q4[1] + oy.ravel()
    inside = (px >= 0) & (px < spec.grid_width) & (py >= 0) & (py < spec.grid_height)
    flat = np.where(inside, py * spec.grid_width + px, 0)
    window = dist[flat]  # (W*W, K)
    usable = supports & inside[None, :]
    vals = np.where(usable, window.T, np.inf)
    return vals.min(axis=1)


def fit_evidence_model(
    maps: dict[str, FeatureMap],
    annotations: AnnotationSet,
    bank: ConceptBank,
    spatial: SpatialModel,
    bins: int = DEFAULT_BINS,
    epsilon: float = DEFAULT_EPSILON,
) -> EvidenceModel:
    """Estimate target/reference histograms for every (concept, part) pair.

    Positives of part s contribute min-distances over the pair's support;
    the image's negative points contribute the reference samples through
    the same support.  One distance matrix per image serves every pair.
    """
    parts = annotations.part_names()
    k = len(bank)
    supports = {
        s: np.stack([spatial.entry(v, s).support.ravel() for v in range(k)]) for s in parts
    }
    pos: dict[tuple[int, str], list[float]] = {}
    neg: dict[tuple[int, str], list[float]] = {}

    for img in annotations.images:
        fmap = maps[img.image_id]
        dist = np.sqrt(
            np.maximum(0.0, 2.0 - 2.0 * (fmap.vectors() @ bank.centers.T))
        )
        for part, q in img.positives:
            mins = _window_min_distances(dist, fmap.spec, q, supports[part], spatial.window_radius)
            for v in range(k):
                if np.isfinite(mins[v]):
                    pos.setdefault((v, part), []).append(float(mins[v]))
        for q in img.negatives:
            for s in parts:
                mins = _window_min_distances(dist, fmap.spec, q, supports[s], spatial.window_radius)
                for v in range(k):
                    if np.isfinite(mins[v]):
                        neg.setdefault((v, s), []).append(float(mins[v]))

    entries = {}
    for s in parts:
        for v in range(k):
            p = pos.get((v, s), [])
            n = neg.get((v, s), [])
            if not p or not n:
                side = "positive" if not p else "negative"
                raise TrainingDataError(f"no {side} samples for concept {v}, part {s}")
            entries[(v, s)] = estimate_histograms(np.array(p), np.array(n), bins, epsilon)
    return EvidenceModel(bins=bins, epsilon=epsilon, parts=parts, entries=entries)


# ---------------------------------------------------------------------------
# Voter selection
# ---------------------------------------------------------------------------

DEFAULT_VOTERS_PER_PART = 45


@dataclass
class VoterSet:
    """Which concepts vote for each part, in selection order."""

    voters: dict[str, list[int]]
    k: int


def select_voters(evidence: EvidenceModel, k: int = DEFAULT_VOTERS_PER_PART) -> VoterSet:
    """Pick the k concepts per part whose target histograms peak at small r.

    Ranking is by ascending target-median distance, then by descending
    total positive evidence in the ratio table, then by concept index.
    Parts with fewer than k candidates keep them all (with a warning).
    """
    concepts = sorted({v for v, _ in evidence.entries})
    voters = {}
    for s in evidence.parts:
        scored = []
        for v in concepts:
            e = evidence.entry(v, s)
            pos_mass = float(np.maximum(e.lambda_table, 0.0).sum())
            scored.append((e.median_r(), -pos_mass, v))
        scored.sort()
        if len(scored) < k:
            logger.warning("part %s has %d candidate concepts, fewer than k=%d", s, len(scored), k)
        voters[s] = [v for _, _, v in scored[:k]]
    return VoterSet(voters=voters, k=k)


# ---------------------------------------------------------------------------
# Serialization: one-line JSON header, then f32 blocks (f_plus, f_minus,
# lambda) per pair in header order.  Lambda tables are recomputed from the
# stored histograms on load so the table/histogram identity is exact.
# ---------------------------------------------------------------------------


def save_evidence_model(model: EvidenceModel, path) -> None:
    pairs = sorted(model.entries, key=lambda vs: (vs[1], vs[0]))
    header = {
        "bins": model.bins,
        "epsilon": model.epsilon,
        "parts": model.parts,
        "pairs": [
            {
                "concept": v,
                "part": s,
                "n_pos": model.entries[(v, s)].n_pos,
                "n_neg": model.entries[(v, s)].n_neg,
            }
            for v, s in pairs
        ],
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode())
        fh.write(b"\n")
        for v, s in pairs:
            e = model.entries[(v, s)]
            for block in (e.f_plus, e.f_minus, e.lambda_table):
                fh.write(np.ascontiguousarray(block, dtype="<f4").tobytes())


def load_evidence_model(path) -> EvidenceModel:
    with open(path, "rb") as fh:
        line = fh.readline()
        try:
            header = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"bad evidence header: {exc}", 0) from exc
        blob = fh.read()
    bins = int(header["bins"])
    epsilon = float(header["epsilon"])
    pairs = header["pairs"]
    expected = len(pairs) * 3 * bins * 4
    if len(blob) != expected:
        raise FormatError(f"evidence block holds {len(blob)} bytes, header implies {expected}", len(line))
    entries = {}
    arr = np.frombuffer(blob, dtype="<f4").reshape(len(pairs), 3, bins).astype(np.float64)
    for i, rec in enumerate(pairs):
        f_plus, f_minus = arr[i, 0], arr[i, 1]
        entries[(int(rec["concept"]), str(rec["part"]))] = EvidenceEntry(
            f_plus=f_plus,
            f_minus=f_minus,
            epsilon=epsilon,
            lambda_table=np.log((f_plus + epsilon) / (f_minus + epsilon)),
            n_pos=int(rec["n_pos"]),
            n_neg=int(rec["n_neg"]),
        )
    return EvidenceModel(bins=bins, epsilon=epsilon, parts=list(header["parts"]), entries=entries)


def save_voters(voters: VoterSet, path) -> None:
    with open(path, "w") as fh:
        json.dump({"k": voters.k, "voters": voters.voters}, fh, sort_keys=True)
        fh.write("\n")


def load_voters(path) -> VoterSet:
    with open(path) as fh:
        doc = json.load(fh)
    return VoterSet(voters={s: [int(v) for v in lst] for s, lst in doc["voters"].items()}, k=int(doc["k"]))
