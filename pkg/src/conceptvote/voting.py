"""Compositional voting: concepts cast spatially weighted evidence for parts.

Each grid cell whose concept evidence is strong enough casts votes at the
part-center positions implied by the concept's learned offsets.  A vote
blends the evidence term with a spatial penalty measuring how typical the
offset is.  Negative votes are clamped to zero when scoring ("switched
off"), so occluded or missing evidence never vetoes a detection supported
elsewhere.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .concepts import ConceptBank, unit_sq_distances
from .errors import ConfigError
from .features import FeatureMap
from .lattice import LatticeSpec, map_up
from .likelihood import EvidenceEntry, EvidenceModel, VoterSet, lambda_lookup
from .spatial import SpatialEntry, SpatialModel

DEFAULT_BETA = 0.7
DEFAULT_NMS_RADIUS_PX = 50.0
DEFAULT_FN_PERCENTILE = 0.95
DEFAULT_SCALE_SET = (0.6, 0.8, 1.0, 1.25, 1.67)


class VotingModels(NamedTuple):
    """Everything the detector needs, as produced by training."""

    bank: ConceptBank
    spatial: SpatialModel
    evidence: EvidenceModel
    voters: VoterSet


@dataclass
class Detection:
    part: str
    x: int
    y: int
    scale: float
    score: float

    def __post_init__(self):
        if self.score < 0:
            raise ValueError("detection scores are sums of clamped votes and cannot be negative")


@dataclass
class VoteField:
    """Per-concept vote grids for one part over the feature grid.

    ``votes[i]`` holds concept ``concepts[i]``'s accumulated vote per cell
    (every cast it made there, summed in fixed offset order); cells it
    never voted at have ``valid[i]`` False and count as zero when scoring.
    """

    part: str
    concepts: list[int]
    votes: np.ndarray
    valid: np.ndarray


def distance_grids(fmap: FeatureMap, bank: ConceptBank) -> np.ndarray:
    """(h, w, K) distances from every cell to every concept center."""
    h, w = fmap.spec.grid_height, fmap.spec.grid_width
    return np.sqrt(unit_sq_distances(fmap.vectors(), bank.centers)).reshape(h, w, len(bank))


def source_evidence(
    fmap: FeatureMap,
    center: np.ndarray,
    entry: EvidenceEntry,
    fn_percentile: float = DEFAULT_FN_PERCENTILE,
    dist: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-cell distance, evidence value, and the kept-source mask.

    Cells whose distance exceeds the target distribution's
    ``fn_percentile`` quantile are unlikely activations and are dropped
    before voting.  ``dist`` may pass a precomputed distance grid.
    """
    if dist is None:
        h, w = fmap.spec.grid_height, fmap.spec.grid_width
        dist = np.sqrt(unit_sq_distances(fmap.vectors(), center[None, :])).reshape(h, w)
    lam = lambda_lookup(entry, dist)
    keep = dist <= entry.quantile_r(fn_percentile)
    return dist, lam, keep


def vote_map(
    fmap: FeatureMap,
    part: str,
    voter_ids: list[int],
    bank: ConceptBank,
    spatial: SpatialModel,
    evidence: EvidenceModel,
    beta: float = DEFAULT_BETA,
    fn_percentile: float = DEFAULT_FN_PERCENTILE,
    dists: np.ndarray | None = None,
) -> VoteField:
    """Accumulate every voter's cast votes per cell for ``part``.

    A kept source cell p with learned offset d casts, at target p - d (the
    part center it implies), the vote
    ``(1 - beta) * evidence(r_p) + beta * log(freq(d) / uniform)``.
    Casts from one concept landing on one cell add up, in fixed row-major
    offset order, so the result is independent of any parallel schedule
    that preserves that reduction order.  Offsets with zero frequency
    would carry a -inf spatial term and are excluded up front (the clamp
    would discard them anyway).  ``dists`` may pass the precomputed grid
    from :func:`distance_grids`.
    """
    if not 0.0 <= beta <= 1.0:
        raise ConfigError(f"beta must lie in [0, 1], got {beta}")
    h, w = fmap.spec.grid_height, fmap.spec.grid_width
    if dists is None:
        dists = distance_grids(fmap, bank)
    votes = np.zeros((len(voter_ids), h, w))
    valid = np.zeros((len(voter_ids), h, w), dtype=bool)
    for i, v in enumerate(voter_ids):
        sp = spatial.entry(v, part)
        ev = evidence.entry(v, part)
        _, lam, keep = source_evidence(fmap, bank.centers[v], ev, fn_percentile, dist=dists[:, :, v])
        if not keep.any():
            continue
        evidence_term = (1.0 - beta) * lam
        r = sp.window_radius
        target = votes[i]
        hit = valid[i]
        for dx, dy in sp.support_offsets():
            freq = sp.freq[dy + r, dx + r]
            term = beta * np.log(freq / sp.uniform_level)
            ty0, ty1 = max(0, -dy), min(h, h - dy)
            tx0, tx1 = max(0, -dx), min(w, w - dx)
            if ty1 <= ty0 or tx1 <= tx0:
                continue
            src_keep = keep[ty0 + dy : ty1 + dy, tx0 + dx : tx1 + dx]
            cast = np.where(src_keep, evidence_term[ty0 + dy : ty1 + dy, tx0 + dx : tx1 + dx] + term, 0.0)
            target[ty0:ty1, tx0:tx1] += cast
            hit[ty0:ty1, tx0:tx1] |= src_keep
    return VoteField(part=part, concepts=list(voter_ids), votes=votes, valid=valid)


def score_map(field: VoteField) -> tuple[np.ndarray, np.ndarray]:
    """Clamped sum of votes per cell, plus the per-concept switch-off mask.

    A concept is "off" at a cell when it cast no vote there or its vote was
    nonpositive; off votes contribute exactly zero.
    """
    contrib = np.where(field.valid, np.maximum(field.votes, 0.0), 0.0)
    score = contrib.sum(axis=0)
    off = ~field.valid | (field.votes <= 0.0)
    return score, off


def nms_grid(
    score: np.ndarray,
    spec: LatticeSpec,
    part: str,
    radius_px: float = DEFAULT_NMS_RADIUS_PX,
    score_threshold: float = 0.0,
    scale_tag: float | None = None,
) -> list[Detection]:
    """Greedy peak picking on a score grid.

    Repeatedly emits the highest remaining cell above the threshold and
    suppresses every cell within ``radius_px`` of its pixel position.
    Ties break lexicographically on (y, x).
    """
    if radius_px <= 0:
        raise ValueError("radius must be positive")
    ys, xs = np.nonzero(score > score_threshold)
    if len(ys) == 0:
        return []
    vals = score[ys, xs]
    order = np.lexsort((xs, ys, -vals))
    px = spec.offset + spec.stride * xs[order]
    py = spec.offset + spec.stride * ys[order]
    vals = vals[order]
    alive = np.ones(len(vals), dtype=bool)
    out = []
    r2 = radius_px * radius_px
    for i in range(len(vals)):
        if not alive[i]:
            continue
        out.append(
            Detection(
                part=part,
                x=int(px[i]),
                y=int(py[i]),
                scale=1.0 if scale_tag is None else float(scale_tag),
                score=float(vals[i]),
            )
        )
        alive &= (px - px[i]) ** 2 + (py - py[i]) ** 2 > r2
    return out


def nms_detections(dets: list[Detection], radius_px: float = DEFAULT_NMS_RADIUS_PX) -> list[Detection]:
    """Greedy suppression over a pooled detection list (same part).

    Positions are compared as given, so callers pooling across scales must
    first express centers in a common coordinate frame.
    """
    if radius_px <= 0:
        raise ValueError("radius must be positive")
    ranked = sorted(dets, key=lambda d: (-d.score, d.scale, d.y, d.x))
    kept: list[Detection] = []
    r2 = radius_px * radius_px
    for d in ranked:
        if all((d.x - k.x) ** 2 + (d.y - k.y) ** 2 > r2 for k in kept):
            kept.append(d)
    return kept


def detect(
    fmap: FeatureMap,
    models: VotingModels,
    parts: list[str] | None = None,
    beta: float = DEFAULT_BETA,
    nms_radius_px: float = DEFAULT_NMS_RADIUS_PX,
    score_threshold: float = 0.0,
    fn_percentile: float = DEFAULT_FN_PERCENTILE,
) -> list[Detection]:
    """Vote, score, and peak-pick every requested part on one feature map."""
    parts = list(models.voters.voters) if parts is None else parts
    dists = distance_grids(fmap, models.bank)
    out = []
    for part in parts:
        if part not in models.voters.voters:
            raise ConfigError(f"no fitted voters for part {part!r}")
        field = vote_map(
            fmap, part, models.voters.voters[part], models.bank, models.spatial,
            models.evidence, beta, fn_percentile, dists=dists,
        )
        score, _ = score_map(field)
        out.extend(
            nms_grid(score, fmap.spec, part, nms_radius_px, score_threshold, fmap.scale_tag)
        )
    return sorted(out, key=lambda d: (-d.score, d.part, d.y, d.x))


def multi_scale_detect(
    maps: list[FeatureMap],
    models: VotingModels,
    parts: list[str] | None = None,
    beta: float = DEFAULT_BETA,
    nms_radius_px: float = DEFAULT_NMS_RADIUS_PX,
    score_threshold: float = 0.0,
    fn_percentile: float = DEFAULT_FN_PERCENTILE,
) -> list[Detection]:
    """Detect at every scale, pool in base coordinates, suppress across scales.

    Each map's detections are mapped back to the unscaled frame (divide by
    its scale tag) before pooling; per-part greedy suppression then keeps
    the best-scoring scale at each location.
    """
    if not maps:
        raise ValueError("multi_scale_detect needs at least one feature map")
    pooled: dict[str, list[Detection]] = {}
    for fmap in maps:
        scale = fmap.scale_tag or 1.0
        for d in detect(fmap, models, parts, beta, nms_radius_px, score_threshold, fn_percentile):
            based = Detection(
                part=d.part, x=round(d.x / scale), y=round(d.y / scale), scale=scale, score=d.score
            )
            pooled.setdefault(d.part, []).append(based)
    out = []
    for part in sorted(pooled):
        out.extend(nms_detections(pooled[part], nms_radius_px))
    return sorted(out, key=lambda d: (-d.score, d.part, d.y, d.x))


def score_grid_to_feature_map(score: np.ndarray, spec: LatticeSpec, scale_tag: float | None = None) -> FeatureMap:
    """Wrap a score grid as a 1-channel feature map for FMAP1 export."""
    return FeatureMap(spec=spec, data=score[:, :, None].astype(np.float32), scale_tag=scale_tag)
