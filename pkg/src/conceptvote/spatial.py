"""Where each concept tends to activate relative to each part center.

For a part center q, the cell that best activates a concept sits at some
offset from q's grid cell.  Collecting those offsets over the training
positives gives a frequency map per (concept, part) pair; thresholding its
cumulative mass gives the support neighborhood used for evidence estimation
and voting.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np

from .concepts import ConceptBank, unit_sq_distances
from .errors import BoundsError, TrainingDataError
from .features import AnnotationSet, FeatureMap
from .lattice import (
    VOTING_TRAIN_RADIUS_PX,
    LatticeSpec,
    Point,
    disk_neighborhood,
    map_down,
    map_up,
)

logger = logging.getLogger(__name__)

DEFAULT_SUPPORT_MASS = 0.9


def default_window_radius(stride: int, radius_px: float = VOTING_TRAIN_RADIUS_PX) -> int:
    """Offset window radius in cells covering ``radius_px`` pixels."""
    return int(np.ceil(radius_px / stride))


@dataclass
class SpatialEntry:
    """Offset statistics for one (concept, part) pair.

    ``freq`` is a (W, W) grid over offsets in [-R, R]^2 (W = 2R+1) summing
    to 1; ``support`` marks the offsets kept by the cumulative-mass cut.
    ``uniform_level`` is the flat reference 1/W^2 that votes are measured
    against.
    """

    freq: np.ndarray
    support: np.ndarray
    n_samples: int = 0
    n_clamped: int = 0

    @property
    def window_radius(self) -> int:
        return (self.freq.shape[0] - 1) // 2

    @property
    def uniform_level(self) -> float:
        return 1.0 / float(self.freq.size)

    def support_offsets(self) -> list[tuple[int, int]]:
        """Offsets (dx, dy) in the support, row-major."""
        r = self.window_radius
        ys, xs = np.nonzero(self.support)
        return [(int(x) - r, int(y) - r) for x, y in zip(xs, ys)]


@dataclass
class SpatialModel:
    window_radius: int
    parts: list[str]
    n_concepts: int
    entries: dict[tuple[int, str], SpatialEntry]

    def entry(self, concept: int, part: str) -> SpatialEntry:
        return self.entries[(concept, part)]


def best_offset(
    q: Point, fmap: FeatureMap, center: np.ndarray, radius_px: float
) -> tuple[Point, tuple[int, int]]:
    """Cell in the disk around ``q`` nearest to ``center`` in feature space.

    Ties on feature distance break toward the cell closest to ``q``, then
    lexicographically on (x, y).  Returns the cell and its offset from q's
    own grid cell.
    """
    cells = disk_neighborhood(q, radius_px, fmap.spec)
    if not cells:
        raise BoundsError(f"no cells within {radius_px}px of {q}")
    feats = np.stack([fmap.data[py, px] for px, py in cells]).astype(np.float64)
    d2 = np.maximum(0.0, 2.0 - 2.0 * (feats @ np.asarray(center, dtype=np.float64)))
    spatial = []
    for px, py in cells:
        ux, uy = map_up((px, py), fmap.spec)
        spatial.append((ux - q[0]) ** 2 + (uy - q[1]) ** 2)
    order = sorted(
        range(len(cells)), key=lambda i: (d2[i], spatial[i], cells[i][0], cells[i][1])
    )
    best = cells[order[0]]
    q4 = map_down(q, fmap.spec)
    return best, (best[0] - q4[0], best[1] - q4[1])


def fit_frequency(
    samples: list[tuple[FeatureMap, Point]],
    center: np.ndarray,
    radius_px: float,
    window_radius: int,
) -> SpatialEntry:
    """Normalized histogram of best-activation offsets over the positives.

    Offsets beyond the window are clamped to its boundary (and counted in
    ``n_clamped``).  The support is left empty; apply
    :func:`support_from_frequency` after fitting.
    """
    if not samples:
        raise TrainingDataError("fit_frequency needs at least one positive sample")
    w = 2 * window_radius + 1
    counts = np.zeros((w, w), dtype=np.int64)
    clamped = 0
    for fmap, q in samples:
        _, (dx, dy) = best_offset(q, fmap, center, radius_px)
        cx = min(max(dx, -window_radius), window_radius)
        cy = min(max(dy, -window_radius), window_radius)
        if (cx, cy) != (dx, dy):
            clamped += 1
        counts[cy + window_radius, cx + window_radius] += 1
    if clamped:
        logger.debug("clamped %d offsets into the %dx%d window", clamped, w, w)
    freq = counts.astype(np.float64) / counts.sum()
    return SpatialEntry(
        freq=freq, support=np.zeros_like(freq, dtype=bool), n_samples=len(samples), n_clamped=clamped
    )


def support_from_frequency(freq: np.ndarray, mass: float = DEFAULT_SUPPORT_MASS) -> np.ndarray:
    """Smallest high-frequency offset set with cumulative mass >= ``mass``.

    Offsets tied with the one at the cut are all included; zero-frequency
    offsets never are.
    """
    if not 0.0 < mass <= 1.0:
        raise ValueError("mass must lie in (0, 1]")
    flat = freq.ravel()
    order = np.argsort(-flat, kind="stable")
    cum = np.cumsum(flat[order])
    n_needed = int(np.searchsorted(cum, mass - 1e-12)) + 1
    n_needed = min(n_needed, len(flat))
    cut_value = flat[order[n_needed - 1]]
    support = (flat > cut_value) | ((flat == cut_value) & (flat > 0.0))
    return support.reshape(freq.shape)


def fit_spatial_model(
    maps: dict[str, FeatureMap],
    annotations: AnnotationSet,
    bank: ConceptBank,
    radius_px: float = VOTING_TRAIN_RADIUS_PX,
    window_radius: int | None = None,
    support_mass: float = DEFAULT_SUPPORT_MASS,
) -> SpatialModel:
    """Fit one entry per (concept, part) pair over all annotated images.

    Best offsets for all concepts at a positive are found in a single pass
    over the disk's distance matrix, so the cost is one matrix product per
    positive.
    """
    first = next(iter(maps.values()))
    if window_radius is None:
        window_radius = default_window_radius(first.spec.stride)
    w = 2 * window_radius + 1
    parts = annotations.part_names()
    k = len(bank)
    counts = {(v, s): np.zeros((w, w), dtype=np.int64) for v in range(k) for s in parts}
    clamped = {key: 0 for key in counts}
    n_samples = {s: 0 for s in parts}

    for img in annotations.images:
        fmap = maps[img.image_id]
        for part, q in img.positives:
            cells = disk_neighborhood(q, radius_px, fmap.spec)
            if not cells:
                continue
            n_samples[part] += 1
            feats = np.stack([fmap.data[py, px] for px, py in cells]).astype(np.float64)
            d2 = np.maximum(0.0, 2.0 - 2.0 * (feats @ bank.centers.T))
            q4 = map_down(q, fmap.spec)
            ups = [map_up(c, fmap.spec) for c in cells]
            keys = np.array(
                [
                    ((ux - q[0]) ** 2 + (uy - q[1]) ** 2, c[0], c[1])
                    for (ux, uy), c in zip(ups, cells)
                ],
                dtype=np.float64,
            )
            # Stable lexicographic tie-break: order cells once, pick the
            # first minimal-distance row per concept.
            cell_order = np.lexsort((keys[:, 2], keys[:, 1], keys[:, 0]))
            d2o = d2[cell_order]
            best_rows = cell_order[np.argmin(d2o, axis=0)]
            for v in range(k):
                cx, cy = cells[best_rows[v]]
                dx, dy = cx - q4[0], cy - q4[1]
                bx = min(max(dx, -window_radius), window_radius)
                by = min(max(dy, -window_radius), window_radius)
                if (bx, by) != (dx, dy):
                    clamped[(v, part)] += 1
                counts[(v, part)][by + window_radius, bx + window_radius] += 1

    entries = {}
    for (v, s), cnt in counts.items():
        total = cnt.sum()
        if total == 0:
            raise TrainingDataError(f"no offset samples for concept {v}, part {s}")
        freq = cnt.astype(np.float64) / total
        entries[(v, s)] = SpatialEntry(
            freq=freq,
            support=support_from_frequency(freq, support_mass),
            n_samples=int(total),
            n_clamped=clamped[(v, s)],
        )
    return SpatialModel(window_radius=window_radius, parts=parts, n_concepts=k, entries=entries)


def save_spatial_model(model: SpatialModel, path) -> None:
    doc = {
        "window_radius": model.window_radius,
        "parts": model.parts,
        "n_concepts": model.n_concepts,
        "entries": [
            {
                "concept": v,
                "part": s,
                "n_samples": e.n_samples,
                "n_clamped": e.n_clamped,
                "freq": [float(np.float32(x)) for x in e.freq.ravel()],
                "support": [int(b) for b in e.support.ravel()],
            }
            for (v, s), e in sorted(model.entries.items(), key=lambda kv: (kv[0][1], kv[0][0]))
        ],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def load_spatial_model(path) -> SpatialModel:
    with open(path) as fh:
        doc = json.load(fh)
    w = 2 * int(doc["window_radius"]) + 1
    entries = {}
    for rec in doc["entries"]:
        freq = np.array(rec["freq"], dtype=np.float64).reshape(w, w)
        support = np.array(rec["support"], dtype=bool).reshape(w, w)
        entries[(int(rec["concept"]), str(rec["part"]))] = SpatialEntry(
            freq=freq,
            support=support,
            n_samples=int(rec["n_samples"]),
            n_clamped=int(rec["n_clamped"]),
        )
    return SpatialModel(
        window_radius=int(doc["window_radius"]),
        parts=list(doc["parts"]),
        n_concepts=int(doc["n_concepts"]),
        entries=entries,
    )
