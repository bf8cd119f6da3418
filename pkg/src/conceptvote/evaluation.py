"""Precision-recall harnesses and the synthetic occlusion benchmark.

Two matching criteria are supported: center-distance matching against a
pixel radius (keypoint style) and intersection-over-union of fixed-size
boxes (detection style).  Average precision is the area under the
all-points precision-recall curve with the standard precision envelope.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .concepts import ConceptBank, unit_sq_distances
from .errors import ConfigError
from .features import (
    OCCLUSION_LEVELS,
    AnnotationSet,
    FeatureMap,
    SyntheticWorld,
    apply_occluder_rects,
    generate_scene,
    plan_occluder_rects,
)
from .lattice import CONCEPT_MATCH_RADIUS_PX, LatticeSpec, Point
from .likelihood import R_MAX
from .seeding import derive_seed
from .voting import (
    DEFAULT_BETA,
    DEFAULT_FN_PERCENTILE,
    DEFAULT_NMS_RADIUS_PX,
    Detection,
    VotingModels,
    detect,
    multi_scale_detect,
    nms_detections,
)


@dataclass
class PRCurve:
    precisions: np.ndarray
    recalls: np.ndarray
    ap: float


def average_precision(matches, n_gt: int) -> PRCurve:
    """All-points average precision of a ranked match-flag sequence.

    ``matches[i]`` says whether the i-th ranked detection matched a ground
    truth; ``n_gt`` is the total ground-truth count.  The area is computed
    under the monotone precision envelope, so the result depends only on
    the ranking.
    """
    if n_gt < 1:
        raise ValueError("average precision undefined without ground truth")
    flags = np.asarray(list(matches), dtype=bool)
    if flags.size == 0:
        return PRCurve(np.zeros(0), np.zeros(0), 0.0)
    tp = np.cumsum(flags)
    ranks = np.arange(1, flags.size + 1)
    precision = tp / ranks
    recall = tp / n_gt
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    ap = float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))
    return PRCurve(precision, recall, ap)


def box_iou(center_a: Point, side_a: float, center_b: Point, side_b: float) -> float:
    """IoU of two axis-aligned square boxes given by center and side."""
    ha, hb = side_a / 2.0, side_b / 2.0
    ix = max(0.0, min(center_a[0] + ha, center_b[0] + hb) - max(center_a[0] - ha, center_b[0] - hb))
    iy = max(0.0, min(center_a[1] + ha, center_b[1] + hb) - max(center_a[1] - ha, center_b[1] - hb))
    inter = ix * iy
    union = side_a * side_a + side_b * side_b - inter
    return inter / union if union > 0 else 0.0


def match_iou(
    det_center: Point,
    gt_centers: list[Point],
    patch_side: float,
    matched: list[bool] | None = None,
    det_side: float | None = None,
) -> int | None:
    """Index of the unmatched ground truth with the highest IoU >= 0.5.

    Both boxes default to ``patch_side`` squares; a detection made at a
    different scale may pass its own box side.  Returns None when no
    unmatched ground truth clears the threshold (a duplicate detection).
    """
    if patch_side <= 0:
        raise ValueError("patch_side must be positive")
    det_side = patch_side if det_side is None else det_side
    best, best_iou = None, 0.5
    for j, g in enumerate(gt_centers):
        if matched is not None and matched[j]:
            continue
        iou = box_iou(det_center, det_side, g, patch_side)
        if iou >= best_iou and (best is None or iou > best_iou):
            best, best_iou = j, iou
    return best


def match_keypoint(
    pos: Point,
    gt_centers: list[Point],
    radius_px: float = CONCEPT_MATCH_RADIUS_PX,
    matched: list[bool] | None = None,
) -> int | None:
    """Index of the nearest unmatched ground truth within ``radius_px``."""
    if radius_px <= 0:
        raise ValueError("radius must be positive")
    best, best_d2 = None, radius_px * radius_px
    for j, g in enumerate(gt_centers):
        if matched is not None and matched[j]:
            continue
        d2 = (pos[0] - g[0]) ** 2 + (pos[1] - g[1]) ** 2
        if d2 <= best_d2 and (best is None or d2 < best_d2):
            best, best_d2 = j, d2
    return best


@dataclass
class RankedDetection:
    """A detection pooled across images, ready for dataset-level matching."""

    image_id: str
    x: float
    y: float
    score: float
    box_side: float | None = None


def match_ranked(
    dets: list[RankedDetection],
    gt_by_image: dict[str, list[Point]],
    criterion: str,
    patch_side: float = 100.0,
    radius_px: float = CONCEPT_MATCH_RADIUS_PX,
) -> tuple[list[bool], int]:
    """Greedy matching of a pooled detection list against per-image truth.

    Detections are ranked by descending score (ties by image, position);
    each can claim at most one ground truth, and each ground truth can be
    claimed once.  Returns the ranked match flags and the ground-truth
    count.
    """
    if criterion not in ("iou", "keypoint"):
        raise ValueError("criterion must be 'iou' or 'keypoint'")
    ranked = sorted(dets, key=lambda d: (-d.score, d.image_id, d.y, d.x))
    state = {img: [False] * len(pts) for img, pts in gt_by_image.items()}
    flags = []
    for d in ranked:
        gts = gt_by_image.get(d.image_id, [])
        taken = state.get(d.image_id, [])
        if criterion == "iou":
            j = match_iou((d.x, d.y), gts, patch_side, taken, det_side=d.box_side)
        else:
            j = match_keypoint((d.x, d.y), gts, radius_px, taken)
        if j is None:
            flags.append(False)
        else:
            taken[j] = True
            flags.append(True)
    n_gt = sum(len(pts) for pts in gt_by_image.values())
    return flags, n_gt


# ---------------------------------------------------------------------------
# Single-concept detectors and their evaluation
# ---------------------------------------------------------------------------


def concept_firings(
    fmap: FeatureMap,
    bank: ConceptBank,
    nms_radius_px: float = DEFAULT_NMS_RADIUS_PX,
    response_cap: float = R_MAX,
    region: tuple[float, float, float, float] | None = None,
) -> list[list[tuple[int, int, float]]]:
    """Suppressed activation peaks of every concept on one map.

    Returns, per concept, (x, y, score) pixel firings where score is
    ``R_MAX - distance`` (larger is stronger).  Peaks are greedily kept in
    order of increasing distance; weaker activations within
    ``nms_radius_px`` of a kept one are dropped.  ``region`` optionally
    restricts candidate cells to an (x0, y0, x1, y1) pixel box.
    """
    spec = fmap.spec
    h, w = spec.grid_height, spec.grid_width
    dist = np.sqrt(unit_sq_distances(fmap.vectors(), bank.centers)).reshape(h, w, len(bank))
    xs = spec.offset + spec.stride * np.arange(w)
    ys = spec.offset + spec.stride * np.arange(h)
    gx, gy = np.meshgrid(xs, ys)
    gx, gy = gx.ravel(), gy.ravel()
    keep_cells = np.ones(h * w, dtype=bool)
    if region is not None:
        x0, y0, x1, y1 = region
        keep_cells = (gx >= x0) & (gx <= x1) & (gy >= y0) & (gy <= y1)
    r2 = nms_radius_px * nms_radius_px
    out = []
    for v in range(len(bank)):
        d = dist[:, :, v].ravel()
        cand = np.nonzero(keep_cells & (d < response_cap))[0]
        order = cand[np.lexsort((gx[cand], gy[cand], d[cand]))]
        px, py, pd = gx[order], gy[order], d[order]
        alive = np.ones(len(order), dtype=bool)
        fires = []
        for i in range(len(order)):
            if not alive[i]:
                continue
            fires.append((int(px[i]), int(py[i]), float(R_MAX - pd[i])))
            alive &= (px - px[i]) ** 2 + (py - py[i]) ** 2 > r2
        out.append(fires)
    return out


@dataclass
class ConceptRecord:
    concept: int
    best_part: str
    best_ap: float
    best_subset: tuple[str, ...] = ()
    subset_ap: float = 0.0


@dataclass
class ConceptEvaluation:
    mode: str
    records: list[ConceptRecord]

    def ap_histogram(self, subset: bool = False) -> np.ndarray:
        return np.array([r.subset_ap if subset else r.best_ap for r in self.records])


def _object_region(img_positives, patch_side: float) -> tuple[float, float, float, float]:
    half = patch_side / 2.0
    xs = [c[0] for _, c in img_positives]
    ys = [c[1] for _, c in img_positives]
    return (min(xs) - half, min(ys) - half, max(xs) + half, max(ys) + half)


def evaluate_concept(
    bank: ConceptBank,
    maps: dict[str, FeatureMap],
    annotations: AnnotationSet,
    mode: str = "single",
    max_k: int = 4,
    radius_px: float = CONCEPT_MATCH_RADIUS_PX,
    nms_radius_px: float = DEFAULT_NMS_RADIUS_PX,
) -> ConceptEvaluation:
    """Score every concept as an unsupervised part detector.

    Candidate activations densely sample the object region of each image
    and are suppressed, ranked, and matched near part centers.  In
    ``single`` mode each concept keeps its best part; in ``subset`` mode
    it may instead claim the best subset of up to ``max_k`` parts (their
    positives pool, so responses on any member count as true positives).
    """
    if mode not in ("single", "subset"):
        raise ValueError("mode must be 'single' or 'subset'")
    parts = annotations.part_names()
    firings_by_image: dict[str, list[list[tuple[int, int, float]]]] = {}
    for img in annotations.images:
        region = _object_region(img.positives, annotations.patch_side) if img.positives else None
        firings_by_image[img.image_id] = concept_firings(
            maps[img.image_id], bank, nms_radius_px, region=region
        )

    gt: dict[str, dict[str, list[Point]]] = {s: {} for s in parts}
    for img in annotations.images:
        for s in parts:
            gt[s][img.image_id] = [c for part, c in img.positives if part == s]

    def ap_for(v: int, subset: tuple[str, ...]) -> float:
        dets = [
            RankedDetection(image_id=img_id, x=x, y=y, score=score)
            for img_id, per_concept in firings_by_image.items()
            for x, y, score in per_concept[v]
        ]
        merged = {
            img.image_id: [c for s in subset for c in gt[s][img.image_id]]
            for img in annotations.images
        }
        flags, n_gt = match_ranked(dets, merged, "keypoint", radius_px=radius_px)
        if n_gt == 0:
            return 0.0
        return average_precision(flags, n_gt).ap

    records = []
    for v in range(len(bank)):
        singles = [(ap_for(v, (s,)), s) for s in parts]
        best_ap, best_part = max(singles, key=lambda t: (t[0], t[1]))
        rec = ConceptRecord(concept=v, best_part=best_part, best_ap=best_ap)
        if mode == "subset":
            best_subset, subset_ap = (best_part,), best_ap
            if max_k >= 2:
                from itertools import combinations

                for k in range(2, min(max_k, len(parts)) + 1):
                    for combo in combinations(parts, k):
                        ap = ap_for(v, combo)
                        if ap > subset_ap:
                            best_subset, subset_ap = combo, ap
            rec.best_subset, rec.subset_ap = best_subset, subset_ap
        else:
            rec.best_subset, rec.subset_ap = (best_part,), best_ap
        records.append(rec)
    return ConceptEvaluation(mode=mode, records=records)


# ---------------------------------------------------------------------------
# Occlusion benchmark
# ---------------------------------------------------------------------------


@dataclass
class BenchmarkConfig:
    levels: tuple[int, ...] = (0, 1, 5, 9)
    scales: tuple[float, ...] = (0.8, 1.0, 1.25)
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    n_test: int = 30
    beta: float = DEFAULT_BETA
    nms_radius_px: float = DEFAULT_NMS_RADIUS_PX
    score_threshold: float = 0.0
    fn_percentile: float = DEFAULT_FN_PERCENTILE
    single_concept: bool = True
    single_concept_cap: float = 1.3
    scale_modes: tuple[str, ...] = ("known", "unknown")
    workers: int = 1

    def validate(self) -> None:
        unknown = [lv for lv in self.levels if lv not in OCCLUSION_LEVELS]
        if unknown:
            raise ConfigError(f"unknown occlusion levels {unknown}; presets are {sorted(OCCLUSION_LEVELS)}")
        if 1.0 not in self.scales:
            raise ConfigError("the scale set must include the ground-truth scale 1.0")
        if self.n_test < 1 or not self.seeds:
            raise ConfigError("benchmark needs at least one scene and one seed")


@dataclass
class ReportRow:
    level: int
    part: str
    method: str
    scale_mode: str
    ap: float


@dataclass
class BenchmarkReport:
    rows: list[ReportRow]
    levels: tuple[int, ...]
    seeds: tuple[int, ...]
    scales: tuple[float, ...]

    def ap_of(self, level: int, part: str, method: str, scale_mode: str) -> float:
        for r in self.rows:
            if (r.level, r.part, r.method, r.scale_mode) == (level, part, method, scale_mode):
                return r.ap
        raise KeyError((level, part, method, scale_mode))

    def mean_ap(self, level: int, method: str, scale_mode: str) -> float:
        vals = [
            r.ap
            for r in self.rows
            if r.level == level and r.method == method and r.scale_mode == scale_mode
        ]
        if not vals:
            raise KeyError((level, method, scale_mode))
        return float(np.mean(vals))


def write_report_csv(report: BenchmarkReport, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["level", "part", "method", "scale_mode", "AP"])
        for r in sorted(report.rows, key=lambda r: (r.level, r.part, r.method, r.scale_mode)):
            writer.writerow([r.level, r.part, r.method, r.scale_mode, f"{r.ap:.10g}"])


def write_report_json(report: BenchmarkReport, path) -> None:
    doc = {
        "levels": list(report.levels),
        "seeds": list(report.seeds),
        "scales": list(report.scales),
        "mean_ap": [
            {
                "level": lv,
                "method": m,
                "scale_mode": sm,
                "ap": report.mean_ap(lv, m, sm),
            }
            for lv in report.levels
            for m in sorted({r.method for r in report.rows})
            for sm in sorted({r.scale_mode for r in report.rows if r.method == m})
        ],
        "rows": [
            {"level": r.level, "part": r.part, "method": r.method, "scale_mode": r.scale_mode, "ap": r.ap}
            for r in sorted(report.rows, key=lambda r: (r.level, r.part, r.method, r.scale_mode))
        ],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _ordered_map(fn, items, workers: int):
    if workers <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def occlusion_benchmark(
    world: SyntheticWorld,
    base_spec: LatticeSpec,
    models: VotingModels,
    config: BenchmarkConfig,
) -> BenchmarkReport:
    """Generate occluded test scenes and measure detection AP per level.

    For every seed, ``n_test`` scenes are rendered at each configured scale
    (sharing one layout per scene).  Occluders are planned once per scene
    and level in base coordinates and applied, scaled, to every render, so
    all scales depict the same occluded scene.  Known-scale detection runs
    only on the ground-truth render; unknown-scale pools every render and
    suppresses across scales.  Per-part APs use box IoU in base
    coordinates with a detection box side of patch/scale, and are averaged
    over seeds.
    """
    config.validate()
    parts = list(models.voters.voters)
    patch = world.patch_side
    ap_acc: dict[tuple[int, str, str, str], list[float]] = {}

    for seed in config.seeds:
        renders: list[dict[float, FeatureMap]] = []
        anns = []
        for i in range(config.n_test):
            layout_seed = derive_seed(seed, "bench-scene", i)
            per_scale = {}
            ann = None
            for s in config.scales:
                fmap, a = generate_scene(
                    world, base_spec, layout_seed, scale=s, image_id=f"b{seed}-{i}"
                )
                per_scale[s] = fmap
                if s == 1.0:
                    ann = a
            renders.append(per_scale)
            anns.append(ann.images[0])

        gt_by_part = {
            s: {img.image_id: [c for part, c in img.positives if part == s] for img in anns}
            for s in parts
        }

        for level in config.levels:
            n_occ, frange = OCCLUSION_LEVELS[level]
            scene_maps: list[dict[float, FeatureMap]] = []
            for i, per_scale in enumerate(renders):
                if n_occ == 0:
                    scene_maps.append(per_scale)
                    continue
                rects, _ = plan_occluder_rects(
                    anns[i], patch, base_spec, n_occ, frange,
                    derive_seed(seed, "bench-occ", i, level),
                )
                occluded = {}
                for s, fmap in per_scale.items():
                    scaled = [(x0 * s, y0 * s, x1 * s, y1 * s) for x0, y0, x1, y1 in rects]
                    occluded[s], _ = apply_occluder_rects(
                        fmap, scaled, world, derive_seed(seed, "bench-fill", i, level, s)
                    )
                scene_maps.append(occluded)

            for mode in config.scale_modes:
                def run_scene(per_scale):
                    if mode == "known":
                        return detect(
                            per_scale[1.0], models, parts, config.beta,
                            config.nms_radius_px, config.score_threshold, config.fn_percentile,
                        )
                    return multi_scale_detect(
                        list(per_scale.values()), models, parts, config.beta,
                        config.nms_radius_px, config.score_threshold, config.fn_percentile,
                    )

                per_scene = _ordered_map(run_scene, scene_maps, config.workers)
                for part in parts:
                    dets = [
                        RankedDetection(
                            image_id=anns[i].image_id, x=d.x, y=d.y, score=d.score,
                            box_side=patch / d.scale,
                        )
                        for i, dlist in enumerate(per_scene)
                        for d in dlist
                        if d.part == part
                    ]
                    flags, n_gt = match_ranked(dets, gt_by_part[part], "iou", patch_side=patch)
                    ap = average_precision(flags, n_gt).ap if n_gt else 0.0
                    ap_acc.setdefault((level, part, "voting", mode), []).append(ap)

            if config.single_concept:
                for mode in config.scale_modes:
                    pooled: dict[int, list[RankedDetection]] = {v: [] for v in range(len(models.bank))}
                    for i, per_scale in enumerate(scene_maps):
                        scales = [1.0] if mode == "known" else sorted(per_scale)
                        per_concept_all: dict[int, list[Detection]] = {}
                        for s in scales:
                            fires = concept_firings(
                                per_scale[s], models.bank, config.nms_radius_px,
                                response_cap=config.single_concept_cap,
                            )
                            for v, flist in enumerate(fires):
                                per_concept_all.setdefault(v, []).extend(
                                    Detection(part="", x=round(x / s), y=round(y / s), scale=s, score=sc)
                                    for x, y, sc in flist
                                )
                        for v, dlist in per_concept_all.items():
                            kept = nms_detections(dlist, config.nms_radius_px) if mode == "unknown" else dlist
                            pooled[v].extend(
                                RankedDetection(
                                    image_id=anns[i].image_id, x=d.x, y=d.y, score=d.score,
                                    box_side=patch / d.scale,
                                )
                                for d in kept
                            )
                    for part in parts:
                        best = 0.0
                        for v in range(len(models.bank)):
                            flags, n_gt = match_ranked(pooled[v], gt_by_part[part], "iou", patch_side=patch)
                            if n_gt:
                                best = max(best, average_precision(flags, n_gt).ap)
                        ap_acc.setdefault((level, part, "single_concept", mode), []).append(best)

    rows = [
        ReportRow(level=lv, part=p, method=m, scale_mode=sm, ap=float(np.mean(vals)))
        for (lv, p, m, sm), vals in sorted(ap_acc.items())
    ]
    return BenchmarkReport(rows=rows, levels=tuple(config.levels), seeds=tuple(config.seeds), scales=tuple(config.scales))
