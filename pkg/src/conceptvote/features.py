"""Feature-map containers, file I/O, sampling, and the synthetic scene generator.

A feature map is a dense grid of D-dimensional vectors, one per cell of a
:class:`~conceptvote.lattice.LatticeSpec` grid.  The synthetic generator
stands in for a real feature extractor: it renders scenes of "parts" whose
cells emit noisy copies of per-part signature vectors, so every algorithm in
the package can be exercised against known ground truth, with controlled
occlusion.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import BoundsError, FormatError, GenerationError, OcclusionInfeasibleError
from .lattice import LatticeSpec, Point, map_up

FMAP_MAGIC = b"FMAP1\n"

# Occlusion presets: level -> (occluder count, covered-fraction range).
OCCLUSION_LEVELS = {
    0: (0, (0.0, 0.0)),
    1: (2, (0.2, 0.4)),
    5: (3, (0.4, 0.6)),
    9: (4, (0.6, 0.8)),
}


@dataclass
class FeatureMap:
    """Row-major grid of feature vectors with its lattice geometry.

    ``data`` has shape (grid_height, grid_width, dim) and dtype float32.
    ``scale_tag`` records the resize factor applied to the source scene
    (``None`` when untagged).
    """

    spec: LatticeSpec
    data: np.ndarray
    scale_tag: float | None = None
    zero_mask: np.ndarray | None = None

    def __post_init__(self):
        expected = (self.spec.grid_height, self.spec.grid_width)
        if self.data.ndim != 3 or self.data.shape[:2] != expected:
            raise ValueError(f"data shape {self.data.shape} does not match grid {expected}")
        if self.data.dtype != np.float32:
            self.data = self.data.astype(np.float32)
        if self.scale_tag is not None and self.scale_tag <= 0:
            raise ValueError("scale_tag must be positive")

    @property
    def dim(self) -> int:
        return self.data.shape[2]

    def vectors(self) -> np.ndarray:
        """All cell vectors as an (n_cells, dim) float64 view-copy."""
        return self.data.reshape(-1, self.dim).astype(np.float64)

    def vector_at(self, p: Point) -> np.ndarray:
        if not self.spec.contains_cell(p):
            raise BoundsError(f"cell {p} outside feature grid")
        return self.data[p[1], p[0]].astype(np.float64)


def write_feature_map(fmap: FeatureMap, path) -> None:
    """Serialize to the FMAP1 binary format (little-endian throughout)."""
    spec = fmap.spec
    header = struct.pack(
        "<5If",
        spec.grid_width,
        spec.grid_height,
        fmap.dim,
        spec.stride,
        spec.offset,
        0.0 if fmap.scale_tag is None else fmap.scale_tag,
    )
    payload = np.ascontiguousarray(fmap.data, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(FMAP_MAGIC)
        fh.write(header)
        fh.write(payload)


def read_feature_map(path) -> FeatureMap:
    """Parse an FMAP1 file; raises :class:`FormatError` with the failing offset.

    The image extent is not stored, so the returned spec uses the smallest
    canonical extent consistent with the grid (``offset + stride*n - 1``).
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(FMAP_MAGIC)] != FMAP_MAGIC:
        raise FormatError("bad magic; expected FMAP1", 0)
    head_start = len(FMAP_MAGIC)
    head_size = struct.calcsize("<5If")
    if len(blob) < head_start + head_size:
        raise FormatError("truncated header", len(blob))
    w, h, dim, stride, offset, scale_tag = struct.unpack_from("<5If", blob, head_start)
    if w < 1 or h < 1 or dim < 1 or stride < 1:
        raise FormatError(f"non-positive header field (w={w} h={h} dim={dim} stride={stride})", head_start)
    body_start = head_start + head_size
    expected = w * h * dim * 4
    if len(blob) - body_start != expected:
        raise FormatError(
            f"payload holds {len(blob) - body_start} bytes, header implies {expected}",
            len(blob) if len(blob) - body_start < expected else body_start + expected,
        )
    data = np.frombuffer(blob, dtype="<f4", count=w * h * dim, offset=body_start)
    spec = LatticeSpec(
        image_width=offset + stride * w - 1 if stride > 1 else offset + w,
        image_height=offset + stride * h - 1 if stride > 1 else offset + h,
        stride=stride,
        offset=offset,
    )
    return FeatureMap(
        spec=spec,
        data=data.reshape(h, w, dim).copy(),
        scale_tag=None if scale_tag == 0.0 else float(scale_tag),
    )


def normalize_in_place(fmap: FeatureMap) -> int:
    """Scale every cell vector to unit norm; returns the zero-vector count.

    Exact zero vectors cannot be normalized and are replaced by the first
    basis vector; their positions are recorded in ``fmap.zero_mask``.
    """
    flat = fmap.data.reshape(-1, fmap.dim)
    norms = np.linalg.norm(flat.astype(np.float64), axis=1)
    zero = norms == 0.0
    safe = np.where(zero, 1.0, norms)
    out = flat.astype(np.float64) / safe[:, None]
    if zero.any():
        out[zero] = 0.0
        out[zero, 0] = 1.0
    fmap.data[...] = out.reshape(fmap.data.shape).astype(np.float32)
    fmap.zero_mask = zero.reshape(fmap.spec.grid_height, fmap.spec.grid_width)
    return int(zero.sum())


def sample_vectors(maps: list[FeatureMap], per_image: int, seed: int) -> np.ndarray:
    """Uniform without-replacement sample of ``per_image`` cell vectors per map.

    Maps with fewer cells contribute all of theirs.  Deterministic for a
    fixed seed and map order.
    """
    if per_image < 1:
        raise ValueError("per_image must be >= 1")
    rng = np.random.default_rng(seed)
    chunks = []
    for fmap in maps:
        vecs = fmap.vectors()
        n = len(vecs)
        if n <= per_image:
            chunks.append(vecs)
        else:
            idx = rng.choice(n, size=per_image, replace=False)
            idx.sort()
            chunks.append(vecs[idx])
    if not chunks:
        return np.zeros((0, 0))
    return np.concatenate(chunks, axis=0)


# ---------------------------------------------------------------------------
# Annotations
# ---------------------------------------------------------------------------


@dataclass
class ImageAnnotation:
    image_id: str
    positives: list[tuple[str, Point]]
    negatives: list[Point]


@dataclass
class AnnotationSet:
    """Ground-truth part centers and far-from-part reference points."""

    images: list[ImageAnnotation]
    patch_side: float = 100.0
    gamma: float = 100.0

    def part_names(self) -> list[str]:
        names = sorted({part for img in self.images for part, _ in img.positives})
        return names

    def by_id(self) -> dict[str, ImageAnnotation]:
        return {img.image_id: img for img in self.images}

    def validate(self) -> None:
        """Check the minimum-distance constraint between negatives and positives."""
        g2 = self.gamma * self.gamma
        for img in self.images:
            for nx, ny in img.negatives:
                for part, (px, py) in img.positives:
                    if (nx - px) ** 2 + (ny - py) ** 2 < g2:
                        raise ValueError(
                            f"negative ({nx},{ny}) within gamma of part {part} in {img.image_id}"
                        )


def write_annotations(ann: AnnotationSet, path) -> None:
    doc = {
        "images": [
            {
                "id": img.image_id,
                "positives": [{"part": part, "x": x, "y": y} for part, (x, y) in img.positives],
                "negatives": [{"x": x, "y": y} for x, y in img.negatives],
            }
            for img in ann.images
        ],
        "patch_side": ann.patch_side,
        "gamma": ann.gamma,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_annotations(path) -> AnnotationSet:
    with open(path) as fh:
        doc = json.load(fh)
    images = [
        ImageAnnotation(
            image_id=str(entry["id"]),
            positives=[(p["part"], (int(p["x"]), int(p["y"]))) for p in entry["positives"]],
            negatives=[(int(n["x"]), int(n["y"])) for n in entry["negatives"]],
        )
        for entry in doc["images"]
    ]
    return AnnotationSet(images=images, patch_side=float(doc["patch_side"]), gamma=float(doc["gamma"]))


# ---------------------------------------------------------------------------
# Directional noise
# ---------------------------------------------------------------------------


def sample_unit_sphere(rng: np.random.Generator, dim: int, size: int) -> np.ndarray:
    v = rng.standard_normal((size, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def sample_vmf(rng: np.random.Generator, mu: np.ndarray, kappa: float, size: int) -> np.ndarray:
    """Draw ``size`` unit vectors concentrated around ``mu``.

    Uses Wood's rejection scheme for the cosine component.  ``kappa = inf``
    returns exact copies of ``mu``; ``kappa = 0`` is uniform on the sphere.
    """
    mu = np.asarray(mu, dtype=np.float64)
    dim = mu.shape[0]
    if size == 0:
        return np.zeros((0, dim))
    if math.isinf(kappa):
        return np.tile(mu, (size, 1))
    if kappa == 0.0:
        return sample_unit_sphere(rng, dim, size)

    b = (-2.0 * kappa + math.sqrt(4.0 * kappa**2 + (dim - 1) ** 2)) / (dim - 1)
    x0 = (1.0 - b) / (1.0 + b)
    c = kappa * x0 + (dim - 1) * math.log(1.0 - x0 * x0)

    w = np.empty(size)
    need = np.arange(size)
    while need.size:
        z = rng.beta((dim - 1) / 2.0, (dim - 1) / 2.0, size=need.size)
        ww = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z)
        u = rng.random(need.size)
        ok = kappa * ww + (dim - 1) * np.log(1.0 - x0 * ww) - c >= np.log(u)
        w[need[ok]] = ww[ok]
        need = need[~ok]

    # Tangent directions orthogonal to mu.
    t = rng.standard_normal((size, dim))
    t -= np.outer(t @ mu, mu)
    t /= np.linalg.norm(t, axis=1, keepdims=True)
    out = w[:, None] * mu[None, :] + np.sqrt(np.maximum(0.0, 1.0 - w * w))[:, None] * t
    return out / np.linalg.norm(out, axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# Synthetic world
# ---------------------------------------------------------------------------


@dataclass
class SyntheticWorld:
    """Signatures and layout templates for rendering synthetic feature scenes.

    Each template places named parts at fixed pixel offsets from a random
    anchor.  Cells within ``part_radius_px`` of a part center emit noisy
    copies of that part's signature; all other cells emit one of the
    background signatures; occluders overwrite cells with occluder
    signatures.  Parts and occluders are drawn at concentration ``kappa``,
    backgrounds at the looser ``kappa_background`` (distinctive structure
    on clutter, which is what makes concept activations informative).
    """

    dim: int
    part_names: tuple[str, ...]
    part_signatures: np.ndarray
    background_signatures: np.ndarray
    occluder_signatures: np.ndarray
    templates: tuple[tuple[tuple[str, int, int], ...], ...]
    part_radius_px: float = 22.0
    patch_side: float = 100.0
    gamma: float = 100.0
    kappa: float = 150.0
    kappa_background: float = 40.0
    scale_fidelity: float = 5.0
    negatives_per_scene: int = 12

    def kappa_at(self, scale: float, kappa: float) -> float:
        """Concentration of a render at ``scale``.

        Features are sharpest at the canonical scale and blur away from it
        (mid-layer activations are scale-sensitive); ``scale_fidelity`` 0
        turns this off.
        """
        return kappa * math.exp(-self.scale_fidelity * abs(math.log(scale)))

    def __post_init__(self):
        sigs = self.all_signatures()
        norms = np.linalg.norm(sigs, axis=1)
        if not np.allclose(norms, 1.0, atol=1e-6):
            raise ValueError("signatures must be unit norm")
        gram = sigs @ sigs.T
        np.fill_diagonal(gram, 0.0)
        if gram.max(initial=0.0) >= 0.9:
            raise ValueError("distinct signatures must have pairwise dot < 0.9")
        if not self.templates:
            raise ValueError("at least one template required")

    def all_signatures(self) -> np.ndarray:
        return np.concatenate(
            [self.part_signatures, self.background_signatures, self.occluder_signatures], axis=0
        )

    @classmethod
    def random(
        cls,
        dim: int,
        part_names: tuple[str, ...],
        templates: tuple[tuple[tuple[str, int, int], ...], ...],
        seed: int,
        n_backgrounds: int = 3,
        n_occluders: int = 2,
        **kwargs,
    ) -> "SyntheticWorld":
        rng = np.random.default_rng(seed)
        total = len(part_names) + n_backgrounds + n_occluders
        for _ in range(64):
            sigs = sample_unit_sphere(rng, dim, total)
            gram = sigs @ sigs.T
            np.fill_diagonal(gram, 0.0)
            if gram.max() < 0.9:
                break
        else:
            raise GenerationError("could not draw well-separated signatures")
        p = len(part_names)
        return cls(
            dim=dim,
            part_names=tuple(part_names),
            part_signatures=sigs[:p],
            background_signatures=sigs[p : p + n_backgrounds],
            occluder_signatures=sigs[p + n_backgrounds :],
            templates=templates,
            **kwargs,
        )


def _cell_centers(spec: LatticeSpec) -> np.ndarray:
    """(h, w, 2) pixel positions of every grid cell."""
    xs = spec.offset + spec.stride * np.arange(spec.grid_width)
    ys = spec.offset + spec.stride * np.arange(spec.grid_height)
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx, gy], axis=-1).astype(np.float64)


def _assign_cells(world, spec, scale, centers_px):
    """Per-cell index into part signatures, or -1 for background cells."""
    grid = _cell_centers(spec)
    label = np.full((spec.grid_height, spec.grid_width), -1, dtype=np.int64)
    best = np.full(label.shape, np.inf)
    radius = world.part_radius_px * scale
    for part, (cx, cy) in centers_px:
        d = np.hypot(grid[..., 0] - cx, grid[..., 1] - cy)
        closer = (d <= radius) & (d < best)
        label[closer] = world.part_names.index(part)
        best[closer] = d[closer]
    return label


def generate_scene(
    world: SyntheticWorld,
    spec: LatticeSpec,
    seed: int,
    scale: float = 1.0,
    image_id: str | None = None,
) -> tuple[FeatureMap, AnnotationSet]:
    """Render one scene at ``scale`` and return its features plus ground truth.

    ``spec`` describes the base (scale 1) geometry; the returned map uses
    ``spec.scaled(scale)``.  The layout (template choice, anchor, negative
    points) is drawn in base coordinates before any render-specific
    randomness, so different scales of the same seed depict the same scene.
    """
    rng = np.random.default_rng(seed)
    template = world.templates[int(rng.integers(len(world.templates)))]

    margin = int(math.ceil(world.part_radius_px)) + 1
    xs = [dx for _, dx, _ in template]
    ys = [dy for _, _, dy in template]
    ax_lo, ax_hi = margin - min(xs), spec.image_width - 1 - margin - max(xs)
    ay_lo, ay_hi = margin - min(ys), spec.image_height - 1 - margin - max(ys)
    if ax_hi < ax_lo or ay_hi < ay_lo:
        raise GenerationError("template does not fit inside the image with its emission margin")
    anchor = (int(rng.integers(ax_lo, ax_hi + 1)), int(rng.integers(ay_lo, ay_hi + 1)))
    base_centers = [(part, (anchor[0] + dx, anchor[1] + dy)) for part, dx, dy in template]

    negatives_base: list[Point] = []
    g2 = (world.gamma) ** 2
    attempts = 0
    while len(negatives_base) < world.negatives_per_scene:
        attempts += 1
        if attempts > 500 * max(1, world.negatives_per_scene):
            raise GenerationError("could not place negatives at least gamma from every part")
        nx = int(rng.integers(0, spec.image_width))
        ny = int(rng.integers(0, spec.image_height))
        if all((nx - cx) ** 2 + (ny - cy) ** 2 >= g2 for _, (cx, cy) in base_centers):
            negatives_base.append((nx, ny))

    render_spec = spec.scaled(scale)
    centers = [(part, (round(cx * scale), round(cy * scale))) for part, (cx, cy) in base_centers]
    label = _assign_cells(world, render_spec, scale, centers)

    h, w = render_spec.grid_height, render_spec.grid_width
    data = np.empty((h, w, world.dim), dtype=np.float64)
    bg_type = rng.integers(0, len(world.background_signatures), size=(h, w))
    # Fill groups in a fixed order so the draw sequence is reproducible.
    for i in range(len(world.part_names)):
        mask = label == i
        data[mask] = sample_vmf(
            rng, world.part_signatures[i], world.kappa_at(scale, world.kappa), int(mask.sum())
        )
    for b in range(len(world.background_signatures)):
        mask = (label == -1) & (bg_type == b)
        data[mask] = sample_vmf(
            rng, world.background_signatures[b], world.kappa_at(scale, world.kappa_background),
            int(mask.sum()),
        )

    image_id = image_id or f"scene-{seed}"
    ann = AnnotationSet(
        images=[
            ImageAnnotation(
                image_id=image_id,
                positives=centers,
                negatives=[(round(nx * scale), round(ny * scale)) for nx, ny in negatives_base],
            )
        ],
        patch_side=world.patch_side * scale,
        gamma=world.gamma * scale,
    )
    fmap = FeatureMap(spec=render_spec, data=data.astype(np.float32), scale_tag=scale)
    return fmap, ann


# ---------------------------------------------------------------------------
# Occlusion
# ---------------------------------------------------------------------------


def _patch_union_mask(ann_img: ImageAnnotation, patch_side: float, spec: LatticeSpec) -> np.ndarray:
    """Boolean pixel mask of the union of part patches (clipped to the image)."""
    mask = np.zeros((spec.image_height, spec.image_width), dtype=bool)
    half = patch_side / 2.0
    for _, (cx, cy) in ann_img.positives:
        x0 = max(0, int(math.floor(cx - half)))
        x1 = min(spec.image_width, int(math.ceil(cx + half)))
        y0 = max(0, int(math.floor(cy - half)))
        y1 = min(spec.image_height, int(math.ceil(cy + half)))
        mask[y0:y1, x0:x1] = True
    return mask


def _covered_fraction(union: np.ndarray, rects: list[tuple[float, float, float, float]]) -> float:
    covered = np.zeros_like(union)
    h, w = union.shape
    for x0, y0, x1, y1 in rects:
        xa, xb = max(0, int(math.floor(x0))), min(w, int(math.ceil(x1)))
        ya, yb = max(0, int(math.floor(y0))), min(h, int(math.ceil(y1)))
        if xb > xa and yb > ya:
            covered[ya:yb, xa:xb] = True
    total = int(union.sum())
    if total == 0:
        return 0.0
    return int((covered & union).sum()) / total


def plan_occluder_rects(
    ann_img: ImageAnnotation,
    patch_side: float,
    spec: LatticeSpec,
    n_occluders: int,
    fraction_range: tuple[float, float],
    seed: int,
    max_attempts: int = 25,
) -> tuple[list[tuple[float, float, float, float]], float]:
    """Choose occluder rectangles whose coverage of the part-patch union lies
    in ``fraction_range``.

    Rectangle centers are sampled near the object; a size multiplier is then
    bisected until the covered fraction lands inside the range (coverage is
    monotone in the multiplier).  Returns (rects, achieved fraction).
    """
    lo, hi = fraction_range
    if not (0.0 <= lo < hi <= 1.0 or (lo == hi == 0.0)):
        raise ValueError("fraction_range must satisfy 0 <= lo < hi <= 1")
    if n_occluders < 1:
        raise ValueError("n_occluders must be >= 1")
    if lo == hi == 0.0:
        return [], 0.0

    union = _patch_union_mask(ann_img, patch_side, spec)
    area = int(union.sum())
    if area == 0:
        raise OcclusionInfeasibleError("annotation has no part patches to occlude")
    ys, xs = np.nonzero(union)
    bx0, bx1, by0, by1 = xs.min(), xs.max(), ys.min(), ys.max()
    rng = np.random.default_rng(seed)
    target = 0.5 * (lo + hi)
    base_side = math.sqrt(target * area / n_occluders)

    for _ in range(max_attempts):
        shapes = []
        for _ in range(n_occluders):
            cx = rng.uniform(bx0, bx1 + 1)
            cy = rng.uniform(by0, by1 + 1)
            aspect = rng.uniform(0.6, 1.6)
            jitter = rng.uniform(0.8, 1.25)
            shapes.append((cx, cy, base_side * jitter * aspect, base_side * jitter / aspect))

        def rects_at(m: float):
            return [
                (cx - m * sw / 2, cy - m * sh / 2, cx + m * sw / 2, cy + m * sh / 2)
                for cx, cy, sw, sh in shapes
            ]

        m_hi = 1.0
        while _covered_fraction(union, rects_at(m_hi)) < lo and m_hi < 512:
            m_hi *= 2.0
        f_hi = _covered_fraction(union, rects_at(m_hi))
        if f_hi < lo:
            continue
        if f_hi <= hi:
            return rects_at(m_hi), f_hi
        m_lo = 0.0
        for _ in range(64):
            m = 0.5 * (m_lo + m_hi)
            f = _covered_fraction(union, rects_at(m))
            if lo <= f <= hi:
                return rects_at(m), f
            if f < lo:
                m_lo = m
            else:
                m_hi = m
    raise OcclusionInfeasibleError(
        f"no occluder placement reached coverage in [{lo}, {hi}] after {max_attempts} attempts"
    )


def apply_occluder_rects(
    fmap: FeatureMap,
    rects: list[tuple[float, float, float, float]],
    world: SyntheticWorld,
    seed: int,
) -> tuple[FeatureMap, np.ndarray]:
    """Overwrite cells under the rectangles with occluder-signature noise.

    Returns the new map and the boolean cell mask of replaced cells.  Cells
    outside the mask are bit-identical to the input.
    """
    spec = fmap.spec
    rng = np.random.default_rng(seed)
    grid = _cell_centers(spec)
    data = fmap.data.copy()
    mask = np.zeros((spec.grid_height, spec.grid_width), dtype=bool)
    for x0, y0, x1, y1 in rects:
        inside = (
            (grid[..., 0] >= x0) & (grid[..., 0] < x1) & (grid[..., 1] >= y0) & (grid[..., 1] < y1)
        )
        fresh = inside & ~mask
        n = int(fresh.sum())
        if n:
            sig = world.occluder_signatures[int(rng.integers(len(world.occluder_signatures)))]
            kappa = world.kappa_at(fmap.scale_tag or 1.0, world.kappa)
            data[fresh] = sample_vmf(rng, sig, kappa, n).astype(np.float32)
        mask |= inside
    return FeatureMap(spec=spec, data=data, scale_tag=fmap.scale_tag), mask


def apply_occlusion(
    fmap: FeatureMap,
    ann: AnnotationSet,
    n_occluders: int,
    fraction_range: tuple[float, float],
    world: SyntheticWorld,
    seed: int,
) -> tuple[FeatureMap, float, np.ndarray]:
    """Occlude one scene; returns (new map, achieved fraction, cell mask)."""
    if len(ann.images) != 1:
        raise ValueError("apply_occlusion expects a single-image annotation set")
    rects, fraction = plan_occluder_rects(
        ann.images[0], ann.patch_side, fmap.spec, n_occluders, fraction_range, seed
    )
    occluded, mask = apply_occluder_rects(fmap, rects, world, seed)
    return occluded, fraction, mask
