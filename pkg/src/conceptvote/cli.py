"""Command-line pipeline: synth, train, detect, eval, encode, inspect.

One JSON config drives every stage; individual values can be overridden on
the command line with ``--set key=value``.  All randomness derives from the
single mandatory seed, and a manifest of config and input hashes makes every
training run reproducible and checkable.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import concepts, likelihood, spatial, voting
from .errors import ConceptVoteError, ConfigError, FormatError, StaleModelError
from .evaluation import BenchmarkConfig, occlusion_benchmark, write_report_csv, write_report_json
from .features import (
    OCCLUSION_LEVELS,
    AnnotationSet,
    FeatureMap,
    SyntheticWorld,
    generate_scene,
    normalize_in_place,
    read_annotations,
    read_feature_map,
    sample_vectors,
    write_annotations,
    write_feature_map,
)
from .lattice import CONCEPT_MATCH_RADIUS_PX, VOTING_TRAIN_RADIUS_PX, LatticeSpec
from .seeding import derive_seed

DEFAULT_TEMPLATE = (
    ("wheel", 0, 0),
    ("door", 80, 0),
    ("window", 0, 80),
    ("bumper", 80, 80),
    ("roof", 40, 40),
)


@dataclass
class PipelineConfig:
    """Every knob of the pipeline, JSON-serializable, seed mandatory."""

    seed: int
    workers: int = 1

    # paths
    features_dir: str = "data/features"
    annotations: str = "data/annotations_train.json"
    annotations_test: str = "data/annotations_test.json"
    model_dir: str = "models"
    report_dir: str = "reports"
    world: str = "data/world.json"

    # concept learning
    method: str = "kmeans"
    k: int = concepts.DEFAULT_K
    eta: float = concepts.DEFAULT_ETA
    db_threshold: float | None = 1.0
    sample_per_image: int = 100

    # spatial / evidence
    train_radius_px: float = VOTING_TRAIN_RADIUS_PX
    window_radius: int | None = None
    support_mass: float = spatial.DEFAULT_SUPPORT_MASS
    bins: int = likelihood.DEFAULT_BINS
    epsilon: float = likelihood.DEFAULT_EPSILON
    voters_per_part: int = likelihood.DEFAULT_VOTERS_PER_PART
    match_radius_px: float = CONCEPT_MATCH_RADIUS_PX

    # detection
    beta: float = voting.DEFAULT_BETA
    nms_radius_px: float = voting.DEFAULT_NMS_RADIUS_PX
    score_threshold: float = 0.0
    fn_percentile: float = voting.DEFAULT_FN_PERCENTILE
    scales: tuple[float, ...] = voting.DEFAULT_SCALE_SET

    # evaluation
    occlusion_levels: tuple[int, ...] = (0, 1, 5, 9)
    eval_seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    n_test: int = 30
    scale_modes: tuple[str, ...] = ("known", "unknown")
    single_concept: bool = True

    # sparse encoding
    sparse_threshold: float = concepts.DEFAULT_SPARSE_THRESHOLD
    sparse_sweep: tuple[float, ...] = tuple(round(0.05 * i, 2) for i in range(1, 29))

    # synthetic world
    synth_dim: int = 24
    synth_parts: tuple[str, ...] = tuple(name for name, _, _ in DEFAULT_TEMPLATE)
    synth_template: tuple[tuple[str, int, int], ...] = DEFAULT_TEMPLATE
    synth_backgrounds: int = 3
    synth_occluders: int = 2
    synth_kappa: float = 150.0
    synth_kappa_background: float = 40.0
    synth_scale_fidelity: float = 5.0
    synth_part_radius_px: float = 22.0
    patch_side: float = 100.0
    gamma: float = 100.0
    negatives_per_scene: int = 12
    image_width: int = 288
    image_height: int = 288
    stride: int = 16
    offset: int = 8
    n_train: int = 30

    # Fields whose values shape the trained models; hashed into the manifest.
    TRAIN_FIELDS = (
        "seed", "method", "k", "eta", "db_threshold", "sample_per_image",
        "train_radius_px", "window_radius", "support_mass", "bins", "epsilon",
        "voters_per_part",
    )

    def validate(self) -> None:
        checks = [
            (self.seed >= 0, "seed must be a nonnegative integer"),
            (self.workers >= 1, "workers must be >= 1"),
            (self.method in ("kmeans", "vmf"), "method must be 'kmeans' or 'vmf'"),
            (self.k >= 1, "k must be >= 1"),
            (self.eta > 0, "eta must be positive"),
            (self.db_threshold is None or self.db_threshold >= 0, "db_threshold must be >= 0 or null"),
            (self.sample_per_image >= 1, "sample_per_image must be >= 1"),
            (self.train_radius_px > 0, "train_radius_px must be positive"),
            (self.window_radius is None or self.window_radius >= 1, "window_radius must be >= 1 or null"),
            (0 < self.support_mass <= 1, "support_mass must lie in (0, 1]"),
            (self.bins >= 1, "bins must be >= 1"),
            (self.epsilon > 0, "epsilon must be positive"),
            (self.voters_per_part >= 1, "voters_per_part must be >= 1"),
            (self.match_radius_px > 0, "match_radius_px must be positive"),
            (0 <= self.beta <= 1, "beta must lie in [0, 1]"),
            (self.nms_radius_px > 0, "nms_radius_px must be positive"),
            (0 < self.fn_percentile <= 1, "fn_percentile must lie in (0, 1]"),
            (all(s > 0 for s in self.scales), "scales must be positive"),
            (all(lv in OCCLUSION_LEVELS for lv in self.occlusion_levels),
             f"occlusion_levels must be drawn from {sorted(OCCLUSION_LEVELS)}"),
            (len(self.eval_seeds) >= 1, "eval_seeds must be nonempty"),
            (self.n_test >= 1 and self.n_train >= 1, "scene counts must be >= 1"),
            (all(m in ("known", "unknown") for m in self.scale_modes), "scale_modes must be known/unknown"),
            (0 <= self.sparse_threshold, "sparse_threshold must be >= 0"),
            (self.synth_dim >= 2, "synth_dim must be >= 2"),
            (self.stride >= 1 and self.image_width >= 1 and self.image_height >= 1,
             "image geometry must be positive"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    @classmethod
    def from_dict(cls, doc: dict) -> "PipelineConfig":
        if "seed" not in doc:
            raise ConfigError("config must set 'seed'")
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = dict(doc)
        for key in ("scales", "occlusion_levels", "eval_seeds", "scale_modes",
                    "synth_parts", "sparse_sweep"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        if "synth_template" in kwargs:
            kwargs["synth_template"] = tuple(
                (str(p), int(dx), int(dy)) for p, dx, dy in kwargs["synth_template"]
            )
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}")
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        doc = dataclasses.asdict(self)
        for key, value in doc.items():
            if isinstance(value, tuple):
                doc[key] = list(value)
        doc["synth_template"] = [list(t) for t in self.synth_template]
        return doc

    def train_hash(self) -> str:
        subset = {name: getattr(self, name) for name in self.TRAIN_FIELDS}
        blob = json.dumps(subset, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def base_spec(self) -> LatticeSpec:
        return LatticeSpec(self.image_width, self.image_height, self.stride, self.offset)


# ---------------------------------------------------------------------------
# World serialization
# ---------------------------------------------------------------------------


def save_world(world: SyntheticWorld, path) -> None:
    doc = {
        "dim": world.dim,
        "part_names": list(world.part_names),
        "part_signatures": [[float(x) for x in row] for row in world.part_signatures],
        "background_signatures": [[float(x) for x in row] for row in world.background_signatures],
        "occluder_signatures": [[float(x) for x in row] for row in world.occluder_signatures],
        "templates": [[list(entry) for entry in t] for t in world.templates],
        "part_radius_px": world.part_radius_px,
        "patch_side": world.patch_side,
        "gamma": world.gamma,
        "kappa": world.kappa,
        "kappa_background": world.kappa_background,
        "scale_fidelity": world.scale_fidelity,
        "negatives_per_scene": world.negatives_per_scene,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def load_world(path) -> SyntheticWorld:
    with open(path) as fh:
        doc = json.load(fh)
    return SyntheticWorld(
        dim=int(doc["dim"]),
        part_names=tuple(doc["part_names"]),
        part_signatures=np.array(doc["part_signatures"], dtype=np.float64),
        background_signatures=np.array(doc["background_signatures"], dtype=np.float64),
        occluder_signatures=np.array(doc["occluder_signatures"], dtype=np.float64),
        templates=tuple(tuple((str(p), int(dx), int(dy)) for p, dx, dy in t) for t in doc["templates"]),
        part_radius_px=float(doc["part_radius_px"]),
        patch_side=float(doc["patch_side"]),
        gamma=float(doc["gamma"]),
        kappa=float(doc["kappa"]),
        kappa_background=float(doc["kappa_background"]),
        scale_fidelity=float(doc["scale_fidelity"]),
        negatives_per_scene=int(doc["negatives_per_scene"]),
    )


# ---------------------------------------------------------------------------
# Stage runners
# ---------------------------------------------------------------------------


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _ordered_map(fn, items, workers: int):
    if workers <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def run_synth(config: PipelineConfig) -> None:
    """Generate the synthetic world plus train/test scenes and annotations."""
    config.validate()
    world = SyntheticWorld.random(
        dim=config.synth_dim,
        part_names=config.synth_parts,
        templates=(config.synth_template,),
        seed=derive_seed(config.seed, "world"),
        n_backgrounds=config.synth_backgrounds,
        n_occluders=config.synth_occluders,
        part_radius_px=config.synth_part_radius_px,
        patch_side=config.patch_side,
        gamma=config.gamma,
        kappa=config.synth_kappa,
        kappa_background=config.synth_kappa_background,
        scale_fidelity=config.synth_scale_fidelity,
        negatives_per_scene=config.negatives_per_scene,
    )
    Path(config.world).parent.mkdir(parents=True, exist_ok=True)
    save_world(world, config.world)
    spec = config.base_spec()
    for split, count, ann_path in (
        ("train", config.n_train, config.annotations),
        ("test", config.n_test, config.annotations_test),
    ):
        out_dir = Path(config.features_dir) / split
        out_dir.mkdir(parents=True, exist_ok=True)
        images = []
        for i in range(count):
            fmap, ann = generate_scene(
                world, spec, derive_seed(config.seed, split, i), image_id=f"{split}-{i:04d}"
            )
            write_feature_map(fmap, out_dir / f"{split}-{i:04d}.fmap")
            images.extend(ann.images)
        Path(ann_path).parent.mkdir(parents=True, exist_ok=True)
        write_annotations(
            AnnotationSet(images=images, patch_side=world.patch_side, gamma=world.gamma), ann_path
        )


def _load_training_maps(config: PipelineConfig) -> tuple[dict[str, FeatureMap], AnnotationSet]:
    ann_path = Path(config.annotations)
    if not ann_path.exists():
        raise ConfigError(f"annotation file not found: {ann_path}")
    annotations = read_annotations(ann_path)
    maps = {}
    for img in annotations.images:
        fpath = Path(config.features_dir) / "train" / f"{img.image_id}.fmap"
        if not fpath.exists():
            raise ConfigError(f"feature map not found: {fpath}")
        fmap = read_feature_map(fpath)
        normalize_in_place(fmap)
        maps[img.image_id] = fmap
    return maps, annotations


def run_train(config: PipelineConfig) -> voting.VotingModels:
    """Fit concepts, spatial statistics, evidence, and voters, then save them."""
    config.validate()
    maps, annotations = _load_training_maps(config)
    ordered = [maps[img.image_id] for img in annotations.images]
    points = sample_vectors(ordered, config.sample_per_image, derive_seed(config.seed, "sample"))

    if config.method == "kmeans":
        fit = concepts.kmeans_fit(points, config.k, derive_seed(config.seed, "kmeans"))
        bank, assignment = fit.bank, fit.assignment
        if config.db_threshold is not None:
            bank, assignment = concepts.merge_by_db(bank, assignment, points, config.db_threshold)
        bank.eta = config.eta
    else:
        fit = concepts.vmf_fit(points, config.k, config.eta, derive_seed(config.seed, "vmf"))
        bank = fit.bank
    bank.validate()

    spatial_model = spatial.fit_spatial_model(
        maps, annotations, bank,
        radius_px=config.train_radius_px,
        window_radius=config.window_radius,
        support_mass=config.support_mass,
    )
    evidence_model = likelihood.fit_evidence_model(
        maps, annotations, bank, spatial_model, bins=config.bins, epsilon=config.epsilon
    )
    voters = likelihood.select_voters(evidence_model, config.voters_per_part)

    model_dir = Path(config.model_dir)
    model_dir.mkdir(parents=True, exist_ok=True)
    concepts.save_bank(bank, model_dir / "concepts.bank")
    spatial.save_spatial_model(spatial_model, model_dir / "spatial.json")
    likelihood.save_evidence_model(evidence_model, model_dir / "evidence.bin")
    likelihood.save_voters(voters, model_dir / "voters.json")

    inputs = {str(Path(config.annotations)): _sha256(Path(config.annotations))}
    for img in annotations.images:
        p = Path(config.features_dir) / "train" / f"{img.image_id}.fmap"
        inputs[str(p)] = _sha256(p)
    artifacts = {
        name: _sha256(model_dir / name)
        for name in ("concepts.bank", "spatial.json", "evidence.bin", "voters.json")
    }
    manifest = {"config_hash": config.train_hash(), "inputs": inputs, "artifacts": artifacts}
    with open(model_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return voting.VotingModels(bank, spatial_model, evidence_model, voters)


def load_models(model_dir) -> voting.VotingModels:
    model_dir = Path(model_dir)
    for name in ("concepts.bank", "spatial.json", "evidence.bin", "voters.json"):
        if not (model_dir / name).exists():
            raise ConfigError(f"missing model file: {model_dir / name}")
    return voting.VotingModels(
        concepts.load_bank(model_dir / "concepts.bank"),
        spatial.load_spatial_model(model_dir / "spatial.json"),
        likelihood.load_evidence_model(model_dir / "evidence.bin"),
        likelihood.load_voters(model_dir / "voters.json"),
    )


def check_manifest(config: PipelineConfig, model_dir, allow_stale: bool = False) -> None:
    manifest_path = Path(model_dir) / "manifest.json"
    if not manifest_path.exists():
        if allow_stale:
            return
        raise StaleModelError(f"no manifest at {manifest_path}; re-train or pass --allow-stale")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    if manifest.get("config_hash") != config.train_hash() and not allow_stale:
        raise StaleModelError(
            "saved models were trained under a different configuration; "
            "re-train or pass --allow-stale"
        )


def run_eval(config: PipelineConfig, model_dir=None, allow_stale: bool = False):
    """Run the occlusion benchmark against trained models and write reports."""
    config.validate()
    model_dir = Path(model_dir or config.model_dir)
    check_manifest(config, model_dir, allow_stale)
    models = load_models(model_dir)
    world_path = Path(config.world)
    if not world_path.exists():
        raise ConfigError(f"world file not found: {world_path}")
    world = load_world(world_path)

    bench = BenchmarkConfig(
        levels=config.occlusion_levels,
        scales=tuple(sorted(set(config.scales) | {1.0})),
        seeds=config.eval_seeds,
        n_test=config.n_test,
        beta=config.beta,
        nms_radius_px=config.nms_radius_px,
        score_threshold=config.score_threshold,
        fn_percentile=config.fn_percentile,
        single_concept=config.single_concept,
        scale_modes=config.scale_modes,
        workers=config.workers,
    )
    report = occlusion_benchmark(world, config.base_spec(), models, bench)
    report_dir = Path(config.report_dir)
    report_dir.mkdir(parents=True, exist_ok=True)
    write_report_csv(report, report_dir / "benchmark.csv")
    write_report_json(report, report_dir / "summary.json")
    return report


def run_detect(config: PipelineConfig, inputs: list[str], out_path, model_dir=None,
               multi_scale: bool = False, allow_stale: bool = False) -> int:
    """Detect parts in the given feature-map files; write JSON lines."""
    config.validate()
    models = load_models(Path(model_dir or config.model_dir))
    check_manifest(config, Path(model_dir or config.model_dir), allow_stale)

    def load(path):
        fmap = read_feature_map(path)
        normalize_in_place(fmap)
        return fmap

    maps = [(Path(p).stem.replace(".fmap", ""), load(p)) for p in inputs]
    lines = []
    if multi_scale:
        dets = voting.multi_scale_detect(
            [m for _, m in maps], models, beta=config.beta,
            nms_radius_px=config.nms_radius_px, score_threshold=config.score_threshold,
            fn_percentile=config.fn_percentile,
        )
        image_id = maps[0][0]
        lines = [(image_id, d) for d in dets]
    else:
        def one(item):
            image_id, fmap = item
            return [
                (image_id, d)
                for d in voting.detect(
                    fmap, models, beta=config.beta, nms_radius_px=config.nms_radius_px,
                    score_threshold=config.score_threshold, fn_percentile=config.fn_percentile,
                )
            ]
        for chunk in _ordered_map(one, maps, config.workers):
            lines.extend(chunk)
    with open(out_path, "w") as fh:
        for image_id, d in lines:
            fh.write(json.dumps(
                {"image_id": image_id, "part": d.part, "x": d.x, "y": d.y,
                 "scale": d.scale, "score": d.score},
                sort_keys=True,
            ))
            fh.write("\n")
    return len(lines)


def run_encode(config: PipelineConfig, inputs: list[str], out_path, model_dir=None) -> None:
    """Sparse-encode feature maps and write the activation-count sweep."""
    config.validate()
    models = load_models(Path(model_dir or config.model_dir))
    maps = []
    for p in inputs:
        fmap = read_feature_map(p)
        normalize_in_place(fmap)
        maps.append(fmap)
    hist = concepts.activation_histogram(maps, models.bank, list(config.sparse_sweep))
    mean_actives = [concepts.encode_sparse(m, models.bank, config.sparse_threshold)[1] for m in maps]
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as fh:
        fh.write("threshold,cells_0,cells_1,cells_2,cells_3plus\n")
        for t, row in zip(hist.thresholds, hist.counts):
            fh.write(f"{t:.10g},{row[0]},{row[1]},{row[2]},{row[3]}\n")
    summary = {
        "crossing_threshold": hist.crossing,
        "encode_threshold": config.sparse_threshold,
        "mean_active_per_cell": mean_actives,
        "images": [str(p) for p in inputs],
    }
    with open(out.with_suffix(".json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")


def run_inspect(config: PipelineConfig, model_dir=None) -> dict:
    models = load_models(Path(model_dir or config.model_dir))
    doc = {
        "bank": {
            "method": models.bank.method,
            "K": len(models.bank),
            "D": models.bank.dim,
            "eta": models.bank.eta,
            "merges": len(models.bank.merge_log),
        },
        "spatial": {
            "window_radius": models.spatial.window_radius,
            "parts": models.spatial.parts,
            "pairs": len(models.spatial.entries),
            "mean_support_size": float(
                np.mean([e.support.sum() for e in models.spatial.entries.values()])
            ),
        },
        "evidence": {
            "bins": models.evidence.bins,
            "epsilon": models.evidence.epsilon,
            "pairs": len(models.evidence.entries),
        },
        "voters": {part: ids for part, ids in sorted(models.voters.voters.items())},
    }
    return doc


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def _apply_overrides(doc: dict, overrides: list[str]) -> dict:
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, _, raw = item.partition("=")
        try:
            doc[key] = json.loads(raw)
        except json.JSONDecodeError:
            doc[key] = raw
    return doc


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="conceptvote",
        description="Learn visual concepts and detect parts by compositional voting.",
    )
    parser.add_argument("--config", required=True, help="path to the JSON config")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value (JSON-typed)")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", help="generate the synthetic world and scenes")
    sub.add_parser("train", help="fit concepts, spatial, evidence, and voters")
    p_detect = sub.add_parser("detect", help="detect parts in feature-map files")
    p_detect.add_argument("inputs", nargs="+", help="feature-map files (FMAP1)")
    p_detect.add_argument("--out", required=True, help="output JSONL path")
    p_detect.add_argument("--multi-scale", action="store_true",
                          help="treat the inputs as one scene at several scales")
    p_detect.add_argument("--allow-stale", action="store_true")
    p_eval = sub.add_parser("eval", help="run the occlusion benchmark")
    p_eval.add_argument("--allow-stale", action="store_true",
                        help="skip the manifest/config hash check")
    p_encode = sub.add_parser("encode", help="sparse-encode feature maps")
    p_encode.add_argument("inputs", nargs="+", help="feature-map files (FMAP1)")
    p_encode.add_argument("--out", required=True, help="output CSV path")
    sub.add_parser("inspect", help="print a summary of the trained models")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        with open(args.config) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: cannot read config {args.config}: {exc}", file=sys.stderr)
        return 2
    try:
        doc = _apply_overrides(doc, args.set)
        config = PipelineConfig.from_dict(doc)
        if args.command == "synth":
            run_synth(config)
        elif args.command == "train":
            run_train(config)
        elif args.command == "detect":
            n = run_detect(config, args.inputs, args.out, multi_scale=args.multi_scale,
                           allow_stale=args.allow_stale)
            print(f"wrote {n} detections to {args.out}")
        elif args.command == "eval":
            report = run_eval(config, allow_stale=args.allow_stale)
            for lv in report.levels:
                for mode in sorted({r.scale_mode for r in report.rows}):
                    print(f"level {lv}: voting {mode}-scale mean AP = "
                          f"{report.mean_ap(lv, 'voting', mode):.4f}")
        elif args.command == "encode":
            run_encode(config, args.inputs, args.out)
        elif args.command == "inspect":
            print(json.dumps(run_inspect(config), indent=2, sort_keys=True))
    except (ConfigError, FormatError, StaleModelError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return 2
    except ConceptVoteError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 3
    except FileNotFoundError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
