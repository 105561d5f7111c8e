"""End-to-end pipeline: project, coarse labels, KNN refine, pool, refine.

A corpus directory holds ``scans/*.bin`` plus optional ``labels/*.label``
and, for the loaded-probability mode, ``coarse/*.probs`` (raw float32
H*W*C). Every run echoes its effective configuration into the output
directory so results are reproducible from the artifacts alone.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import kitti_io
from ._rand import derive_seed
from .coarse import CoarseSegmentation, OracleNoiseSpec, load_coarse, oracle_coarse
from .errors import DataFormatError, NumericError
from .kitti_io import ClassMap, PointCloud, SyntheticSceneSpec, atomic_write_bytes
from .knn_refiner import KnnConfig, knn_refine
from .metrics import ConfusionMatrix
from .projection import ProjectionConfig, RangeImage, back_project_labels, project
from .refiner import (
    ModelDims,
    RefinerModel,
    load_checkpoint,
    refine,
    save_checkpoint,
    train,
    TrainConfig,
)
from .uncertainty import SelectionConfig, UncertainPointSet, build_pool

COARSE_SUFFIX = ".probs"


@dataclass
class PipelineConfig:
    projection: ProjectionConfig = field(default_factory=ProjectionConfig)
    knn: KnnConfig = field(default_factory=KnnConfig)
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    oracle: OracleNoiseSpec = field(default_factory=OracleNoiseSpec)
    scene: SyntheticSceneSpec = field(default_factory=SyntheticSceneSpec)
    mode: str = "oracle"            # coarse source: "oracle" | "loaded"
    class_map: str | None = None    # YAML path; None = packaged Semantic-KITTI map
    use_knn: bool = True
    use_refiner: bool = True
    refine_context_limit: int = 16384
    refine_chunk_size: int = 4096

    def __post_init__(self):
        if self.mode not in ("oracle", "loaded"):
            raise DataFormatError("mode must be 'oracle' or 'loaded'")

    def load_class_map(self) -> ClassMap:
        if self.class_map is None:
            return ClassMap.semantic_kitti()
        return ClassMap.from_yaml(self.class_map)

    def to_dict(self) -> dict:
        doc = dataclasses.asdict(self)
        weights = doc["train"]["class_weights"]
        if weights is not None:
            doc["train"]["class_weights"] = [float(w) for w in np.asarray(weights)]
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "PipelineConfig":
        doc = dict(doc or {})
        kwargs = {}
        for f in dataclasses.fields(cls):
            if f.name not in doc:
                continue
            value = doc.pop(f.name)
            if dataclasses.is_dataclass(f.type) or f.name in (
                "projection", "knn", "selection", "train", "oracle", "scene",
            ):
                sub_cls = {
                    "projection": ProjectionConfig,
                    "knn": KnnConfig,
                    "selection": SelectionConfig,
                    "train": TrainConfig,
                    "oracle": OracleNoiseSpec,
                    "scene": SyntheticSceneSpec,
                }[f.name]
                known = {sf.name for sf in dataclasses.fields(sub_cls)}
                unknown = set(value) - known
                if unknown:
                    raise DataFormatError(f"unknown keys in config section {f.name}: {sorted(unknown)}")
                kwargs[f.name] = sub_cls(**value)
            else:
                kwargs[f.name] = value
        if doc:
            raise DataFormatError(f"unknown keys in config: {sorted(doc)}")
        return cls(**kwargs)

    @classmethod
    def from_yaml(cls, path) -> "PipelineConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(yaml.safe_load(fh))

    def save_yaml(self, path) -> None:
        payload = yaml.safe_dump(self.to_dict(), sort_keys=True, default_flow_style=False)
        atomic_write_bytes(path, payload.encode("utf-8"))


def _echo_config(cfg: PipelineConfig, out_dir: Path) -> None:
    cfg.save_yaml(Path(out_dir) / "config.yaml")


def list_scan_paths(data_dir) -> list[Path]:
    scan_dir = Path(data_dir) / "scans"
    if not scan_dir.is_dir():
        raise DataFormatError(f"no scans directory under {data_dir}")
    paths = sorted(scan_dir.glob("*.bin"))
    if not paths:
        raise DataFormatError(f"no .bin scans in {scan_dir}")
    return paths


def _label_path(data_dir, scan_path: Path) -> Path | None:
    candidate = Path(data_dir) / "labels" / (scan_path.stem + ".label")
    return candidate if candidate.exists() else None


def _stage(stage: str, scan_id: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except DataFormatError as exc:
        raise DataFormatError(f"stage '{stage}' failed on scan {scan_id}: {exc}") from exc
    except NumericError as exc:
        raise NumericError(f"stage '{stage}' failed on scan {scan_id}: {exc}") from exc


def coarse_for_scan(
    cloud: PointCloud,
    img: RangeImage,
    cfg: PipelineConfig,
    class_map: ClassMap,
    data_dir=None,
) -> CoarseSegmentation:
    """The backbone stand-in: load exported probabilities or run the oracle."""
    if cfg.mode == "loaded":
        if data_dir is None:
            raise DataFormatError("loaded mode needs a corpus directory with coarse/*.probs")
        path = Path(data_dir) / "coarse" / (cloud.scan_id + COARSE_SUFFIX)
        if not path.exists():
            raise DataFormatError(f"missing coarse probabilities {path}")
        return load_coarse(path, img.height, img.width, class_map.num_classes)
    if cloud.labels is None:
        raise DataFormatError("oracle mode needs ground-truth labels")
    return oracle_coarse(img, cloud.labels, cfg.oracle, class_map.num_classes)


@dataclass
class ScanResult:
    labels: np.ndarray
    image: RangeImage
    pool: UncertainPointSet | None
    knn_labels: np.ndarray


def _scan_front(cloud: PointCloud, cfg: PipelineConfig, class_map: ClassMap, data_dir=None):
    """Shared front half: projection, coarse labels, KNN-or-back-projection."""
    sid = cloud.scan_id or "<unnamed>"
    img = _stage("project", sid, project, cloud, cfg.projection)
    seg = _stage("coarse", sid, coarse_for_scan, cloud, img, cfg, class_map, data_dir)
    pixel_labels = np.argmax(seg.probs, axis=2).astype(np.int32)
    pixel_labels[~seg.valid_mask] = class_map.ignore_class
    if cfg.use_knn:
        labels = _stage("knn", sid, knn_refine, img, pixel_labels, cfg.knn)
    else:
        labels = _stage("back-project", sid, back_project_labels, img, pixel_labels)
    return sid, img, seg, labels


def refine_scan(
    cloud: PointCloud,
    cfg: PipelineConfig,
    class_map: ClassMap,
    model: RefinerModel | None,
    data_dir=None,
) -> ScanResult:
    """Run the per-scan pipeline; the refiner stage needs a trained model."""
    sid, img, seg, labels = _scan_front(cloud, cfg, class_map, data_dir)
    knn_labels = labels

    pool = None
    if cfg.use_refiner and model is not None:
        pool = _stage("pool", sid, build_pool, cloud, img, seg, cfg.selection, labels)
        if len(pool):
            refined = _stage(
                "refine", sid, refine, model, pool,
                cfg.refine_context_limit, cfg.refine_chunk_size, cfg.selection.seed,
            )
            labels = labels.copy()
            labels[pool.indices] = refined
    return ScanResult(labels=labels, image=img, pool=pool, knn_labels=knn_labels)


def build_pool_for_scan(
    cloud: PointCloud, cfg: PipelineConfig, class_map: ClassMap, data_dir=None
) -> tuple[UncertainPointSet, np.ndarray]:
    """Pool plus per-entry ground truth, as consumed by training."""
    if cloud.labels is None:
        raise DataFormatError(f"scan {cloud.scan_id} has no labels; cannot build a training pool")
    sid, img, seg, labels = _scan_front(cloud, cfg, class_map, data_dir)
    pool = _stage("pool", sid, build_pool, cloud, img, seg, cfg.selection, labels)
    return pool, cloud.labels[pool.indices]


def run_train(data_dir, out_dir, cfg: PipelineConfig) -> tuple[RefinerModel, Path]:
    """Build pools for every labeled scan, train the refiner, save artifacts."""
    data_dir = Path(data_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    class_map = cfg.load_class_map()

    scans = []
    for scan_path in list_scan_paths(data_dir):
        label_path = _label_path(data_dir, scan_path)
        if label_path is None:
            continue
        cloud = kitti_io.read_point_cloud(scan_path)
        cloud.labels = kitti_io.read_labels(label_path, class_map)
        scans.append(build_pool_for_scan(cloud, cfg, class_map, data_dir))
    if not scans:
        raise DataFormatError(f"no labeled scans under {data_dir}")

    num_classes = class_map.num_classes
    model = RefinerModel(
        ModelDims(in_dim=5 + num_classes, num_classes=num_classes), seed=cfg.train.seed
    )
    log = train(
        model, scans, cfg.train, n_u=cfg.selection.n_u, ignore_class=class_map.ignore_class
    )

    ckpt_path = out_dir / "model.ckpt"
    save_checkpoint(model, ckpt_path)
    lines = [f"{rec.epoch} {rec.loss:.9f} {rec.wce:.9f} {rec.lovasz:.9f}" for rec in log]
    atomic_write_bytes(out_dir / "train_log.txt", ("\n".join(lines) + "\n").encode("ascii"))
    _echo_config(cfg, out_dir)
    return model, ckpt_path


def run_refine(data_dir, out_dir, cfg: PipelineConfig, model: RefinerModel | None) -> dict:
    """Refine every scan in the corpus; writes labels and, when ground truth
    is present, a metrics report. Returns the report as a dict."""
    data_dir = Path(data_dir)
    out_dir = Path(out_dir)
    pred_dir = out_dir / "predictions"
    pred_dir.mkdir(parents=True, exist_ok=True)
    class_map = cfg.load_class_map()

    cm = ConfusionMatrix(class_map.num_classes, class_map.ignore_class)
    have_gt = False
    for scan_path in list_scan_paths(data_dir):
        cloud = kitti_io.read_point_cloud(scan_path)
        label_path = _label_path(data_dir, scan_path)
        if label_path is not None:
            cloud.labels = kitti_io.read_labels(label_path, class_map)
        result = refine_scan(cloud, cfg, class_map, model, data_dir)
        kitti_io.write_labels(result.labels, class_map, pred_dir / (scan_path.stem + ".label"))
        if cloud.labels is not None:
            have_gt = True
            cm.accumulate(cloud.labels, result.labels)

    report = {"num_scans": len(list(pred_dir.glob("*.label")))}
    if have_gt:
        report.update(summarize(cm, class_map))
        write_report(cm, class_map, out_dir)
    _echo_config(cfg, out_dir)
    return report


def run_eval(pred_dir, gt_dir, class_map: ClassMap, out_dir=None) -> dict:
    """Compare prediction and ground-truth label directories scan by scan."""
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    pred = {p.stem: p for p in sorted(pred_dir.glob("*.label"))}
    gt = {p.stem: p for p in sorted(gt_dir.glob("*.label"))}
    if not gt:
        raise DataFormatError(f"no .label files in {gt_dir}")
    missing_pred = sorted(set(gt) - set(pred))
    missing_gt = sorted(set(pred) - set(gt))
    if missing_pred or missing_gt:
        raise DataFormatError(
            f"scan sets differ: missing predictions {missing_pred}, missing ground truth {missing_gt}"
        )

    cm = ConfusionMatrix(class_map.num_classes, class_map.ignore_class)
    for stem, gt_path in sorted(gt.items()):
        gt_labels = kitti_io.read_labels(gt_path, class_map)
        pred_labels = kitti_io.read_labels(pred[stem], class_map)
        if len(gt_labels) != len(pred_labels):
            raise DataFormatError(
                f"scan {stem}: {len(pred_labels)} predictions vs {len(gt_labels)} ground-truth points"
            )
        cm.accumulate(gt_labels, pred_labels)

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_report(cm, class_map, out_dir)
    return summarize(cm, class_map)


def summarize(cm: ConfusionMatrix, class_map: ClassMap) -> dict:
    iou = cm.per_class_iou()
    return {
        "miou": cm.miou(),
        "oacc": cm.oacc(),
        "iou": {
            class_map.name(c): float(iou[c])
            for c in range(cm.num_classes)
            if not np.isnan(iou[c])
        },
    }


def format_report(cm: ConfusionMatrix, class_map: ClassMap) -> str:
    summary = summarize(cm, class_map)
    width = max([len(n) for n in summary["iou"]] + [8])
    lines = [f"{'class':<{width}}  iou"]
    for name, value in summary["iou"].items():
        lines.append(f"{name:<{width}}  {value:.4f}")
    lines.append(f"{'mIoU':<{width}}  {summary['miou']:.4f}")
    lines.append(f"{'oACC':<{width}}  {summary['oacc']:.4f}")
    return "\n".join(lines) + "\n"


def write_report(cm: ConfusionMatrix, class_map: ClassMap, out_dir) -> None:
    out_dir = Path(out_dir)
    summary = summarize(cm, class_map)
    atomic_write_bytes(out_dir / "report.txt", format_report(cm, class_map).encode("ascii"))
    kv = [f"miou {summary['miou']:.9f}", f"oacc {summary['oacc']:.9f}"]
    kv += [f"iou.{name} {value:.9f}" for name, value in summary["iou"].items()]
    atomic_write_bytes(out_dir / "report.kv", ("\n".join(kv) + "\n").encode("ascii"))


DEFAULT_COLOR = (128, 128, 128)


def export_ply(cloud: PointCloud, labels: np.ndarray, palette: dict, path,
               ignore_class: int = 0) -> None:
    """ASCII PLY with per-vertex coordinates and palette colors.

    Classes missing from the palette are an error, except the ignore class
    which falls back to gray.
    """
    labels = np.asarray(labels)
    if labels.shape != (len(cloud),):
        raise DataFormatError("labels must cover every point")
    used = np.unique(labels)
    colors = {}
    for cls in used.tolist():
        if cls in palette:
            colors[cls] = tuple(palette[cls])
        elif cls == ignore_class:
            colors[cls] = DEFAULT_COLOR
        else:
            raise DataFormatError(f"palette has no color for class {cls}")

    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(cloud)}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "end_header",
    ]
    xyz = cloud.points[:, :3]
    for i in range(len(cloud)):
        r, g, b = colors[int(labels[i])]
        lines.append(f"{xyz[i, 0]:.6f} {xyz[i, 1]:.6f} {xyz[i, 2]:.6f} {r} {g} {b}")
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode("ascii"))


def generate_corpus(out_dir, cfg: PipelineConfig, num_scans: int) -> list[str]:
    """Write ``num_scans`` synthetic scans + labels in corpus layout."""
    if num_scans < 1:
        raise DataFormatError("num_scans must be >= 1")
    out_dir = Path(out_dir)
    class_map = cfg.load_class_map()
    stems = []
    for i in range(num_scans):
        spec = dataclasses.replace(cfg.scene, seed=derive_seed(cfg.scene.seed, "scan", i))
        cloud = kitti_io.generate_scene(spec)
        stem = f"{i:06d}"
        kitti_io.write_point_cloud(cloud, out_dir / "scans" / (stem + ".bin"))
        kitti_io.write_labels(cloud.labels, class_map, out_dir / "labels" / (stem + ".label"))
        stems.append(stem)
    _echo_config(cfg, out_dir)
    return stems
