"""Dataset manifests, image/depth codecs, COLMAP text ingestion, run config.

Poses follow the COLMAP convention verbatim: stored world-to-camera, scalar-
first unit quaternions.  Manifests are line-delimited JSON records so they
stay appendable and diffable.  Depth rasters are PFM (float) or 16-bit PNG
with a manifest-declared scale factor.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .costvolume import ViewCamera
from .errors import ConfigError, DataError
from .geometry import CameraIntrinsics, RigidPose
from .samples import MultiViewSample

log = logging.getLogger(__name__)


# -- quaternions ------------------------------------------------------------


def quaternion_to_matrix(q: np.ndarray) -> np.ndarray:
    """Scalar-first unit quaternion to rotation matrix."""
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quaternion(R: np.ndarray) -> np.ndarray:
    """Rotation matrix to scalar-first quaternion (w >= 0)."""
    Rxx, Ryx, Rzx, Rxy, Ryy, Rzy, Rxz, Ryz, Rzz = np.asarray(R).flat
    K = (
        np.array(
            [
                [Rxx - Ryy - Rzz, 0, 0, 0],
                [Ryx + Rxy, Ryy - Rxx - Rzz, 0, 0],
                [Rzx + Rxz, Rzy + Ryz, Rzz - Rxx - Ryy, 0],
                [Ryz - Rzy, Rzx - Rxz, Rxy - Ryx, Rxx + Ryy + Rzz],
            ]
        )
        / 3.0
    )
    eigvals, eigvecs = np.linalg.eigh(K)
    q = eigvecs[[3, 0, 1, 2], np.argmax(eigvals)]
    return -q if q[0] < 0 else q


# -- COLMAP text model --------------------------------------------------------


def parse_colmap_text(cameras_file, images_file) -> dict[str, ViewCamera]:
    """Read COLMAP text-model cameras.txt/images.txt, keyed by image name.

    Supports PINHOLE and SIMPLE_PINHOLE camera models; comment lines start
    with '#'; the POINTS2D line following each image line is skipped.
    Slightly non-unit quaternions are normalized with a warning.
    """
    cameras: dict[int, CameraIntrinsics] = {}
    for line in Path(cameras_file).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        cam_id, model = int(parts[0]), parts[1]
        width, height = int(parts[2]), int(parts[3])
        params = [float(p) for p in parts[4:]]
        if model == "PINHOLE":
            fx, fy, cx, cy = params[:4]
        elif model == "SIMPLE_PINHOLE":
            fx = fy = params[0]
            cx, cy = params[1], params[2]
        else:
            raise DataError(f"unsupported COLMAP camera model {model!r} (camera {cam_id})")
        cameras[cam_id] = CameraIntrinsics(fx, fy, cx, cy, width, height)

    out: dict[str, ViewCamera] = {}
    lines = [
        ln.strip()
        for ln in Path(images_file).read_text().splitlines()
        if ln.strip() and not ln.strip().startswith("#")
    ]
    for header in lines[0::2]:
        parts = header.split()
        q = np.array([float(v) for v in parts[1:5]])
        t = np.array([float(v) for v in parts[5:8]])
        cam_id, name = int(parts[8]), parts[9]
        norm = np.linalg.norm(q)
        if abs(norm - 1.0) > 1e-6:
            log.warning("image %s: quaternion norm %.8f, normalizing", name, norm)
        q = q / norm
        if cam_id not in cameras:
            raise DataError(f"image {name} references unknown camera id {cam_id}")
        out[name] = ViewCamera(cameras[cam_id], RigidPose(quaternion_to_matrix(q), t))
    return out


def write_colmap_text(cameras_file, images_file, views: dict[str, ViewCamera]) -> None:
    """Serialize cameras back to the COLMAP text layout (one camera per image)."""
    cam_lines = ["# CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]"]
    img_lines = ["# IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME"]
    for idx, (name, view) in enumerate(views.items(), start=1):
        c = view.intrinsics
        cam_lines.append(
            f"{idx} PINHOLE {c.width} {c.height} {c.fx!r} {c.fy!r} {c.cx!r} {c.cy!r}"
        )
        q = matrix_to_quaternion(view.pose.rotation)
        t = view.pose.translation
        img_lines.append(
            f"{idx} {q[0]!r} {q[1]!r} {q[2]!r} {q[3]!r} {t[0]!r} {t[1]!r} {t[2]!r} {idx} {name}"
        )
        img_lines.append("")  # empty POINTS2D line
    Path(cameras_file).write_text("\n".join(cam_lines) + "\n")
    Path(images_file).write_text("\n".join(img_lines) + "\n")


# -- rasters ------------------------------------------------------------------


def load_image(path) -> np.ndarray:
    """8/16-bit PNG (or similar) to float [3,H,W] in [0,1]."""
    try:
        with Image.open(path) as im:
            mode = im.mode
            arr = np.asarray(im)
    except OSError as e:
        raise DataError(f"cannot decode image {path}: {e}") from e
    scale = 65535.0 if mode.startswith("I;16") or arr.dtype == np.uint16 else 255.0
    arr = arr.astype(np.float64) / scale
    if arr.ndim == 2:
        arr = np.stack([arr] * 3, axis=-1)
    return np.ascontiguousarray(arr[..., :3].transpose(2, 0, 1))


def save_image(path, image: np.ndarray) -> None:
    """Float [3,H,W] in [0,1] to 8-bit PNG."""
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    data = (arr.transpose(1, 2, 0) * 255.0).round().astype(np.uint8)
    Image.fromarray(data).save(path)


def load_labels(path) -> np.ndarray:
    """Integer label map from an 8/16-bit PNG."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im)
    except OSError as e:
        raise DataError(f"cannot decode labels {path}: {e}") from e
    if arr.ndim != 2:
        raise DataError(f"label map {path} is not single-channel")
    return arr.astype(np.int64)


def save_labels(path, labels: np.ndarray) -> None:
    arr = np.asarray(labels)
    if arr.min() < 0 or arr.max() > 65535:
        raise DataError(f"labels outside uint16 range: [{arr.min()}, {arr.max()}]")
    if arr.max() > 255:
        Image.fromarray(arr.astype(np.uint16)).save(path)
    else:
        Image.fromarray(arr.astype(np.uint8)).save(path)


def load_depth(path, scale: float | None = None) -> np.ndarray:
    """Depth in meters, [1,H,W]: PFM as-is, 16-bit PNG divided by `scale`."""
    path = Path(path)
    if path.suffix.lower() == ".pfm":
        arr = read_pfm(path)
        return arr[None] if arr.ndim == 2 else arr
    if scale is None:
        raise ConfigError(f"16-bit depth {path} needs a declared scale factor")
    try:
        with Image.open(path) as im:
            arr = np.asarray(im)
    except OSError as e:
        raise DataError(f"cannot decode depth {path}: {e}") from e
    return (arr.astype(np.float64) / float(scale))[None]


def read_pfm(path) -> np.ndarray:
    """PFM raster (rows stored bottom-up, per the format)."""
    blob = Path(path).read_bytes()
    m = re.match(rb"(P[Ff])\s+(\d+)\s+(\d+)\s+([-0-9.eE+]+)\s", blob)
    if not m:
        raise DataError(f"{path}: not a PFM file")
    color = m.group(1) == b"PF"
    width, height = int(m.group(2)), int(m.group(3))
    scale = float(m.group(4))
    endian = "<" if scale < 0 else ">"
    data = np.frombuffer(blob, dtype=f"{endian}f4", offset=m.end(),
                         count=width * height * (3 if color else 1))
    shape = (height, width, 3) if color else (height, width)
    out = data.reshape(shape)[::-1].astype(np.float64)
    return out.transpose(2, 0, 1) if color else out


def write_pfm(path, array: np.ndarray) -> None:
    arr = np.asarray(array, dtype=np.float32)
    if arr.ndim == 3 and arr.shape[0] in (1, 3):
        arr = arr.transpose(1, 2, 0)
        if arr.shape[2] == 1:
            arr = arr[..., 0]
    color = arr.ndim == 3
    header = b"PF\n" if color else b"Pf\n"
    h, w = arr.shape[:2]
    with open(path, "wb") as f:
        f.write(header)
        f.write(f"{w} {h}\n".encode())
        f.write(b"-1.0\n")  # little endian
        f.write(np.ascontiguousarray(arr[::-1]).astype("<f4").tobytes())


# -- manifest -----------------------------------------------------------------


def _camera_to_json(view: ViewCamera) -> dict:
    c = view.intrinsics
    q = matrix_to_quaternion(view.pose.rotation)
    t = view.pose.translation
    return {
        "intrinsics": {"fx": c.fx, "fy": c.fy, "cx": c.cx, "cy": c.cy,
                       "width": c.width, "height": c.height},
        "pose": {"qw": q[0], "qx": q[1], "qy": q[2], "qz": q[3],
                 "tx": t[0], "ty": t[1], "tz": t[2]},
    }


def _camera_from_json(obj: dict) -> ViewCamera:
    i = obj["intrinsics"]
    p = obj["pose"]
    q = np.array([p["qw"], p["qx"], p["qy"], p["qz"]])
    q = q / np.linalg.norm(q)
    return ViewCamera(
        CameraIntrinsics(i["fx"], i["fy"], i["cx"], i["cy"], i["width"], i["height"]),
        RigidPose(quaternion_to_matrix(q), np.array([p["tx"], p["ty"], p["tz"]])),
    )


@dataclass
class SampleRecord:
    """One manifest line: per-view file paths plus cameras and task mask."""

    sample_id: str
    split: str
    views: list[dict]  # image path + camera json + optional label paths
    task_mask: dict[str, bool]
    depth_scale: float = 1000.0

    def to_json(self) -> str:
        return json.dumps(
            {
                "id": self.sample_id,
                "split": self.split,
                "task_mask": self.task_mask,
                "depth_scale": self.depth_scale,
                "views": self.views,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "SampleRecord":
        obj = json.loads(text)
        return cls(
            sample_id=obj["id"],
            split=obj["split"],
            views=obj["views"],
            task_mask=obj["task_mask"],
            depth_scale=obj.get("depth_scale", 1000.0),
        )


@dataclass
class DatasetManifest:
    records: list[SampleRecord] = field(default_factory=list)
    root: Path = Path(".")

    def save(self, path) -> None:
        path = Path(path)
        path.write_text("".join(r.to_json() + "\n" for r in self.records))

    @classmethod
    def load(cls, path, check_files: bool = True) -> "DatasetManifest":
        path = Path(path)
        root = path.parent
        records = [SampleRecord.from_json(ln) for ln in path.read_text().splitlines() if ln.strip()]
        manifest = cls(records=records, root=root)
        if check_files:
            for rec in records:
                for view in rec.views:
                    for key in ("image", "depth", "labels", "normals", "boundary", "saliency"):
                        rel = view.get(key)
                        if rel is not None and not (root / rel).exists():
                            raise DataError(f"manifest {path}: missing file {rel} (sample {rec.sample_id})")
        return manifest

    def load_sample(self, index: int) -> MultiViewSample:
        rec = self.records[index]
        images, cameras = [], []
        depths, normals, labels, boundaries, saliencies = [], [], [], [], []
        for view in rec.views:
            images.append(load_image(self.root / view["image"]))
            cameras.append(_camera_from_json(view["camera"]))
            if view.get("depth"):
                depths.append(load_depth(self.root / view["depth"], rec.depth_scale)[0])
            if view.get("normals"):
                normals.append(read_pfm(self.root / view["normals"]))
            if view.get("labels"):
                labels.append(load_labels(self.root / view["labels"]))
            if view.get("boundary"):
                boundaries.append(load_labels(self.root / view["boundary"]).astype(bool))
            if view.get("saliency"):
                saliencies.append(load_labels(self.root / view["saliency"]).astype(bool))

        def stacked(parts):
            return np.stack(parts) if len(parts) == len(rec.views) else None

        return MultiViewSample(
            images=np.stack(images),
            cameras=cameras,
            depth=stacked(depths),
            normals=stacked(normals),
            labels=stacked(labels),
            boundary=stacked(boundaries),
            saliency=stacked(saliencies),
            task_mask=dict(rec.task_mask),
            sample_id=rec.sample_id,
        )

    def samples(self, split: str | None = None):
        for i, rec in enumerate(self.records):
            if split is None or rec.split == split:
                yield self.load_sample(i)


def persist_sample(sample: MultiViewSample, out_dir, split: str = "train") -> SampleRecord:
    """Write a sample's rasters under out_dir and return its manifest record."""
    out_dir = Path(out_dir)
    sid = sample.sample_id or "sample"
    views = []
    for v in range(sample.num_views):
        base = f"{sid}_v{v}"
        view: dict = {"image": f"{base}_rgb.png", "camera": _camera_to_json(sample.cameras[v])}
        save_image(out_dir / view["image"], sample.images[v])
        if sample.depth is not None:
            view["depth"] = f"{base}_depth.pfm"
            write_pfm(out_dir / view["depth"], sample.depth[v][None])
        if sample.normals is not None and sample.has_task("normal"):
            view["normals"] = f"{base}_normals.pfm"
            write_pfm(out_dir / view["normals"], sample.normals[v])
        if sample.labels is not None and sample.has_task("segmentation"):
            view["labels"] = f"{base}_labels.png"
            save_labels(out_dir / view["labels"], sample.labels[v])
        if sample.boundary is not None and sample.has_task("boundary"):
            view["boundary"] = f"{base}_boundary.png"
            save_labels(out_dir / view["boundary"], sample.boundary[v].astype(np.uint8))
        if sample.saliency is not None and sample.has_task("saliency"):
            view["saliency"] = f"{base}_saliency.png"
            save_labels(out_dir / view["saliency"], sample.saliency[v].astype(np.uint8))
        views.append(view)
    return SampleRecord(
        sample_id=sid, split=split, views=views, task_mask=dict(sample.task_mask)
    )


# -- run configuration ---------------------------------------------------------


CONFIG_DEFAULTS: dict = {
    "model": {
        "tasks": ["segmentation", "depth", "normal", "boundary"],
        "num_classes": 6,
        "ignore_label": 255,
        "loss_weights": {},
        "encoder": {"kind": "conv", "depth": 4, "tap_layers": [1, 3], "channels": 32},
    },
    "crossview": {
        "channels": 128,
        "residual_blocks": 3,
        "layers": 6,
        "window_size": 8,
        "heads": 4,
        "neighbor_limit": 2,
        "shifted_windows": False,
    },
    "geometry": {"depth_candidates": 128, "d_min": 0.0001, "d_max": 10.0},
    "training": {
        "lr": 2e-5,
        "weight_decay": 1e-6,
        "schedule_power": 0.9,
        "lr_floor": 0.0,
        "steps": 1000,
        "batch_size": 4,
        "seed": 0,
        "views": 2,
        "duplicate_single_view": True,
        "supervise_duplicate": False,
    },
    "metrics": {"boundary_tolerance_px": None, "beta_sq": 0.3},
    "synth": {
        "scenes": 16,
        "num_primitives": 4,
        "image_size": [64, 64],
        "num_classes": 6,
        "depth_range": [1.5, 6.0],
        "baseline_range": [0.15, 0.35],
        "views": 2,
        "video_frames": None,
    },
    "ablation": "full",
}

# keys whose sub-dicts carry free-form user keys
_OPEN_DICT_KEYS = {("model", "loss_weights")}


def _validate_keys(obj, schema, path=()):
    if not isinstance(obj, dict):
        return
    if path in _OPEN_DICT_KEYS:
        return
    for key, value in obj.items():
        if key not in schema:
            raise ConfigError(f"unknown config key {'.'.join(path + (key,))!r}")
        if isinstance(schema[key], dict):
            _validate_keys(value, schema[key], path + (key,))


def _deep_merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = value
    return out


@dataclass(frozen=True)
class RunConfig:
    """Declarative run settings; unknown keys rejected, hash key-order stable."""

    data: dict

    @classmethod
    def from_dict(cls, overrides: dict | None = None) -> "RunConfig":
        overrides = overrides or {}
        _validate_keys(overrides, CONFIG_DEFAULTS)
        return cls(_deep_merge(CONFIG_DEFAULTS, overrides))

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            obj = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {path} is not valid JSON: {e}") from e
        return cls.from_dict(obj)

    def section(self, name: str) -> dict:
        return self.data[name]

    @property
    def content_hash(self) -> str:
        canonical = json.dumps(self.data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n")
