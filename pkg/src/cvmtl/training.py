"""Optimization loop, checkpointing and evaluation for the multi-task net.

AdamW with decoupled weight decay and a polynomial learning-rate schedule:
lr(t) = floor + (base - floor) * (1 - t / (T-1))^power, so the first step
uses the base rate and the final step the floor.  Checkpoints pair the
binary parameter container with a JSON sidecar (config hash, seed, step,
task list) and training emits an append-only CSV trace.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import metrics as M
from .autodiff import Tensor, backward, load_params, no_grad, save_params
from .costvolume import ViewCamera
from .errors import CheckpointError, ConfigError, TrainingError
from .geometry import CameraIntrinsics, RigidPose
from .model import ModelConfig, MultiTaskNet, view_targets
from .samples import MultiViewSample, duplicate_view


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 2e-5
    weight_decay: float = 1e-6
    schedule_power: float = 0.9
    lr_floor: float = 0.0
    steps: int = 1000
    batch_size: int = 4
    seed: int = 0
    views: int = 2
    duplicate_single_view: bool = True
    supervise_duplicate: bool = False

    def __post_init__(self):
        if self.steps <= 0:
            raise ConfigError(f"steps must be positive, got {self.steps}")
        if self.lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")

    @classmethod
    def from_run_config(cls, cfg: dict) -> "TrainConfig":
        t = cfg["training"]
        return cls(
            lr=float(t["lr"]),
            weight_decay=float(t["weight_decay"]),
            schedule_power=float(t["schedule_power"]),
            lr_floor=float(t["lr_floor"]),
            steps=int(t["steps"]),
            batch_size=int(t["batch_size"]),
            seed=int(t["seed"]),
            views=int(t["views"]),
            duplicate_single_view=bool(t["duplicate_single_view"]),
            supervise_duplicate=bool(t["supervise_duplicate"]),
        )


def polynomial_lr(step: int, cfg: TrainConfig) -> float:
    span = max(cfg.steps - 1, 1)
    frac = min(step, span) / span
    return cfg.lr_floor + (cfg.lr - cfg.lr_floor) * (1.0 - frac) ** cfg.schedule_power


class AdamW:
    """Adam with decoupled weight decay; parameters without grads are skipped."""

    def __init__(self, params: list[Tensor], weight_decay: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            m_hat = self.m[i] / (1 - b1 ** self.t)
            v_hat = self.v[i] / (1 - b2 ** self.t)
            p.data = p.data - lr * (m_hat / (np.sqrt(v_hat) + self.eps)
                                    + self.weight_decay * p.data)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def prepare_sample(sample: MultiViewSample, cfg: TrainConfig) -> MultiViewSample:
    """Clamp views to the configured count; duplicate single views when asked."""
    if sample.num_views == 1 and cfg.duplicate_single_view:
        return duplicate_view(sample, supervise_copy=cfg.supervise_duplicate)
    if sample.num_views > cfg.views:
        from dataclasses import replace

        v = cfg.views

        def cut(arr):
            return None if arr is None else arr[:v]

        return replace(
            sample,
            images=sample.images[:v],
            cameras=sample.cameras[:v],
            depth=cut(sample.depth),
            normals=cut(sample.normals),
            labels=cut(sample.labels),
            boundary=cut(sample.boundary),
            saliency=cut(sample.saliency),
            supervised_views=(
                [i for i in sample.supervised_views if i < v]
                if sample.supervised_views is not None
                else None
            ),
        )
    return sample


def train(
    samples: list[MultiViewSample],
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    ablation: str = "full",
    out_dir=None,
    config_hash: str = "",
    log_every: int = 0,
) -> tuple[MultiTaskNet, list[dict]]:
    """Run the optimization loop; returns the net and its metric trace."""
    if not samples:
        raise TrainingError("empty training set")
    rng = np.random.default_rng(train_cfg.seed)
    net = MultiTaskNet(rng, model_cfg)
    params = net.params()
    opt = AdamW(params, train_cfg.weight_decay)
    prepared = [prepare_sample(s, train_cfg) for s in samples]

    trace: list[dict] = []
    for step in range(train_cfg.steps):
        lr = polynomial_lr(step, train_cfg)
        idx = rng.integers(0, len(prepared), size=train_cfg.batch_size)
        opt.zero_grad()
        total = None
        merged: dict[str, float] = {}
        for i in idx:
            loss, breakdown = net.sample_loss(prepared[i], ablation=ablation)
            total = loss if total is None else total + loss
            for k, v in breakdown.items():
                merged[k] = merged.get(k, 0.0) + v / len(idx)
        total = total * (1.0 / len(idx))
        value = float(total.data)
        if not np.isfinite(value):
            raise TrainingError(f"non-finite total loss at step {step}")
        backward(total)
        opt.step(lr)
        row = {"step": step, "lr": lr, "total_loss": value, **merged}
        trace.append(row)
        if log_every and step % log_every == 0:
            tasks = " ".join(f"{k}={v:.4f}" for k, v in merged.items())
            print(f"step {step:5d} lr {lr:.3e} loss {value:.4f} {tasks}")

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out_dir / "checkpoint.cvck", net, train_cfg, ablation,
                        step=train_cfg.steps, config_hash=config_hash)
        write_trace(out_dir / "trace.csv", trace)
    return net, trace


def write_trace(path, trace: list[dict]) -> None:
    if not trace:
        return
    fields = ["step", "lr", "total_loss"] + sorted(
        {k for row in trace for k in row} - {"step", "lr", "total_loss"}
    )
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fields, restval="")
        writer.writeheader()
        writer.writerows(trace)


# -- checkpoints -----------------------------------------------------------------


def _model_cfg_to_dict(cfg: ModelConfig) -> dict:
    return {
        "tasks": list(cfg.tasks),
        "num_classes": cfg.num_classes,
        "ignore_label": cfg.ignore_label,
        "encoder": asdict(cfg.encoder) | {"tap_layers": list(cfg.encoder.tap_layers)},
        "spatial": asdict(cfg.spatial),
        "transformer": asdict(cfg.transformer),
        "depth_candidates": cfg.depth_candidates,
        "d_min": cfg.d_min,
        "d_max": cfg.d_max,
        "loss_weights": dict(cfg.loss_weights),
    }


def _model_cfg_from_dict(obj: dict) -> ModelConfig:
    from .crossview import MvTransformerConfig, SpatialEncoderConfig
    from .model import MtlEncoderConfig

    enc = dict(obj["encoder"])
    enc["tap_layers"] = tuple(enc["tap_layers"])
    return ModelConfig(
        tasks=tuple(obj["tasks"]),
        num_classes=obj["num_classes"],
        ignore_label=obj["ignore_label"],
        encoder=MtlEncoderConfig(**enc),
        spatial=SpatialEncoderConfig(**obj["spatial"]),
        transformer=MvTransformerConfig(**obj["transformer"]),
        depth_candidates=obj["depth_candidates"],
        d_min=obj["d_min"],
        d_max=obj["d_max"],
        loss_weights=tuple((k, v) for k, v in sorted(obj["loss_weights"].items())),
    )


def save_checkpoint(path, net: MultiTaskNet, train_cfg: TrainConfig | None = None,
                    ablation: str = "full", step: int = 0, config_hash: str = "") -> None:
    path = Path(path)
    save_params(path, net.state())
    meta = {
        "model": _model_cfg_to_dict(net.cfg),
        "train": asdict(train_cfg) if train_cfg is not None else None,
        "ablation": ablation,
        "step": step,
        "config_hash": config_hash,
        "seed": train_cfg.seed if train_cfg is not None else None,
    }
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_checkpoint(path) -> tuple[MultiTaskNet, dict]:
    path = Path(path)
    sidecar = path.with_suffix(path.suffix + ".json")
    if not sidecar.exists():
        raise CheckpointError(f"missing checkpoint sidecar {sidecar}")
    meta = json.loads(sidecar.read_text())
    net = MultiTaskNet(np.random.default_rng(0), _model_cfg_from_dict(meta["model"]))
    net.load_state(load_params(path))
    return net, meta


# -- evaluation and inference -------------------------------------------------------


_METRIC_DEFS = {
    "segmentation": ("segmentation_miou", True),
    "depth": ("depth_rmse", False),
    "normal": ("normal_merr", False),
    "boundary": ("boundary_odsf", True),
    "saliency": ("saliency_maxf", True),
}


def predictions_to_numpy(preds: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: v.data.copy() for k, v in preds.items()}


def evaluate(
    net: MultiTaskNet,
    samples: list[MultiViewSample],
    ablation: str = "full",
    boundary_tolerance_px: float | None = None,
    baseline_id: str | None = None,
) -> M.MetricReport:
    """Full metric suite over reference view 0 of every sample."""
    seg_pred, seg_gt = [], []
    depth_pred, depth_gt = [], []
    normal_pred, normal_gt = [], []
    boundary_pred, boundary_gt = [], []
    saliency_pred, saliency_gt = [], []

    spec_names = {s.name for s in net.specs}
    with no_grad():
        for sample in samples:
            preds = predictions_to_numpy(net.forward(sample, ablation=ablation, views=[0])[0])
            targets = view_targets(sample if sample.num_views > 1 else duplicate_view(sample), 0)
            if "segmentation" in targets and "segmentation" in spec_names:
                seg_pred.append(preds["segmentation"].argmax(axis=0))
                seg_gt.append(targets["segmentation"])
            if "depth" in targets and "depth" in spec_names:
                depth_pred.append(preds["depth"][0])
                depth_gt.append(targets["depth"])
            if "normal" in targets and "normal" in spec_names:
                normal_pred.append(preds["normal"])
                normal_gt.append(targets["normal"])
            if "boundary" in targets and "boundary" in spec_names:
                boundary_pred.append(_sigmoid(preds["boundary"][0]))
                boundary_gt.append(targets["boundary"])
            if "saliency" in targets and "saliency" in spec_names:
                saliency_pred.append(_sigmoid(preds["saliency"][0]))
                saliency_gt.append(targets["saliency"])

    report = M.MetricReport(baseline_id=baseline_id)
    if seg_pred:
        value = M.miou(np.stack(seg_pred), np.stack(seg_gt), net.cfg.num_classes,
                       net.cfg.ignore_label)
        if value is not None:
            report.add("segmentation_miou", value, True)
    if depth_pred:
        pred = np.concatenate([p.ravel() for p in depth_pred])
        gt = np.concatenate([g.ravel() for g in depth_gt])
        value = M.depth_rmse(pred, gt, gt > 0)
        if value is not None:
            report.add("depth_rmse", value, False)
    if normal_pred:
        pred = np.concatenate([p.reshape(3, -1) for p in normal_pred], axis=1)
        gt = np.concatenate([g.reshape(3, -1) for g in normal_gt], axis=1)
        value = M.normal_merr(pred, gt)
        if value is not None:
            report.add("normal_merr", value, False)
    if boundary_pred:
        report.add(
            "boundary_odsf",
            M.boundary_odsf(boundary_pred, boundary_gt, tolerance_px=boundary_tolerance_px),
            True,
        )
    if saliency_pred:
        report.add("saliency_maxf", M.saliency_maxf(saliency_pred, saliency_gt), True)
    return report


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def default_camera(height: int, width: int) -> ViewCamera:
    """Placeholder camera for bare images (focal = width, centered principal point)."""
    return ViewCamera(
        CameraIntrinsics(fx=float(width), fy=float(width), cx=(width - 1) / 2.0,
                         cy=(height - 1) / 2.0, width=width, height=height),
        RigidPose.identity(),
    )


def infer(net: MultiTaskNet, image: np.ndarray, ablation: str = "full") -> dict[str, np.ndarray]:
    """Single-image inference; the view is duplicated internally."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ConfigError(f"expected a [3,H,W] image, got {image.shape}")
    sample = MultiViewSample(
        images=image[None],
        cameras=[default_camera(image.shape[1], image.shape[2])],
        task_mask={},
        sample_id="infer",
    )
    with no_grad():
        preds = net.forward(duplicate_view(sample), ablation=ablation, views=[0])[0]
    return predictions_to_numpy(preds)
