"""Toy multi-task network: shared encoder, cross-view fusion, task heads.

The per-view pipeline is: a small monocular encoder produces multi-scale
features; the cross-view pathway contributes an L-channel cost volume and
C-channel enhanced features, both lifted by a learned 4x upsampler from 1/8
to 1/2 resolution where everything is concatenated; linear (1x1) heads
regress each task at 1/2 resolution and a fixed bilinear 2x brings
predictions to full resolution.

Ablations zero out fused slices (or skip the cross-view forward entirely),
never change the parameter set, so one checkpoint format serves all three
evaluation modes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .costvolume import build_cost_volume
from .crossview import (
    CrossViewEncoder,
    MvTransformerConfig,
    SpatialEncoderConfig,
)
from .errors import ConfigError, ContractError, DimensionError, TrainingError
from .geometry import DepthHypothesisSet, make_depth_hypotheses
from .nn import Conv2d, LearnedUpsample, Linear, Module, resize_bilinear
from .samples import MultiViewSample, duplicate_view

ABLATIONS = ("full", "no-cf", "no-cvm")

_CE_TASKS = {"segmentation", "boundary", "saliency", "parts"}
_L1_TASKS = {"depth", "normal"}


@dataclass(frozen=True)
class TaskSpec:
    name: str
    loss_kind: str  # "cross-entropy" | "l1"
    loss_weight: float = 1.0
    higher_is_better: bool = True
    num_classes: int = 0

    def __post_init__(self):
        expected = "cross-entropy" if self.name in _CE_TASKS else "l1"
        if self.name not in _CE_TASKS | _L1_TASKS:
            raise ConfigError(f"unknown task {self.name!r}")
        if self.loss_kind != expected:
            raise ConfigError(f"task {self.name} requires {expected} loss, got {self.loss_kind}")
        if self.loss_weight <= 0:
            raise ConfigError(f"task {self.name}: loss weight must be positive")
        if self.name in ("segmentation", "parts") and self.num_classes < 2:
            raise ConfigError(f"task {self.name} needs num_classes >= 2")


def make_task_specs(tasks, num_classes: int, loss_weights: dict | None = None) -> list[TaskSpec]:
    """Default task specs; lower-is-better flags set for depth and normal."""
    weights = loss_weights or {}
    specs = []
    for name in tasks:
        specs.append(
            TaskSpec(
                name=name,
                loss_kind="cross-entropy" if name in _CE_TASKS else "l1",
                loss_weight=float(weights.get(name, 1.0)),
                higher_is_better=name not in ("depth", "normal"),
                num_classes=num_classes if name in ("segmentation", "parts") else 0,
            )
        )
    return specs


@dataclass(frozen=True)
class MtlEncoderConfig:
    kind: str = "conv"  # "conv" | "transformer"
    depth: int = 4
    tap_layers: tuple[int, ...] = (1, 3)
    channels: int = 32

    def __post_init__(self):
        if self.kind not in ("conv", "transformer"):
            raise ConfigError(f"unknown encoder kind {self.kind!r}")
        taps = tuple(self.tap_layers)
        if not taps or list(taps) != sorted(set(taps)) or taps[-1] >= self.depth:
            raise ConfigError(
                f"tap_layers must be strictly increasing and < depth={self.depth}, got {taps}"
            )
        object.__setattr__(self, "tap_layers", taps)


class ConvMtlEncoder(Module):
    """Stride-2 stem plus `depth` residual-free conv blocks at 1/2 resolution."""

    downsample = 2

    def __init__(self, rng, cfg: MtlEncoderConfig):
        self.cfg = cfg
        self.stem = Conv2d(rng, 3, cfg.channels, 3, stride=2, padding=1)
        self.blocks = [
            Conv2d(rng, cfg.channels, cfg.channels, 3, stride=1, padding=1)
            for _ in range(cfg.depth)
        ]

    def __call__(self, image: Tensor) -> list[Tensor]:
        if image.ndim != 3 or image.shape[0] != 3:
            raise ContractError(f"expected [3,H,W] image, got {image.shape}")
        _, h, w = image.shape
        if h % 2 or w % 2:
            raise ContractError(f"image extents must be divisible by 2, got {h}x{w}")
        x = ad.silu(self.stem(ad.reshape(image, (1,) + image.shape)))
        taps = []
        for i, block in enumerate(self.blocks):
            x = ad.silu(block(x))
            if i in self.cfg.tap_layers:
                taps.append(ad.reshape(x, x.shape[1:]))
        return taps


class TransformerMtlEncoder(Module):
    """8x8 patch embedding followed by `depth` full-attention token blocks."""

    downsample = 8
    patch = 8

    def __init__(self, rng, cfg: MtlEncoderConfig):
        self.cfg = cfg
        self.embed = Linear(rng, 3 * self.patch * self.patch, cfg.channels)
        self.to_q = [Linear(rng, cfg.channels, cfg.channels) for _ in range(cfg.depth)]
        self.to_k = [Linear(rng, cfg.channels, cfg.channels) for _ in range(cfg.depth)]
        self.to_v = [Linear(rng, cfg.channels, cfg.channels) for _ in range(cfg.depth)]
        self.mlp = [Linear(rng, cfg.channels, cfg.channels) for _ in range(cfg.depth)]

    def __call__(self, image: Tensor) -> list[Tensor]:
        if image.ndim != 3 or image.shape[0] != 3:
            raise ContractError(f"expected [3,H,W] image, got {image.shape}")
        _, h, w = image.shape
        p = self.patch
        if h % p or w % p:
            raise ContractError(f"image extents must be divisible by {p}, got {h}x{w}")
        gh, gw = h // p, w // p
        patches = ad.reshape(image, (3, gh, p, gw, p))
        patches = ad.transpose(patches, (1, 3, 0, 2, 4))
        tokens = self.embed(ad.reshape(patches, (gh * gw, 3 * p * p)))
        c = self.cfg.channels
        taps = []
        for i in range(self.cfg.depth):
            q, k, v = self.to_q[i](tokens), self.to_k[i](tokens), self.to_v[i](tokens)
            attn = ad.softmax(ad.matmul(q, ad.transpose(k)) * (1.0 / np.sqrt(c)), axis=-1)
            tokens = tokens + ad.matmul(attn, v)
            tokens = tokens + ad.silu(self.mlp[i](tokens))
            if i in self.cfg.tap_layers:
                taps.append(ad.transpose(ad.reshape(tokens, (gh, gw, c)), (2, 0, 1)))
        return taps


def make_mtl_encoder(rng, cfg: MtlEncoderConfig):
    return ConvMtlEncoder(rng, cfg) if cfg.kind == "conv" else TransformerMtlEncoder(rng, cfg)


# -- fusion and heads ----------------------------------------------------------


class TaskHeads(Module):
    """One linear (1x1 conv) head per task, predicting at 1/2 resolution."""

    def __init__(self, rng, fused_channels: int, specs: list[TaskSpec]):
        self.specs = list(specs)
        self.convs = [
            Conv2d(rng, fused_channels, _head_channels(spec), 1) for spec in self.specs
        ]
        # cost-volume channels arrive unnormalized; small head init keeps the
        # initial logits near zero
        for conv in self.convs:
            conv.weight.data *= 0.05

    def __call__(self, fused: Tensor, out_hw: tuple[int, int]) -> dict[str, Tensor]:
        x = ad.reshape(fused, (1,) + fused.shape)
        preds: dict[str, Tensor] = {}
        for spec, conv in zip(self.specs, self.convs):
            y = ad.reshape(conv(x), conv.weight.shape[:1] + fused.shape[1:])
            y = resize_bilinear(y, out_hw)
            if spec.name == "depth":
                y = ad.softplus(y)
            elif spec.name == "normal":
                norm = ad.sqrt(ad.tsum(y * y, axis=0, keepdims=True) + 1e-12)
                y = y / norm
            preds[spec.name] = y
        return preds


def _head_channels(spec: TaskSpec) -> int:
    if spec.name in ("segmentation", "parts"):
        return spec.num_classes
    if spec.name == "normal":
        return 3
    return 1  # depth, boundary, saliency: one channel


# -- losses ----------------------------------------------------------------------


def cross_entropy_loss(logits: Tensor, labels: np.ndarray, ignore_label: int) -> Tensor | None:
    """Pixelwise CE over valid labels; None when no pixel is supervised."""
    k = logits.shape[0]
    valid = labels != ignore_label
    if not valid.any():
        return None
    safe = np.where(valid, labels, 0)
    one_hot = np.zeros((k,) + labels.shape)
    np.put_along_axis(one_hot, safe[None], 1.0, axis=0)
    one_hot *= valid
    log_probs = ad.log_softmax(logits, axis=0)
    per_pixel = ad.tsum(log_probs * one_hot, axis=0) * (-1.0)
    return ad.tsum(per_pixel) * (1.0 / valid.sum())


def binary_cross_entropy_loss(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Stable BCE with logits: softplus(x) - x*y, averaged over pixels."""
    y = targets.astype(np.float64)
    per_pixel = ad.softplus(logits) - logits * y
    return ad.tmean(per_pixel)


def l1_loss(pred: Tensor, target: np.ndarray, valid_mask: np.ndarray | None = None) -> Tensor | None:
    diff = ad.absolute(pred - target)
    if valid_mask is None:
        return ad.tmean(diff)
    if not valid_mask.any():
        return None
    weight = valid_mask.astype(np.float64)
    if diff.ndim == 3 and weight.ndim == 2:
        weight = weight[None]
    return ad.tsum(diff * weight) * (1.0 / (weight.sum() * (diff.shape[0] if diff.ndim == 3 else 1)))


def view_targets(sample: MultiViewSample, view: int) -> dict[str, np.ndarray]:
    """Ground-truth arrays for one view, restricted to the sample's task mask."""
    out: dict[str, np.ndarray] = {}
    if sample.has_task("segmentation") and sample.labels is not None:
        out["segmentation"] = sample.labels[view]
    if sample.has_task("depth") and sample.depth is not None:
        out["depth"] = sample.depth[view]
    if sample.has_task("normal") and sample.normals is not None:
        out["normal"] = sample.normals[view]
    if sample.has_task("boundary") and sample.boundary is not None:
        out["boundary"] = sample.boundary[view]
    if sample.has_task("saliency") and sample.saliency is not None:
        out["saliency"] = sample.saliency[view]
    return out


def multi_task_loss(
    preds: dict[str, Tensor],
    targets: dict[str, np.ndarray],
    specs: list[TaskSpec],
    ignore_label: int = 255,
) -> tuple[Tensor | None, dict[str, float]]:
    """Weighted sum of per-task losses plus a float breakdown for logging."""
    total = None
    breakdown: dict[str, float] = {}
    for spec in specs:
        if spec.name not in targets or spec.name not in preds:
            continue
        pred, target = preds[spec.name], targets[spec.name]
        if spec.name in ("segmentation", "parts"):
            loss = cross_entropy_loss(pred, target, ignore_label)
        elif spec.name in ("boundary", "saliency"):
            loss = binary_cross_entropy_loss(pred[0], target)
        elif spec.name == "depth":
            loss = l1_loss(pred[0], target, target > 0)
        else:  # normal
            mask = np.linalg.norm(target, axis=0) > 0
            loss = l1_loss(pred, target, mask)
        if loss is None:
            continue
        value = float(loss.data)
        if not np.isfinite(value):
            raise TrainingError(f"non-finite loss for task {spec.name!r}")
        breakdown[spec.name] = value
        weighted = loss * spec.loss_weight
        total = weighted if total is None else total + weighted
    return total, breakdown


# -- assembled network -------------------------------------------------------------


@dataclass(frozen=True)
class ModelConfig:
    tasks: tuple[str, ...] = ("segmentation", "depth", "normal", "boundary")
    num_classes: int = 6
    ignore_label: int = 255
    encoder: MtlEncoderConfig = MtlEncoderConfig()
    spatial: SpatialEncoderConfig = SpatialEncoderConfig()
    transformer: MvTransformerConfig = MvTransformerConfig()
    depth_candidates: int = 128
    d_min: float = 0.0001
    d_max: float = 10.0
    loss_weights: tuple[tuple[str, float], ...] = ()

    @classmethod
    def from_run_config(cls, cfg: dict) -> "ModelConfig":
        model = cfg["model"]
        cv = cfg["crossview"]
        geo = cfg["geometry"]
        enc = model["encoder"]
        return cls(
            tasks=tuple(model["tasks"]),
            num_classes=int(model["num_classes"]),
            ignore_label=int(model["ignore_label"]),
            encoder=MtlEncoderConfig(
                kind=enc["kind"],
                depth=int(enc["depth"]),
                tap_layers=tuple(enc["tap_layers"]),
                channels=int(enc["channels"]),
            ),
            spatial=SpatialEncoderConfig(
                out_channels=int(cv["channels"]), residual_blocks=int(cv["residual_blocks"])
            ),
            transformer=MvTransformerConfig(
                layers=int(cv["layers"]),
                window_size=int(cv["window_size"]),
                heads=int(cv["heads"]),
                channels=int(cv["channels"]),
                neighbor_limit=int(cv["neighbor_limit"]),
                shifted_windows=bool(cv["shifted_windows"]),
            ),
            depth_candidates=int(geo["depth_candidates"]),
            d_min=float(geo["d_min"]),
            d_max=float(geo["d_max"]),
            loss_weights=tuple(sorted(model["loss_weights"].items())),
        )


class MultiTaskNet(Module):
    """Monocular encoder + cross-view pathway + fusion + task heads."""

    def __init__(self, rng, cfg: ModelConfig):
        self.cfg = cfg
        self.specs = make_task_specs(cfg.tasks, cfg.num_classes, dict(cfg.loss_weights))
        self.encoder = make_mtl_encoder(rng, cfg.encoder)
        self.crossview = CrossViewEncoder(rng, cfg.spatial, cfg.transformer)
        self.up_cost = LearnedUpsample(rng, cfg.depth_candidates, cfg.depth_candidates)
        self.up_feat = LearnedUpsample(rng, cfg.spatial.out_channels, cfg.spatial.out_channels)
        self.hypotheses: DepthHypothesisSet = make_depth_hypotheses(
            cfg.depth_candidates, cfg.d_min, cfg.d_max
        )
        mtl_channels = cfg.encoder.channels * len(cfg.encoder.tap_layers)
        self.fused_channels = (
            mtl_channels + cfg.depth_candidates + cfg.spatial.out_channels
        )
        self.heads = TaskHeads(rng, self.fused_channels, self.specs)

    # fused maps live at half the input resolution
    def _fusion_hw(self, h: int, w: int) -> tuple[int, int]:
        return h // 2, w // 2

    def fuse(self, mtl_taps: list[Tensor], cost_up: Tensor | None,
             feat_up: Tensor | None, hw: tuple[int, int]) -> Tensor:
        parts = [resize_bilinear(t, hw) for t in mtl_taps]
        cfg = self.cfg
        if cost_up is None:
            cost_up = Tensor(np.zeros((cfg.depth_candidates,) + hw))
        if feat_up is None:
            feat_up = Tensor(np.zeros((cfg.spatial.out_channels,) + hw))
        fused = ad.concat(parts + [cost_up, feat_up], axis=0)
        if fused.shape[0] != self.fused_channels:
            raise DimensionError(
                f"fused channels {fused.shape[0]} != declared {self.fused_channels}"
            )
        return fused

    def forward(
        self,
        sample: MultiViewSample,
        ablation: str = "full",
        views: list[int] | None = None,
    ) -> dict[int, dict[str, Tensor]]:
        """Per-view task predictions at full resolution.

        `views` selects which reference views get heads applied (default:
        supervised views, else all).
        """
        if ablation not in ABLATIONS:
            raise ConfigError(f"unknown ablation {ablation!r}, expected one of {ABLATIONS}")
        if sample.num_views == 1:
            sample = duplicate_view(sample)
        h, w = sample.image_hw
        hw = self._fusion_hw(h, w)
        if views is None:
            views = sample.supervised_views or list(range(sample.num_views))

        images = Tensor(sample.images)
        cost_slices: dict[int, Tensor] = {}
        feat_slices: dict[int, Tensor] = {}
        if ablation != "no-cvm":
            positions = np.stack([c.pose.camera_center for c in sample.cameras])
            cvf = self.crossview(images, camera_positions=positions)
            volume = build_cost_volume(cvf, sample.cameras, self.hypotheses)
            for v in views:
                cost_slices[v] = ad.reshape(
                    self.up_cost(ad.reshape(volume.values[v], (1,) + volume.values.shape[1:])),
                    (self.cfg.depth_candidates,) + hw,
                )
                if ablation == "full":
                    feat_slices[v] = ad.reshape(
                        self.up_feat(ad.reshape(cvf.maps[v], (1,) + cvf.maps.shape[1:])),
                        (self.cfg.spatial.out_channels,) + hw,
                    )

        out: dict[int, dict[str, Tensor]] = {}
        for v in views:
            taps = self.encoder(Tensor(sample.images[v]))
            fused = self.fuse(taps, cost_slices.get(v), feat_slices.get(v), hw)
            out[v] = self.heads(fused, (h, w))
        return out

    def sample_loss(
        self, sample: MultiViewSample, ablation: str = "full"
    ) -> tuple[Tensor, dict[str, float]]:
        """Mean over supervised views of the weighted multi-task loss."""
        if sample.num_views == 1:
            sample = duplicate_view(sample)
        views = sample.supervised_views or list(range(sample.num_views))
        preds = self.forward(sample, ablation=ablation, views=views)
        total = None
        merged: dict[str, float] = {}
        counted = 0
        for v in views:
            targets = view_targets(sample, v)
            loss, breakdown = multi_task_loss(
                preds[v], targets, self.specs, self.cfg.ignore_label
            )
            if loss is None:
                continue
            counted += 1
            total = loss if total is None else total + loss
            for name, value in breakdown.items():
                merged[name] = merged.get(name, 0.0) + value
        if total is None:
            raise TrainingError(f"sample {sample.sample_id!r} has no supervised task")
        scale = 1.0 / counted
        return total * scale, {k: v * scale for k, v in merged.items()}
