"""Scikit-learn style estimator facade over the multi-task trainer.

The estimator stores constructor arguments verbatim (so `clone`,
`get_params` and `set_params` behave as sklearn expects), builds the
underlying network on `fit`, and exposes per-task dense predictions via
`predict`.  `score` returns the negative mean multi-task loss so that
higher is better.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .autodiff import no_grad
from .crossview import MvTransformerConfig, SpatialEncoderConfig
from .metrics import MetricReport
from .model import ModelConfig, MtlEncoderConfig
from .samples import MultiViewSample
from .training import TrainConfig, default_camera, evaluate, infer, train
from .validation import check_image, check_is_fitted, check_samples


class CrossViewMultiTaskEstimator(BaseEstimator):
    """Joint dense prediction with a cross-view geometric pathway.

    Parameters mirror the run-config sections; see the README for the
    meaning of each block.  Fitted attributes: ``net_`` (the trained
    network), ``trace_`` (per-step loss rows).
    """

    def __init__(
        self,
        tasks=("segmentation", "depth", "normal", "boundary"),
        num_classes=6,
        encoder_kind="conv",
        encoder_channels=32,
        encoder_depth=4,
        tap_layers=(1, 3),
        cvm_channels=128,
        transformer_layers=6,
        window_size=8,
        heads=4,
        depth_candidates=128,
        d_min=0.0001,
        d_max=10.0,
        lr=2e-5,
        weight_decay=1e-6,
        steps=1000,
        batch_size=4,
        seed=0,
        views=2,
        ablation="full",
    ):
        self.tasks = tasks
        self.num_classes = num_classes
        self.encoder_kind = encoder_kind
        self.encoder_channels = encoder_channels
        self.encoder_depth = encoder_depth
        self.tap_layers = tap_layers
        self.cvm_channels = cvm_channels
        self.transformer_layers = transformer_layers
        self.window_size = window_size
        self.heads = heads
        self.depth_candidates = depth_candidates
        self.d_min = d_min
        self.d_max = d_max
        self.lr = lr
        self.weight_decay = weight_decay
        self.steps = steps
        self.batch_size = batch_size
        self.seed = seed
        self.views = views
        self.ablation = ablation

    # -- config assembly ------------------------------------------------

    def _model_config(self) -> ModelConfig:
        return ModelConfig(
            tasks=tuple(self.tasks),
            num_classes=self.num_classes,
            encoder=MtlEncoderConfig(
                kind=self.encoder_kind,
                depth=self.encoder_depth,
                tap_layers=tuple(self.tap_layers),
                channels=self.encoder_channels,
            ),
            spatial=SpatialEncoderConfig(out_channels=self.cvm_channels),
            transformer=MvTransformerConfig(
                layers=self.transformer_layers,
                window_size=self.window_size,
                heads=self.heads,
                channels=self.cvm_channels,
            ),
            depth_candidates=self.depth_candidates,
            d_min=self.d_min,
            d_max=self.d_max,
        )

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            lr=self.lr,
            weight_decay=self.weight_decay,
            steps=self.steps,
            batch_size=self.batch_size,
            seed=self.seed,
            views=self.views,
        )

    # -- estimator API ----------------------------------------------------

    def fit(self, X, y=None):
        samples = check_samples(X)
        self.net_, self.trace_ = train(
            samples, self._model_config(), self._train_config(), ablation=self.ablation
        )
        return self

    def predict(self, X) -> list[dict[str, np.ndarray]]:
        """Per-task prediction maps for each input (bare image or sample)."""
        check_is_fitted(self)
        out = []
        for item in X if isinstance(X, (list, tuple)) else [X]:
            if isinstance(item, MultiViewSample):
                with no_grad():
                    preds = self.net_.forward(item, ablation=self.ablation, views=[0])[0]
                out.append({k: v.data.copy() for k, v in preds.items()})
            else:
                out.append(infer(self.net_, check_image(item), ablation=self.ablation))
        return out

    def score(self, X, y=None) -> float:
        """Negative mean multi-task loss (higher is better)."""
        check_is_fitted(self)
        samples = check_samples(X)
        total = 0.0
        with no_grad():
            for s in samples:
                loss, _ = self.net_.sample_loss(s, ablation=self.ablation)
                total += float(loss.data)
        return -total / len(samples)

    def evaluate(self, X, baseline_id: str | None = None) -> MetricReport:
        """Full metric suite over the given samples."""
        check_is_fitted(self)
        return evaluate(self.net_, check_samples(X), ablation=self.ablation,
                        baseline_id=baseline_id)

    @staticmethod
    def default_camera(height: int, width: int):
        return default_camera(height, width)
