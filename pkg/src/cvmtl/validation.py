"""Input validation helpers for the estimator-facing API."""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DataError
from .samples import MultiViewSample


def check_image(x) -> np.ndarray:
    """Coerce to a float64 [3,H,W] image in [0,1]."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[-1] == 3 and arr.shape[0] != 3:
        arr = arr.transpose(2, 0, 1)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise DataError(f"expected a [3,H,W] RGB image, got shape {np.shape(x)}")
    if not np.isfinite(arr).all():
        raise DataError("image contains non-finite values")
    if arr.min() < -1e-6 or arr.max() > 1.0 + 1e-6:
        if arr.max() > 1.5:  # likely 8-bit input
            arr = arr / 255.0
        arr = np.clip(arr, 0.0, 1.0)
    return arr


def check_samples(X) -> list[MultiViewSample]:
    """Validate a dataset argument: a sequence of MultiViewSample."""
    if isinstance(X, MultiViewSample):
        return [X]
    samples = list(X)
    if not samples:
        raise DataError("empty sample list")
    for i, s in enumerate(samples):
        if not isinstance(s, MultiViewSample):
            raise DataError(f"X[{i}] is {type(s).__name__}, expected MultiViewSample")
        if len(s.cameras) != s.num_views:
            raise DataError(f"X[{i}]: {s.num_views} images but {len(s.cameras)} cameras")
        if not np.isfinite(s.images).all():
            raise DataError(f"X[{i}]: images contain non-finite values")
    return samples


def check_is_fitted(estimator, attribute: str = "net_") -> None:
    if not hasattr(estimator, attribute):
        raise ContractError(
            f"{type(estimator).__name__} is not fitted yet; call fit() first"
        )
