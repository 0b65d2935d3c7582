"""Input coercion and validation helpers shared by the estimator layer."""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from .seg import AffinityMap
from .volume import LabelVolume, Volume3D


def as_volume(x) -> Volume3D:
    """Accept a Volume3D or a (D, H, W[, C]) float array."""
    if isinstance(x, Volume3D):
        return x
    return Volume3D(np.asarray(x, dtype=np.float64))


def as_labels(x) -> LabelVolume:
    if isinstance(x, LabelVolume):
        return x
    return LabelVolume(np.asarray(x))


def as_affinity(x) -> AffinityMap:
    if isinstance(x, AffinityMap):
        return x
    arr = np.asarray(x, dtype=np.float64)
    return AffinityMap(arr)


def as_volume_list(xs) -> list[Volume3D]:
    if isinstance(xs, (Volume3D, np.ndarray)):
        xs = [xs]
    vols = [as_volume(x) for x in xs]
    if not vols:
        raise ValueError("need at least one volume")
    shapes = {v.shape for v in vols}
    if len(shapes) > 1:
        raise ValueError(f"volumes must share one shape, got {sorted(shapes)}")
    return vols


def as_label_list(ys, n: int) -> list[LabelVolume]:
    if isinstance(ys, (LabelVolume, np.ndarray)):
        ys = [ys]
    labels = [as_labels(y) for y in ys]
    if len(labels) != n:
        raise ValueError(f"got {len(labels)} label volumes for {n} intensity volumes")
    return labels


def check_fitted(est, attribute: str) -> None:
    if not hasattr(est, attribute):
        raise RuntimeError(
            f"{type(est).__name__} is not fitted yet; call fit() first")
