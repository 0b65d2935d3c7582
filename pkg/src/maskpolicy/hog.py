"""Slice-wise histogram-of-oriented-gradients targets for patch reconstruction.

Every axial slice of a patch is one cell. In-plane gradients come from
central differences with replicated borders, orientations are folded to
[0, pi) by default, and each voxel's gradient magnitude is soft-assigned to
the two nearest orientation bins. Cells normalize by their total gradient
weight, so descriptors sum to one (or are all-zero for flat cells) and are
invariant to positive intensity scaling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class HogConfig:
    num_bins: int = 9
    signed: bool = False  # unsigned folds orientations into [0, pi)
    weighting: str = "magnitude"  # "magnitude" or "uniform"

    def __post_init__(self):
        if self.num_bins < 2:
            raise ValueError("num_bins must be >= 2")
        if self.weighting not in ("magnitude", "uniform"):
            raise ValueError(f"unknown weighting mode {self.weighting!r}")

    @property
    def span(self) -> float:
        return 2 * np.pi if self.signed else np.pi


def slice_gradients(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Central-difference gradients of a 2D slice with replicated borders."""
    padded = np.pad(img, 1, mode="edge")
    gy = (padded[2:, 1:-1] - padded[:-2, 1:-1]) / 2.0
    gx = (padded[1:-1, 2:] - padded[1:-1, :-2]) / 2.0
    return gy, gx


def hog_slice(img: np.ndarray, cfg: HogConfig) -> np.ndarray:
    """Descriptor of one cell (one axial slice): `num_bins` normalized bins."""
    gy, gx = slice_gradients(np.asarray(img, dtype=np.float64))
    theta = np.mod(np.arctan2(gy, gx), cfg.span)
    if cfg.weighting == "magnitude":
        w = np.hypot(gy, gx)
    else:
        w = np.ones_like(theta)
    b = cfg.num_bins
    width = cfg.span / b
    # soft assignment: split each voxel's weight between the two nearest
    # bin centers, wrapping circularly
    t = theta / width - 0.5
    lo = np.floor(t)
    frac = t - lo
    lo_bin = (lo.astype(np.int64)) % b
    hi_bin = (lo_bin + 1) % b
    hist = np.zeros(b, dtype=np.float64)
    np.add.at(hist, lo_bin.ravel(), (w * (1.0 - frac)).ravel())
    np.add.at(hist, hi_bin.ravel(), (w * frac).ravel())
    total = w.sum()
    if total <= 0.0:
        return np.zeros(b, dtype=np.float64)
    return hist / total


def hog_patch(patch: np.ndarray, patch_shape: tuple[int, int, int],
              cfg: HogConfig) -> np.ndarray:
    """Per-slice descriptors of a patch: array of shape (P/4, num_bins).

    Accepts the flat patch vector produced by patchify (any channel count;
    channels are averaged before the gradient) or an already-shaped array.
    """
    pd, ph, pw = patch_shape
    patch = np.asarray(patch, dtype=np.float64)
    if patch.ndim == 1:
        c = patch.size // (pd * ph * pw)
        if patch.size != pd * ph * pw * c:
            raise ValueError(
                f"patch length {patch.size} does not match shape {patch_shape}")
        patch = patch.reshape(pd, ph, pw, c)
    if patch.ndim == 3:
        patch = patch[..., None]
    img = patch.mean(axis=3)
    return np.stack([hog_slice(img[d], cfg) for d in range(pd)], axis=0)


def hog_target(patches: np.ndarray, patch_shape: tuple[int, int, int],
               cfg: HogConfig) -> np.ndarray:
    """Concatenated per-slice descriptors for every patch: (N, (P/4)*num_bins)."""
    return np.stack([hog_patch(p, patch_shape, cfg).ravel() for p in patches], axis=0)
