"""Segmentation quality metrics: split/merge variation of information and
adapted Rand error.

Both metrics are computed from the joint label histogram of a predicted and a
ground-truth labeling, restricted by default to voxels with nonzero ground
truth. VOI uses natural log unless configured otherwise; the split term is
H(pred | gt) and the merge term H(gt | pred), so refining a labeling can only
add split error and coarsening only merge error.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volume import LabelVolume


@dataclass
class MetricsReport:
    voi_split: float
    voi_merge: float
    voi: float
    arand: float
    voxel_count: int

    def to_dict(self) -> dict:
        return {"voi_split": self.voi_split, "voi_merge": self.voi_merge,
                "voi": self.voi, "arand": self.arand,
                "voxel_count": self.voxel_count}


def _contingency(pred: LabelVolume, gt: LabelVolume,
                 include_background: bool) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Joint histogram counts n_ij plus gt row sums and pred column sums."""
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    p = pred.data.ravel()
    g = gt.data.ravel()
    if not include_background:
        keep = g > 0
        p, g = p[keep], g[keep]
    if g.size == 0:
        raise ValueError("no foreground voxels to evaluate")
    pairs = np.stack([g, p], axis=0)
    uniq, counts = np.unique(pairs, axis=1, return_counts=True)
    n_ij = counts.astype(np.float64)
    gt_ids, gt_inv = np.unique(uniq[0], return_inverse=True)
    pr_ids, pr_inv = np.unique(uniq[1], return_inverse=True)
    t = np.zeros(gt_ids.size)
    s = np.zeros(pr_ids.size)
    np.add.at(t, gt_inv, n_ij)
    np.add.at(s, pr_inv, n_ij)
    return (n_ij, gt_inv, pr_inv), t, s


def voi(pred: LabelVolume, gt: LabelVolume, *, log_base: str = "nats",
        include_background: bool = False) -> tuple[float, float, float]:
    """(VOI_split, VOI_merge, VOI): conditional entropies of the joint labeling.

    VOI_split = H(pred | gt) measures over-segmentation, VOI_merge =
    H(gt | pred) under-segmentation. `log_base` is "nats" or "bits".
    """
    if log_base not in ("nats", "bits"):
        raise ValueError(f"log_base must be 'nats' or 'bits', got {log_base!r}")
    (n_ij, gt_inv, pr_inv), t, s = _contingency(pred, gt, include_background)
    n = n_ij.sum()
    p_ij = n_ij / n
    split = float(np.sum(p_ij * np.log(t[gt_inv] / n_ij)))
    merge = float(np.sum(p_ij * np.log(s[pr_inv] / n_ij)))
    if log_base == "bits":
        split /= np.log(2.0)
        merge /= np.log(2.0)
    return split, merge, split + merge


def arand(pred: LabelVolume, gt: LabelVolume, *,
          include_background: bool = False) -> float:
    """Adapted Rand error: 1 minus the F-score of Rand precision and recall."""
    (n_ij, _, _), t, s = _contingency(pred, gt, include_background)
    sum_sq = float(np.sum(n_ij ** 2))
    precision = sum_sq / float(np.sum(s ** 2))
    recall = sum_sq / float(np.sum(t ** 2))
    return 1.0 - 2.0 * precision * recall / (precision + recall)


def evaluate(pred: LabelVolume, gt: LabelVolume, *, log_base: str = "nats",
             include_background: bool = False) -> MetricsReport:
    v_s, v_m, v = voi(pred, gt, log_base=log_base,
                      include_background=include_background)
    a = arand(pred, gt, include_background=include_background)
    g = gt.data if include_background else gt.data[gt.data > 0]
    return MetricsReport(v_s, v_m, v, a, int(g.size))
