"""Decision-based masked-volume pretraining with a learned masking policy,
plus the downstream affinity-segmentation and evaluation stack.

The building blocks live in focused modules (`volume`, `hog`, `nn`, `mim`,
`policy`, `trainer`, `seg`, `metrics`); `estimators` wraps the top-level
workflows in scikit-learn style fit/predict classes, and `cli` exposes the
whole pipeline as reproducible subcommands.
"""

from .estimators import (AffinityProbe, DecisionMaskedPretrainer,
                         FixedRatioPretrainer, WaterzSegmenter)
from .hog import HogConfig, hog_patch, hog_target
from .metrics import MetricsReport, arand, evaluate, voi
from .mim import (LossConfig, LossReport, MaskDecision, MimConfig, TargetModel,
                  mim_forward, mim_loss, mim_train_step, pretrain_loss)
from .nn import AdamConfig, ParamTensor, adam_step, gradcheck
from .policy import (DecisionState, Experience, PolicyConfig, PolicyParams,
                     RewardTrace, a2c_update, act, discounted_return, observe,
                     reward)
from .seg import (AffinityMap, Segmentation, affinity_from_labels, agglomerate,
                  watershed_fragments)
from .trainer import (ProbeHead, RatioTrajectory, Schedule, fixed_ratio_pretrain,
                      make_phantom_pool, pretrain, probe_eval, probe_train)
from .volume import (LabelVolume, PatchGrid, Volume3D, gen_phantom, patchify,
                     read_volume, unpatchify, write_volume)

__version__ = "0.1.0"

__all__ = [
    "AdamConfig", "AffinityMap", "AffinityProbe", "DecisionMaskedPretrainer",
    "DecisionState", "Experience", "FixedRatioPretrainer", "HogConfig",
    "LabelVolume", "LossConfig", "LossReport", "MaskDecision", "MetricsReport",
    "MimConfig", "ParamTensor", "PatchGrid", "PolicyConfig", "PolicyParams",
    "ProbeHead", "RatioTrajectory", "RewardTrace", "Schedule", "Segmentation",
    "TargetModel", "Volume3D", "WaterzSegmenter", "a2c_update", "act",
    "adam_step", "affinity_from_labels", "agglomerate", "arand",
    "discounted_return", "evaluate", "fixed_ratio_pretrain", "gen_phantom",
    "gradcheck", "hog_patch", "hog_target", "make_phantom_pool", "mim_forward",
    "mim_loss", "mim_train_step", "observe", "patchify", "pretrain",
    "pretrain_loss", "probe_eval", "probe_train", "read_volume", "reward",
    "unpatchify", "voi", "watershed_fragments", "write_volume",
]
