"""Scikit-learn style entry points: pretrainers that fit on volumes, a linear
affinity probe with fit/predict/score, and a watershed+agglomeration
segmenter. These wrap the functional modules so the pipeline composes with
the wider estimator ecosystem (`get_params`, cloning, grid search).
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .hog import HogConfig
from .mim import LossConfig, MimConfig, TargetModel, decoder_features
from .nn import AdamConfig
from .policy import PolicyConfig
from .seg import AffinityMap, agglomerate, watershed_fragments
from .trainer import (Schedule, fixed_ratio_pretrain, pretrain, probe_eval,
                      probe_train)
from .validation import (as_affinity, as_label_list, as_volume_list,
                         check_fitted)
from .volume import patchify


class _PretrainerMixin:
    """Shared feature extraction for fitted pretrainers."""

    def transform(self, X):
        """Frozen per-patch decoder features, shape (n_volumes, N, E)."""
        check_fitted(self, "model_")
        vols = as_volume_list(X)
        feats = []
        for vol in vols:
            patches, _ = patchify(vol, self.model_.cfg.patch_size)
            feats.append(decoder_features(self.model_, patches))
        return np.stack(feats, axis=0)

    def _mim_config(self) -> MimConfig:
        return MimConfig(patch_size=self.patch_size, embed_dim=self.embed_dim,
                         enc_layers=self.enc_layers, dec_layers=self.dec_layers,
                         hog=HogConfig(num_bins=self.hog_bins))

    def _loss_config(self) -> LossConfig:
        return LossConfig(lambda_mse=self.lambda_mse, lambda_hog=self.lambda_hog,
                          enable_mse=self.enable_mse, enable_hog=self.enable_hog)


class DecisionMaskedPretrainer(BaseEstimator, _PretrainerMixin):
    """Two-phase pretraining where a learned multi-agent policy picks the mask.

    fit(X) expects an iterable of same-shape volumes (arrays or Volume3D).
    After fitting, `model_` holds the target network, `policy_` the masking
    policy, and `trajectory_` the per-iteration masking ratios.
    """

    def __init__(self, patch_size=8, embed_dim=32, enc_layers=2, dec_layers=2,
                 hog_bins=9, lambda_mse=0.1, lambda_hog=1.0, enable_mse=True,
                 enable_hog=True, gamma=0.99, horizon=4, policy_period=4,
                 policy_hidden=32, entropy_coef=0.0, relative_discount=False,
                 phase1_iters=2000, phase2_iters=2000, batch_size=1,
                 sample_actions=True, lr=1e-3, policy_lr=3e-3, seed=0):
        self.patch_size = patch_size
        self.embed_dim = embed_dim
        self.enc_layers = enc_layers
        self.dec_layers = dec_layers
        self.hog_bins = hog_bins
        self.lambda_mse = lambda_mse
        self.lambda_hog = lambda_hog
        self.enable_mse = enable_mse
        self.enable_hog = enable_hog
        self.gamma = gamma
        self.horizon = horizon
        self.policy_period = policy_period
        self.policy_hidden = policy_hidden
        self.entropy_coef = entropy_coef
        self.relative_discount = relative_discount
        self.phase1_iters = phase1_iters
        self.phase2_iters = phase2_iters
        self.batch_size = batch_size
        self.sample_actions = sample_actions
        self.lr = lr
        self.policy_lr = policy_lr
        self.seed = seed

    def fit(self, X, y=None):
        vols = as_volume_list(X)
        schedule = Schedule(phase1_iters=self.phase1_iters,
                            phase2_iters=self.phase2_iters,
                            policy_period=self.policy_period,
                            batch_size=self.batch_size,
                            sample_actions=self.sample_actions)
        policy_cfg = PolicyConfig(embed_dim=self.embed_dim,
                                  hidden=self.policy_hidden, gamma=self.gamma,
                                  horizon=self.horizon,
                                  entropy_coef=self.entropy_coef,
                                  relative_discount=self.relative_discount)
        result = pretrain(schedule, vols, self._mim_config(), self._loss_config(),
                          policy_cfg, mim_adam=AdamConfig(lr=self.lr),
                          policy_adam=AdamConfig(lr=self.policy_lr),
                          seed=self.seed)
        self.model_ = result.model
        self.policy_ = result.policy
        self.trajectory_ = result.trajectory
        self.mim_log_ = result.mim_log
        self.policy_log_ = result.policy_log
        return self


class FixedRatioPretrainer(BaseEstimator, _PretrainerMixin):
    """Masked-autoencoder baseline with uniform-random masks at a fixed ratio."""

    def __init__(self, ratio=0.5, iters=2000, patch_size=8, embed_dim=32,
                 enc_layers=2, dec_layers=2, hog_bins=9, lambda_mse=0.1,
                 lambda_hog=1.0, enable_mse=True, enable_hog=True, lr=1e-3,
                 seed=0):
        self.ratio = ratio
        self.iters = iters
        self.patch_size = patch_size
        self.embed_dim = embed_dim
        self.enc_layers = enc_layers
        self.dec_layers = dec_layers
        self.hog_bins = hog_bins
        self.lambda_mse = lambda_mse
        self.lambda_hog = lambda_hog
        self.enable_mse = enable_mse
        self.enable_hog = enable_hog
        self.lr = lr
        self.seed = seed

    def fit(self, X, y=None):
        vols = as_volume_list(X)
        self.model_, self.mim_log_ = fixed_ratio_pretrain(
            self.ratio, self.iters, vols, self._mim_config(), self._loss_config(),
            adam=AdamConfig(lr=self.lr), seed=self.seed)
        return self


class AffinityProbe(BaseEstimator):
    """Linear logistic probe from frozen pretrained features to affinities.

    `model` is a fitted pretrainer (anything with `model_`) or a TargetModel.
    fit(X, y) trains only the probe head; predict(X) returns one AffinityMap
    per volume and score(X, y) the negative held-out MSE (higher is better).
    """

    def __init__(self, model=None, iters=400, lr=1e-2, seed=0):
        self.model = model
        self.iters = iters
        self.lr = lr
        self.seed = seed

    def _target_model(self) -> TargetModel:
        if isinstance(self.model, TargetModel):
            return self.model
        if hasattr(self.model, "model_"):
            return self.model.model_
        raise ValueError("model must be a TargetModel or a fitted pretrainer")

    def fit(self, X, y):
        vols = as_volume_list(X)
        labels = as_label_list(y, len(vols))
        self.head_ = probe_train(self._target_model(), list(zip(vols, labels)),
                                 self.iters, adam=AdamConfig(lr=self.lr),
                                 seed=self.seed)
        return self

    def predict(self, X) -> list[AffinityMap]:
        check_fitted(self, "head_")
        vols = as_volume_list(X)
        model = self._target_model()
        _, maps = probe_eval(model, self.head_, [(v, _zero_labels(v)) for v in vols])
        return maps

    def mse(self, X, y) -> float:
        check_fitted(self, "head_")
        vols = as_volume_list(X)
        labels = as_label_list(y, len(vols))
        mse, _ = probe_eval(self._target_model(), self.head_,
                            list(zip(vols, labels)))
        return mse

    def score(self, X, y) -> float:
        return -self.mse(X, y)


def _zero_labels(vol):
    from .volume import LabelVolume
    return LabelVolume(np.zeros(vol.shape, dtype=np.int64))


class WaterzSegmenter(BaseEstimator):
    """Seeded watershed plus hierarchical agglomeration over an affinity map."""

    def __init__(self, seed_threshold=0.9, bias=0.2, merge_threshold=0.5,
                 quantile=None):
        self.seed_threshold = seed_threshold
        self.bias = bias
        self.merge_threshold = merge_threshold
        self.quantile = quantile

    def fit(self, X=None, y=None):
        return self  # stateless: parameters fully define the behavior

    def predict(self, X):
        """Segment one affinity map (or a list of them) into instance labels."""
        single = isinstance(X, AffinityMap) or (
            isinstance(X, np.ndarray) and X.ndim == 4)
        maps = [as_affinity(X)] if single else [as_affinity(a) for a in X]
        out = []
        for aff in maps:
            fragments = watershed_fragments(aff, self.seed_threshold, self.bias)
            seg = agglomerate(fragments, aff, self.merge_threshold,
                              quantile=self.quantile)
            out.append(seg.labels)
        return out[0] if single else out

    def fit_predict(self, X, y=None):
        return self.fit().predict(X)
