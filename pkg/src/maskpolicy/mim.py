"""Masked-volume target model: visible-only encoder, token-mixing decoder,
and dual voxel/HOG reconstruction heads with a weighted combined loss.

The encoder processes only visible patches; the decoder sees all N slots,
with encoder outputs at visible positions and a learned mask token at masked
positions, every slot carrying its learned positional embedding. Attention is
replaced by a permutation-equivariant residual mixing layer,

    h_i' = h_i + tanh(W1 h_i + W2 * meanpool(h) + b),

which keeps the set-processing contract of a transformer block (including its
residual stream, so token content survives depth) while the whole backward
pass stays hand-derived and finite-difference checkable.
"""

from __future__ import annotations

from copy import deepcopy
from dataclasses import dataclass, field

import numpy as np

from .hog import HogConfig, hog_target
from .nn import (AdamConfig, ParamTensor, adam_step, dense_backward,
                 dense_forward, meanpool_backward, meanpool_forward,
                 tanh_backward, tanh_forward)
from .volume import PatchGrid


@dataclass(frozen=True)
class MimConfig:
    patch_size: int = 8
    embed_dim: int = 32
    enc_layers: int = 2
    dec_layers: int = 2
    channels: int = 1
    hog: HogConfig = HogConfig()


@dataclass
class MaskDecision:
    """Joint mask/keep action over all patches; True = mask."""

    mask: np.ndarray

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.ndim != 1:
            raise ValueError("mask must be a 1D boolean vector")

    @property
    def masking_ratio(self) -> float:
        return float(self.mask.mean())

    @property
    def num_masked(self) -> int:
        return int(self.mask.sum())

    def check_trainable(self) -> None:
        n = self.mask.size
        if self.num_masked == 0 or self.num_masked == n:
            raise ValueError(
                f"training needs 1..{n - 1} masked patches, got {self.num_masked} of {n}")


@dataclass(frozen=True)
class LossConfig:
    lambda_mse: float = 0.1
    lambda_hog: float = 1.0
    enable_mse: bool = True
    enable_hog: bool = True

    @property
    def w_mse(self) -> float:
        return self.lambda_mse if self.enable_mse else 0.0

    @property
    def w_hog(self) -> float:
        return self.lambda_hog if self.enable_hog else 0.0


@dataclass
class LossReport:
    l_mse: float
    l_hog: float
    l_pretrain: float


class TargetModel:
    """Parameters of the masked autoencoder for one fixed (volume shape, P)."""

    def __init__(self, cfg: MimConfig, vol_shape: tuple[int, int, int],
                 rng: np.random.Generator):
        self.cfg = cfg
        self.vol_shape = tuple(vol_shape)
        grid = PatchGrid(self.vol_shape, cfg.channels, cfg.patch_size)
        self.num_patches = grid.num_patches
        self.patch_dim = grid.patch_dim
        self.patch_shape = grid.patch_shape
        self.hog_dim = (cfg.patch_size // 4) * cfg.hog.num_bins
        e = cfg.embed_dim

        def dense(name, fan_in, fan_out):
            w = ParamTensor(f"{name}.w",
                            rng.normal(0.0, 1.0 / np.sqrt(fan_in), (fan_in, fan_out)))
            b = ParamTensor(f"{name}.b", np.zeros(fan_out))
            return w, b

        self.w_embed, self.b_embed = dense("embed", self.patch_dim, e)
        self.pos = ParamTensor("pos", rng.normal(0.0, 0.02, (self.num_patches, e)))
        self.mask_token = ParamTensor("mask_token", rng.normal(0.0, 0.02, e))
        self.enc = [_mixing_params(f"enc{i}", e, rng) for i in range(cfg.enc_layers)]
        self.dec = [_mixing_params(f"dec{i}", e, rng) for i in range(cfg.dec_layers)]
        self.w_vox, self.b_vox = dense("head_vox", e, self.patch_dim)
        self.w_hog, self.b_hog = dense("head_hog", e, self.hog_dim)

    def params(self) -> list[ParamTensor]:
        out = [self.w_embed, self.b_embed, self.pos, self.mask_token]
        for w1, w2, b in self.enc + self.dec:
            out += [w1, w2, b]
        out += [self.w_vox, self.b_vox, self.w_hog, self.b_hog]
        return out

    def clone(self) -> "TargetModel":
        return deepcopy(self)

    def hog_targets(self, patches: np.ndarray) -> np.ndarray:
        return hog_target(patches, self.patch_shape, self.cfg.hog)


def _mixing_params(name: str, e: int, rng) -> tuple[ParamTensor, ParamTensor, ParamTensor]:
    scale = 1.0 / np.sqrt(e)
    return (ParamTensor(f"{name}.w1", rng.normal(0.0, scale, (e, e))),
            ParamTensor(f"{name}.w2", rng.normal(0.0, scale, (e, e))),
            ParamTensor(f"{name}.b", np.zeros(e)))


def mixing_forward(x: np.ndarray, w1: ParamTensor, w2: ParamTensor,
                   b: ParamTensor) -> tuple[np.ndarray, tuple]:
    m = meanpool_forward(x)
    z = x @ w1.value + (m @ w2.value)[None, :] + b.value
    t = tanh_forward(z)
    return x + t, (x, m, t)


def mixing_backward(cache: tuple, dy: np.ndarray, w1: ParamTensor,
                    w2: ParamTensor, b: ParamTensor) -> np.ndarray:
    x, m, t = cache
    dz = tanh_backward(t, dy)
    w1.grad += x.T @ dz
    s = dz.sum(axis=0)
    w2.grad += np.outer(m, s)
    b.grad += s
    return dy + dz @ w1.value.T + meanpool_backward(x.shape[0], s @ w2.value.T)


@dataclass
class MimCache:
    """Intermediates of one forward pass, consumed by :func:`mim_backward`."""

    visible: np.ndarray
    masked: np.ndarray
    x_vis: np.ndarray = None
    enc_caches: list = field(repr=False, default_factory=list)
    enc_out: np.ndarray = None
    dec_caches: list = field(repr=False, default_factory=list)
    dec_out: np.ndarray = None
    vox_pred: np.ndarray = None
    hog_pred: np.ndarray = None


def mim_forward(model: TargetModel, patches: np.ndarray,
                decision: MaskDecision) -> MimCache:
    """Visible-only encode, full-length decode, both reconstruction heads.

    Output rows always follow patch-grid order regardless of the decision; a
    ratio-0 decision is the inference path (no mask tokens enter the decoder).
    """
    n = model.num_patches
    if decision.mask.size != n:
        raise ValueError(f"decision length {decision.mask.size} != {n} patches")
    if patches.shape != (n, model.patch_dim):
        raise ValueError(
            f"patches shape {patches.shape} != ({n}, {model.patch_dim})")
    cache = MimCache(visible=np.flatnonzero(~decision.mask),
                     masked=np.flatnonzero(decision.mask))
    cache.x_vis = (dense_forward(patches[cache.visible], model.w_embed, model.b_embed)
                   + model.pos.value[cache.visible])
    h = cache.x_vis
    if cache.visible.size:  # meanpool is undefined over zero tokens
        for layer in model.enc:
            h, c = mixing_forward(h, *layer)
            cache.enc_caches.append(c)
    cache.enc_out = h

    dec_in = np.empty((n, model.cfg.embed_dim))
    dec_in[cache.masked] = model.mask_token.value
    dec_in[cache.visible] = cache.enc_out
    dec_in = dec_in + model.pos.value
    g = dec_in
    for layer in model.dec:
        g, c = mixing_forward(g, *layer)
        cache.dec_caches.append(c)
    cache.dec_out = g
    cache.vox_pred = dense_forward(g, model.w_vox, model.b_vox)
    cache.hog_pred = dense_forward(g, model.w_hog, model.b_hog)
    return cache


def mim_loss(vox_pred: np.ndarray, hog_pred: np.ndarray, patches: np.ndarray,
             hog_targets: np.ndarray, decision: MaskDecision,
             cfg: LossConfig) -> LossReport:
    """Mean-squared voxel and HOG errors over masked patches only."""
    masked = np.flatnonzero(decision.mask)
    if masked.size == 0:
        raise ValueError("loss undefined: no masked patches")
    l_mse = float(np.mean((vox_pred[masked] - patches[masked]) ** 2))
    l_hog = float(np.mean((hog_pred[masked] - hog_targets[masked]) ** 2))
    return LossReport(l_mse, l_hog, cfg.w_mse * l_mse + cfg.w_hog * l_hog)


def mim_backward(model: TargetModel, cache: MimCache, patches: np.ndarray,
                 hog_targets: np.ndarray, cfg: LossConfig) -> None:
    """Accumulate d(l_pretrain)/d(params) for the recorded forward."""
    masked = cache.masked
    dvox = np.zeros_like(cache.vox_pred)
    dhog = np.zeros_like(cache.hog_pred)
    dvox[masked] = (2.0 * cfg.w_mse / (masked.size * model.patch_dim)
                    * (cache.vox_pred[masked] - patches[masked]))
    dhog[masked] = (2.0 * cfg.w_hog / (masked.size * model.hog_dim)
                    * (cache.hog_pred[masked] - hog_targets[masked]))
    dg = dense_backward(cache.dec_out, model.w_vox, model.b_vox, dvox)
    dg += dense_backward(cache.dec_out, model.w_hog, model.b_hog, dhog)
    for layer, c in zip(reversed(model.dec), reversed(cache.dec_caches)):
        dg = mixing_backward(c, dg, *layer)
    model.pos.grad += dg
    model.mask_token.grad += dg[masked].sum(axis=0)
    dh = dg[cache.visible]
    for layer, c in zip(reversed(model.enc), reversed(cache.enc_caches)):
        dh = mixing_backward(c, dh, *layer)
    model.pos.grad[cache.visible] += dh
    dense_backward(patches[cache.visible], model.w_embed, model.b_embed, dh)


def pretrain_loss(model: TargetModel, patches: np.ndarray,
                  hog_targets: np.ndarray, decision: MaskDecision,
                  cfg: LossConfig) -> LossReport:
    """Forward-only loss evaluation (used for rewards, never updates)."""
    cache = mim_forward(model, patches, decision)
    return mim_loss(cache.vox_pred, cache.hog_pred, patches, hog_targets,
                    decision, cfg)


def mim_loss_closure(model: TargetModel, patches: np.ndarray,
                     hog_targets: np.ndarray, decision: MaskDecision,
                     cfg: LossConfig):
    """Closure for :func:`maskpolicy.nn.gradcheck` over the model parameters."""
    def fn(want_grad: bool) -> float:
        cache = mim_forward(model, patches, decision)
        report = mim_loss(cache.vox_pred, cache.hog_pred, patches, hog_targets,
                          decision, cfg)
        if want_grad:
            mim_backward(model, cache, patches, hog_targets, cfg)
        return report.l_pretrain
    return fn


def mim_train_step(model: TargetModel, patches: np.ndarray,
                   hog_targets: np.ndarray, decision: MaskDecision,
                   loss_cfg: LossConfig, adam_cfg: AdamConfig) -> LossReport:
    """One forward/backward/Adam cycle on a single volume."""
    decision.check_trainable()
    cache = mim_forward(model, patches, decision)
    report = mim_loss(cache.vox_pred, cache.hog_pred, patches, hog_targets,
                      decision, loss_cfg)
    mim_backward(model, cache, patches, hog_targets, loss_cfg)
    adam_step(model.params(), adam_cfg)
    return report


def encoder_features(model: TargetModel, patches: np.ndarray) -> np.ndarray:
    """Encoder outputs with every patch visible: one (N, E) feature matrix."""
    all_visible = MaskDecision(np.zeros(model.num_patches, dtype=bool))
    return mim_forward(model, patches, all_visible).enc_out


def decoder_features(model: TargetModel, patches: np.ndarray) -> np.ndarray:
    """Decoder outputs with every patch visible (the probe's input features)."""
    all_visible = MaskDecision(np.zeros(model.num_patches, dtype=bool))
    return mim_forward(model, patches, all_visible).dec_out
