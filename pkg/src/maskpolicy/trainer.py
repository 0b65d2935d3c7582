"""Two-phase pretraining orchestration, fixed-ratio baselines, and the frozen
linear affinity probe used to measure downstream transfer.

Phase 1 interleaves target-model updates (masks sampled from the policy) with
policy episodes every `policy_period` steps; phase 2 freezes the policy and
continues target-model training on policy-sampled masks. Every iteration logs
the masking ratio, so the full ratio trajectory can be exported and its
stabilization measured.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .mim import (LossConfig, MaskDecision, MimConfig, TargetModel,
                  decoder_features, mim_train_step, pretrain_loss)
from .nn import AdamConfig, ParamTensor, adam_step
from .policy import (Experience, PolicyConfig, PolicyParams, RewardTrace,
                     a2c_update, act, discounted_return, observe_patches)
from .seg import AffinityMap, affinity_from_labels
from .volume import (LabelVolume, PatchGrid, Volume3D, gen_phantom, patchify,
                     unpatchify)


@dataclass(frozen=True)
class Schedule:
    phase1_iters: int = 2000
    phase2_iters: int = 2000
    policy_period: int = 4
    batch_size: int = 1
    sample_actions: bool = True  # greedy decisions during MIM steps if False


@dataclass
class RatioTrajectory:
    iterations: list[int] = field(default_factory=list)
    ratios: list[float] = field(default_factory=list)

    def append(self, iteration: int, ratio: float) -> None:
        self.iterations.append(iteration)
        self.ratios.append(ratio)

    def window_stats(self, window: int) -> tuple[float, float]:
        """Mean and std of the last `window` logged ratios."""
        tail = np.asarray(self.ratios[-window:])
        return float(tail.mean()), float(tail.std())

    def __len__(self) -> int:
        return len(self.ratios)


@dataclass
class PretrainResult:
    model: TargetModel
    policy: PolicyParams
    trajectory: RatioTrajectory
    mim_log: list[dict]
    policy_log: list[dict]


def make_phantom_pool(seed: int, shape: tuple[int, int, int], num_objects: int,
                      noise_sigma: float, size: int, **phantom_kwargs
                      ) -> list[tuple[Volume3D, LabelVolume]]:
    """A deterministic pool of phantoms; pool index i uses seed (seed, i)."""
    pool = []
    for i in range(size):
        sub = np.random.SeedSequence((seed, i)).generate_state(1)[0]
        pool.append(gen_phantom(int(sub), shape, num_objects, noise_sigma,
                                **phantom_kwargs))
    return pool


def _prepare(volumes: Sequence[Volume3D], model: TargetModel):
    """Patchify each volume once and precompute its HOG targets."""
    prepped = []
    for vol in volumes:
        if vol.shape != model.vol_shape:
            raise ValueError(
                f"volume shape {vol.shape} != model shape {model.vol_shape}")
        patches, _ = patchify(vol, model.cfg.patch_size)
        prepped.append((patches, model.hog_targets(patches)))
    return prepped


def _run_episode(policy: PolicyParams, model: TargetModel, prepped, indices,
                 loss_cfg: LossConfig, rng: np.random.Generator
                 ) -> tuple[list[Experience], RewardTrace, float]:
    """One policy episode of `horizon` steps against the frozen model.

    Each volume in the batch rolls its own decision chain; rewards are pooled
    into batch means for the return, and the terminal step of every chain
    becomes one experience tuple tagged with the shared return.
    """
    cfg = policy.cfg
    states = [observe_patches(model, prepped[i][0]) for i in indices]
    decisions = []
    prev_losses = []
    for v, i in enumerate(indices):
        d, _, _ = act(policy, states[v], rng)
        decisions.append(d)
        prev_losses.append(
            pretrain_loss(model, prepped[i][0], prepped[i][1], d, loss_cfg).l_pretrain)
    trace = RewardTrace(gamma=cfg.gamma, horizon=cfg.horizon)
    for _ in range(cfg.horizon):
        step_rewards = []
        for v, i in enumerate(indices):
            d, _, _ = act(policy, states[v], rng)
            decisions[v] = d
            cur = pretrain_loss(model, prepped[i][0], prepped[i][1], d,
                                loss_cfg).l_pretrain
            step_rewards.append(cur - prev_losses[v])
            prev_losses[v] = cur
        trace.add(step_rewards)
    ret = discounted_return(trace, cfg.horizon,
                            relative_discount=cfg.relative_discount)
    buffer = [Experience(states[v], decisions[v], ret) for v in range(len(indices))]
    return buffer, trace, ret


def pretrain(schedule: Schedule, volumes: Sequence[Volume3D], mim_cfg: MimConfig,
             loss_cfg: LossConfig, policy_cfg: PolicyConfig, *,
             mim_adam: AdamConfig, policy_adam: AdamConfig, seed: int,
             policy_init_scale: float = 0.01) -> PretrainResult:
    """Two-phase decision-based pretraining; deterministic given the seed."""
    if policy_cfg.embed_dim != mim_cfg.embed_dim:
        raise ValueError("policy embed_dim must match the target model's")
    rng = np.random.default_rng(seed)
    model = TargetModel(mim_cfg, volumes[0].shape, rng)
    policy = PolicyParams(policy_cfg, rng, init_scale=policy_init_scale)
    prepped = _prepare(volumes, model)
    trajectory = RatioTrajectory()
    mim_log: list[dict] = []
    policy_log: list[dict] = []

    total = schedule.phase1_iters + schedule.phase2_iters
    phase2_snapshot = None
    for it in range(1, total + 1):
        in_phase1 = it <= schedule.phase1_iters
        if not in_phase1 and phase2_snapshot is None:
            phase2_snapshot = [p.value.copy() for p in policy.params()]
        idx = int(rng.integers(len(prepped)))
        patches, hog_t = prepped[idx]
        state = observe_patches(model, patches)
        decision, _, _ = act(policy, state, rng, greedy=not schedule.sample_actions)
        report = mim_train_step(model, patches, hog_t, decision, loss_cfg, mim_adam)
        trajectory.append(it, decision.masking_ratio)
        mim_log.append({"iter": it, "L_MSE": report.l_mse, "L_HOG": report.l_hog,
                        "L_pretrain": report.l_pretrain,
                        "masking_ratio": decision.masking_ratio})
        if in_phase1 and it % schedule.policy_period == 0:
            batch = [int(rng.integers(len(prepped)))
                     for _ in range(schedule.batch_size)]
            buffer, trace, ret = _run_episode(policy, model, prepped, batch,
                                              loss_cfg, rng)
            critic_loss, actor_loss = a2c_update(policy, buffer, policy_adam)
            rewards = [r for step in trace.rewards for r in step]
            policy_log.append({
                "iter": it,
                "r_mean": float(np.mean(rewards)),
                "R_mean": ret,
                "critic_loss": critic_loss,
                "actor_loss": actor_loss,
                "masking_ratio": float(np.mean(
                    [ex.decision.masking_ratio for ex in buffer])),
            })
    if phase2_snapshot is not None:
        for p, saved in zip(policy.params(), phase2_snapshot):
            if not np.array_equal(p.value, saved):
                raise AssertionError(f"policy parameter {p.name} changed in phase 2")
    return PretrainResult(model, policy, trajectory, mim_log, policy_log)


def sample_fixed_ratio(n: int, ratio: float, rng: np.random.Generator) -> MaskDecision:
    """Uniform-random mask at a fixed ratio: round to nearest, clamp to [1, N-1]."""
    if not (0.0 < ratio < 1.0):
        raise ValueError(f"ratio must lie strictly in (0, 1), got {ratio}")
    k = int(np.clip(round(ratio * n), 1, n - 1))
    mask = np.zeros(n, dtype=bool)
    mask[rng.choice(n, size=k, replace=False)] = True
    return MaskDecision(mask)


def fixed_ratio_pretrain(ratio: float, iters: int, volumes: Sequence[Volume3D],
                         mim_cfg: MimConfig, loss_cfg: LossConfig, *,
                         adam: AdamConfig, seed: int
                         ) -> tuple[TargetModel, list[dict]]:
    """Plain masked-autoencoder baseline with uniform-random fixed-ratio masks."""
    rng = np.random.default_rng(seed)
    model = TargetModel(mim_cfg, volumes[0].shape, rng)
    prepped = _prepare(volumes, model)
    log = []
    for it in range(1, iters + 1):
        idx = int(rng.integers(len(prepped)))
        patches, hog_t = prepped[idx]
        decision = sample_fixed_ratio(model.num_patches, ratio, rng)
        report = mim_train_step(model, patches, hog_t, decision, loss_cfg, adam)
        log.append({"iter": it, "L_MSE": report.l_mse, "L_HOG": report.l_hog,
                    "L_pretrain": report.l_pretrain,
                    "masking_ratio": decision.masking_ratio})
    return model, log


# --- linear affinity probe ----------------------------------------------------

def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class ProbeHead:
    """Logistic-linear map from per-patch decoder features to in-patch
    3-channel affinities."""

    def __init__(self, embed_dim: int, patch_voxels: int, rng: np.random.Generator):
        self.patch_voxels = patch_voxels
        out_dim = 3 * patch_voxels
        self.w = ParamTensor("probe.w",
                             rng.normal(0.0, 1.0 / np.sqrt(embed_dim),
                                        (embed_dim, out_dim)))
        self.b = ParamTensor("probe.b", np.zeros(out_dim))

    def params(self) -> list[ParamTensor]:
        return [self.w, self.b]

    def predict(self, features: np.ndarray) -> np.ndarray:
        return _sigmoid(features @ self.w.value + self.b.value)


def _affinity_patches(labels: LabelVolume, patch_size: int) -> np.ndarray:
    """Ground-truth affinities cut with the same grid, channel-last: (N, 3*pv)."""
    aff_vol = affinity_from_labels(labels).to_volume()
    patches, _ = patchify(aff_vol, patch_size)
    return patches


def probe_train(model: TargetModel, pairs: Sequence[tuple[Volume3D, LabelVolume]],
                iters: int, *, adam: AdamConfig, seed: int) -> ProbeHead:
    """Fit the probe head on frozen features with squared-error loss.

    Features and targets of all training volumes are pooled into one matrix
    and the head takes full-batch Adam steps, so fitting is deterministic for
    a fixed seed (which only sets the head's initialization).
    """
    rng = np.random.default_rng(seed)
    feats, targets = [], []
    for vol, labels in pairs:
        patches, _ = patchify(vol, model.cfg.patch_size)
        feats.append(decoder_features(model, patches))
        targets.append(_affinity_patches(labels, model.cfg.patch_size))
    f = np.concatenate(feats, axis=0)
    t = np.concatenate(targets, axis=0)
    patch_voxels = model.patch_dim // model.cfg.channels
    head = ProbeHead(model.cfg.embed_dim, patch_voxels, rng)
    for _ in range(iters):
        y = head.predict(f)
        dy = 2.0 * (y - t) / t.size
        dz = dy * y * (1.0 - y)
        head.w.grad += f.T @ dz
        head.b.grad += dz.sum(axis=0)
        adam_step(head.params(), adam)
    return head


def probe_eval(model: TargetModel, head: ProbeHead,
               pairs: Sequence[tuple[Volume3D, LabelVolume]]
               ) -> tuple[float, list[AffinityMap]]:
    """Held-out affinity MSE (mean over volumes) plus predicted affinity maps."""
    mses = []
    maps = []
    for vol, labels in pairs:
        patches, grid = patchify(vol, model.cfg.patch_size)
        y = head.predict(decoder_features(model, patches))
        t = _affinity_patches(labels, model.cfg.patch_size)
        mses.append(float(np.mean((y - t) ** 2)))
        aff_grid = PatchGrid(grid.vol_shape, 3, grid.patch_size)
        maps.append(AffinityMap.from_volume(unpatchify(y, aff_grid)))
    return float(np.mean(mses)), maps
