"""Multi-agent masking policy: shared actor, centralized critic, rewards from
reconstruction-loss differences, and synchronous advantage actor-critic
updates.

Each patch is an agent. All agents share one actor network that maps
[own feature ; pooled global feature] to two logits (keep / mask); the critic
maps the global feature to a scalar state value. Rewards compare the frozen
target model's combined reconstruction loss under consecutive joint actions,
so identical consecutive decisions score exactly zero and, undiscounted, an
episode's rewards telescope to the loss gap between its last and first
decision.
"""

from __future__ import annotations

from copy import deepcopy
from dataclasses import dataclass, field

import numpy as np

from .mim import (LossConfig, MaskDecision, TargetModel, encoder_features,
                  mim_forward, pretrain_loss)
from .nn import (AdamConfig, ParamTensor, adam_step, dense_backward,
                 dense_forward, softmax_backward, softmax_forward,
                 tanh_backward, tanh_forward)
from .volume import Volume3D, patchify


@dataclass(frozen=True)
class PolicyConfig:
    embed_dim: int = 32
    hidden: int = 32
    gamma: float = 0.99
    horizon: int = 4
    entropy_coef: float = 0.0
    relative_discount: bool = False

    def __post_init__(self):
        if not (0.0 < self.gamma <= 1.0):
            raise ValueError("gamma must lie in (0, 1]")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")


@dataclass
class DecisionState:
    """Per-agent observations O (N, E) and the shared global state S (E,).

    S is the mean of the observation rows: one extractor serves both views.
    """

    observations: np.ndarray
    global_state: np.ndarray


class PolicyParams:
    """Shared two-layer actor and two-layer critic."""

    def __init__(self, cfg: PolicyConfig, rng: np.random.Generator,
                 init_scale: float = 0.01):
        self.cfg = cfg
        e, hid = cfg.embed_dim, cfg.hidden

        def dense(name, fan_in, fan_out):
            w = ParamTensor(f"{name}.w", rng.normal(0.0, init_scale, (fan_in, fan_out)))
            b = ParamTensor(f"{name}.b", np.zeros(fan_out))
            return w, b

        self.actor_w1, self.actor_b1 = dense("actor1", 2 * e, hid)
        self.actor_w2, self.actor_b2 = dense("actor2", hid, 2)
        self.critic_w1, self.critic_b1 = dense("critic1", e, hid)
        self.critic_w2, self.critic_b2 = dense("critic2", hid, 1)

    def actor_params(self) -> list[ParamTensor]:
        return [self.actor_w1, self.actor_b1, self.actor_w2, self.actor_b2]

    def critic_params(self) -> list[ParamTensor]:
        return [self.critic_w1, self.critic_b1, self.critic_w2, self.critic_b2]

    def params(self) -> list[ParamTensor]:
        return self.actor_params() + self.critic_params()

    def clone(self) -> "PolicyParams":
        return deepcopy(self)


def observe(model: TargetModel, volume: Volume3D) -> DecisionState:
    """Frozen-snapshot features: encoder run with every patch visible."""
    patches, _ = patchify(volume, model.cfg.patch_size)
    return observe_patches(model, patches)


def observe_patches(model: TargetModel, patches: np.ndarray) -> DecisionState:
    obs = encoder_features(model, patches)
    return DecisionState(observations=obs, global_state=obs.mean(axis=0))


def _actor_forward(policy: PolicyParams, state: DecisionState):
    n = state.observations.shape[0]
    x = np.concatenate(
        [state.observations, np.broadcast_to(state.global_state, (n,) + state.global_state.shape)],
        axis=1)
    h = tanh_forward(dense_forward(x, policy.actor_w1, policy.actor_b1))
    logits = dense_forward(h, policy.actor_w2, policy.actor_b2)
    probs = softmax_forward(logits)
    return probs, (x, h)


def action_probabilities(policy: PolicyParams, state: DecisionState) -> np.ndarray:
    """Per-agent (keep, mask) probabilities, shape (N, 2)."""
    probs, _ = _actor_forward(policy, state)
    return probs


def _critic_forward(policy: PolicyParams, state: DecisionState):
    s = state.global_state[None, :]
    h = tanh_forward(dense_forward(s, policy.critic_w1, policy.critic_b1))
    v = dense_forward(h, policy.critic_w2, policy.critic_b2)
    return float(v[0, 0]), (s, h)


def state_value(policy: PolicyParams, state: DecisionState) -> float:
    return _critic_forward(policy, state)[0]


def act(policy: PolicyParams, state: DecisionState, rng: np.random.Generator,
        *, greedy: bool = False, max_resample: int = 16
        ) -> tuple[MaskDecision, np.ndarray, np.ndarray]:
    """Sample (or argmax) every agent's mask/keep action independently.

    All-mask and all-keep joint actions are invalid for training; sampling
    retries up to `max_resample` times, then flips one uniformly chosen agent.
    Returns (decision, per-agent log-probs of the taken action, probabilities).
    """
    probs = action_probabilities(policy, state)
    n = probs.shape[0]
    if greedy:
        mask = probs[:, 1] > probs[:, 0]
        mask = _fix_degenerate(mask, rng)
    else:
        for _ in range(max_resample):
            mask = rng.random(n) < probs[:, 1]
            if mask.any() and not mask.all():
                break
        else:
            mask = _fix_degenerate(mask, rng)
    logp = np.log(np.where(mask, probs[:, 1], probs[:, 0]))
    return MaskDecision(mask), logp, probs


def _fix_degenerate(mask: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    if mask.any() and not mask.all():
        return mask
    mask = mask.copy()
    mask[rng.integers(mask.size)] ^= True
    return mask


def reward(model: TargetModel, patches: np.ndarray, hog_targets: np.ndarray,
           prev_decision: MaskDecision, cur_decision: MaskDecision,
           loss_cfg: LossConfig) -> float:
    """Team reward: loss under the current decision minus under the previous,
    both measured on the same frozen model."""
    cur = pretrain_loss(model, patches, hog_targets, cur_decision, loss_cfg)
    prev = pretrain_loss(model, patches, hog_targets, prev_decision, loss_cfg)
    return cur.l_pretrain - prev.l_pretrain


@dataclass
class RewardTrace:
    """Per-step rewards of one decision sequence, step indices starting at 1."""

    gamma: float = 0.99
    horizon: int = 4
    rewards: list[list[float]] = field(default_factory=list)

    def add(self, step_rewards: float | list[float]) -> None:
        if np.ndim(step_rewards) == 0:
            step_rewards = [float(step_rewards)]
        self.rewards.append([float(r) for r in step_rewards])

    @property
    def num_steps(self) -> int:
        return len(self.rewards)

    def mean_reward(self, t: int) -> float:
        """Batch-mean reward at step t (1-based)."""
        return float(np.mean(self.rewards[t - 1]))


def discounted_return(trace: RewardTrace, t: int, *,
                      relative_discount: bool = False) -> float:
    """Accumulated discounted return over the window of `horizon` steps
    ending at step t.

    The default weights step i by gamma^(i-1), i.e. by its absolute index in
    the sequence; `relative_discount` instead weights by position within the
    window (gamma^(i - (t - horizon + 1))), the conventional form.
    """
    start = t - trace.horizon + 1
    if start < 1 or t > trace.num_steps:
        raise ValueError(
            f"return at t={t} needs steps {start}..{t}; trace holds 1..{trace.num_steps}")
    total = 0.0
    for i in range(start, t + 1):
        exponent = (i - start) if relative_discount else (i - 1)
        total += trace.gamma ** exponent * trace.mean_reward(i)
    return total


@dataclass
class Experience:
    """One A2C sample: the state, the joint action taken, and its return."""

    state: DecisionState
    decision: MaskDecision
    ret: float


def _critic_term(policy: PolicyParams, ex: Experience, b: int,
                 want_grad: bool) -> tuple[float, float]:
    """Critic loss contribution A^2 / b for one sample; returns (loss, A)."""
    v, (s, hc) = _critic_forward(policy, ex.state)
    adv = ex.ret - v
    if want_grad:
        dv = np.array([[-2.0 * adv / b]])  # d(A^2)/dV = -2A
        dhc = dense_backward(hc, policy.critic_w2, policy.critic_b2, dv)
        dense_backward(s, policy.critic_w1, policy.critic_b1,
                       tanh_backward(hc, dhc))
    return adv * adv / b, adv


def _actor_term(policy: PolicyParams, ex: Experience, adv: float, b: int,
                want_grad: bool, entropy_coef: float) -> float:
    """Actor loss contribution -log pi(a|S,O) * A / b with A held constant."""
    probs, (x, ha) = _actor_forward(policy, ex.state)
    taken = ex.decision.mask.astype(np.int64)
    rows = np.arange(probs.shape[0])
    loss = -float(np.log(probs[rows, taken]).sum()) * adv / b
    dlogits = None
    if want_grad:
        onehot = np.zeros_like(probs)
        onehot[rows, taken] = 1.0
        dlogits = adv * (probs - onehot) / b
    if entropy_coef:
        ent = -(probs * np.log(probs)).sum(axis=1, keepdims=True)
        loss += -entropy_coef * float(ent.sum()) / b
        if want_grad:
            dlogits = dlogits + entropy_coef * probs * (np.log(probs) + ent) / b
    if want_grad:
        dha = dense_backward(ha, policy.actor_w2, policy.actor_b2, dlogits)
        dense_backward(x, policy.actor_w1, policy.actor_b1,
                       tanh_backward(ha, dha))
    return loss


def a2c_update(policy: PolicyParams, buffer: list[Experience],
               adam_cfg: AdamConfig, *, entropy_coef: float | None = None
               ) -> tuple[float, float]:
    """One synchronous actor-critic step over an episode buffer.

    Per sample: advantage A = R - V(S); critic loss A^2; actor loss
    -log pi(joint action | S, O) * A with A treated as a constant, where the
    joint log-probability is the sum of per-agent log-probabilities. Losses
    are averaged over the buffer and both networks take a joint Adam step.
    Returns (critic_loss, actor_loss).
    """
    if not buffer:
        raise ValueError("empty episode buffer")
    if entropy_coef is None:
        entropy_coef = policy.cfg.entropy_coef
    b = len(buffer)
    critic_loss = 0.0
    actor_loss = 0.0
    for ex in buffer:
        c, adv = _critic_term(policy, ex, b, True)
        critic_loss += c
        actor_loss += _actor_term(policy, ex, adv, b, True, entropy_coef)
    adam_step(policy.params(), adam_cfg)
    return critic_loss, actor_loss


def critic_loss_closure(policy: PolicyParams, buffer: list[Experience]):
    """Closure for :func:`maskpolicy.nn.gradcheck` over the critic parameters."""
    def fn(want_grad: bool) -> float:
        return sum(_critic_term(policy, ex, len(buffer), want_grad)[0]
                   for ex in buffer)
    return fn


def actor_loss_closure(policy: PolicyParams, buffer: list[Experience],
                       *, entropy_coef: float = 0.0):
    """Closure for :func:`maskpolicy.nn.gradcheck` over the actor parameters.

    The advantage is recomputed from the (unperturbed) critic on each call,
    matching its detached role in the actor loss.
    """
    def fn(want_grad: bool) -> float:
        total = 0.0
        for ex in buffer:
            _, adv = _critic_term(policy, ex, len(buffer), False)
            total += _actor_term(policy, ex, adv, len(buffer), want_grad,
                                 entropy_coef)
        return total
    return fn


def actor_critic_losses(policy: PolicyParams, buffer: list[Experience],
                        *, entropy_coef: float = 0.0) -> tuple[float, float]:
    """Loss values only (no gradients, no update)."""
    critic_loss = 0.0
    actor_loss = 0.0
    for ex in buffer:
        c, adv = _critic_term(policy, ex, len(buffer), False)
        critic_loss += c
        actor_loss += _actor_term(policy, ex, adv, len(buffer), False,
                                  entropy_coef)
    return critic_loss, actor_loss
