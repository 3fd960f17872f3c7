"""Stage 1: group-relative policy optimization of the inference policy.

The generator is held at its reference.  For each user a group of summaries
is drawn from the inference policy; a summary's reward is minus the
summary-augmented loss averaged over all of that user's pairs.  Advantages are
group-centred (optionally standardized), the surrogate is the clipped
sequence-level importance ratio, and KL(inf || inf_ref) anchors the update.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import FrozenPolicyError, InvalidInputError
from .objectives import (
    ObjectiveConfig,
    build_instances,
    instance_deltas,
    kl_and_grad,
    pair_loss,
    reference_log_ratio_offsets,
)
from .optim import lr_at, make_optimizer
from .policy import Policy, TokenSeq, grad_weighted, log_prob_batch, sample_batch
from .synthworld import UserRecord


@dataclass(frozen=True)
class GrpoConfig:
    group_size: int = 8
    steps: int = 300
    lr: float = 1e-6
    clip_eps: float = 0.2
    kl_weight: float | None = None  # None: use the objective's alpha
    seed: int = 0
    batch_size: int = 8
    warmup_steps: int = 150
    normalize_advantages: bool = True
    optimizer: str = "sgd"
    kl_samples: int = 64

    def __post_init__(self):
        if self.group_size < 2:
            raise InvalidInputError("group_size must be >= 2")
        if not self.lr > 0:
            raise InvalidInputError("lr must be positive")
        if self.clip_eps < 0 or (self.kl_weight is not None and self.kl_weight < 0):
            raise InvalidInputError("clip_eps and kl_weight must be nonnegative")
        if self.steps < 0 or self.batch_size < 1 or self.warmup_steps < 0:
            raise InvalidInputError("steps, batch_size and warmup_steps must be nonnegative")

    def resolve(self, cfg_obj: ObjectiveConfig) -> "GrpoConfig":
        if self.kl_weight is not None:
            return self
        return dataclasses.replace(self, kl_weight=cfg_obj.alpha)


@dataclass(frozen=True)
class GroupRollout:
    user: UserRecord
    context: TokenSeq
    summaries: tuple
    rewards: np.ndarray
    advantages: np.ndarray
    old_log_probs: np.ndarray


def compute_advantages(rewards, normalize: bool = True) -> np.ndarray:
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise InvalidInputError("a group needs at least two rewards")
    centred = r - r.mean()
    std = r.std()
    if std == 0.0 or np.all(centred == 0.0):
        return np.zeros_like(r)
    if normalize:
        centred = centred / (std + 1e-8)
    # re-centre so the group sums to zero to rounding
    return centred - centred.mean()


def summary_rewards(gen: Policy, gen_ref: Policy, user: UserRecord, summaries: Sequence[TokenSeq],
                    cfg_obj: ObjectiveConfig, ref_offsets: np.ndarray | None = None) -> np.ndarray:
    """Minus the user-averaged summary-augmented loss, one value per summary."""
    if not user.pairs:
        raise InvalidInputError(f"user {user.id} has no preference pairs")
    inst = build_instances([user], [list(summaries)])
    n_pairs = len(user.pairs)
    offsets = None
    if ref_offsets is not None:
        offsets = np.tile(ref_offsets, len(summaries))
    deltas = instance_deltas(gen, gen_ref, inst.prefixes, inst.pairs, offsets)
    losses = pair_loss(deltas, cfg_obj).reshape(len(summaries), n_pairs)
    return -losses.mean(axis=1)


def rollout_group(inf: Policy, gen_ref: Policy, user: UserRecord, cfg_obj: ObjectiveConfig,
                  cfg: GrpoConfig, rng: np.random.Generator | int = 0, *,
                  ref_offsets: np.ndarray | None = None) -> GroupRollout:
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    ctx = tuple(user.signals)
    summaries = tuple(sample_batch(inf, [ctx] * cfg.group_size, rng))
    rewards = summary_rewards(gen_ref, gen_ref, user, summaries, cfg_obj, ref_offsets)
    return make_rollout(inf, user, ctx, summaries, rewards, cfg.normalize_advantages)


def make_rollout(inf: Policy, user, context: TokenSeq, summaries: Sequence[TokenSeq], rewards,
                 normalize: bool = True) -> GroupRollout:
    """Assemble a rollout from externally scored summaries."""
    rewards = np.asarray(rewards, dtype=np.float64)
    old = log_prob_batch(inf, [context] * len(summaries), list(summaries))
    return GroupRollout(user, tuple(context), tuple(summaries), rewards,
                        compute_advantages(rewards, normalize), old)


def surrogate_grad(inf: Policy, rollouts: Sequence[GroupRollout], clip_eps: float) -> np.ndarray:
    """Ascent direction of the mean clipped surrogate over all rollouts."""
    ctxs, seqs, weights = [], [], []
    for ro in rollouts:
        G = len(ro.summaries)
        ctx = [ro.context] * G
        ratio = np.exp(log_prob_batch(inf, ctx, list(ro.summaries)) - ro.old_log_probs)
        adv = ro.advantages
        active = np.where(adv >= 0, ratio <= 1 + clip_eps, ratio >= 1 - clip_eps)
        ctxs += ctx
        seqs += list(ro.summaries)
        weights.append(np.where(active, adv * ratio, 0.0) / (G * len(rollouts)))
    return grad_weighted(inf, ctxs, seqs, np.concatenate(weights))


@dataclass
class StepMetrics:
    grad_norm: float
    update_norm: float
    mean_reward: float
    mean_kl: float
    mean_summary_len: float


def grpo_step(inf: Policy, inf_ref: Policy, rollouts: Sequence[GroupRollout], cfg: GrpoConfig,
              lr: float | None = None, optimizer=None) -> tuple[Policy, StepMetrics]:
    """One clipped policy-gradient ascent step with the KL anchor."""
    if inf.frozen:
        raise FrozenPolicyError("inference policy is frozen")
    if not rollouts:
        raise InvalidInputError("no rollouts")
    kl_weight = cfg.kl_weight or 0.0
    ascent = surrogate_grad(inf, rollouts, cfg.clip_eps)
    contexts = [ro.context for ro in rollouts]
    kl, kl_grad, _ = kl_and_grad(inf, inf_ref, contexts, n_samples=cfg.kl_samples,
                                 rng=np.random.default_rng([cfg.seed, len(rollouts)]))
    if kl_weight:
        ascent = ascent - kl_weight * kl_grad
    optimizer = optimizer or make_optimizer(cfg.optimizer)
    step_lr = cfg.lr if lr is None else lr
    new_params = optimizer.step(inf.params, -ascent, step_lr)
    metrics = StepMetrics(
        grad_norm=float(np.linalg.norm(ascent)),
        update_norm=float(np.linalg.norm(new_params - inf.params)),
        mean_reward=float(np.mean([ro.rewards.mean() for ro in rollouts])),
        mean_kl=kl,
        mean_summary_len=float(np.mean([len(z) for ro in rollouts for z in ro.summaries])),
    )
    return inf.with_params(new_params), metrics


def train_stage1(inf: Policy, inf_ref: Policy, gen_ref: Policy, users: Sequence[UserRecord],
                 cfg_obj: ObjectiveConfig, cfg: GrpoConfig) -> tuple[Policy, list[dict]]:
    """Train the inference policy against the frozen reference generator."""
    if not gen_ref.frozen:
        raise InvalidInputError("stage 1 requires a frozen reference generator")
    if not users:
        raise InvalidInputError("empty user list")
    cfg = cfg.resolve(cfg_obj)
    history: list[dict] = []
    if cfg.steps == 0:
        return inf, history
    offsets = [reference_log_ratio_offsets(gen_ref, u.pairs) for u in users]
    optimizer = make_optimizer(cfg.optimizer)
    batch = min(cfg.batch_size, len(users))
    for step in range(cfg.steps):
        rng = np.random.default_rng([cfg.seed, step])
        idx = np.sort(rng.choice(len(users), size=batch, replace=False))
        rollouts = [
            rollout_group(inf, gen_ref, users[i], cfg_obj, cfg,
                          np.random.default_rng([cfg.seed, step, int(i)]), ref_offsets=offsets[i])
            for i in idx
        ]
        lr = lr_at(step, cfg.lr, cfg.steps, cfg.warmup_steps)
        inf, m = grpo_step(inf, inf_ref, rollouts, cfg, lr, optimizer)
        history.append({"step": step, "mean_reward": m.mean_reward, "mean_kl": m.mean_kl,
                        "mean_summary_len": m.mean_summary_len, "grad_norm": m.grad_norm,
                        "lr": lr})
    return inf, history


def population_reward(inf: Policy, gen_ref: Policy, users: Sequence[UserRecord],
                      cfg_obj: ObjectiveConfig, samples_per_user: int = 16, seed: int = 0,
                      gen: Policy | None = None) -> float:
    """Mean summary reward over every user, for before/after comparisons."""
    gen = gen if gen is not None else gen_ref
    total = 0.0
    for i, user in enumerate(users):
        zs = sample_batch(inf, [user.signals] * samples_per_user, np.random.default_rng([seed, i]))
        total += summary_rewards(gen, gen_ref, user, zs, cfg_obj).mean()
    return total / len(users)
