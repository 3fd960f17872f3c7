"""Preference-alignment losses: dedicated DPO, summary-augmented DPO/IPO, and
the KL-regularized unified objective for the inference policy.

Conventions shared by every loss here:

* the generation policy sees ``prefix ⊕ SEP ⊕ prompt`` where the prefix is a
  summary (or, for baselines, raw signals, or nothing);
* the reference policy always sees ``SEP ⊕ prompt`` -- the log-ratio's
  denominator never conditions on the summary;
* ``delta`` is the difference of log-ratios between chosen and rejected.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import FrozenPolicyError, InvalidInputError, NumericError
from .policy import (
    ENUMERATION_CAP,
    Policy,
    TokenSeq,
    enumerate_distribution,
    grad_from_step_logits,
    grad_weighted,
    log_prob_batch,
    make_context,
    sample_batch,
    step_log_probs,
    support_size,
)
from .synthworld import PreferencePair, UserRecord

ALPHA_PER_BETA = 0.002


class Variant(str, enum.Enum):
    DPO = "dpo"
    IPO = "ipo"


@dataclass(frozen=True)
class ObjectiveConfig:
    beta: float = 0.1
    variant: Variant = Variant.DPO
    alpha: float | None = None

    def __post_init__(self):
        if not self.beta > 0:
            raise InvalidInputError(f"beta must be positive, got {self.beta}")
        object.__setattr__(self, "variant", Variant(self.variant))
        if self.alpha is None:
            coupled = self.beta if self.variant is Variant.DPO else 2.0 / self.beta
            object.__setattr__(self, "alpha", ALPHA_PER_BETA * coupled)
        if self.alpha < 0:
            raise InvalidInputError("alpha must be nonnegative")


def log_sigmoid(x):
    return -np.logaddexp(0.0, -np.asarray(x, dtype=np.float64))


def pair_loss(delta, cfg: ObjectiveConfig):
    """Per-pair loss as a function of the log-ratio difference."""
    delta = np.asarray(delta, dtype=np.float64)
    if cfg.variant is Variant.DPO:
        return -log_sigmoid(cfg.beta * delta)
    return (delta - 1.0 / (2.0 * cfg.beta)) ** 2


def pair_loss_slope(delta, cfg: ObjectiveConfig):
    """d pair_loss / d delta."""
    delta = np.asarray(delta, dtype=np.float64)
    if cfg.variant is Variant.DPO:
        return -cfg.beta * np.exp(log_sigmoid(-cfg.beta * delta))
    return 2.0 * (delta - 1.0 / (2.0 * cfg.beta))


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericError("non-finite log-probability")


# --- pairwise deltas ----------------------------------------------------------

@dataclass(frozen=True)
class Instances:
    """A flat, fixed-order list of (prefix, pair, weight) loss terms."""
    prefixes: tuple
    pairs: tuple
    weights: np.ndarray

    def __len__(self):
        return len(self.pairs)


def build_instances(users: Sequence[UserRecord], prefixes: Sequence[Sequence[TokenSeq]]) -> Instances:
    """Average over users, then over each user's (prefix draw, pair) grid."""
    if not users:
        raise InvalidInputError("empty user list")
    out_prefix, out_pair, out_w = [], [], []
    for user, draws in zip(users, prefixes):
        if not user.pairs:
            raise InvalidInputError(f"user {user.id} has no preference pairs")
        w = 1.0 / (len(users) * len(draws) * len(user.pairs))
        for z in draws:
            for pair in user.pairs:
                out_prefix.append(tuple(z))
                out_pair.append(pair)
                out_w.append(w)
    return Instances(tuple(out_prefix), tuple(out_pair), np.array(out_w))


def _gen_inputs(gen: Policy, prefixes, pairs):
    ctx = [make_context(z, p.prompt, gen.sep) for z, p in zip(prefixes, pairs)]
    return ctx + ctx, [p.chosen for p in pairs] + [p.rejected for p in pairs]


def reference_log_ratio_offsets(gen_ref: Policy, pairs: Sequence[PreferencePair]) -> np.ndarray:
    """log π_ref(y_c | x) - log π_ref(y_r | x) per pair."""
    ctx = [make_context((), p.prompt, gen_ref.sep) for p in pairs]
    lp = log_prob_batch(gen_ref, ctx + ctx, [p.chosen for p in pairs] + [p.rejected for p in pairs])
    _check_finite(lp)
    n = len(pairs)
    return lp[:n] - lp[n:]


def instance_deltas(gen: Policy, gen_ref: Policy, prefixes, pairs,
                    ref_offsets: np.ndarray | None = None) -> np.ndarray:
    if ref_offsets is None:
        ref_offsets = reference_log_ratio_offsets(gen_ref, pairs)
    if not pairs:
        return np.zeros(0)
    lp = log_prob_batch(gen, *_gen_inputs(gen, prefixes, pairs))
    _check_finite(lp)
    n = len(pairs)
    return (lp[:n] - lp[n:]) - ref_offsets


# --- losses -------------------------------------------------------------------

def dpo_dedicated_loss(policy: Policy, ref: Policy, pair: PreferencePair,
                       cfg: ObjectiveConfig) -> float:
    """Standard DPO on one pair with no summary anywhere."""
    if cfg.variant is not Variant.DPO:
        raise InvalidInputError("dedicated loss is defined for the DPO variant")
    return float(pair_loss(instance_deltas(policy, ref, [()], [pair])[0], cfg))


def sa_loss_pointwise(gen: Policy, gen_ref: Policy, pair: PreferencePair, summary: TokenSeq,
                      cfg: ObjectiveConfig) -> float:
    if len(summary) > gen.arch.context_window:
        raise InvalidInputError("summary longer than the generator's context window")
    return float(pair_loss(instance_deltas(gen, gen_ref, [tuple(summary)], [pair])[0], cfg))


def draw_summaries(inf: Policy, users: Sequence[UserRecord], samples_per_user: int,
                   rng_seed: int | Sequence[int]) -> list[list[TokenSeq]]:
    """``samples_per_user`` summaries per user; user i draws from stream (seed, i)."""
    if samples_per_user < 1:
        raise InvalidInputError("samples_per_user must be >= 1")
    base = list(rng_seed) if isinstance(rng_seed, (list, tuple)) else [rng_seed]
    out = []
    for i, user in enumerate(users):
        rng = np.random.default_rng([*base, i])
        out.append(sample_batch(inf, [user.signals] * samples_per_user, rng))
    return out


def batch_loss(gen: Policy, gen_ref: Policy, inst: Instances, cfg: ObjectiveConfig) -> float:
    deltas = instance_deltas(gen, gen_ref, inst.prefixes, inst.pairs)
    return float(np.dot(inst.weights, pair_loss(deltas, cfg)))


def batch_loss_and_grad(gen: Policy, gen_ref: Policy, inst: Instances, cfg: ObjectiveConfig,
                        ref_offsets: np.ndarray | None = None) -> tuple[float, np.ndarray]:
    if gen.frozen:
        raise FrozenPolicyError("generation policy is frozen")
    deltas = instance_deltas(gen, gen_ref, inst.prefixes, inst.pairs, ref_offsets)
    loss = float(np.dot(inst.weights, pair_loss(deltas, cfg)))
    slope = inst.weights * pair_loss_slope(deltas, cfg)
    ctx, seqs = _gen_inputs(gen, inst.prefixes, inst.pairs)
    grad = grad_weighted(gen, ctx, seqs, np.concatenate([slope, -slope]))
    return loss, grad


def sa_loss_batch(gen: Policy, gen_ref: Policy, inf: Policy, users: Sequence[UserRecord],
                  cfg: ObjectiveConfig, samples_per_user: int = 1, rng_seed: int = 0) -> float:
    """Monte-Carlo L_SA: mean over users of the mean over (summary draw, pair)."""
    if not users:
        raise InvalidInputError("empty user list")
    inst = build_instances(users, draw_summaries(inf, users, samples_per_user, rng_seed))
    return batch_loss(gen, gen_ref, inst, cfg)


def grad_unified_wrt_gen(gen: Policy, gen_ref: Policy, inf: Policy, users: Sequence[UserRecord],
                         cfg: ObjectiveConfig, samples_per_user: int = 1,
                         rng_seed: int = 0) -> np.ndarray:
    """Gradient of the unified loss in the generator's parameters.

    The KL term does not involve the generator, so this is the gradient of
    ``sa_loss_batch`` with the summaries held fixed by ``rng_seed``.
    """
    if gen.frozen:
        raise FrozenPolicyError("generation policy is frozen")
    inst = build_instances(users, draw_summaries(inf, users, samples_per_user, rng_seed))
    return batch_loss_and_grad(gen, gen_ref, inst, cfg)[1]


# --- KL between inference policies --------------------------------------------

def kl_exact(inf: Policy, inf_ref: Policy, context: Sequence[int]) -> float:
    p = enumerate_distribution(inf, context)
    q = enumerate_distribution(inf_ref, context, max_len=inf.max_len)
    return float(np.dot(p.probs, p.log_probs - q.log_probs))


def kl_sampled(inf: Policy, inf_ref: Policy, context: Sequence[int], n_samples: int,
               rng_seed: int) -> float:
    """Per-token analytic KL summed along trajectories drawn from ``inf``."""
    seqs = sample_batch(inf, [context] * n_samples, np.random.default_rng(rng_seed))
    ctxs = [context] * n_samples
    lp, mask = step_log_probs(inf, ctxs, seqs)
    lq, _ = step_log_probs(inf_ref, ctxs, seqs, max_len=inf.max_len)
    per_step = (np.exp(lp) * (lp - lq)).sum(axis=-1)
    return float((per_step * mask).sum(axis=1).mean())


def kl_divergence(inf: Policy, inf_ref: Policy, context: Sequence[int], *,
                  cap: int = ENUMERATION_CAP, n_samples: int = 256,
                  rng_seed: int = 0) -> tuple[float, str]:
    """KL(inf(.|context) || inf_ref(.|context)) and the estimator used."""
    if support_size(inf.vocab, inf.max_len) <= cap:
        return kl_exact(inf, inf_ref, context), "exact"
    return kl_sampled(inf, inf_ref, context, n_samples, rng_seed), "per-token-sampled"


def kl_and_grad(inf: Policy, inf_ref: Policy, contexts: Sequence[Sequence[int]], *,
                cap: int = ENUMERATION_CAP, n_samples: int = 64,
                rng: np.random.Generator | None = None) -> tuple[float, np.ndarray, str]:
    """Mean KL over contexts and its gradient w.r.t. ``inf``.

    Exact by enumeration when the summary space is under the cap.  Otherwise
    the per-token KL along sampled trajectories, differentiated with the
    trajectories held fixed.
    """
    if inf.frozen:
        raise FrozenPolicyError("inference policy is frozen")
    m = len(contexts)
    if support_size(inf.vocab, inf.max_len) <= cap:
        total, grad = 0.0, np.zeros_like(inf.params)
        for ctx in contexts:
            p = enumerate_distribution(inf, ctx, cap=cap)
            q = enumerate_distribution(inf_ref, ctx, max_len=inf.max_len, cap=cap)
            log_ratio = p.log_probs - q.log_probs
            total += float(np.dot(p.probs, log_ratio))
            grad += grad_weighted(inf, [ctx] * len(p.support), p.support, p.probs * log_ratio)
        return total / m, grad / m, "exact"
    rng = rng or np.random.default_rng(0)
    ctxs = [c for c in contexts for _ in range(n_samples)]
    seqs = sample_batch(inf, ctxs, rng)
    lq, _ = step_log_probs(inf_ref, ctxs, seqs, max_len=inf.max_len)
    holder = {}

    def dlogits(lp, mask):
        p = np.exp(lp)
        kl_t = (p * (lp - lq)).sum(axis=-1, keepdims=True)
        holder["kl"] = float((kl_t[..., 0] * mask).sum() / len(ctxs))
        return p * (lp - lq - kl_t) * mask[..., None] / len(ctxs)

    grad = grad_from_step_logits(inf, ctxs, seqs, dlogits)
    return holder["kl"], grad, "per-token-sampled"


@dataclass(frozen=True)
class UnifiedLoss:
    total: float
    l_sa: float
    kl: float
    kl_estimator: str

    def __float__(self):
        return self.total


def unified_loss(inf: Policy, inf_ref: Policy, gen_ref: Policy, users: Sequence[UserRecord],
                 cfg: ObjectiveConfig, samples_per_user: int = 1, rng_seed: int = 0, *,
                 gen: Policy | None = None, cap: int = ENUMERATION_CAP,
                 kl_samples: int = 256) -> UnifiedLoss:
    """L_SA + alpha * KL(inf || inf_ref), the KL averaged over users."""
    l_sa = sa_loss_batch(gen if gen is not None else gen_ref, gen_ref, inf, users, cfg,
                         samples_per_user, rng_seed)
    kls, methods = [], set()
    for i, user in enumerate(users):
        kl, method = kl_divergence(inf, inf_ref, user.signals, cap=cap,
                                   n_samples=kl_samples, rng_seed=rng_seed + i)
        kls.append(kl)
        methods.add(method)
    kl = float(np.mean(kls))
    return UnifiedLoss(l_sa + cfg.alpha * kl, l_sa, kl, "/".join(sorted(methods)))
