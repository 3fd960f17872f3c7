"""Exact information accounting for the summary-augmented DPO loss.

Setting: a user ``i`` (weight ``w_i``) emits a summary ``z`` through the
inference channel ``Q[i, z] = π_φ(z | c_i)``; an item ``s = (x, y_a, y_b)``
(weight ``v_s``, shared by all users) receives the label "y_a preferred" with
probability ``p[i, s]`` from the user's Bradley-Terry process.  The generator
predicts that label with ``σ(β Δ[s, z])``.

With everything enumerable the expected loss splits exactly as

    l_sa = KL(P(label | s, z) || σ(β Δ)) + H(label | s) - I(label; z | s)

so ``l_sa >= H - I`` with a gap equal to the KL term.  Each of the four
quantities below is summed directly; the identity is checked, never used.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from scipy.special import logit, xlogy

from .errors import EnumerationTooLargeError, InvalidInputError, InvariantViolation
from .objectives import instance_deltas, log_sigmoid
from .policy import (
    ENUMERATION_CAP,
    Policy,
    TokenSeq,
    all_sequences,
    grad_weighted,
    log_prob_batch,
    make_context,
    support_size,
)
from .synthworld import Lexicon, Persona, PreferencePair, UserRecord, preference_probability

DECOMPOSITION_TOL = 1e-8
BOUND_TOL = 1e-8
NONNEG_TOL = 1e-10


# --- implicit reward ------------------------------------------------------------

def _response_space(gen: Policy, cap: int) -> list[TokenSeq]:
    n = support_size(gen.vocab, gen.max_len)
    if n > cap:
        raise EnumerationTooLargeError(f"response space of {n} sequences exceeds cap {cap}")
    return all_sequences(gen.vocab, gen.max_len)


def log_partition(gen: Policy, gen_ref: Policy, prompt: Sequence[int], summary: Sequence[int],
                  cap: int = ENUMERATION_CAP) -> float:
    """log Z(x, z) = log Σ_y π_ref(y|x) exp(log π_θ(y|x,z) - log π_ref(y|x)).

    The sum telescopes to Σ_y π_θ(y|x,z) = 1, so log Z is zero up to rounding;
    it is still computed by enumeration so that the identity can be checked.
    """
    ys = _response_space(gen, cap)
    n = len(ys)
    lp = log_prob_batch(gen, [make_context(summary, prompt, gen.sep)] * n, ys)
    lr = log_prob_batch(gen_ref, [make_context((), prompt, gen_ref.sep)] * n, ys)
    return float(np.logaddexp.reduce(lr + (lp - lr)))


def implicit_reward(gen: Policy, gen_ref: Policy, prompt: Sequence[int], response: Sequence[int],
                    summary: Sequence[int], beta: float, cap: int = ENUMERATION_CAP) -> float:
    """β log(π_θ(y|x,z) / π_ref(y|x)) + β log Z(x, z)."""
    lp = log_prob_batch(gen, [make_context(summary, prompt, gen.sep)], [tuple(response)])[0]
    lr = log_prob_batch(gen_ref, [make_context((), prompt, gen_ref.sep)], [tuple(response)])[0]
    return float(beta * (lp - lr) + beta * log_partition(gen, gen_ref, prompt, summary, cap))


def bt_probability(gen: Policy, gen_ref: Policy, pair: PreferencePair, summary: Sequence[int],
                   beta: float) -> float:
    """Model probability that ``pair.chosen`` beats ``pair.rejected``: σ(β Δ).

    The partition terms of the two implicit rewards cancel, so only Δ is needed.
    """
    delta = instance_deltas(gen, gen_ref, [tuple(summary)], [pair])[0]
    return float(np.exp(log_sigmoid(beta * delta)))


# --- the report -------------------------------------------------------------------

@dataclass(frozen=True)
class InfoReport:
    l_sa: float
    kl_term: float
    entropy_H: float
    mutual_info_I: float
    bound_gap: float
    constant_C: float

    def violations(self) -> list[str]:
        out = []
        if not all(np.isfinite(v) for v in asdict(self).values()):
            out.append("non-finite field")
        if self.kl_term < -NONNEG_TOL:
            out.append(f"kl_term {self.kl_term:.3e} < 0")
        if self.mutual_info_I < -NONNEG_TOL:
            out.append(f"mutual_info_I {self.mutual_info_I:.3e} < 0")
        if self.bound_gap < -BOUND_TOL:
            out.append(f"bound_gap {self.bound_gap:.3e} < 0")
        resid = self.l_sa - (self.kl_term + self.entropy_H - self.mutual_info_I)
        if not abs(resid) <= DECOMPOSITION_TOL:
            out.append(f"decomposition residual {resid:.3e}")
        return out

    def check(self) -> "InfoReport":
        bad = self.violations()
        if bad:
            raise InvariantViolation("; ".join(bad))
        return self

    def to_text(self) -> str:
        return "".join(f"{k:<14} {v:+.15e}\n" for k, v in asdict(self).items())


def _binary_entropy(p: np.ndarray) -> np.ndarray:
    return -(xlogy(p, p) + xlogy(1.0 - p, 1.0 - p))


def _weights(w, n: int, what: str) -> np.ndarray:
    w = np.full(n, 1.0 / n) if w is None else np.asarray(w, dtype=np.float64)
    if w.shape != (n,) or np.any(w < 0) or not np.isclose(w.sum(), 1.0, atol=1e-12):
        raise InvalidInputError(f"{what} weights must be a length-{n} probability vector")
    return w


def _posterior(channel: np.ndarray, label_p: np.ndarray, w: np.ndarray):
    """P(z) and P(label = 1 | s, z) (rows s, columns z); NaN where P(z) = 0."""
    joint = w[:, None] * channel                    # (users, z)
    pz = joint.sum(axis=0)
    num = label_p.T @ joint                         # (items, z)
    with np.errstate(invalid="ignore", divide="ignore"):
        post = num / pz[None, :]
    return pz, post


def info_report_from_tables(channel, label_p, delta, beta: float, user_weights=None,
                            item_weights=None) -> InfoReport:
    """Exact report from the channel ``Q[i, z]``, labels ``p[i, s]`` and margins ``Δ[s, z]``."""
    Q = np.asarray(channel, dtype=np.float64)
    P = np.asarray(label_p, dtype=np.float64)
    D = np.asarray(delta, dtype=np.float64)
    n_users, n_z = Q.shape
    if P.shape[0] != n_users or D.shape != (P.shape[1], n_z):
        raise InvalidInputError(f"table shapes disagree: Q{Q.shape} p{P.shape} Δ{D.shape}")
    if np.any(Q < 0) or not np.allclose(Q.sum(axis=1), 1.0, atol=1e-9):
        raise InvalidInputError("channel rows must be probability vectors")
    if np.any((P < 0) | (P > 1)) or not np.all(np.isfinite(D)):
        raise InvalidInputError("label probabilities must lie in [0, 1] and margins be finite")
    w = _weights(user_weights, n_users, "user")
    v = _weights(item_weights, P.shape[1], "item")

    pz, post = _posterior(Q, P, w)
    live = pz > 0
    post, pz_live, Dl = post[:, live], pz[live], D[:, live]
    weight = v[:, None] * pz_live[None, :]          # P(s, z)

    marginal = w @ P                                 # P(label = 1 | s)
    H = float(v @ _binary_entropy(marginal))
    H_cond = float(np.sum(weight * _binary_entropy(post)))
    log_q1 = log_sigmoid(beta * Dl)
    log_q0 = log_sigmoid(-beta * Dl)
    l_sa = float(-np.sum(weight * (post * log_q1 + (1.0 - post) * log_q0)))
    kl = float(np.sum(weight * (xlogy(post, post) - post * log_q1
                                + xlogy(1.0 - post, 1.0 - post) - (1.0 - post) * log_q0)))
    I = H - H_cond
    return InfoReport(l_sa=l_sa, kl_term=kl, entropy_H=H, mutual_info_I=I,
                      bound_gap=l_sa - (H - I), constant_C=H)


# --- building the tables from policies and a world ---------------------------------

@dataclass(frozen=True)
class WorldSlice:
    """Users' signals and hidden personas plus items shared by every user."""
    signals: tuple
    personas: np.ndarray          # (users, feature_dim)
    items: tuple                  # PreferencePair(prompt, y_a, y_b); label 1 means y_a wins
    label_temperature: float = 1.0
    lexicon: Lexicon = Lexicon()

    def __post_init__(self):
        if len(self.signals) != len(self.personas) or not self.items:
            raise InvalidInputError("a slice needs one signal sequence per persona and >= 1 item")

    @classmethod
    def from_users(cls, users: Sequence[UserRecord], items: Sequence[PreferencePair],
                   label_temperature: float = 1.0, lexicon: Lexicon = Lexicon()) -> "WorldSlice":
        """Reads hidden personas; for analysis only, never for training."""
        return cls(tuple(tuple(u.signals) for u in users),
                   np.array([u.persona.weights for u in users], dtype=np.float64),
                   tuple(items), label_temperature, lexicon)

    def label_table(self) -> np.ndarray:
        return np.array([[preference_probability(Persona(i, w), it.chosen, it.rejected,
                                                 self.label_temperature, self.lexicon)
                          for it in self.items] for i, w in enumerate(self.personas)])


def summary_space(inf: Policy, cap: int = ENUMERATION_CAP) -> list[TokenSeq]:
    n = support_size(inf.vocab, inf.max_len)
    if n > cap:
        raise EnumerationTooLargeError(f"summary space of {n} sequences exceeds cap {cap}")
    return all_sequences(inf.vocab, inf.max_len)


def channel_table(inf: Policy, signals: Sequence[Sequence[int]], zs: Sequence[TokenSeq]) -> np.ndarray:
    n = len(zs)
    return np.stack([np.exp(log_prob_batch(inf, [tuple(c)] * n, zs)) for c in signals])


def delta_table(gen: Policy, gen_ref: Policy, items: Sequence[PreferencePair],
                zs: Sequence[TokenSeq]) -> np.ndarray:
    out = np.empty((len(items), len(zs)))
    for j, z in enumerate(zs):
        out[:, j] = instance_deltas(gen, gen_ref, [z] * len(items), list(items))
    return out


def exact_info_report(gen: Policy, gen_ref: Policy, inf: Policy, world: WorldSlice, beta: float,
                      cap: int = ENUMERATION_CAP, check: bool = True) -> InfoReport:
    """Enumerate summaries and labels exactly and fill every report field."""
    _response_space(gen, cap)
    zs = summary_space(inf, cap)
    rep = info_report_from_tables(channel_table(inf, world.signals, zs), world.label_table(),
                                  delta_table(gen, gen_ref, world.items, zs), beta)
    return rep.check() if check else rep


# --- optimizing the channel -----------------------------------------------------------

def _l_sa_grad_wrt_inf(inf: Policy, world: WorldSlice, zs, Q, P, D, beta: float) -> np.ndarray:
    """Exact gradient of l_sa in the channel parameters at fixed margins.

    l_sa = Σ_i w_i Σ_z Q[i, z] L[i, z], with L the item-averaged cross-entropy
    of user i's labels against σ(β Δ[:, z]); hence ∇ = Σ w_i Q L ∇log Q.
    """
    n_users, n_z = Q.shape
    w = np.full(n_users, 1.0 / n_users)
    v = np.full(P.shape[1], 1.0 / P.shape[1])
    log_q1, log_q0 = log_sigmoid(beta * D), log_sigmoid(-beta * D)
    L = -(P * v[None, :]) @ log_q1 - ((1.0 - P) * v[None, :]) @ log_q0     # (users, z)
    weights = (w[:, None] * Q * L).ravel()
    contexts = [tuple(c) for c in world.signals for _ in range(n_z)]
    return grad_weighted(inf, contexts, list(zs) * n_users, weights)


def calibrated_deltas(Q: np.ndarray, P: np.ndarray, beta: float) -> np.ndarray:
    """Margins whose σ(βΔ) equals the true posterior, making the KL term zero."""
    pz, post = _posterior(Q, P, np.full(Q.shape[0], 1.0 / Q.shape[0]))
    if np.any(pz <= 0) or np.any((post <= 0) | (post >= 1)):
        raise InvalidInputError("calibrated margins need a full-support channel and soft labels")
    return logit(post) / beta


def optimize_inference_exact(inf: Policy, world: WorldSlice, beta: float, steps: int, lr: float,
                             gen: Policy | None = None, gen_ref: Policy | None = None,
                             cap: int = ENUMERATION_CAP) -> tuple[Policy, list[InfoReport]]:
    """Gradient descent on exact l_sa over the inference policy, logging a report per step.

    Without a generator the margins are recomputed each step from the true
    posterior, so the KL term stays at zero and l_sa = H - I; by the envelope
    argument the fixed-margin gradient is then the exact gradient of H - I.
    """
    if (gen is None) != (gen_ref is None):
        raise InvalidInputError("pass both gen and gen_ref, or neither")
    zs = summary_space(inf, cap)
    P = world.label_table()
    fixed = None if gen is None else delta_table(gen, gen_ref, world.items, zs)
    reports = []
    for step in range(steps + 1):
        Q = channel_table(inf, world.signals, zs)
        D = calibrated_deltas(Q, P, beta) if fixed is None else fixed
        reports.append(info_report_from_tables(Q, P, D, beta))
        if step == steps:
            break
        g = _l_sa_grad_wrt_inf(inf, world, zs, Q, P, D, beta)
        inf = inf.with_params(inf.params - lr * g)
    return inf, reports
