"""Small autoregressive categorical policies over token sequences.

A policy maps a context (a bag of token ids, mean-pooled through an embedding
table) to a distribution over output sequences.  Each step feeds

    context embedding + position embedding + previous-token embedding

through a two-layer tanh perceptron that emits logits over the output vocab.
Token 0 is end-of-sequence (EOS).  Sequences are stored *without* the
terminating EOS; its probability is always part of the sequence probability,
except at the length cap where EOS is forced.

The last id of the context vocabulary is reserved as the separator placed
between a conditioning prefix (summary or raw signals) and the prompt.

Everything is batched numpy with hand-written backprop; the parameter vector
is flat so trainers can treat it as a plain array.
"""
from __future__ import annotations

import enum
import itertools
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import log_softmax

from .errors import (
    EnumerationTooLargeError,
    FrozenPolicyError,
    InvalidInputError,
)

EOS = 0
ENUMERATION_CAP = 4096

TokenSeq = tuple  # tuple[int, ...]; EOS is implicit and never stored


@dataclass(frozen=True)
class Vocab:
    size: int

    def __post_init__(self):
        if self.size < 2:
            raise InvalidInputError(f"vocab size must be >= 2, got {self.size}")


@dataclass(frozen=True)
class Arch:
    embed: int
    hidden: int
    context_window: int

    def __post_init__(self):
        if min(self.embed, self.hidden, self.context_window) < 1:
            raise InvalidInputError(f"arch dims must be positive: {self}")


class Role(str, enum.Enum):
    INFERENCE = "inference"
    GENERATION = "generation"
    INFERENCE_REF = "inference_ref"
    GENERATION_REF = "generation_ref"
    OFF_THE_SHELF = "off_the_shelf"


_ROLE_CODES = {r: i for i, r in enumerate(Role)}


def _layout(vocab: int, context_vocab: int, arch: Arch, max_len: int):
    d, h = arch.embed, arch.hidden
    return (
        ("ctx", (context_vocab, d)),
        ("pos", (max_len, d)),
        ("prev", (vocab, d)),
        ("w1", (d, h)),
        ("b1", (h,)),
        ("w2", (h, vocab)),
        ("b2", (vocab,)),
    )


class Policy:
    """Immutable parameterized policy.  Updates produce a new object."""

    __slots__ = ("vocab", "context_vocab", "arch", "max_len", "params", "role", "frozen")

    def __init__(self, vocab: Vocab, context_vocab: int, arch: Arch, max_len: int,
                 params: np.ndarray, role: Role = Role.GENERATION, frozen: bool = False):
        if max_len < 1:
            raise InvalidInputError("max_len must be >= 1")
        if context_vocab < 2:
            raise InvalidInputError("context vocab must hold at least one token and the separator")
        params = np.array(params, dtype=np.float64)
        expected = self.num_params_for(vocab, context_vocab, arch, max_len)
        if params.shape != (expected,):
            raise InvalidInputError(f"expected {expected} parameters, got shape {params.shape}")
        if not np.all(np.isfinite(params)):
            raise InvalidInputError("policy parameters must be finite")
        params.flags.writeable = False
        self.vocab = vocab
        self.context_vocab = int(context_vocab)
        self.arch = arch
        self.max_len = int(max_len)
        self.params = params
        self.role = Role(role)
        self.frozen = bool(frozen)

    @staticmethod
    def num_params_for(vocab: Vocab, context_vocab: int, arch: Arch, max_len: int) -> int:
        return sum(int(np.prod(shape)) for _, shape in _layout(vocab.size, context_vocab, arch, max_len))

    @classmethod
    def init(cls, vocab: Vocab, context_vocab: int, arch: Arch, max_len: int, seed: int,
             role: Role = Role.GENERATION, frozen: bool = False) -> "Policy":
        n = cls.num_params_for(vocab, context_vocab, arch, max_len)
        params = np.random.default_rng(seed).uniform(-0.1, 0.1, size=n)
        return cls(vocab, context_vocab, arch, max_len, params, role, frozen)

    @classmethod
    def uniform(cls, vocab: Vocab, context_vocab: int, arch: Arch, max_len: int,
                role: Role = Role.GENERATION) -> "Policy":
        """All-zero parameters: every step is uniform over the output vocab."""
        n = cls.num_params_for(vocab, context_vocab, arch, max_len)
        return cls(vocab, context_vocab, arch, max_len, np.zeros(n), role)

    @property
    def sep(self) -> int:
        return self.context_vocab - 1

    def views(self, params: np.ndarray | None = None) -> dict[str, np.ndarray]:
        flat = self.params if params is None else params
        out, offset = {}, 0
        for name, shape in _layout(self.vocab.size, self.context_vocab, self.arch, self.max_len):
            n = int(np.prod(shape))
            out[name] = flat[offset:offset + n].reshape(shape)
            offset += n
        return out

    def with_params(self, params: np.ndarray) -> "Policy":
        if self.frozen:
            raise FrozenPolicyError(f"{self.role.value} policy is frozen")
        return Policy(self.vocab, self.context_vocab, self.arch, self.max_len, params,
                      self.role, self.frozen)

    def freeze(self) -> "Policy":
        return Policy(self.vocab, self.context_vocab, self.arch, self.max_len, self.params,
                      self.role, True)

    def as_role(self, role: Role, frozen: bool | None = None) -> "Policy":
        return Policy(self.vocab, self.context_vocab, self.arch, self.max_len, self.params,
                      role, self.frozen if frozen is None else frozen)

    def same_shape(self, other: "Policy") -> bool:
        return (self.vocab == other.vocab and self.context_vocab == other.context_vocab
                and self.arch == other.arch and self.max_len == other.max_len)

    def __repr__(self):
        return (f"Policy(role={self.role.value}, vocab={self.vocab.size}, "
                f"context_vocab={self.context_vocab}, arch={self.arch}, "
                f"max_len={self.max_len}, frozen={self.frozen})")


def make_context(prefix: Sequence[int], prompt: Sequence[int], sep: int) -> TokenSeq:
    """prefix ⊕ separator ⊕ prompt.  An empty prefix gives the base-model context."""
    return tuple(prefix) + (sep,) + tuple(prompt)


# --- batching ----------------------------------------------------------------

def _flatten(seqs: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    lens = np.fromiter((len(s) for s in seqs), dtype=np.int64, count=len(seqs))
    flat = np.fromiter(itertools.chain.from_iterable(seqs), dtype=np.int64, count=int(lens.sum()))
    return flat, lens


def _context_counts(policy: Policy, contexts: Sequence[Sequence[int]]) -> np.ndarray:
    B = len(contexts)
    flat, lens = _flatten(contexts)
    if B and lens.max() > policy.arch.context_window:
        raise InvalidInputError(
            f"context of length {lens.max()} exceeds window {policy.arch.context_window}")
    if flat.size and (flat.min() < 0 or flat.max() >= policy.context_vocab):
        raise InvalidInputError(f"context token out of range [0, {policy.context_vocab})")
    m = np.zeros((B, policy.context_vocab))
    np.add.at(m, (np.repeat(np.arange(B), lens), flat), 1.0)
    return m / np.maximum(lens, 1)[:, None]


def _encode_seqs(policy: Policy, seqs: Sequence[Sequence[int]], max_len: int):
    B, T = len(seqs), max_len
    flat, lens = _flatten(seqs)
    if B and lens.max() > T:
        raise InvalidInputError(f"sequence of length {lens.max()} exceeds max_len {T}")
    if flat.size and (flat.min() < 1 or flat.max() >= policy.vocab.size):
        raise InvalidInputError(
            f"sequence token out of range [1, {policy.vocab.size}) (EOS is implicit)")
    rows = np.repeat(np.arange(B), lens)
    cols = np.arange(flat.size) - np.repeat(np.cumsum(lens) - lens, lens)
    tgt = np.zeros((B, T), dtype=np.int64)
    prev = np.zeros((B, T), dtype=np.int64)
    tgt[rows, cols] = flat
    shifted = cols + 1 < T
    prev[rows[shifted], cols[shifted] + 1] = flat[shifted]
    mask = np.arange(T)[None, :] <= lens[:, None]
    return tgt, prev, mask, lens


def _resolve_len(policy: Policy, max_len: int | None) -> int:
    if max_len is None:
        return policy.max_len
    if not 1 <= max_len <= policy.max_len:
        raise InvalidInputError(f"max_len must lie in [1, {policy.max_len}], got {max_len}")
    return int(max_len)


class _Forward:
    __slots__ = ("counts", "prev", "u", "a", "logp", "tgt", "mask")


def _forward(policy: Policy, contexts, seqs, max_len: int | None = None) -> _Forward:
    T = _resolve_len(policy, max_len)
    p = policy.views()
    f = _Forward()
    f.counts = _context_counts(policy, contexts)
    f.tgt, f.prev, f.mask, _ = _encode_seqs(policy, seqs, T)
    ctx_mean = f.counts @ p["ctx"]
    f.u = ctx_mean[:, None, :] + p["pos"][None, :T, :] + p["prev"][f.prev]
    f.a = np.tanh(f.u @ p["w1"] + p["b1"])
    f.logp = log_softmax(f.a @ p["w2"] + p["b2"], axis=-1)
    return f


def _backward(policy: Policy, f: _Forward, dlogits: np.ndarray) -> np.ndarray:
    p = policy.views()
    grad = np.zeros_like(policy.params)
    g = policy.views(grad)
    T = dlogits.shape[1]
    d = policy.arch.embed
    g["b2"][:] = dlogits.sum(axis=(0, 1))
    g["w2"][:] = np.einsum("bth,btv->hv", f.a, dlogits)
    dz = (dlogits @ p["w2"].T) * (1.0 - f.a ** 2)
    g["b1"][:] = dz.sum(axis=(0, 1))
    g["w1"][:] = np.einsum("btd,bth->dh", f.u, dz)
    du = dz @ p["w1"].T
    g["pos"][:T] = du.sum(axis=0)
    np.add.at(g["prev"], f.prev.ravel(), du.reshape(-1, d))
    g["ctx"][:] = f.counts.T @ du.sum(axis=1)
    return grad


def _step_terms(f: _Forward) -> np.ndarray:
    picked = np.take_along_axis(f.logp, f.tgt[..., None], axis=-1)[..., 0]
    return np.where(f.mask, picked, 0.0)


# --- public operations -------------------------------------------------------

def log_prob_batch(policy: Policy, contexts: Sequence[Sequence[int]],
                   seqs: Sequence[Sequence[int]], max_len: int | None = None) -> np.ndarray:
    if len(contexts) != len(seqs):
        raise InvalidInputError("contexts and seqs must have equal length")
    if not seqs:
        return np.zeros(0)
    return _step_terms(_forward(policy, contexts, seqs, max_len)).sum(axis=1)


def log_prob(policy: Policy, context: Sequence[int], seq: Sequence[int],
             max_len: int | None = None) -> float:
    """log π(seq | context), including the EOS step unless seq hits the length cap."""
    return float(log_prob_batch(policy, [context], [seq], max_len)[0])


def grad_weighted(policy: Policy, contexts, seqs, weights, max_len: int | None = None,
                  *, allow_frozen: bool = False) -> np.ndarray:
    """Gradient of sum_b weights[b] * log π(seqs[b] | contexts[b])."""
    if policy.frozen and not allow_frozen:
        raise FrozenPolicyError(f"{policy.role.value} policy is frozen")
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (len(seqs),):
        raise InvalidInputError("one weight per sequence required")
    if not seqs:
        return np.zeros_like(policy.params)
    f = _forward(policy, contexts, seqs, max_len)
    onehot = np.zeros_like(f.logp)
    np.put_along_axis(onehot, f.tgt[..., None], 1.0, axis=-1)
    dlogits = (onehot - np.exp(f.logp)) * (f.mask[..., None] * weights[:, None, None])
    return _backward(policy, f, dlogits)


def grad_log_prob(policy: Policy, context: Sequence[int], seq: Sequence[int],
                  max_len: int | None = None) -> np.ndarray:
    return grad_weighted(policy, [context], [seq], [1.0], max_len)


def step_log_probs(policy: Policy, contexts, seqs, max_len: int | None = None):
    """Per-step log-distributions along given trajectories: (B, T, V) and (B, T) mask."""
    f = _forward(policy, contexts, seqs, max_len)
    return f.logp, f.mask


def grad_from_step_logits(policy: Policy, contexts, seqs, dlogits_fn,
                          max_len: int | None = None) -> np.ndarray:
    """Backprop an arbitrary per-step logit gradient.

    ``dlogits_fn(logp, mask)`` returns the gradient w.r.t. the (B, T, V) logits.
    """
    if policy.frozen:
        raise FrozenPolicyError(f"{policy.role.value} policy is frozen")
    f = _forward(policy, contexts, seqs, max_len)
    return _backward(policy, f, dlogits_fn(f.logp, f.mask))


def sample_batch(policy: Policy, contexts: Sequence[Sequence[int]], rng: np.random.Generator,
                 max_len: int | None = None) -> list[TokenSeq]:
    T = _resolve_len(policy, max_len)
    B = len(contexts)
    p = policy.views()
    ctx_mean = _context_counts(policy, contexts) @ p["ctx"]
    tokens = np.zeros((B, T), dtype=np.int64)
    lengths = np.zeros(B, dtype=np.int64)
    alive = np.ones(B, dtype=bool)
    prev = np.zeros(B, dtype=np.int64)
    for t in range(T):
        u = ctx_mean + p["pos"][t] + p["prev"][prev]
        logits = np.tanh(u @ p["w1"] + p["b1"]) @ p["w2"] + p["b2"]
        probs = np.exp(log_softmax(logits, axis=-1))
        draw = rng.random(B)
        idx = np.minimum((np.cumsum(probs, axis=1) < draw[:, None]).sum(axis=1),
                         policy.vocab.size - 1)
        alive &= idx != EOS
        tokens[alive, t] = idx[alive]
        lengths[alive] += 1
        prev = idx
        if not alive.any():
            break
    return [tuple(int(v) for v in tokens[b, : lengths[b]]) for b in range(B)]


def sample(policy: Policy, context: Sequence[int], rng_seed: int,
           max_len: int | None = None) -> TokenSeq:
    if max_len is not None and max_len < 1:
        raise InvalidInputError("max_len must be >= 1")
    return sample_batch(policy, [context], np.random.default_rng(rng_seed), max_len)[0]


def support_size(vocab: Vocab, max_len: int) -> int:
    k = vocab.size - 1
    return sum(k ** n for n in range(max_len + 1))


def all_sequences(vocab: Vocab, max_len: int) -> list[TokenSeq]:
    """Every EOS-free sequence of length <= max_len, shortest first."""
    words = range(1, vocab.size)
    return [seq for n in range(max_len + 1) for seq in itertools.product(words, repeat=n)]


@dataclass(frozen=True)
class ExactDistribution:
    support: list
    probs: np.ndarray
    log_probs: np.ndarray

    def prob_of(self, seq: Sequence[int]) -> float:
        return float(self.probs[self.support.index(tuple(seq))])


def enumerate_distribution(policy: Policy, context: Sequence[int], max_len: int | None = None,
                           cap: int = ENUMERATION_CAP) -> ExactDistribution:
    T = _resolve_len(policy, max_len)
    n = support_size(policy.vocab, T)
    if n > cap:
        raise EnumerationTooLargeError(f"support of {n} sequences exceeds cap {cap}")
    support = all_sequences(policy.vocab, T)
    lp = log_prob_batch(policy, [tuple(context)] * n, support, T)
    return ExactDistribution(support, np.exp(lp), lp)


def forced_policy(vocab: Vocab, context_vocab: int, seq: Sequence[int], max_len: int,
                  role: Role = Role.INFERENCE, strength: float = 2000.0) -> Policy:
    """A policy that emits ``seq`` with probability 1.0 (to float precision) for any context."""
    seq = tuple(seq)
    if len(seq) > max_len:
        raise InvalidInputError("forced sequence longer than max_len")
    arch = Arch(embed=max_len, hidden=max_len, context_window=4096)
    pol = Policy.uniform(vocab, context_vocab, arch, max_len, role)
    params = np.array(pol.params)
    v = pol.views(params)
    v["pos"][:] = 2.0 * np.eye(max_len)
    v["w1"][:] = np.eye(max_len)
    for t in range(max_len):
        target = seq[t] if t < len(seq) else EOS
        v["w2"][t, target] = strength
    return Policy(vocab, context_vocab, arch, max_len, params, role)


# --- checkpoints -------------------------------------------------------------

MAGIC = b"POPI1"
_HEADER = struct.Struct("<5sIIIIIIBB32sQ")


def save_checkpoint(path: str | Path, policy: Policy, config_hash: bytes = b"") -> None:
    if len(config_hash) > 32:
        raise InvalidInputError("config hash must fit in 32 bytes")
    header = _HEADER.pack(MAGIC, policy.vocab.size, policy.context_vocab, policy.arch.embed,
                          policy.arch.hidden, policy.arch.context_window, policy.max_len,
                          _ROLE_CODES[policy.role], int(policy.frozen),
                          config_hash.ljust(32, b"\0"), policy.params.size)
    Path(path).write_bytes(header + policy.params.astype("<f8").tobytes())


def load_checkpoint(path: str | Path, expect: Policy | None = None) -> tuple[Policy, bytes]:
    """Load a checkpoint and its zero-padded 32-byte hash field (``b""`` if none was stored).

    ``expect`` pins vocab and arch; mismatches are rejected.
    """
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise InvalidInputError(f"{path}: truncated checkpoint header")
    (magic, vsize, cvocab, embed, hidden, window, max_len, role, frozen, chash,
     n) = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise InvalidInputError(f"{path}: bad magic {magic!r}")
    body = raw[_HEADER.size:]
    if len(body) != 8 * n:
        raise InvalidInputError(f"{path}: expected {n} parameters, found {len(body) // 8}")
    pol = Policy(Vocab(vsize), cvocab, Arch(embed, hidden, window), max_len,
                 np.frombuffer(body, dtype="<f8").astype(np.float64),
                 list(Role)[role], bool(frozen))
    if expect is not None and not pol.same_shape(expect):
        raise InvalidInputError(f"{path}: header {pol!r} does not match expected {expect!r}")
    return pol, (b"" if chash == bytes(32) else chash)


def param_distance(a: Policy, b: Policy) -> float:
    return float(np.linalg.norm(a.params - b.params))
