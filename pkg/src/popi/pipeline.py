"""Usage-time composition: infer a summary from signals, then generate with the
summary in front of the prompt.  Also builds the generators themselves: the
reference generator and a zoo of frozen off-the-shelf generators, all
pretrained on the same persona-free instruction process so that a summary
means roughly the same thing to each of them.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InvalidInputError, InvariantViolation
from .optim import Adam
from .policy import (
    Arch,
    Policy,
    Role,
    TokenSeq,
    grad_weighted,
    make_context,
    sample,
)
from .synthworld import Lexicon, UserRecord, instruction_example


def infer_summary(inf: Policy, signals: Sequence[int], seed: int) -> TokenSeq:
    return sample(inf, tuple(signals), seed)


def prompt_dependent_context(inf: Policy, signals: Sequence[int], prompt: Sequence[int]) -> TokenSeq:
    if not prompt:
        return tuple(signals)
    ctx = make_context(signals, prompt, inf.sep)
    if len(ctx) > inf.arch.context_window:
        raise InvalidInputError(
            f"signals + prompt ({len(ctx)} tokens) exceed window {inf.arch.context_window}")
    return ctx


def infer_summary_prompt_dependent(inf: Policy, signals: Sequence[int], prompt: Sequence[int],
                                   seed: int) -> TokenSeq:
    return sample(inf, prompt_dependent_context(inf, signals, prompt), seed)


def personalized_generate(gen: Policy, prompt: Sequence[int], summary: Sequence[int],
                          seed: int) -> TokenSeq:
    """Sample a response given ``summary ⊕ SEP ⊕ prompt``; never touches parameters."""
    return sample(gen, make_context(summary, prompt, gen.sep), seed)


class SummaryCache:
    """Prompt-independent summaries: one inference call per user per evaluation pass."""

    def __init__(self, inf: Policy, seed: int):
        self.inf = inf
        self.seed = seed
        self._cache: dict[int, TokenSeq] = {}
        self.calls: dict[int, int] = {}

    def get(self, index: int, user: UserRecord) -> TokenSeq:
        if index not in self._cache:
            self.calls[index] = self.calls.get(index, 0) + 1
            if self.calls[index] > 1:
                raise InvariantViolation(f"user {index} summarized twice in one pass")
            self._cache[index] = infer_summary(self.inf, user.signals, self.seed * 1_000_003 + index)
        return self._cache[index]


# --- generator pretraining and the zoo -----------------------------------------

@dataclass(frozen=True)
class GeneratorSpec:
    embed: int
    hidden: int
    seed: int


@dataclass(frozen=True)
class PretrainConfig:
    corpus_size: int = 4096
    steps: int = 600
    batch_size: int = 128
    lr: float = 0.02
    gain: float = 3.0
    seed: int = 1234


DEFAULT_ZOO = (GeneratorSpec(8, 12, 101), GeneratorSpec(12, 24, 202), GeneratorSpec(20, 16, 303))
DEFAULT_REFERENCE = GeneratorSpec(16, 32, 7)


@functools.lru_cache(maxsize=8)
def instruction_corpus(lex: Lexicon, size: int, gain: float, seed: int, prompt_len: int):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(size):
        prefix, prompt, response = instruction_example(lex, rng, prompt_len, gain)
        out.append((make_context(prefix, prompt, lex.sep), response))
    return tuple(out)


@functools.lru_cache(maxsize=16)
def pretrained_generator(lex: Lexicon, spec: GeneratorSpec, context_window: int,
                         prompt_len: int = 2, cfg: PretrainConfig = PretrainConfig(),
                         role: Role = Role.GENERATION_REF) -> Policy:
    """Seeded init, then maximum likelihood on the shared instruction corpus; returned frozen."""
    corpus = instruction_corpus(lex, cfg.corpus_size, cfg.gain, cfg.seed, prompt_len)
    pol = Policy.init(lex.vocab, lex.context_vocab, Arch(spec.embed, spec.hidden, context_window),
                      lex.response_max_len, spec.seed, role)
    opt = Adam()
    rng = np.random.default_rng([spec.seed, cfg.seed])
    for _ in range(cfg.steps):
        idx = rng.choice(len(corpus), size=cfg.batch_size, replace=False)
        ctxs = [corpus[i][0] for i in idx]
        seqs = [corpus[i][1] for i in idx]
        grad = grad_weighted(pol, ctxs, seqs, np.full(len(idx), 1.0 / len(idx)))
        pol = pol.with_params(opt.step(pol.params, -grad, cfg.lr))
    return pol.freeze()


def build_generator_zoo(lex: Lexicon, context_window: int, prompt_len: int = 2,
                        specs: Sequence[GeneratorSpec] = DEFAULT_ZOO,
                        cfg: PretrainConfig = PretrainConfig()) -> list[Policy]:
    return [pretrained_generator(lex, s, context_window, prompt_len, cfg, Role.OFF_THE_SHELF)
            for s in specs]
