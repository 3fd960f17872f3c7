"""Synthetic personalization benchmark.

Token layout (the *lexicon*), for K features:

    output words   0 = EOS, then K-1 content classes of ``words_per_class`` tokens,
                   then one neutral word
    persona cues   one "likes" and one "dislikes" token per feature (2K)
    distractors    filler tokens carrying no persona information
    topics         prompt tokens
    separator      last context id

Response features are the per-class token fractions plus a length feature
``len / response_max_len``.  A persona is a weight vector on a symmetric
integer grid (times ``weight_scale``); users come in antithetic pairs (w, -w)
so the population as a whole is indifferent between any two responses and
preferences cannot be read from the prompt alone.

Signals render each nonzero level ``q_k`` as ``|q_k|`` copies of the matching
cue, repeat the cue block ``redundancy`` times, corrupt each cue with
probability ``signal_noise``, and pad with distractors to ``signal_verbosity``.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit

from .errors import InvalidInputError, PersonaAccessError
from .policy import TokenSeq, Vocab

WORLD_FORMAT = "popi-world"
WORLD_VERSION = 1


@dataclass(frozen=True)
class Lexicon:
    feature_dim: int = 3
    words_per_class: int = 2
    n_distractors: int = 4
    n_topics: int = 4
    response_max_len: int = 4

    def __post_init__(self):
        if self.feature_dim < 2:
            raise InvalidInputError("feature_dim must be >= 2 (content classes + length)")
        if min(self.words_per_class, self.n_distractors, self.n_topics, self.response_max_len) < 1:
            raise InvalidInputError(f"lexicon sizes must be positive: {self}")

    @property
    def n_classes(self) -> int:
        return self.feature_dim - 1

    def class_tokens(self, k: int) -> tuple[int, ...]:
        start = 1 + k * self.words_per_class
        return tuple(range(start, start + self.words_per_class))

    @property
    def neutral(self) -> int:
        return 1 + self.n_classes * self.words_per_class

    @property
    def vocab(self) -> Vocab:
        return Vocab(self.neutral + 1)

    def cue(self, k: int, likes: bool) -> int:
        return self.vocab.size + 2 * k + (0 if likes else 1)

    @property
    def cue_tokens(self) -> tuple[int, ...]:
        start = self.vocab.size
        return tuple(range(start, start + 2 * self.feature_dim))

    @property
    def distractors(self) -> tuple[int, ...]:
        start = self.vocab.size + 2 * self.feature_dim
        return tuple(range(start, start + self.n_distractors))

    @property
    def topics(self) -> tuple[int, ...]:
        start = self.distractors[-1] + 1
        return tuple(range(start, start + self.n_topics))

    @property
    def sep(self) -> int:
        return self.topics[-1] + 1

    @property
    def context_vocab(self) -> int:
        return self.sep + 1

    def token_class(self) -> np.ndarray:
        """Class index per output word; -1 for EOS and the neutral word."""
        cls = -np.ones(self.vocab.size, dtype=np.int64)
        for k in range(self.n_classes):
            cls[list(self.class_tokens(k))] = k
        return cls


@dataclass(frozen=True)
class Persona:
    id: int
    weights: np.ndarray

    def __post_init__(self):
        if not np.all(np.isfinite(self.weights)):
            raise InvalidInputError("persona weights must be finite")


@dataclass(frozen=True)
class PreferencePair:
    prompt: TokenSeq
    chosen: TokenSeq
    rejected: TokenSeq

    def __post_init__(self):
        if tuple(self.chosen) == tuple(self.rejected):
            raise InvalidInputError("chosen and rejected responses must differ")

    def swapped(self) -> "PreferencePair":
        return PreferencePair(self.prompt, self.rejected, self.chosen)


@dataclass(frozen=True)
class UserRecord:
    id: int
    persona: Persona = field(repr=False, compare=False)
    signals: TokenSeq = ()
    pairs: tuple = ()
    heldout_pairs: tuple = ()


@dataclass(frozen=True)
class WorldConfig:
    num_users: int = 64
    feature_dim: int = 3
    signal_noise: float = 0.1
    signal_verbosity: int = 64
    label_temperature: float = 1.0
    seed: int = 0
    pairs_per_user: int = 4
    heldout_per_user: int = 8
    levels: int = 2
    weight_scale: float = 2.0
    redundancy: int = 3
    prompt_len: int = 2
    words_per_class: int = 2
    n_distractors: int = 4
    n_topics: int = 4
    response_max_len: int = 4

    def __post_init__(self):
        if self.num_users < 1 or self.pairs_per_user < 1 or self.heldout_per_user < 0:
            raise InvalidInputError("num_users and pairs_per_user must be positive")
        if not 0.0 <= self.signal_noise <= 1.0:
            raise InvalidInputError("signal_noise must lie in [0, 1]")
        if self.signal_verbosity < 0 or self.label_temperature <= 0:
            raise InvalidInputError("verbosity must be >= 0 and temperature > 0")
        if self.levels < 1 or self.weight_scale <= 0 or self.redundancy < 1:
            raise InvalidInputError("levels, weight_scale and redundancy must be positive")
        if self.prompt_len < 0:
            raise InvalidInputError("prompt_len must be >= 0")

    @property
    def lexicon(self) -> Lexicon:
        return Lexicon(self.feature_dim, self.words_per_class, self.n_distractors,
                       self.n_topics, self.response_max_len)

    @property
    def vocab(self) -> Vocab:
        return self.lexicon.vocab

    def max_signal_len(self) -> int:
        return max(self.signal_verbosity, self.feature_dim * self.levels * self.redundancy)


# --- features and utilities ---------------------------------------------------

def response_features(seq: Sequence[int], lex: Lexicon = Lexicon()) -> np.ndarray:
    """Class fractions (one per content class) followed by len / response_max_len."""
    feats = np.zeros(lex.feature_dim)
    n = len(seq)
    if n == 0:
        return feats
    cls = lex.token_class()[np.asarray(seq, dtype=np.int64)]
    feats[: lex.n_classes] = np.bincount(cls[cls >= 0], minlength=lex.n_classes) / n
    feats[-1] = n / lex.response_max_len
    return feats


def oracle_utility(persona: Persona, response: Sequence[int], lex: Lexicon = Lexicon()) -> float:
    return float(np.dot(persona.weights, response_features(response, lex)))


def preference_probability(persona: Persona, a: Sequence[int], b: Sequence[int],
                           temperature: float, lex: Lexicon = Lexicon()) -> float:
    """Bradley-Terry P(a preferred over b) = σ((u_a - u_b) / temperature)."""
    du = oracle_utility(persona, a, lex) - oracle_utility(persona, b, lex)
    return float(expit(du / temperature))


# --- signals ------------------------------------------------------------------

def persona_levels(persona: Persona, cfg: WorldConfig) -> np.ndarray:
    return np.rint(persona.weights / cfg.weight_scale).astype(np.int64)


def render_signals(persona: Persona, cfg: WorldConfig, rng: np.random.Generator) -> TokenSeq:
    lex = cfg.lexicon
    cues: list[int] = []
    for k, q in enumerate(persona_levels(persona, cfg)):
        cues.extend([lex.cue(k, q > 0)] * abs(int(q)))
    cues = cues * cfg.redundancy
    noisy = np.array(cues, dtype=np.int64)
    if len(noisy):
        flip = rng.random(len(noisy)) < cfg.signal_noise
        noisy[flip] = rng.choice(lex.cue_tokens, size=int(flip.sum()))
    n_pad = max(cfg.signal_verbosity - len(noisy), 0)
    if n_pad == 0:
        return tuple(int(t) for t in noisy)
    out = rng.choice(lex.distractors, size=len(noisy) + n_pad)
    slots = np.sort(rng.choice(len(out), size=len(noisy), replace=False))
    out[slots] = noisy
    return tuple(int(t) for t in out)


def decode_signals(signals: Sequence[int], cfg: WorldConfig) -> np.ndarray:
    """Inverse of the noiseless rendering: cue counts back to persona weights."""
    lex = cfg.lexicon
    counts = np.bincount(np.asarray(signals, dtype=np.int64), minlength=lex.context_vocab)
    levels = np.array([counts[lex.cue(k, True)] - counts[lex.cue(k, False)]
                       for k in range(lex.feature_dim)], dtype=np.float64)
    return levels / cfg.redundancy * cfg.weight_scale


# --- world generation ---------------------------------------------------------

def random_response(lex: Lexicon, rng: np.random.Generator) -> TokenSeq:
    n = int(rng.integers(1, lex.response_max_len + 1))
    return tuple(int(t) for t in rng.integers(1, lex.vocab.size, size=n))


def random_prompt(cfg: WorldConfig, rng: np.random.Generator) -> TokenSeq:
    return tuple(int(t) for t in rng.choice(cfg.lexicon.topics, size=cfg.prompt_len))


def draw_pair(persona: Persona, cfg: WorldConfig, rng: np.random.Generator) -> PreferencePair:
    lex = cfg.lexicon
    prompt = random_prompt(cfg, rng)
    a = random_response(lex, rng)
    b = random_response(lex, rng)
    while b == a:
        b = random_response(lex, rng)
    p = preference_probability(persona, a, b, cfg.label_temperature, lex)
    return PreferencePair(prompt, a, b) if rng.random() < p else PreferencePair(prompt, b, a)


def draw_personas(cfg: WorldConfig) -> list[Persona]:
    rng = np.random.default_rng([cfg.seed, 0])
    out = []
    for i in range(0, cfg.num_users, 2):
        q = rng.integers(-cfg.levels, cfg.levels + 1, size=cfg.feature_dim)
        while not q.any():
            q = rng.integers(-cfg.levels, cfg.levels + 1, size=cfg.feature_dim)
        out.append(Persona(i, q * cfg.weight_scale))
        if i + 1 < cfg.num_users:
            out.append(Persona(i + 1, -q * cfg.weight_scale))
    return out


def generate_world(cfg: WorldConfig) -> list[UserRecord]:
    users = []
    for persona in draw_personas(cfg):
        rng = np.random.default_rng([cfg.seed, 1, persona.id])
        signals = render_signals(persona, cfg, rng)
        pairs = tuple(draw_pair(persona, cfg, rng) for _ in range(cfg.pairs_per_user))
        heldout = tuple(draw_pair(persona, cfg, rng) for _ in range(cfg.heldout_per_user))
        users.append(UserRecord(persona.id, persona, signals, pairs, heldout))
    return users


# --- persona hygiene ----------------------------------------------------------

class _PoisonedPersona:
    def __getattr__(self, name):
        raise PersonaAccessError(f"hidden persona field {name!r} read during training")


def poison_personas(users: Sequence[UserRecord]) -> list[UserRecord]:
    """Copies of ``users`` whose personas raise on any attribute access."""
    return [dataclasses.replace(u, persona=_PoisonedPersona()) for u in users]


# --- serialization ------------------------------------------------------------

def config_hash(payload: dict) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def _pair_to_json(p: PreferencePair) -> list:
    return [list(p.prompt), list(p.chosen), list(p.rejected)]


def _pair_from_json(raw: list) -> PreferencePair:
    return PreferencePair(*(tuple(int(t) for t in part) for part in raw))


def save_world(path: str | Path, users: Sequence[UserRecord], cfg: WorldConfig,
               chash: str = "") -> None:
    lines = [json.dumps({"format": WORLD_FORMAT, "version": WORLD_VERSION,
                         "config": dataclasses.asdict(cfg), "config_hash": chash})]
    for u in users:
        lines.append(json.dumps({
            "id": u.id,
            "persona": [float(w) for w in u.persona.weights],
            "signals": list(u.signals),
            "pairs": [_pair_to_json(p) for p in u.pairs],
            "heldout": [_pair_to_json(p) for p in u.heldout_pairs],
        }))
    Path(path).write_text("\n".join(lines) + "\n")


def load_world(path: str | Path) -> tuple[dict, list[UserRecord]]:
    text = Path(path).read_text().splitlines()
    if not text:
        raise InvalidInputError(f"{path}: empty world file")
    header = json.loads(text[0])
    if header.get("format") != WORLD_FORMAT or header.get("version") != WORLD_VERSION:
        raise InvalidInputError(f"{path}: unsupported world header {header.get('format')!r} "
                                f"v{header.get('version')}")
    users = []
    for line in text[1:]:
        rec = json.loads(line)
        users.append(UserRecord(
            rec["id"],
            Persona(rec["id"], np.array(rec["persona"], dtype=np.float64)),
            tuple(rec["signals"]),
            tuple(_pair_from_json(p) for p in rec["pairs"]),
            tuple(_pair_from_json(p) for p in rec["heldout"]),
        ))
    return header, users


# --- generic instruction corpus for generator pretraining ---------------------

def instruction_example(lex: Lexicon, rng: np.random.Generator, prompt_len: int = 2,
                        gain: float = 3.0) -> tuple[TokenSeq, TokenSeq, TokenSeq]:
    """One (prefix, prompt, response) draw from a persona-free instruction-following process.

    The prefix is a short bag of output words.  The response favours the
    content classes named in the prefix, and neutral words in the prefix make
    the response longer.  Every generator is pretrained on this process, which
    gives summaries a shared meaning across generators.
    """
    n_prefix = int(rng.integers(0, lex.response_max_len))
    prefix = tuple(int(t) for t in rng.integers(1, lex.vocab.size, size=n_prefix))
    prompt = tuple(int(t) for t in rng.choice(lex.topics, size=prompt_len))
    cls = lex.token_class()
    weights = np.ones(lex.vocab.size)
    weights[0] = 0.0
    counts = np.bincount(np.asarray(prefix, dtype=np.int64), minlength=lex.vocab.size)
    for k in range(lex.n_classes):
        weights[cls == k] += gain * counts[cls == k].sum()
    weights /= weights.sum()
    p_stop = 0.35 / (1.0 + gain * counts[lex.neutral])
    response = []
    for _ in range(lex.response_max_len):
        if response and rng.random() < p_stop:
            break
        response.append(int(rng.choice(lex.vocab.size, p=weights)))
    return prefix, prompt, tuple(response)
