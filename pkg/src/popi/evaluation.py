"""Reward accuracy, oracle win rate, context overhead, and the seven-row method matrix.

A *context source* says what goes in front of the prompt:

* ``None``   -- nothing (the base model);
* ``"raw"``  -- the user's raw signals;
* a Policy   -- a summary drawn once per user from that inference policy.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence, Union

import numpy as np

from .errors import ConfigError
from .pipeline import SummaryCache
from .policy import Policy, log_prob_batch, make_context, sample_batch
from .synthworld import Lexicon, UserRecord, oracle_utility

Source = Union[None, str, Policy]
TIE_TOL = 1e-12


class _Prefixes:
    def __init__(self, source: Source, seed: int):
        if isinstance(source, str) and source != "raw":
            raise ConfigError(f"unknown context source {source!r}")
        self.source = source
        self.cache = SummaryCache(source, seed) if isinstance(source, Policy) else None

    def __call__(self, index: int, user: UserRecord) -> tuple:
        if self.source is None:
            return ()
        if self.cache is None:
            return tuple(user.signals)
        return self.cache.get(index, user)


def _margins(gen: Policy, prefix: tuple, pairs) -> np.ndarray:
    ctx = [make_context(prefix, p.prompt, gen.sep) for p in pairs]
    lp = log_prob_batch(gen, ctx + ctx, [p.chosen for p in pairs] + [p.rejected for p in pairs])
    return lp[: len(pairs)] - lp[len(pairs):]


def score_margins(method: np.ndarray, base: np.ndarray) -> np.ndarray:
    """1 where the method's margin beats the base's, 0.5 on ties, else 0."""
    diff = np.asarray(method) - np.asarray(base)
    return np.where(np.abs(diff) <= TIE_TOL, 0.5, (diff > 0).astype(np.float64))


def reward_accuracy_detail(method_gen: Policy, base: Policy, inf: Source,
                           users: Sequence[UserRecord], seed: int = 0) -> tuple[float, list[float]]:
    prefixes = _Prefixes(inf, seed)
    per_user, scores = [], []
    for i, user in enumerate(users):
        if not user.heldout_pairs:
            raise ConfigError(f"user {user.id} has no held-out pairs")
        s = score_margins(_margins(method_gen, prefixes(i, user), user.heldout_pairs),
                          _margins(base, (), user.heldout_pairs))
        per_user.append(float(s.mean()))
        scores.append(s)
    return float(np.concatenate(scores).mean()), per_user


def reward_accuracy(method_gen: Policy, base: Policy, inf: Source, users: Sequence[UserRecord],
                    seed: int = 0) -> float:
    return reward_accuracy_detail(method_gen, base, inf, users, seed)[0]


@dataclass
class Generation:
    user: int
    prompt: tuple
    method: tuple
    base: tuple
    method_utility: float
    base_utility: float


def generate_head_to_head(method_gen: Policy, base: Policy, inf: Source,
                          users: Sequence[UserRecord], samples_per_prompt: int, seed: int,
                          lex: Lexicon = Lexicon()) -> list[Generation]:
    """One method and one base response per held-out prompt and sample, scored by the oracle.

    Both sides draw from the same random stream, so identical models with
    identical contexts produce identical responses.
    """
    prefixes = _Prefixes(inf, seed)
    out = []
    for i, user in enumerate(users):
        prompts = [p.prompt for p in user.heldout_pairs for _ in range(samples_per_prompt)]
        prefix = prefixes(i, user)
        ys_m = sample_batch(method_gen, [make_context(prefix, x, method_gen.sep) for x in prompts],
                            np.random.default_rng([seed, 7, i]))
        ys_b = sample_batch(base, [make_context((), x, base.sep) for x in prompts],
                            np.random.default_rng([seed, 7, i]))
        for x, ym, yb in zip(prompts, ys_m, ys_b):
            out.append(Generation(i, x, ym, yb, oracle_utility(user.persona, ym, lex),
                                  oracle_utility(user.persona, yb, lex)))
    return out


def judge(gens: Sequence[Generation]) -> float:
    wins = [1.0 if g.method_utility > g.base_utility else
            0.5 if g.method_utility == g.base_utility else 0.0 for g in gens]
    return float(np.mean(wins))


def win_rate_oracle(method_gen: Policy, base: Policy, inf: Source, users: Sequence[UserRecord],
                    samples_per_prompt: int = 1, seed: int = 0, lex: Lexicon = Lexicon()) -> float:
    """Head-to-head win rate judged by ground-truth persona utility (ties 0.5).

    Reads personas, so it must only run at evaluation time.
    """
    return judge(generate_head_to_head(method_gen, base, inf, users, samples_per_prompt, seed, lex))


def avg_context_len(inf: Source, users: Sequence[UserRecord], seed: int = 0) -> float:
    prefixes = _Prefixes(inf, seed)
    return float(np.mean([len(prefixes(i, u)) for i, u in enumerate(users)]))


# --- the method matrix ----------------------------------------------------------

# mode -> (generator key, context-source key); None source = no context
MODES: dict[str, tuple[str, str | None]] = {
    "Base-Model": ("gen_ref", None),
    "Raw-Prompting": ("gen_ref", "raw"),
    "Inference-Prompting": ("gen_ref", "inf_ref"),
    "POPI-Plug-and-Play": ("gen_ref", "inf"),
    "Raw-Aligned": ("gen_raw", "raw"),
    "Inference-Aligned": ("gen_infa", "inf_ref"),
    "POPI-Full": ("gen_popi", "inf"),
}


@dataclass
class Metrics:
    method: str
    reward_accuracy: float
    win_rate: float
    avg_context_len: float
    generator: str = "gen_ref"
    per_user: list = field(default_factory=list)

    def __post_init__(self):
        if not (0.0 <= self.reward_accuracy <= 1.0 and 0.0 <= self.win_rate <= 1.0):
            raise ValueError("rates must lie in [0, 1]")
        if self.avg_context_len < 0:
            raise ValueError("avg_context_len must be nonnegative")


@dataclass(frozen=True)
class EvalConfig:
    seed: int = 0
    samples_per_prompt: int = 1


def _source(policies: Mapping[str, Policy], key: str | None) -> Source:
    if key is None or key == "raw":
        return key
    if key not in policies:
        raise ConfigError(f"missing policy {key!r}")
    return policies[key]


def evaluate_mode(name: str, gen: Policy, base: Policy, source: Source,
                  users: Sequence[UserRecord], cfg: EvalConfig, lex: Lexicon,
                  generator: str = "gen_ref") -> Metrics:
    acc, per_user = reward_accuracy_detail(gen, base, source, users, cfg.seed)
    win = win_rate_oracle(gen, base, source, users, cfg.samples_per_prompt, cfg.seed, lex)
    return Metrics(name, acc, win, avg_context_len(source, users, cfg.seed), generator, per_user)


def run_matrix(users: Sequence[UserRecord], policies: Mapping[str, Policy],
               modes: Sequence[str] = tuple(MODES), cfg: EvalConfig = EvalConfig(),
               lex: Lexicon = Lexicon()) -> list[Metrics]:
    rows = []
    for name in modes:
        if name not in MODES:
            raise ConfigError(f"unknown mode {name!r}")
        gen_key, src_key = MODES[name]
        if gen_key not in policies:
            raise ConfigError(f"mode {name!r} needs policy {gen_key!r}")
        rows.append(evaluate_mode(name, policies[gen_key], policies["gen_ref"],
                                  _source(policies, src_key), users, cfg, lex, gen_key))
    return rows


TRANSFER_MODES = ("Base-Model", "Raw-Prompting", "Inference-Prompting", "POPI-Plug-and-Play")


def transfer_matrix(users: Sequence[UserRecord], policies: Mapping[str, Policy],
                    zoo: Sequence[Policy], cfg: EvalConfig = EvalConfig(),
                    lex: Lexicon = Lexicon()) -> list[Metrics]:
    """Prompting-only modes on each frozen zoo generator, each against itself as base."""
    rows = []
    for j, gen in enumerate(zoo):
        if not gen.frozen:
            raise ConfigError("zoo generators must be frozen")
        for name in TRANSFER_MODES:
            src = _source(policies, MODES[name][1])
            rows.append(evaluate_mode(name, gen, gen, src, users, cfg, lex, f"zoo{j}"))
    return rows


# --- output ---------------------------------------------------------------------

def metrics_records(rows: Sequence[Metrics]) -> list[dict]:
    return [{k: v for k, v in asdict(r).items() if k != "per_user"} for r in rows]


def write_metrics(rows: Sequence[Metrics], jsonl_path: str | Path, table_path: str | Path) -> None:
    Path(jsonl_path).write_text("".join(json.dumps(r) + "\n" for r in metrics_records(rows)))
    Path(table_path).write_text(format_table(rows))


def format_table(rows: Sequence[Metrics]) -> str:
    header = f"{'Method':<22} {'Generator':<9} {'Avg. Len.':>9} {'Acc. (%)':>9} {'Win Rate (%)':>12}"
    lines = [header, "-" * len(header)]
    for r in rows:
        length = "--" if r.avg_context_len == 0 else f"{r.avg_context_len:.2f}"
        lines.append(f"{r.method:<22} {r.generator:<9} {length:>9} "
                     f"{100 * r.reward_accuracy:>9.2f} {100 * r.win_rate:>12.2f}")
    return "\n".join(lines) + "\n"
