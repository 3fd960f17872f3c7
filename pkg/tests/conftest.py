import time

import numpy as np
import pytest

from popi.experiment import ExperimentConfig, evaluate, generator_zoo, reference_generator
from popi.experiment import reference_inference, run_stage1, run_stage2
from popi.policy import Arch, Policy, Role, Vocab
from popi.synthworld import Lexicon, WorldConfig, generate_world

TINY_LEX = Lexicon(feature_dim=2, words_per_class=1, n_distractors=1, n_topics=2, response_max_len=2)


def tiny_world_config(**kw) -> WorldConfig:
    base = dict(num_users=4, feature_dim=2, words_per_class=1, n_distractors=1, n_topics=2,
                response_max_len=2, signal_verbosity=6, prompt_len=1, redundancy=1,
                pairs_per_user=2, heldout_per_user=2)
    base.update(kw)
    return WorldConfig(**base)


def tiny_policy(seed, max_len=2, lex=TINY_LEX, role=Role.GENERATION, frozen=False, scale=None,
                embed=4, hidden=5, window=16) -> Policy:
    pol = Policy.init(lex.vocab, lex.context_vocab, Arch(embed, hidden, window), max_len, seed,
                      role, frozen)
    if scale is not None:
        params = np.random.default_rng([seed, 99]).normal(0.0, scale, pol.params.size)
        pol = Policy(pol.vocab, pol.context_vocab, pol.arch, pol.max_len, params, role, frozen)
    return pol


@pytest.fixture
def tiny_lex():
    return TINY_LEX


@pytest.fixture
def tiny_users():
    return generate_world(tiny_world_config())


class RunCache:
    """Full default-world runs, computed once per seed and shared across test modules."""

    def __init__(self):
        self._runs = {}

    def get(self, seed: int) -> dict:
        if seed not in self._runs:
            start = time.perf_counter()
            cfg = ExperimentConfig().with_seed(seed)
            users = generate_world(cfg.world)
            gen_ref = reference_generator(cfg)
            inf, hist1 = run_stage1(cfg, users, gen_ref)
            gens, hist2 = run_stage2(cfg, users, inf, gen_ref)
            policies = {"gen_ref": gen_ref, "inf": inf, "inf_ref": reference_inference(cfg), **gens}
            rows = evaluate(cfg, users, policies, generator_zoo(cfg))
            self._runs[seed] = dict(cfg=cfg, users=users, policies=policies, rows=rows,
                                    history1=hist1, history2=hist2,
                                    seconds=time.perf_counter() - start)
        return self._runs[seed]


@pytest.fixture(scope="session")
def default_runs():
    return RunCache()
