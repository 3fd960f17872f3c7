"""Stage 2: fine-tune the generator on the summary-augmented objective with the
inference policy frozen.  Summaries are redrawn every step.

The same trainer serves the aligned baselines by swapping what goes in front
of the prompt: ``"summary"`` (from ``inf_frozen``), ``"raw"`` (the user's raw
signals) or ``"none"``.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import FrozenPolicyError, InvalidInputError
from .objectives import ObjectiveConfig, batch_loss_and_grad, build_instances, draw_summaries
from .optim import lr_at, make_optimizer
from .policy import Policy
from .synthworld import UserRecord

CONTEXT_MODES = ("summary", "raw", "none")


def user_prefixes(inf: Policy | None, users: Sequence[UserRecord], mode: str,
                  samples_per_user: int, rng_seed) -> list[list[tuple]]:
    if mode == "summary":
        return draw_summaries(inf, users, samples_per_user, rng_seed)
    if mode == "raw":
        return [[tuple(u.signals)] for u in users]
    if mode == "none":
        return [[()] for _ in users]
    raise InvalidInputError(f"unknown context mode {mode!r}; expected one of {CONTEXT_MODES}")


def train_stage2(gen: Policy, gen_ref: Policy, inf_frozen: Policy | None,
                 users: Sequence[UserRecord], cfg_obj: ObjectiveConfig, steps: int, lr: float,
                 seed: int, *, batch_size: int = 8, warmup_steps: int = 150,
                 optimizer: str = "sgd", samples_per_user: int = 1,
                 context_mode: str = "summary") -> tuple[Policy, list[dict]]:
    if gen.frozen:
        raise FrozenPolicyError("generation policy is frozen")
    if not gen.same_shape(gen_ref):
        raise InvalidInputError("generator must be initialized from the reference generator")
    if context_mode == "summary" and (inf_frozen is None or not inf_frozen.frozen):
        raise InvalidInputError("stage 2 requires a frozen inference policy")
    if not users:
        raise InvalidInputError("empty user list")
    history: list[dict] = []
    opt = make_optimizer(optimizer)
    batch = min(batch_size, len(users))
    for step in range(steps):
        rng = np.random.default_rng([seed, step])
        idx = np.sort(rng.choice(len(users), size=batch, replace=False))
        chosen = [users[i] for i in idx]
        prefixes = user_prefixes(inf_frozen, chosen, context_mode, samples_per_user,
                                 [seed, step, 1])
        inst = build_instances(chosen, prefixes)
        loss, grad = batch_loss_and_grad(gen, gen_ref, inst, cfg_obj)
        step_lr = lr_at(step, lr, steps, warmup_steps)
        gen = gen.with_params(opt.step(gen.params, grad, step_lr))
        history.append({"step": step, "loss": loss, "mean_reward": -loss, "mean_kl": 0.0,
                        "mean_summary_len": float(np.mean([len(z) for z in inst.prefixes])),
                        "grad_norm": float(np.linalg.norm(grad)), "lr": step_lr})
    return gen, history
