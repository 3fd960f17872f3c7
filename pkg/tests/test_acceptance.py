"""The seven acceptance criteria, each at its stated tolerance.

Every test prints one ``CRITERION n: PASS|FAIL`` line (visible without ``-s``)
before asserting, so the run log carries a readable verdict per criterion.
"""
import dataclasses
import hashlib
import math
import time

import numpy as np
import pytest

from popi.cli import main
from popi.experiment import reference_generator, reference_inference, run_stage1
from popi.grpo import GrpoConfig, compute_advantages, grpo_step, make_rollout, train_stage1
from popi.infobound import (
    WorldSlice,
    bt_probability,
    calibrated_deltas,
    exact_info_report,
    info_report_from_tables,
)
from popi.objectives import ObjectiveConfig, grad_unified_wrt_gen, pair_loss, sa_loss_batch, sa_loss_pointwise
from popi.policy import Role, all_sequences, enumerate_distribution, grad_log_prob, log_prob, sample_batch
from popi.synthworld import PreferencePair, generate_world, poison_personas
from popi.stage2 import train_stage2
from conftest import TINY_LEX, tiny_policy, tiny_world_config
from test_policy import fd_grad

SEEDS = range(5)
BETAS = (0.1, 0.05, 0.01)
RESPONSES = all_sequences(TINY_LEX.vocab, 2)


@pytest.fixture
def verdict(capsys):
    def emit(n: int, ok: bool, detail: str):
        with capsys.disabled():
            print(f"\nCRITERION {n}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, detail
    return emit


def _rel_err(ana, num):
    return float(np.linalg.norm(ana - num) / max(np.linalg.norm(num), 1e-12))


def _random_seq(rng, high, max_len):
    return tuple(int(t) for t in rng.integers(1, high, size=rng.integers(0, max_len + 1)))


# --- 1 ---------------------------------------------------------------------------

def test_criterion_1_gradient_suite(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    users = generate_world(tiny_world_config(num_users=2))
    worst, count = 0.0, 0
    for k in range(60):
        pol = tiny_policy(100 + k, scale=float(rng.uniform(0.3, 1.5)),
                          embed=int(rng.integers(2, 5)), hidden=int(rng.integers(2, 6)))
        ctx = _random_seq(rng, TINY_LEX.context_vocab, 6)
        seq = _random_seq(rng, TINY_LEX.vocab.size, pol.max_len)
        num = fd_grad(lambda th: log_prob(pol.with_params(th), ctx, seq), np.array(pol.params))
        worst = max(worst, _rel_err(grad_log_prob(pol, ctx, seq), num))
        count += 1
    for k in range(50):
        gen = tiny_policy(200 + k, scale=float(rng.uniform(0.3, 1.2)), embed=3, hidden=4)
        ref = tiny_policy(300 + k, scale=0.8, frozen=True, embed=3, hidden=4)
        inf = tiny_policy(400 + k, scale=1.0, role=Role.INFERENCE, frozen=True, embed=3, hidden=4)
        cfg = ObjectiveConfig(beta=float(rng.choice([0.1, 0.5, 1.0])),
                              variant=str(rng.choice(["dpo", "ipo"])))
        ana = grad_unified_wrt_gen(gen, ref, inf, users, cfg, samples_per_user=2, rng_seed=k)
        num = fd_grad(lambda th: sa_loss_batch(gen.with_params(th), ref, inf, users, cfg, 2, k),
                      np.array(gen.params))
        worst = max(worst, _rel_err(ana, num))
        count += 1
    elapsed = time.perf_counter() - start
    verdict(1, count >= 100 and worst < 1e-4 and elapsed < 60,
            f"{count} instances, worst relative error {worst:.2e}, {elapsed:.1f}s")


# --- 2 ---------------------------------------------------------------------------

def test_criterion_2_objective_identities(verdict):
    rng = np.random.default_rng(7)
    worst = 0.0
    for beta in BETAS:
        cfg = ObjectiveConfig(beta=beta)
        for k in range(30):
            gen = tiny_policy(500 + k, scale=2.0)
            ref = tiny_policy(600 + k, scale=2.0, frozen=True)
            chosen, rejected = rng.choice(len(RESPONSES), size=2, replace=False)
            pair = PreferencePair(_random_seq(rng, TINY_LEX.context_vocab, 2),
                                  RESPONSES[chosen], RESPONSES[rejected])
            z = _random_seq(rng, 3, 2)
            diff = sa_loss_pointwise(gen, ref, pair, z, cfg) + math.log(
                bt_probability(gen, ref, pair, z, beta))
            worst = max(worst, abs(diff))
    ipo_ok = all(pair_loss(1 / (2 * b), ObjectiveConfig(beta=b, variant="ipo")) == 0.0 and
                 math.isclose(float(pair_loss(0.0, ObjectiveConfig(beta=b, variant="ipo"))),
                              1 / (4 * b * b), rel_tol=1e-14)
                 for b in BETAS)
    verdict(2, worst <= 1e-10 and ipo_ok,
            f"max |sa_loss + log bt| = {worst:.1e} over 90 instances; IPO identities {ipo_ok}")


# --- 3 ---------------------------------------------------------------------------

def test_criterion_3_information_bound(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(11)
    reports = []
    for _ in range(200):
        n_u, n_s, n_z = rng.integers(1, 7), rng.integers(1, 6), rng.integers(1, 9)
        beta = float(rng.choice(BETAS + (1.0,)))
        Q = rng.dirichlet(np.full(n_z, rng.uniform(0.2, 2.0)), size=n_u)
        P = rng.uniform(0.0, 1.0, size=(n_u, n_s))
        D = rng.normal(0.0, 3.0, size=(n_s, n_z)) / beta
        reports.append(info_report_from_tables(Q, P, D, beta))
    for _ in range(40):
        # calibrated margins put the gap at zero, exercising the tolerance at its edge
        n_u, n_s, n_z = rng.integers(1, 7), rng.integers(1, 6), rng.integers(1, 9)
        beta = float(rng.choice(BETAS))
        Q = rng.dirichlet(np.ones(n_z), size=n_u)
        P = rng.uniform(0.01, 0.99, size=(n_u, n_s))
        reports.append(info_report_from_tables(Q, P, calibrated_deltas(Q, P, beta), beta))
    users = generate_world(tiny_world_config(num_users=4))
    items = [p for u in users for p in u.pairs]
    for k in range(40):
        world = WorldSlice.from_users(users, items[k % 5: k % 5 + 3], 1.0, TINY_LEX)
        gen = tiny_policy(700 + k, scale=1.5)
        ref = tiny_policy(800 + k, scale=1.5, frozen=True)
        inf = tiny_policy(900 + k, scale=1.5, role=Role.INFERENCE, frozen=True)
        reports.append(exact_info_report(gen, ref, inf, world, BETAS[k % 3], check=False))
    elapsed = time.perf_counter() - start
    resid = max(abs(r.l_sa - (r.kl_term + r.entropy_H - r.mutual_info_I)) for r in reports)
    gap = min(r.bound_gap for r in reports)
    gap_kl = max(abs(r.bound_gap - r.kl_term) for r in reports)
    ok = len(reports) >= 200 and resid <= 1e-8 and gap >= -1e-8 and gap_kl <= 1e-8 and elapsed < 300
    verdict(3, ok, f"{len(reports)} instances, max residual {resid:.1e}, min gap {gap:.1e}, "
                   f"max |gap - KL| {gap_kl:.1e}, {elapsed:.1f}s")


# --- 4 ---------------------------------------------------------------------------

def test_criterion_4_grpo_mechanics(verdict):
    rng = np.random.default_rng(5)
    adv = max(abs(compute_advantages(rng.normal(0, 10 ** rng.uniform(-3, 3), rng.integers(2, 17))).sum())
              for _ in range(500))

    inf = tiny_policy(3, scale=1.0, role=Role.INFERENCE)
    ref = inf.as_role(Role.INFERENCE_REF, frozen=True)
    ro = make_rollout(inf, None, (1, 2), [(1,), (2, 2), ()], [0.4] * 3)
    _, m = grpo_step(inf, ref, [ro], GrpoConfig(kl_weight=0.0, lr=1.0))

    best = (2, 1)
    probs = []
    for seed in range(3):
        pol = tiny_policy(seed, role=Role.INFERENCE)
        ref0 = pol.as_role(Role.INFERENCE_REF, frozen=True)
        reward = {z: float(z == best) for z in all_sequences(pol.vocab, 2)}
        cfg = GrpoConfig(group_size=8, lr=0.5, kl_weight=0.0, warmup_steps=0)
        for step in range(300):
            zs = sample_batch(pol, [(1, 2)] * 8, np.random.default_rng([seed, step]))
            pol, _ = grpo_step(pol, ref0, [make_rollout(pol, None, (1, 2), zs,
                                                        [reward[z] for z in zs])], cfg)
        probs.append(enumerate_distribution(pol, (1, 2)).prob_of(best))
    ok = adv <= 1e-10 and m.update_norm < 1e-12 and min(probs) > 0.9
    verdict(4, ok, f"max |sum A| {adv:.1e}; no-op update norm {m.update_norm:.1e}; "
                   f"bandit P(best) {', '.join(f'{p:.3f}' for p in probs)}")


# --- 5 ---------------------------------------------------------------------------

def _row(rows, method, generator=None):
    return next(r for r in rows if r.method == method and (generator is None or r.generator == generator))


def test_criterion_5_end_to_end_ordering(verdict, default_runs):
    runs = [default_runs.get(s) for s in SEEDS]
    full = [_row(r["rows"], "POPI-Full").reward_accuracy for r in runs]
    base = [_row(r["rows"], "Base-Model").reward_accuracy for r in runs]
    pnp = [_row(r["rows"], "POPI-Plug-and-Play", "gen_ref").reward_accuracy for r in runs]
    infp = [_row(r["rows"], "Inference-Prompting", "gen_ref").reward_accuracy for r in runs]
    zoo = {g: [_row(r["rows"], "POPI-Plug-and-Play", g).reward_accuracy for r in runs]
           for g in ("zoo0", "zoo1", "zoo2")}
    seconds = sum(r["seconds"] for r in runs)
    checks = {
        "POPI-Full mean >= 0.65": np.mean(full) >= 0.65,
        "POPI-Full > Base": np.mean(full) > np.mean(base),
        "PnP >= 0.55 on every zoo generator and seed": min(min(v) for v in zoo.values()) >= 0.55,
        "Inference-Prompting < PnP (seed mean)": np.mean(infp) < np.mean(pnp),
        "runtime < 30 min": seconds < 1800,
    }
    detail = (f"POPI-Full {np.mean(full):.3f} per seed [{', '.join(f'{v:.3f}' for v in full)}]; "
              f"PnP {np.mean(pnp):.3f}; InfP {np.mean(infp):.3f}; zoo PnP min "
              + ", ".join(f"{g} {min(v):.3f}" for g, v in zoo.items())
              + f"; {seconds:.0f}s; failed: {[k for k, v in checks.items() if not v] or 'none'}")
    verdict(5, all(checks.values()), detail)


# --- 6 ---------------------------------------------------------------------------

def test_criterion_6_context_efficiency(verdict, default_runs):
    runs = [default_runs.get(s) for s in SEEDS]
    popi = [_row(r["rows"], "POPI-Full").avg_context_len for r in runs]
    raw = [_row(r["rows"], "Raw-Prompting").avg_context_len for r in runs]

    run = runs[0]
    cfg0 = dataclasses.replace(run["cfg"], grpo=dataclasses.replace(run["cfg"].grpo, kl_weight=0.0))
    _, hist0 = run_stage1(cfg0, run["users"], run["policies"]["gen_ref"])
    tail = lambda h: float(np.mean([r["mean_summary_len"] for r in h[-50:]]))
    with_kl, without_kl = tail(run["history1"]), tail(hist0)
    soft = "shorter" if with_kl < without_kl else "not shorter"
    verdict(6, all(p < r for p, r in zip(popi, raw)),
            f"avg_context_len POPI {np.mean(popi):.2f} vs Raw {np.mean(raw):.2f}; "
            f"summary length (last 50 steps) kl_weight={run['cfg'].grpo.kl_weight}: {with_kl:.2f}, "
            f"kl_weight=0: {without_kl:.2f} ({soft} with KL; soft check, recorded only)")


# --- 7 ---------------------------------------------------------------------------

SMALL_TOML = """
[world]
num_users = 6
pairs_per_user = 2
heldout_per_user = 2
signal_verbosity = 12
[policy]
context_window = 32
inf_embed = 6
inf_hidden = 8
gen_embed = 6
gen_hidden = 8
pretrain_steps = 20
pretrain_corpus = 256
pretrain_batch = 32
[grpo]
steps = 6
warmup_steps = 2
group_size = 4
batch_size = 2
[stage2]
steps = 4
warmup_steps = 1
batch_size = 2
"""


def _run_all_commands(cfg, out):
    codes = [main([cmd, "--config", str(cfg), "--out-dir", str(out)])
             for cmd in ("gen-world", "train", "eval", "verify-bound", "report")]
    return codes, {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(out.iterdir())}


def test_criterion_7_hygiene_and_determinism(verdict, tmp_path, default_runs):
    users = generate_world(tiny_world_config())
    poisoned = poison_personas(users)
    inf = tiny_policy(3, scale=1.0, role=Role.INFERENCE)
    inf_ref = inf.as_role(Role.INFERENCE_REF, frozen=True)
    gen_ref = tiny_policy(2, scale=1.0, frozen=True)
    obj, gcfg = ObjectiveConfig(beta=0.5), GrpoConfig(steps=10, lr=0.05, warmup_steps=0,
                                                      batch_size=2, group_size=4)
    a, _ = train_stage1(inf, inf_ref, gen_ref, users, obj, gcfg)
    b, _ = train_stage1(inf, inf_ref, gen_ref, poisoned, obj, gcfg)
    gen = gen_ref.as_role(Role.GENERATION, frozen=False)
    g1, _ = train_stage2(gen, gen_ref, a.freeze(), users, obj, 10, 0.01, 0, batch_size=2)
    g2, _ = train_stage2(gen, gen_ref, a.freeze(), poisoned, obj, 10, 0.01, 0, batch_size=2)
    poison_ok = np.array_equal(a.params, b.params) and np.array_equal(g1.params, g2.params)

    cfg = tmp_path / "small.toml"
    cfg.write_text(SMALL_TOML)
    codes_a, files_a = _run_all_commands(cfg, tmp_path / "a")
    codes_b, files_b = _run_all_commands(cfg, tmp_path / "b")
    artifacts_ok = codes_a == codes_b == [0] * 5 and files_a == files_b and len(files_a) >= 12

    run = default_runs.get(0)
    p, c = run["policies"], run["cfg"]
    frozen_ok = (np.array_equal(p["gen_ref"].params, reference_generator(c).params)
                 and np.array_equal(p["inf_ref"].params, reference_inference(c).params)
                 and all(p[k].frozen for k in p))
    verdict(7, poison_ok and artifacts_ok and frozen_ok,
            f"poisoned training identical {poison_ok}; {len(files_a)} artifacts bit-identical "
            f"{artifacts_ok}; frozen policies unchanged {frozen_ok}")
