"""Command line: ``popi {gen-world,train,eval,verify-bound,report}``.

Exit codes: 0 success, 2 configuration or input error, 3 invariant violation.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path
from typing import Sequence

from .errors import ConfigError, InvalidInputError, InvariantViolation, PopiError
from .evaluation import format_table, metrics_records
from .experiment import (
    ExperimentConfig,
    evaluate,
    generator_zoo,
    load_config,
    reference_generator,
    reference_inference,
    run_stage1,
    run_stage2,
)
from .infobound import WorldSlice, exact_info_report
from .policy import Policy, load_checkpoint, save_checkpoint
from .synthworld import generate_world, load_world, save_world

EXIT_OK, EXIT_CONFIG, EXIT_INVARIANT = 0, 2, 3

WORLD_FILE = "world.jsonl"
STAGE1_FILES = ("inf", "inf_ref", "gen_ref")
STAGE2_FILES = ("gen_popi", "gen_raw", "gen_infa")
BOUND_ITEMS = 16


# --- artifact helpers -----------------------------------------------------------------

def _write_jsonl(path: Path, records) -> None:
    path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records))


def _read_jsonl(path: Path) -> list[dict]:
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def _save(out: Path, name: str, policy: Policy, chash: str) -> None:
    save_checkpoint(out / f"{name}.ckpt", policy, bytes.fromhex(chash))


def _load(out: Path, name: str, chash: str) -> Policy:
    path = out / f"{name}.ckpt"
    if not path.exists():
        raise ConfigError(f"missing checkpoint {path}; run the training stage that produces it")
    policy, stored = load_checkpoint(path)
    if stored != bytes.fromhex(chash):
        raise ConfigError(f"{path} was produced under a different configuration "
                          f"(hash {stored.hex()[:12]} != {chash[:12]})")
    return policy


def _world(out: Path, cfg: ExperimentConfig):
    path = out / WORLD_FILE
    if not path.exists():
        raise ConfigError(f"missing world file {path}; run gen-world first")
    header, users = load_world(path)
    if header.get("config_hash") != cfg.world_hash:
        raise ConfigError(f"{path} was generated under a different [world] configuration")
    return users


# --- commands -----------------------------------------------------------------------

def cmd_gen_world(cfg: ExperimentConfig, out: Path) -> Path:
    users = generate_world(cfg.world)
    path = out / WORLD_FILE
    save_world(path, users, cfg.world, cfg.world_hash)
    return path


def cmd_train(cfg: ExperimentConfig, out: Path, stage: str = "both") -> list[Path]:
    if stage not in ("1", "2", "both"):
        raise ConfigError(f"--stage must be 1, 2 or both, not {stage!r}")
    users = _world(out, cfg)
    gen_ref = reference_generator(cfg)
    written = []
    if stage in ("1", "both"):
        inf, history = run_stage1(cfg, users, gen_ref)
        _save(out, "inf", inf, cfg.stage1_hash)
        _save(out, "inf_ref", reference_inference(cfg), cfg.stage1_hash)
        _save(out, "gen_ref", gen_ref, cfg.stage1_hash)
        _write_jsonl(out / "history_stage1.jsonl", history)
        written += [out / f"{n}.ckpt" for n in STAGE1_FILES] + [out / "history_stage1.jsonl"]
    if stage in ("2", "both"):
        inf = _load(out, "inf", cfg.stage1_hash)
        gens, histories = run_stage2(cfg, users, inf, gen_ref)
        for name, gen in gens.items():
            _save(out, name, gen, cfg.stage2_hash)
            written.append(out / f"{name}.ckpt")
        _write_jsonl(out / "history_stage2.jsonl",
                     [{"run": name, **rec} for name, hist in histories.items() for rec in hist])
        written.append(out / "history_stage2.jsonl")
    return written


def load_policies(cfg: ExperimentConfig, out: Path) -> dict[str, Policy]:
    policies = {name: _load(out, name, cfg.stage1_hash) for name in STAGE1_FILES}
    for name in STAGE2_FILES:
        if name == "gen_popi" or cfg.stage2.baselines:
            policies[name] = _load(out, name, cfg.stage2_hash)
    return policies


def cmd_eval(cfg: ExperimentConfig, out: Path) -> str:
    users = _world(out, cfg)
    policies = load_policies(cfg, out)
    zoo = generator_zoo(cfg) if cfg.eval.zoo else None
    rows = evaluate(cfg, users, policies, zoo)
    _write_jsonl(out / "metrics.jsonl", metrics_records(rows))
    table = format_table(rows)
    (out / "metrics.txt").write_text(table)
    return table


def bound_slice(cfg: ExperimentConfig, users) -> WorldSlice:
    items = [u.heldout_pairs[0] if u.heldout_pairs else u.pairs[0] for u in users[:BOUND_ITEMS]]
    return WorldSlice.from_users(users, items, cfg.world.label_temperature, cfg.world.lexicon)


def cmd_verify_bound(cfg: ExperimentConfig, out: Path, probe: str | None = None):
    """Exact report for the trained policies if present, else for the references."""
    users = _world(out, cfg)
    if (out / "gen_popi.ckpt").exists():
        inf = _load(out, "inf", cfg.stage1_hash)
        gen = _load(out, "gen_popi", cfg.stage2_hash)
    else:
        inf, gen = reference_inference(cfg), None
    gen_ref = reference_generator(cfg)
    report = exact_info_report(gen or gen_ref, gen_ref, inf, bound_slice(cfg, users),
                               cfg.objective.beta, check=False)
    if probe == "corrupt-loss":
        # negative control: a loss that no longer matches its own decomposition
        report = dataclasses.replace(report, l_sa=report.l_sa + 1e-3)
    elif probe is not None:
        raise ConfigError(f"unknown probe {probe!r}")
    text = report.to_text()
    bad = report.violations()
    text += "status         " + ("ok" if not bad else "VIOLATED: " + "; ".join(bad)) + "\n"
    (out / "bound.txt").write_text(text)
    return report, bad, text


def summarize_history(records: Sequence[dict], window: int = 50) -> dict:
    head, tail = records[:window], records[-window:]
    mean = lambda rs, k: sum(r[k] for r in rs) / len(rs)
    return {k: (mean(head, k), mean(tail, k)) for k in ("mean_reward", "mean_summary_len", "mean_kl")}


def cmd_report(cfg: ExperimentConfig, out: Path) -> str:
    lines = []
    if (out / "metrics.txt").exists():
        lines += ["Evaluation", (out / "metrics.txt").read_text()]
    if (out / "history_stage1.jsonl").exists():
        s = summarize_history(_read_jsonl(out / "history_stage1.jsonl"))
        lines.append("Stage 1 (first 50 steps -> last 50 steps)")
        lines += [f"  {k:<17} {a:10.4f} -> {b:10.4f}" for k, (a, b) in s.items()]
        lines.append("")
    if (out / "history_stage2.jsonl").exists():
        recs = _read_jsonl(out / "history_stage2.jsonl")
        lines.append("Stage 2 loss (first step -> last step)")
        for run in dict.fromkeys(r["run"] for r in recs):
            rs = [r for r in recs if r["run"] == run]
            lines.append(f"  {run:<17} {rs[0]['loss']:10.4f} -> {rs[-1]['loss']:10.4f}")
        lines.append("")
    if (out / "bound.txt").exists():
        lines += ["Information bound", (out / "bound.txt").read_text()]
    if not lines:
        raise ConfigError(f"nothing to report in {out}")
    text = "\n".join(lines)
    (out / "report.txt").write_text(text)
    return text


# --- entry point ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML config file or preset name (e.g. beta-0.05)")
    common.add_argument("--seed", type=int, help="override every seed in the config")
    common.add_argument("--out-dir", default="popi-run", help="artifact directory")
    parser = argparse.ArgumentParser(prog="popi", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-world", parents=[common], help="generate and save the synthetic world")
    train = sub.add_parser("train", parents=[common], help="run stage 1, stage 2 or both")
    train.add_argument("--stage", default="both", choices=["1", "2", "both"])
    sub.add_parser("eval", parents=[common], help="evaluate every method and write metrics")
    vb = sub.add_parser("verify-bound", parents=[common], help="exact information bound check")
    vb.add_argument("--probe", choices=["corrupt-loss"], help="inject a fault (negative control)")
    sub.add_parser("report", parents=[common], help="summarize the artifacts in --out-dir")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "gen-world":
            print(cmd_gen_world(cfg, out))
        elif args.command == "train":
            for path in cmd_train(cfg, out, args.stage):
                print(path)
        elif args.command == "eval":
            print(cmd_eval(cfg, out), end="")
        elif args.command == "verify-bound":
            _, bad, text = cmd_verify_bound(cfg, out, args.probe)
            print(text, end="")
            if bad:
                return EXIT_INVARIANT
        elif args.command == "report":
            print(cmd_report(cfg, out), end="")
    except InvariantViolation as exc:
        print(f"popi: invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (ConfigError, InvalidInputError, PopiError) as exc:
        print(f"popi: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
