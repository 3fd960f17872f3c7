import hashlib
import json

import numpy as np
import pytest

from popi.cli import EXIT_CONFIG, EXIT_INVARIANT, EXIT_OK, main
from popi.errors import ConfigError
from popi.evaluation import metrics_records
from popi.experiment import (
    ExperimentConfig,
    config_from_mapping,
    evaluate,
    generator_zoo,
    load_config,
)
from popi.policy import load_checkpoint
from popi.synthworld import load_world

SMALL = """
[world]
num_users = 6
pairs_per_user = 2
heldout_per_user = 2
signal_verbosity = 12
seed = 5

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


@pytest.fixture
def small_cfg(tmp_path):
    path = tmp_path / "small.toml"
    path.write_text(SMALL)
    return path


def run(cfg, out, *args):
    return main([*args, "--config", str(cfg), "--out-dir", str(out)])


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_gen_world_is_repeatable_and_seed_sensitive(small_cfg, tmp_path):
    for name in ("a", "b"):
        assert run(small_cfg, tmp_path / name, "gen-world") == EXIT_OK
    assert digest(tmp_path / "a/world.jsonl") == digest(tmp_path / "b/world.jsonl")
    assert main(["gen-world", "--config", str(small_cfg), "--seed", "9",
                 "--out-dir", str(tmp_path / "c")]) == EXIT_OK
    assert digest(tmp_path / "a/world.jsonl") != digest(tmp_path / "c/world.jsonl")
    header, users = load_world(tmp_path / "a/world.jsonl")
    assert len(users) == 6 and header["config_hash"] == load_config(small_cfg).world_hash


def test_config_errors_exit_2(tmp_path, capsys):
    bad_key = tmp_path / "k.toml"
    bad_key.write_text("[world]\nnum_userz = 3\n")
    bad_section = tmp_path / "s.toml"
    bad_section.write_text("[wrold]\nnum_users = 3\n")
    broken = tmp_path / "b.toml"
    broken.write_text("[world\nnum_users = 3\n")
    for cfg in (bad_key, bad_section, broken, tmp_path / "absent.toml"):
        assert run(cfg, tmp_path / "o", "gen-world") == EXIT_CONFIG
    assert "popi:" in capsys.readouterr().err


def test_missing_inputs_exit_2(small_cfg, tmp_path):
    out = tmp_path / "o"
    assert run(small_cfg, out, "train") == EXIT_CONFIG           # no world yet
    assert run(small_cfg, out, "gen-world") == EXIT_OK
    assert run(small_cfg, out, "train", "--stage", "2") == EXIT_CONFIG   # no stage-1 output
    assert run(small_cfg, out, "eval") == EXIT_CONFIG
    assert run(small_cfg, tmp_path / "empty", "report") == EXIT_CONFIG


@pytest.fixture
def trained(small_cfg, tmp_path):
    out = tmp_path / "run"
    assert run(small_cfg, out, "gen-world") == EXIT_OK
    assert run(small_cfg, out, "train") == EXIT_OK
    return out


def test_training_is_bit_identical_and_staged(small_cfg, tmp_path, trained):
    staged = tmp_path / "staged"
    assert run(small_cfg, staged, "gen-world") == EXIT_OK
    assert run(small_cfg, staged, "train", "--stage", "1") == EXIT_OK
    assert run(small_cfg, staged, "train", "--stage", "2") == EXIT_OK
    names = sorted(p.name for p in trained.iterdir())
    assert names == sorted(p.name for p in staged.iterdir())
    assert {"inf.ckpt", "gen_popi.ckpt", "gen_raw.ckpt", "gen_infa.ckpt"} <= set(names)
    for name in names:
        assert digest(trained / name) == digest(staged / name), name


def test_eval_matches_library_and_rejects_foreign_checkpoints(small_cfg, tmp_path, trained):
    assert run(small_cfg, trained, "eval") == EXIT_OK
    rows = [json.loads(line) for line in (trained / "metrics.jsonl").read_text().splitlines()]
    assert len(rows) == 7 + 3 * 4
    assert rows[0]["method"] == "Base-Model" and rows[0]["reward_accuracy"] == 0.5

    cfg = load_config(small_cfg)
    _, users = load_world(trained / "world.jsonl")
    policies = {n: load_checkpoint(trained / f"{n}.ckpt")[0]
                for n in ("gen_ref", "inf", "inf_ref", "gen_popi", "gen_raw", "gen_infa")}
    assert metrics_records(evaluate(cfg, users, policies, generator_zoo(cfg))) == rows

    other = tmp_path / "other.toml"
    other.write_text(SMALL.replace("steps = 4", "steps = 5"))
    assert run(other, trained, "eval") == EXIT_CONFIG         # stage-2 hash differs


def test_verify_bound_and_negative_control(small_cfg, trained):
    assert run(small_cfg, trained, "verify-bound") == EXIT_OK
    text = (trained / "bound.txt").read_text()
    assert "status         ok" in text and "mutual_info_I" in text
    assert main(["verify-bound", "--config", str(small_cfg), "--out-dir", str(trained),
                 "--probe", "corrupt-loss"]) == EXIT_INVARIANT
    assert "VIOLATED" in (trained / "bound.txt").read_text()


def test_verify_bound_before_training_uses_references(small_cfg, tmp_path):
    out = tmp_path / "fresh"
    assert run(small_cfg, out, "gen-world") == EXIT_OK
    assert run(small_cfg, out, "verify-bound") == EXIT_OK


def test_report(small_cfg, trained):
    assert run(small_cfg, trained, "eval") == EXIT_OK
    assert run(small_cfg, trained, "report") == EXIT_OK
    text = (trained / "report.txt").read_text()
    assert "Evaluation" in text and "Stage 1" in text and "gen_popi" in text


def test_presets_load_and_couple_alpha():
    assert load_config(None) == ExperimentConfig()
    assert load_config("default") == ExperimentConfig()
    for beta in (0.1, 0.05, 0.01):
        cfg = load_config(f"beta-{beta}")
        assert cfg.objective.beta == beta
        assert cfg.objective.alpha == pytest.approx(0.002 * beta)
    ipo = load_config("ipo-beta-0.1")
    assert ipo.objective.variant.value == "ipo"
    assert ipo.objective.alpha == pytest.approx(0.002 * 2 / 0.1)


def test_config_mapping_rules():
    cfg = config_from_mapping({"objective": {"beta": 0.05}, "grpo": {"kl_weight": "alpha"}})
    assert cfg.objective.alpha == pytest.approx(1e-4) and cfg.grpo.kl_weight is None
    with pytest.raises(ConfigError):
        config_from_mapping({"grpo": {"bogus": 1}})
    a = ExperimentConfig()
    b = config_from_mapping({"stage2": {"steps": 7}})
    assert a.world_hash == b.world_hash and a.stage1_hash == b.stage1_hash
    assert a.stage2_hash != b.stage2_hash
    c = config_from_mapping({"grpo": {"steps": 7}})
    assert a.stage1_hash != c.stage1_hash and a.world_hash == c.world_hash


def test_frozen_checkpoints_round_trip(trained):
    for name in ("inf", "gen_ref", "gen_popi"):
        pol, chash = load_checkpoint(trained / f"{name}.ckpt")
        assert pol.frozen and len(chash) == 32
        assert np.isfinite(pol.params).all()
