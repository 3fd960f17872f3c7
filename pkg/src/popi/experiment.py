"""Experiment configuration and the end-to-end flow behind the command line.

A configuration has one section per stage (world, policy, objective, grpo,
stage2, eval).  Each trained artifact carries a hash of the sections it
depends on, so stale checkpoints are detected instead of silently reused.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from .errors import ConfigError
from .evaluation import MODES, EvalConfig, Metrics, run_matrix, transfer_matrix
from .grpo import GrpoConfig, train_stage1
from .objectives import ObjectiveConfig, Variant
from .pipeline import (
    DEFAULT_ZOO,
    GeneratorSpec,
    PretrainConfig,
    build_generator_zoo,
    pretrained_generator,
)
from .policy import Arch, Policy, Role
from .stage2 import train_stage2
from .synthworld import UserRecord, WorldConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


@dataclass(frozen=True)
class PolicyConfig:
    context_window: int = 96
    summary_max_len: int = 3
    inf_embed: int = 16
    inf_hidden: int = 32
    inf_seed: int = 11
    gen_embed: int = 16
    gen_hidden: int = 32
    gen_seed: int = 7
    pretrain_steps: int = 600
    pretrain_lr: float = 0.02
    pretrain_batch: int = 128
    pretrain_corpus: int = 4096
    pretrain_gain: float = 3.0
    pretrain_seed: int = 1234

    @property
    def pretrain(self) -> PretrainConfig:
        return PretrainConfig(self.pretrain_corpus, self.pretrain_steps, self.pretrain_batch,
                              self.pretrain_lr, self.pretrain_gain, self.pretrain_seed)


@dataclass(frozen=True)
class Stage2Config:
    steps: int = 100
    lr: float = 0.001
    optimizer: str = "adam"
    warmup_steps: int = 25
    batch_size: int = 8
    samples_per_user: int = 1
    seed: int = 0
    baselines: bool = True


@dataclass(frozen=True)
class EvalSection:
    seed: int = 0
    samples_per_prompt: int = 1
    zoo: bool = True


def _desk_grpo() -> GrpoConfig:
    return GrpoConfig(steps=800, lr=0.01, kl_weight=0.2, optimizer="adam", warmup_steps=150)


@dataclass(frozen=True)
class ExperimentConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    grpo: GrpoConfig = field(default_factory=_desk_grpo)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    eval: EvalSection = field(default_factory=EvalSection)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """One seed for every stochastic stage."""
        return dataclasses.replace(
            self,
            world=dataclasses.replace(self.world, seed=seed),
            grpo=dataclasses.replace(self.grpo, seed=seed),
            stage2=dataclasses.replace(self.stage2, seed=seed),
            eval=dataclasses.replace(self.eval, seed=seed),
        )

    def as_dict(self) -> dict:
        out = {}
        for name in SECTIONS:
            d = dataclasses.asdict(getattr(self, name))
            out[name] = {k: (v.value if isinstance(v, Variant) else v) for k, v in d.items()}
        return out

    def section_hash(self, *names: str) -> str:
        d = self.as_dict()
        payload = json.dumps({n: d[n] for n in names}, sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()

    # hashes of what each artifact depends on
    @property
    def world_hash(self) -> str:
        return self.section_hash("world")

    @property
    def stage1_hash(self) -> str:
        return self.section_hash("world", "policy", "objective", "grpo")

    @property
    def stage2_hash(self) -> str:
        return self.section_hash("world", "policy", "objective", "grpo", "stage2")


SECTIONS: dict[str, type] = {
    "world": WorldConfig,
    "policy": PolicyConfig,
    "objective": ObjectiveConfig,
    "grpo": GrpoConfig,
    "stage2": Stage2Config,
    "eval": EvalSection,
}


def config_from_mapping(raw: Mapping[str, Any], base: ExperimentConfig | None = None) -> ExperimentConfig:
    base = base or ExperimentConfig()
    unknown = set(raw) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(sorted(unknown))}")
    parts = {}
    for name, cls in SECTIONS.items():
        current = getattr(base, name)
        values = raw.get(name, {})
        if not isinstance(values, Mapping):
            raise ConfigError(f"[{name}] must be a table")
        allowed = {f.name for f in dataclasses.fields(cls)}
        bad = set(values) - allowed
        if bad:
            raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(sorted(bad))}")
        if name == "grpo" and values.get("kl_weight") == "alpha":
            values = {**values, "kl_weight": None}      # use the objective's coupled alpha
        if name == "objective" and ({"beta", "variant"} & set(values)) and "alpha" not in values:
            # alpha follows beta and the variant unless set explicitly
            values = {**values, "alpha": None}
        try:
            parts[name] = dataclasses.replace(current, **values)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{name}]: {exc}") from exc
    return ExperimentConfig(**parts)


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    path = Path(path)
    if not path.exists():
        preset = PRESET_DIR / f"{path.name.removesuffix('.toml')}.toml"
        if not preset.exists():
            raise ConfigError(f"config file {str(path)!r} not found")
        path = preset
    try:
        raw = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_mapping(raw)


PRESET_DIR = Path(__file__).parent / "presets"


# --- building and training --------------------------------------------------------

def reference_generator(cfg: ExperimentConfig) -> Policy:
    p = cfg.policy
    return pretrained_generator(cfg.world.lexicon, GeneratorSpec(p.gen_embed, p.gen_hidden, p.gen_seed),
                                p.context_window, cfg.world.prompt_len, p.pretrain)


def generator_zoo(cfg: ExperimentConfig) -> list[Policy]:
    p = cfg.policy
    return build_generator_zoo(cfg.world.lexicon, p.context_window, cfg.world.prompt_len,
                               DEFAULT_ZOO, p.pretrain)


def reference_inference(cfg: ExperimentConfig) -> Policy:
    p = cfg.policy
    lex = cfg.world.lexicon
    if cfg.world.max_signal_len() > p.context_window:
        raise ConfigError(f"signals of up to {cfg.world.max_signal_len()} tokens exceed "
                          f"context_window {p.context_window}")
    return Policy.init(lex.vocab, lex.context_vocab, Arch(p.inf_embed, p.inf_hidden, p.context_window),
                       p.summary_max_len, p.inf_seed, Role.INFERENCE_REF, frozen=True)


def run_stage1(cfg: ExperimentConfig, users: list[UserRecord],
               gen_ref: Policy | None = None) -> tuple[Policy, list[dict]]:
    gen_ref = gen_ref or reference_generator(cfg)
    inf_ref = reference_inference(cfg)
    inf, history = train_stage1(inf_ref.as_role(Role.INFERENCE, frozen=False), inf_ref, gen_ref,
                                users, cfg.objective, cfg.grpo)
    return inf.freeze(), history


def run_stage2(cfg: ExperimentConfig, users: list[UserRecord], inf: Policy,
               gen_ref: Policy | None = None) -> tuple[dict[str, Policy], dict[str, list[dict]]]:
    """POPI generator plus, if enabled, the raw-aligned and inference-aligned baselines."""
    gen_ref = gen_ref or reference_generator(cfg)
    s = cfg.stage2
    runs = {"gen_popi": ("summary", inf)}
    if s.baselines:
        runs["gen_raw"] = ("raw", None)
        runs["gen_infa"] = ("summary", reference_inference(cfg))
    gens, histories = {}, {}
    for key, (mode, source) in runs.items():
        gen, hist = train_stage2(gen_ref.as_role(Role.GENERATION, frozen=False), gen_ref, source, users,
                                 cfg.objective, s.steps, s.lr, s.seed, batch_size=s.batch_size,
                                 warmup_steps=s.warmup_steps, optimizer=s.optimizer,
                                 samples_per_user=s.samples_per_user, context_mode=mode)
        gens[key] = gen.freeze()
        histories[key] = hist
    return gens, histories


def evaluate(cfg: ExperimentConfig, users: list[UserRecord], policies: Mapping[str, Policy],
             zoo: list[Policy] | None = None) -> list[Metrics]:
    ecfg = EvalConfig(cfg.eval.seed, cfg.eval.samples_per_prompt)
    lex = cfg.world.lexicon
    modes = [m for m, (g, _) in MODES.items() if g in policies]
    rows = run_matrix(users, policies, modes, ecfg, lex)
    if zoo:
        rows += transfer_matrix(users, policies, zoo, ecfg, lex)
    return rows

