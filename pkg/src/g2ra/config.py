"""Run configuration: nested YAML sections mapped onto dataclasses, unknown keys rejected."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import yaml

from .fusion import VARIANTS, G2raConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class EvalSection:
    episodes_per_split: int = 200
    max_steps: int = 60
    stop_threshold: float = 0.5
    scene_offset: int = 5_000_000


@dataclass
class AblateSection:
    variants: List[str] = field(default_factory=lambda: list(VARIANTS))
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2])


@dataclass
class SweepSection:
    eta: List[float] = field(default_factory=lambda: [0.0, 0.5, 1.0])
    alpha: List[float] = field(default_factory=lambda: [0.2, 0.5, 0.8])


@dataclass
class GradcheckSection:
    d_clip: int = 12
    d_agg: int = 10
    d: int = 16
    heads: int = 4
    n_2d: int = 8
    n_3d: int = 12
    hidden: int = 16
    h: float = 1e-5
    tol: float = 1e-4


@dataclass
class DumpSection:
    scene_seed: int = 5_000_000
    difficulty: str = "easy"
    step: int = 0


@dataclass
class RunConfig:
    variant: str = "full"
    seed: int = 0
    out: str = "runs/default"
    jobs: int = 1
    fusion: G2raConfig = field(default_factory=G2raConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSection = field(default_factory=EvalSection)
    ablate: AblateSection = field(default_factory=AblateSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    gradcheck: GradcheckSection = field(default_factory=GradcheckSection)
    dump: DumpSection = field(default_factory=DumpSection)

    def validate(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        for v in self.ablate.variants:
            if v not in VARIANTS:
                raise ConfigError(f"ablate.variants: unknown variant {v!r}")
        if not self.sweep.eta or not self.sweep.alpha:
            raise ConfigError("sweep grid lists must be nonempty")
        for a in self.sweep.alpha:
            if not 0.0 < a < 1.0:
                raise ConfigError(f"sweep.alpha value {a} outside (0, 1)")
        if self.train.alpha is not None and not 0.0 < self.train.alpha < 1.0:
            raise ConfigError(f"alpha {self.train.alpha} outside (0, 1); a gate of 0 or 1 is only "
                              "meaningful for dump-responses")
        if self.dump.difficulty not in ("easy", "hard"):
            raise ConfigError("dump.difficulty must be easy or hard")
        if self.eval.episodes_per_split < 1 or self.eval.max_steps < 1:
            raise ConfigError("eval.episodes_per_split and eval.max_steps must be >= 1")
        return self

    def train_config(self, variant: Optional[str] = None, seed: Optional[int] = None,
                     eta: Optional[float] = None, alpha: Optional[float] = None) -> TrainConfig:
        """TrainConfig for one job, carrying the shared fusion dims and eval step limit."""
        changes = dict(fusion=self.fusion, variant=variant or self.variant,
                       seed=self.seed if seed is None else seed,
                       eval_max_steps=self.eval.max_steps)
        if eta is not None:
            changes["eta"] = eta
        if alpha is not None:
            changes["alpha"] = alpha
        return dataclasses.replace(self.train, **changes)


def _build(cls, data, path: str):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown key(s) {unknown}")
    kwargs = {}
    nested = {"fusion": G2raConfig, "train": TrainConfig, "eval": EvalSection,
              "ablate": AblateSection, "sweep": SweepSection, "gradcheck": GradcheckSection,
              "dump": DumpSection}
    for key, value in data.items():
        sub = nested.get(key) if cls is RunConfig else None
        if sub is not None:
            kwargs[key] = _build(sub, value, f"{path}{key}.")
        elif cls is TrainConfig and key == "fusion":
            raise ConfigError("train.fusion: set fusion dims in the top-level 'fusion' section")
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from None


def load_config(path=None, **overrides) -> RunConfig:
    """Read YAML (or use defaults), then apply non-None overrides for top-level keys."""
    data = {}
    if path is not None:
        try:
            data = yaml.safe_load(Path(path).read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: cannot parse ({exc})") from None
    cfg = _build(RunConfig, data, "")
    cfg.train.fusion = cfg.fusion
    for key, value in overrides.items():
        if value is None:
            continue
        if key in ("eta", "alpha"):
            setattr(cfg.train, key, value)
        else:
            setattr(cfg, key, value)
    return cfg.validate()


def dump_config(cfg: RunConfig) -> str:
    d = dataclasses.asdict(cfg)
    d["train"].pop("fusion")  # always taken from the top-level section
    return yaml.safe_dump(d, sort_keys=True)
