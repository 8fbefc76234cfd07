"""Flat ``section.key = value`` run configuration.

Example::

    seed = 0
    model.variant = tfd
    model.context_pooling = tap
    training.epochs = 2
    eval.alpha_st = 1.0
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Dict


from .evaluation.psds import PsdsConfig
from .model import ModelConfig, preset
from .synth import SynthConfig
from .training import TrainConfig


@dataclass
class EvalConfig:
    dtc: float = 0.7
    gtc: float = 0.7
    alpha_st: float = 1.0
    e_max: float = 100.0
    n_thresholds: int = 50
    median_length: int = 7
    mask_mode: str = "min"
    f1_threshold: float = 0.5

    def psds_config(self) -> PsdsConfig:
        from .evaluation.postprocess import default_thresholds

        return PsdsConfig(dtc=self.dtc, gtc=self.gtc, alpha_st=self.alpha_st, e_max=self.e_max,
                          thresholds=default_thresholds(self.n_thresholds))


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    seed: int = 0


_SECTIONS = ("model", "training", "eval", "synth")


def _to_text(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _from_text(raw: str, default):
    if isinstance(default, bool):
        low = raw.lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"not a boolean: {raw!r}")
        return low in ("true", "1", "yes")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def _section_dict(obj) -> Dict[str, str]:
    if isinstance(obj, ModelConfig):
        return obj.to_dict()
    return {f.name: _to_text(getattr(obj, f.name)) for f in fields(obj)}


def _section_from(cls, d: Dict[str, str]):
    if cls is ModelConfig:
        return ModelConfig.from_dict(d)
    base = cls()
    known = {f.name for f in fields(cls)}
    kwargs = {}
    for k, raw in d.items():
        if k not in known:
            raise KeyError(f"unknown {cls.__name__} key {k!r}")
        kwargs[k] = _from_text(raw, getattr(base, k))
    return cls(**kwargs)


def serialize(cfg: RunConfig) -> str:
    lines = [f"seed = {cfg.seed}"]
    for sec in _SECTIONS:
        for k, v in _section_dict(getattr(cfg, sec)).items():
            lines.append(f"{sec}.{k} = {v}")
    return "\n".join(lines) + "\n"


def parse(text: str) -> RunConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment, ``model.preset`` seeds the model section."""
    raw: Dict[str, Dict[str, str]] = {s: {} for s in _SECTIONS}
    seed = 0
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key == "seed":
            seed = int(value)
            continue
        sec, _, name = key.partition(".")
        if sec not in raw or not name:
            raise KeyError(f"line {lineno}: unknown key {key!r}")
        raw[sec][name] = value
    model_raw = raw["model"]
    if "preset" in model_raw:
        base = preset(model_raw.pop("preset")).to_dict()
        base.update(model_raw)
        model_raw = base
    return RunConfig(
        model=_section_from(ModelConfig, model_raw),
        training=_section_from(TrainConfig, raw["training"]),
        eval=_section_from(EvalConfig, raw["eval"]),
        synth=_section_from(SynthConfig, raw["synth"]),
        seed=seed,
    )


def load(path) -> RunConfig:
    return parse(Path(path).read_text())


def save(cfg: RunConfig, path) -> None:
    Path(path).write_text(serialize(cfg))


def smoke_config() -> RunConfig:
    """Small model and data sizes that train in well under a minute per epoch on one CPU core."""
    from fractions import Fraction

    model = ModelConfig(
        base_channels=(8, 16, 16, 16, 16, 16, 16), variant="pfd", context_pooling="tap",
        branch_fraction=Fraction(1, 2), gru_hidden=16, gru_layers=2,
    )
    training = TrainConfig(epochs=2, batch_strong=4, batch_weak=4, batch_unlabeled=8)
    return RunConfig(model=model, training=training)
