"""Run configuration: model dims, optimizer, loss weights and distillation settings.

Configs are JSON files. ``presets/defaults.json`` is the reference for every key;
``presets/toy.json`` holds the desk-scale dims used by tests and notebooks and
only lists the keys it overrides.
"""

from __future__ import annotations

import copy
import dataclasses
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    n_mels: int = 80
    vocab_size: int = 64
    d_model: int = 192
    d_latent: int = 16
    d_style: int = 128
    d_raw: int = 192
    d_spk: int = 192
    ling_layers: int = 4
    ling_heads: int = 2
    ling_ffn: int = 768
    rel_window: int = 16
    mel_enc_channels: int = 32
    mel_enc_blocks: int = 2
    mel_enc_kernel_time: int = 3
    posterior_layers: int = 2
    flow_steps: int = 4
    flow_hidden: int = 64
    style_layers: int = 2
    style_heads: int = 2
    predictor_channels: int = 128
    adapter_heads: int = 2
    dec_channels: int = 192
    dec_blocks: int = 3
    disc_channels: int = 32
    disc_layers: int = 4
    logvar_min: float = -9.0
    logvar_max: float = 2.0
    embedder: str = "stub"
    embedder_seed: int = 1234
    # fuse the sampled latent (default) or the pooled mel features directly
    fuse_sampled_latent: bool = True


@dataclass
class LossWeights:
    rec: float = 1.0
    kl: float = 1.0
    adv: float = 1.0
    pred_duration: float = 1.0
    pred_pitch: float = 1.0
    pred_energy: float = 1.0
    cyc: float = 1.0

    def __post_init__(self):
        for f in dataclasses.fields(self):
            if getattr(self, f.name) < 0:
                raise ConfigError(f"loss weight {f.name} must be non-negative")


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 64
    lr: float = 2e-4
    warmup_steps: int = 1000
    betas: tuple[float, float] = (0.8, 0.99)
    weight_decay: float = 0.01
    grad_clip: float = 5.0
    seed: int = 0
    # "same-speaker": another utterance of the target speaker when one exists
    prompt_policy: str = "same-speaker"
    noise_scale: float = 1.0
    weights: LossWeights = field(default_factory=LossWeights)


@dataclass
class DistillConfig:
    sigma: float = 0.8
    batch_size: int = 64
    pair_seed: int = 0
    prompt_policy: str = "uniform-other-speaker"
    # latent noise used by the teacher when rendering pairs; 0 = prior mean
    pair_noise_scale: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.sigma <= 1.0:
            raise ConfigError(f"sigma must lie in [0, 1], got {self.sigma}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.prompt_policy != "uniform-other-speaker":
            raise ConfigError(f"unknown prompt policy {self.prompt_policy!r}")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    corpus: dict[str, Any] = field(default_factory=dict)
    paths: dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def validate(self) -> "RunConfig":
        for f in dataclasses.fields(self.model):
            v = getattr(self.model, f.name)
            if f.type == "int" and v < 1 and f.name != "embedder_seed":
                raise ConfigError(f"model.{f.name} must be >= 1, got {v}")
        if self.model.logvar_min >= self.model.logvar_max:
            raise ConfigError("model.logvar_min must be below model.logvar_max")
        if self.model.d_latent < 2:
            raise ConfigError("model.d_latent must be >= 2 for coupling layers")
        if self.train.steps < 0 or self.train.batch_size < 1:
            raise ConfigError("train.steps must be >= 0 and train.batch_size >= 1")
        if self.train.prompt_policy not in ("same-speaker", "self"):
            raise ConfigError(f"unknown train.prompt_policy {self.train.prompt_policy!r}")
        DistillConfig(**dataclasses.asdict(self.distill))
        LossWeights(**dataclasses.asdict(self.train.weights))
        return self


def _merge(base: dict, override: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in out:
            raise ConfigError(f"unknown config key {where}{key}")
        if isinstance(out[key], dict) and isinstance(value, dict) and key not in ("corpus", "paths"):
            out[key] = _merge(out[key], value, f"{where}{key}.")
        else:
            out[key] = value
    return out


def from_dict(d: dict[str, Any]) -> RunConfig:
    d = _merge(RunConfig().to_dict(), d)
    train = dict(d["train"])
    train["weights"] = LossWeights(**train["weights"])
    train["betas"] = tuple(train["betas"])
    try:
        cfg = RunConfig(
            model=ModelConfig(**d["model"]),
            train=TrainConfig(**train),
            distill=DistillConfig(**d["distill"]),
            corpus=dict(d["corpus"]),
            paths=dict(d["paths"]),
        )
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    return cfg.validate()


def preset(name: str = "defaults") -> RunConfig:
    """Load a shipped preset (``defaults`` or ``toy``)."""
    text = resources.files("sdtts.presets").joinpath(f"{name}.json").read_text()
    return from_dict(json.loads(text))


PRESET_NAMES = ("defaults", "toy")


def load_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> RunConfig:
    """``path`` is a JSON file or a preset name; missing keys come from ``defaults``."""
    if path is None:
        base = preset("defaults").to_dict()
    elif str(path) in PRESET_NAMES and not Path(path).exists():
        base = preset(str(path)).to_dict()
    else:
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} does not parse: {exc}") from None
        base = _merge(preset("defaults").to_dict(), raw)
    if overrides:
        base = set_keys(base, overrides)
    return from_dict(base)


def set_keys(d: dict[str, Any], overrides: dict[str, Any]) -> dict[str, Any]:
    """Apply dotted-key overrides such as ``{"train.steps": 10}``."""
    d = copy.deepcopy(d)
    for dotted, value in overrides.items():
        node = d
        *parents, leaf = dotted.split(".")
        for p in parents:
            if p not in node or not isinstance(node[p], dict):
                raise ConfigError(f"unknown config key {dotted}")
            node = node[p]
        if leaf not in node and parents[:1] not in (["corpus"], ["paths"]):
            raise ConfigError(f"unknown config key {dotted}")
        node[leaf] = value
    return d


def save_config(cfg: RunConfig, path: str | Path) -> None:
    from .data import _atomic_write

    _atomic_write(Path(path), (json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n").encode())
