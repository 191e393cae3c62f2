"""Experiment configuration: nested dataclasses, JSON files, dotted overrides."""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Any, get_args, get_origin, get_type_hints

import numpy as np

from ..attacks import EVASION_EPS, FGSM_KINDS, NPD_STRATEGIES
from ..mmd import WIDTHS, MmdConfig
from ..models import TrainConfig
from ..vae import VaeConfig


class ConfigError(ValueError):
    """Invalid configuration; ``key`` is the dotted path of the offending entry."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass
class DataSection:
    d: int = 64
    k: int = 4
    n_per_class: int = 500
    spread: float = 0.005
    class_sep: float = 0.005
    holdout_fraction: float = 0.5
    test_fraction: float = 0.2
    # raw tensor directory replacing the synthetic dataset
    path: str | None = None
    npd_pool_size: int = 10000
    npd_pool_path: str | None = None


@dataclass
class ClassifierSection:
    epochs: int = 200
    batch_size: int = 64
    lr: float = 1e-3
    hidden: tuple[int, ...] = (128,)
    dropout: float = 0.2


@dataclass
class VaeSection:
    hidden: tuple[int, ...] = (256, 128)
    latent_dim: int = 32
    epochs: int = 500
    batch_size: int = 64
    lr: float = 3e-4
    tol: float = 1e-4
    window: int = 10
    rho: float = 0.5
    offset: float = 5.0
    recon_on_outliers: bool = True
    dropout: float = 0.2


@dataclass
class DetectorSection:
    m: int = 100
    deltas: tuple[float, ...] = (0.0, 0.25, 0.5, 1.0, 1.5, 2.5)
    block_threshold: float = 0.25
    stride: int = 1
    widths: tuple[float, ...] = WIDTHS
    M: int = 100
    N: int = 20


@dataclass
class AttackSection:
    stream_length: int = 1000
    budget: int = 5000
    fgsm_kind: str = "fgsm_n"
    eps: float = 0.1
    iters: int = 5
    seed_sample_count: int = 100
    npd_strategy: str = "dfal_kcenter"
    npd_rounds: int = 10
    defend_attacks: tuple[str, ...] = ("Syn", "AdvPD", "NPD")
    transfer_eps: float = 0.1
    substitute_hidden: tuple[int, ...] = (128,)
    dilutions: tuple[float, ...] = (100.0, 25.0, 5.0)
    dilution_source: str = "NPD"


@dataclass
class EvasionSection:
    eps_grid: tuple[float, ...] = EVASION_EPS
    iters: int = 5000
    samples: int = 120
    sources: tuple[str, ...] = ("Syn", "NPD")
    ascend: bool = False


@dataclass
class ProjectSection:
    samples_per_set: int = 300
    sets: tuple[str, ...] = ("D_C", "D_O", "AltPD", "Syn", "AdvPD", "NPD")


@dataclass
class ExperimentConfig:
    data: DataSection = field(default_factory=DataSection)
    classifier: ClassifierSection = field(default_factory=ClassifierSection)
    vae: VaeSection = field(default_factory=VaeSection)
    detector: DetectorSection = field(default_factory=DetectorSection)
    attack: AttackSection = field(default_factory=AttackSection)
    evasion: EvasionSection = field(default_factory=EvasionSection)
    project: ProjectSection = field(default_factory=ProjectSection)
    mode: str = "monitor"
    out: str = "runs/default"
    seed: int = 0

    def __post_init__(self):
        validate(self)

    def to_dict(self) -> dict:
        return _jsonable(asdict(self))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    # derived per-component settings

    def sub_seed(self, name: str) -> int:
        """Independent integer seed for a named pipeline stage."""
        ss = np.random.SeedSequence(self.seed, spawn_key=(zlib.crc32(name.encode()),))
        return int(ss.generate_state(1, np.uint32)[0])

    def classifier_train_config(self) -> TrainConfig:
        c = self.classifier
        return TrainConfig(c.epochs, c.batch_size, c.lr, None, self.sub_seed("g"), c.hidden, c.dropout)

    def vae_config(self) -> VaeConfig:
        v = self.vae
        return VaeConfig(
            v.hidden, v.latent_dim, v.epochs, v.batch_size, v.lr, v.tol, v.window,
            v.recon_on_outliers, v.dropout, self.sub_seed("vae"),
        )

    def mmd_config(self) -> MmdConfig:
        d = self.detector
        return MmdConfig(d.widths, d.M, d.N, self.sub_seed("mmd"))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def validate(cfg: ExperimentConfig) -> None:
    def need(ok: bool, key: str, msg: str):
        if not ok:
            raise ConfigError(key, msg)

    d = cfg.data
    need(d.d >= 4, "data.d", "must be >= 4")
    need(d.k >= 2, "data.k", "must be >= 2")
    need(d.n_per_class >= 1, "data.n_per_class", "must be positive")
    need(d.spread >= 0, "data.spread", "must be non-negative")
    need(0 < d.holdout_fraction < 1, "data.holdout_fraction", "must lie in (0, 1)")
    need(0 < d.test_fraction < 1, "data.test_fraction", "must lie in (0, 1)")
    need(cfg.classifier.epochs >= 1, "classifier.epochs", "must be >= 1")
    need(cfg.vae.latent_dim >= 1, "vae.latent_dim", "must be >= 1")
    need(cfg.vae.epochs >= 1, "vae.epochs", "must be >= 1")
    det = cfg.detector
    need(det.N >= 2, "detector.N", "must be >= 2")
    need(det.M >= 1, "detector.M", "must be >= 1")
    need(det.m >= det.N, "detector.m", f"buffer must hold at least N={det.N} embeddings")
    need(list(det.deltas) == sorted(set(det.deltas)), "detector.deltas", "must be strictly ascending")
    need(bool(det.widths) and min(det.widths) > 0, "detector.widths", "must be positive")
    a = cfg.attack
    need(a.fgsm_kind in FGSM_KINDS, "attack.fgsm_kind", f"must be one of {FGSM_KINDS}")
    need(a.npd_strategy in NPD_STRATEGIES, "attack.npd_strategy", f"must be one of {NPD_STRATEGIES}")
    need(a.stream_length > det.m, "attack.stream_length", "must exceed the buffer size")
    need(a.seed_sample_count <= min(a.budget, a.stream_length), "attack.seed_sample_count", "exceeds budget")
    for name in a.defend_attacks:
        need(name in ("Syn", "AdvPD", "NPD", "JbDA"), "attack.defend_attacks", f"unknown attack {name!r}")
    need(a.dilution_source in ("Syn", "AdvPD", "NPD"), "attack.dilution_source", "unknown attack")
    need(all(0 < p <= 100 for p in a.dilutions), "attack.dilutions", "must lie in (0, 100]")
    need(cfg.evasion.iters >= 1, "evasion.iters", "must be >= 1")
    need(cfg.evasion.samples > det.m, "evasion.samples", "must exceed the buffer size")
    need(cfg.mode in ("monitor", "defend"), "mode", "must be 'monitor' or 'defend'")
    need(cfg.seed >= 0, "seed", "must be non-negative")


# construction from plain data


def _coerce(value, hint, key: str):
    origin = get_origin(hint)
    args = get_args(hint)
    if hint is Any:
        return value
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(key, f"expected a list, got {value!r}")
        inner = args[0] if args else Any
        return tuple(_coerce(v, inner, f"{key}[{i}]") for i, v in enumerate(value))
    if args and type(None) in args:  # optional
        if value is None:
            return None
        rest = [a for a in args if a is not type(None)]
        return _coerce(value, rest[0], key)
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected true/false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key, f"expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(key, f"expected a string, got {value!r}")
        return value
    if is_dataclass(hint):
        return _build(hint, value, key)
    return value


def _build(cls, data, prefix: str):
    if not isinstance(data, dict):
        raise ConfigError(prefix or "<root>", "expected an object")
    hints = get_type_hints(cls)
    names = {f.name for f in fields(cls)}
    for k in data:
        if k not in names:
            raise ConfigError(_join(prefix, k), "unknown key")
    kwargs = {k: _coerce(v, hints[k], _join(prefix, k)) for k, v in data.items()}
    return cls(**kwargs)


def _join(prefix: str, key: str) -> str:
    return f"{prefix}.{key}" if prefix else key


def from_dict(data: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, data, "")


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    p = Path(path)
    try:
        data = json.loads(p.read_text())
    except FileNotFoundError:
        raise ConfigError("--config", f"{p} not found") from None
    except json.JSONDecodeError as e:
        raise ConfigError("--config", f"{p} is not valid JSON ({e})") from None
    return from_dict(data)


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(cfg: ExperimentConfig, overrides: list[str]) -> ExperimentConfig:
    """Apply ``dotted.key=value`` overrides; values parse as JSON, else strings."""
    data = cfg.to_dict()
    for item in overrides:
        if "=" not in item:
            raise ConfigError(item, "override must look like key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = data
        for i, part in enumerate(parts[:-1]):
            if not isinstance(node.get(part), dict):
                raise ConfigError(".".join(parts[: i + 1]), "unknown section")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(key, "unknown key")
        node[parts[-1]] = _parse_value(raw)
    return from_dict(data)


def with_seed(cfg: ExperimentConfig, seed: int | None) -> ExperimentConfig:
    return cfg if seed is None else replace(cfg, seed=seed)


def with_out(cfg: ExperimentConfig, out: str | None) -> ExperimentConfig:
    return cfg if out is None else replace(cfg, out=str(out))
