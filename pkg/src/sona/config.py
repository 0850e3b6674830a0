"""Pipeline configuration: dataclass sections, INI-style file I/O, stable hashes."""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import typing
from dataclasses import dataclass, field
from pathlib import Path

from sona.data import FactorSpec, SplitCounts
from sona.detector import TrainConfig
from sona.guidance import SonaConfig
from sona.substrate import ConfigError


@dataclass
class RunConfig:
    workdir: str = "work"
    seed: int = 0


@dataclass
class DataConfig:
    seed: int = 0
    image_size: int = 16
    id_classes: tuple[str, ...] = FactorSpec.id_classes
    near_classes: tuple[str, ...] = FactorSpec.near_classes
    far_classes: tuple[str, ...] = FactorSpec.far_classes
    prompt_classes: tuple[str, ...] = FactorSpec.prompt_classes
    id_train: int = SplitCounts.id_train
    id_test: int = SplitCounts.id_test
    near_ood: int = SplitCounts.near_ood
    far_ood: int = SplitCounts.far_ood
    prompt_train: int = SplitCounts.prompt_train

    def factor_spec(self) -> FactorSpec:
        return FactorSpec(
            image_size=self.image_size,
            id_classes=self.id_classes,
            near_classes=self.near_classes,
            far_classes=self.far_classes,
            prompt_classes=self.prompt_classes,
        )

    def counts(self) -> SplitCounts:
        return SplitCounts(self.id_train, self.id_test, self.near_ood, self.far_ood, self.prompt_train)


@dataclass
class DiffusionConfig:
    seed: int = 0
    T: int = 50
    beta_start: float = 0.002
    beta_end: float = 0.4
    p_uncond: float = 0.1
    steps: int = 2500
    batch_size: int = 64
    lr: float = 2e-3
    base_channels: int = 32


@dataclass
class GenConfig:
    """Outlier synthesis settings (SONA guidance plus bookkeeping)."""

    s: float = 10.0
    lam: float = 0.2
    tilde_t: int | str = "uniform"
    prompt_policy: str = "rand"
    count: int = 0  # 0 = one outlier per ID training image
    batch_size: int = 128
    use_id: bool = True
    use_n: bool = True
    use_ood: bool = True
    filter_n: bool = True

    def sona(self) -> SonaConfig:
        return SonaConfig(self.s, self.lam, self.tilde_t, self.use_id, self.use_n, self.use_ood, self.filter_n)


@dataclass
class DetectorConfig:
    beta: float = 0.5
    gamma_mi: float = 0.1
    epochs: int = 30
    batch_size: int = 64
    lr: float = 2e-3
    q_lr: float = 1e-3
    weight_decay: float = 5e-4
    literal_oe: bool = False
    mi_ramp: float = 0.3
    width: int = 32
    feat_dim: int = 128

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.beta, self.gamma_mi, self.epochs, self.batch_size, self.lr, self.q_lr, self.weight_decay, self.literal_oe, self.mi_ramp)


@dataclass
class EvalConfig:
    tpr: float = 0.95
    probe_epochs: int = 10
    grid_triplets: int = 16


@dataclass
class PipelineConfig:
    run: RunConfig = field(default_factory=RunConfig)
    data: DataConfig = field(default_factory=DataConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    sona: GenConfig = field(default_factory=GenConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> None:
        self.data.factor_spec().validate()
        d = self.diffusion
        if d.T < 1 or not 0 < d.beta_start <= d.beta_end < 1:
            raise ConfigError("diffusion schedule needs T >= 1 and 0 < beta_start <= beta_end < 1")
        if not 0 <= d.p_uncond <= 1:
            raise ConfigError("p_uncond must be in [0, 1]")
        self.sona.sona().validate(d.T)
        if self.sona.prompt_policy not in ("rand", "close", "far"):
            raise ConfigError(f"prompt_policy must be rand|close|far, got {self.sona.prompt_policy!r}")
        self.detector.train_config().validate()
        if not 0 < self.eval.tpr <= 1:
            raise ConfigError("eval tpr must be in (0, 1]")


SECTIONS = [f.name for f in dataclasses.fields(PipelineConfig)]


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(text: str, tp, where: str):
    text = text.strip()
    origin = typing.get_origin(tp)
    try:
        if tp is bool:
            low = text.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(text)
        if tp is int:
            return int(text)
        if tp is float:
            return float(text)
        if tp is str:
            return text
        if origin is tuple:
            args = typing.get_args(tp)
            items = [p.strip() for p in text.split(",") if p.strip()]
            if len(args) == 2 and args[1] is Ellipsis:
                return tuple(_parse(p, args[0], where) for p in items)
            if len(items) != len(args):
                raise ValueError(f"expected {len(args)} comma-separated values")
            return tuple(_parse(p, a, where) for p, a in zip(items, args))
        if origin in (typing.Union, getattr(__import__("types"), "UnionType", None)):
            for a in typing.get_args(tp):
                try:
                    return _parse(text, a, where)
                except ConfigError:
                    continue
            raise ValueError(text)
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot parse {text!r} as {tp}: {exc}") from None
    raise ConfigError(f"{where}: unsupported type {tp}")


def to_text(cfg: PipelineConfig) -> str:
    """Canonical INI text: every section and key, in declaration order."""
    lines = []
    for sec in SECTIONS:
        obj = getattr(cfg, sec)
        lines.append(f"[{sec}]")
        for f in dataclasses.fields(obj):
            lines.append(f"{f.name} = {_format(getattr(obj, f.name))}")
        lines.append("")
    return "\n".join(lines)


def from_text(text: str, source: str = "<config>") -> PipelineConfig:
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"))
    parser.optionxform = str  # keep key case (T)
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    cfg = PipelineConfig()
    for sec in parser.sections():
        if sec not in SECTIONS:
            raise ConfigError(f"{source}: unknown section [{sec}]; known: {SECTIONS}")
        obj = getattr(cfg, sec)
        hints = typing.get_type_hints(type(obj))
        names = {f.name for f in dataclasses.fields(obj)}
        for key, raw in parser.items(sec):
            if key not in names:
                raise ConfigError(f"{source}: unknown key {key!r} in [{sec}]; known: {sorted(names)}")
            setattr(obj, key, _parse(raw, hints[key], f"{source} [{sec}] {key}"))
    cfg.validate()
    return cfg


def load_config(path: str | Path | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} not found")
    return from_text(path.read_text(), str(path))


def save_config(cfg: PipelineConfig, path: str | Path) -> None:
    Path(path).write_text(to_text(cfg))


def _digest(*parts: str) -> str:
    h = hashlib.sha256()
    for p in parts:
        h.update(p.encode("utf-8"))
        h.update(b"\0")
    return h.hexdigest()[:16]


def _section_text(cfg: PipelineConfig, sec: str) -> str:
    obj = getattr(cfg, sec)
    return "\n".join(f"{sec}.{f.name}={_format(getattr(obj, f.name))}" for f in dataclasses.fields(obj))


def config_hash(cfg: PipelineConfig) -> str:
    """Digest of the canonical file, excluding the output location."""
    return _digest(*(_section_text(cfg, s) for s in SECTIONS if s != "run"), f"seed={cfg.run.seed}")


def data_hash(cfg: PipelineConfig) -> str:
    return _digest(_section_text(cfg, "data"))


def diffusion_hash(cfg: PipelineConfig) -> str:
    return _digest(data_hash(cfg), _section_text(cfg, "diffusion"))


def outlier_hash(cfg: PipelineConfig, guidance: str) -> str:
    return _digest(diffusion_hash(cfg), _section_text(cfg, "sona"), f"seed={cfg.run.seed}", guidance)


def detector_hash(cfg: PipelineConfig, tier: str, guidance: str) -> str:
    upstream = data_hash(cfg) if tier == "ce" else outlier_hash(cfg, guidance)
    return _digest(upstream, _section_text(cfg, "detector"), f"seed={cfg.run.seed}", tier)


def with_overrides(cfg: PipelineConfig, **dotted) -> PipelineConfig:
    """Copy with ``section__key=value`` overrides."""
    new = from_text(to_text(cfg))
    for k, v in dotted.items():
        sec, key = k.split("__", 1)
        setattr(getattr(new, sec), key, v)
    new.validate()
    return new
