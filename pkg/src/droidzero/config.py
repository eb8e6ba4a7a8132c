"""Run configuration: one YAML (or JSON) document drives every CLI command.

Missing sections take the library defaults. The VGAE and SNN sections default
to lr 0.001 / 300 epochs / Adam and lr 0.001 / 4 epochs / SGD respectively;
classification defaults to 30 benign support samples and threshold 0.5.
"""

from __future__ import annotations

import dataclasses
import datetime as dt
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import yaml

from .callgraph import DEFAULT_PREFIX_FILTERS
from .dataset import SynthConfig
from .errors import ConfigError, ValidationError
from .snn import SnnTrainConfig
from .vgae import TrainConfig

MODES = ("zero-shot", "few-shot")
SPLIT_KINDS = ("family", "five-fold", "time")


@dataclass
class PathConfig:
    """Input locations. Unset inputs default to files inside ``out`` (written by ``synth``)."""

    out: str = "run"
    api_mapping: Optional[str] = None
    api_extension: Optional[str] = None
    corpus: Optional[str] = None
    manifest: Optional[str] = None


@dataclass
class SplitConfig:
    kind: str = "family"
    test_fraction: float = 0.2
    support_pool: int = 100
    fold: int = 1
    cutoff: Optional[str] = None


@dataclass
class ClassifyConfig:
    mode: str = "zero-shot"
    support_size: int = 30
    threshold: float = 0.5
    malware_support: int = 30
    fixed_support: bool = False


def _default_grid():
    return [round(0.05 * i, 2) for i in range(1, 20)]


@dataclass
class SweepConfig:
    grid: List[float] = field(default_factory=_default_grid)


@dataclass
class RunConfig:
    seed: int = 0
    float_mode: int = 64
    paths: PathConfig = field(default_factory=PathConfig)
    synth: Optional[SynthConfig] = None
    split: SplitConfig = field(default_factory=SplitConfig)
    prefix_filters: List[str] = field(default_factory=lambda: list(DEFAULT_PREFIX_FILTERS))
    vgae: TrainConfig = field(default_factory=TrainConfig)
    snn: SnnTrainConfig = field(default_factory=SnnTrainConfig)
    classify: ClassifyConfig = field(default_factory=ClassifyConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)

    @property
    def out(self) -> Path:
        return Path(self.paths.out)


# Keys that belong to the run as a whole and may not be set per stage.
_STAGE_RESERVED = {"seed", "float_mode"}
_TUPLE_FIELDS = {"motif_len", "benign_motifs_per_app", "family_motifs_per_app", "date_range",
                 "behaviour_len", "behaviours_per_motif"}


def _section(cls, doc, name, reserved=()):
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{name}: expected a mapping, got {type(doc).__name__}")
    known = {f.name for f in dataclasses.fields(cls)} - set(reserved)
    for key in doc:
        if key not in known:
            raise ConfigError(f"{name}.{key}: unknown option")
    kwargs = {k: tuple(v) if k in _TUPLE_FIELDS and isinstance(v, list) else v for k, v in doc.items()}
    try:
        return cls(**kwargs)
    except ValidationError as exc:
        raise ConfigError(f"{name}: {exc}") from None
    except TypeError as exc:
        raise ConfigError(f"{name}: {exc}") from None


def _check(cond, where, message):
    if not cond:
        raise ConfigError(f"{where}: {message}")


def _is_int(x):
    return isinstance(x, int) and not isinstance(x, bool)


def _resolve(path, base: Path):
    if path is None:
        return None
    p = Path(path)
    return str(p if p.is_absolute() else (base / p))


def _grid(doc):
    if doc is None:
        return _default_grid()
    if isinstance(doc, dict):
        for key in ("start", "stop", "step"):
            _check(key in doc, f"sweep.grid.{key}", "required when the grid is given as a range")
        start, stop, step = float(doc["start"]), float(doc["stop"]), float(doc["step"])
        _check(step > 0, "sweep.grid.step", "must be positive")
        n = int(round((stop - start) / step))
        return [round(start + i * step, 10) for i in range(n + 1)]
    _check(isinstance(doc, list) and doc, "sweep.grid", "must be a non-empty list or a range mapping")
    return [float(x) for x in doc]


def config_from_dict(doc: dict, base: Optional[Path] = None, check_paths: bool = True) -> RunConfig:
    base = Path.cwd() if base is None else Path(base)
    doc = dict(doc or {})
    known = {f.name for f in dataclasses.fields(RunConfig)}
    for key in doc:
        _check(key in known, key, "unknown section")

    seed = doc.get("seed", 0)
    _check(_is_int(seed) and seed >= 0, "seed", f"must be a non-negative integer, got {seed!r}")
    float_mode = doc.get("float_mode", 64)
    _check(float_mode in (32, 64), "float_mode", f"must be 32 or 64, got {float_mode!r}")

    paths = _section(PathConfig, doc.get("paths"), "paths")
    paths = PathConfig(**{k: _resolve(v, base) for k, v in dataclasses.asdict(paths).items()})
    synth = None
    if "synth" in doc:
        synth = _section(SynthConfig, doc["synth"], "synth", reserved={"seed"})
        try:
            synth.validate()
        except ValidationError as exc:
            raise ConfigError(f"synth: {exc}") from None

    split = _section(SplitConfig, doc.get("split"), "split")
    _check(split.kind in SPLIT_KINDS, "split.kind", f"must be one of {SPLIT_KINDS}")
    _check(0 < split.test_fraction < 1, "split.test_fraction", "must lie in (0, 1)")
    _check(_is_int(split.support_pool) and split.support_pool >= 1, "split.support_pool",
           "must be a positive integer")
    _check(_is_int(split.fold) and 1 <= split.fold <= 5, "split.fold", "must lie in 1..5")
    if split.kind == "time":
        _check(split.cutoff is not None, "split.cutoff", "required for a time split")
    if split.cutoff is not None:
        split.cutoff = str(split.cutoff)
        try:
            dt.date.fromisoformat(split.cutoff)
        except ValueError:
            raise ConfigError(f"split.cutoff: not an ISO date: {split.cutoff!r}") from None

    filters = doc.get("prefix_filters", list(DEFAULT_PREFIX_FILTERS))
    _check(isinstance(filters, list) and all(isinstance(f, str) for f in filters),
           "prefix_filters", "must be a list of strings")

    vgae = _section(TrainConfig, doc.get("vgae"), "vgae", reserved=_STAGE_RESERVED)
    snn = _section(SnnTrainConfig, doc.get("snn"), "snn", reserved=_STAGE_RESERVED)
    vgae.float_mode = snn.float_mode = float_mode

    classify = _section(ClassifyConfig, doc.get("classify"), "classify")
    _check(classify.mode in MODES, "classify.mode", f"must be one of {MODES}")
    _check(0 < classify.threshold < 1, "classify.threshold", f"must lie in (0, 1), got {classify.threshold}")
    _check(_is_int(classify.support_size) and classify.support_size >= 1, "classify.support_size",
           "must be at least 1")
    _check(_is_int(classify.malware_support) and classify.malware_support >= 1,
           "classify.malware_support", "must be at least 1")
    _check(classify.support_size <= split.support_pool, "classify.support_size",
           f"exceeds split.support_pool ({split.support_pool})")

    sweep_doc = doc.get("sweep") or {}
    _check(isinstance(sweep_doc, dict), "sweep", "expected a mapping")
    for key in sweep_doc:
        _check(key == "grid", f"sweep.{key}", "unknown option")
    grid = _grid(sweep_doc.get("grid"))
    _check(all(0 <= g <= 1 for g in grid), "sweep.grid", "thresholds must lie in [0, 1]")
    _check(all(b > a for a, b in zip(grid, grid[1:])), "sweep.grid", "must be strictly increasing")

    cfg = RunConfig(seed, float_mode, paths, synth, split, list(filters), vgae, snn, classify,
                    SweepConfig(grid))
    if check_paths:
        check_input_paths(cfg)
    return cfg


def check_input_paths(cfg: RunConfig):
    """External inputs must exist unless the synthetic generator produces them."""
    if cfg.synth is not None:
        return
    for name in ("api_mapping", "corpus", "manifest"):
        value = getattr(cfg.paths, name)
        _check(value is not None, f"paths.{name}", "required when no synth section is given")
    for name in ("api_mapping", "api_extension", "corpus", "manifest"):
        value = getattr(cfg.paths, name)
        if value is not None:
            _check(Path(value).is_file(), f"paths.{name}", f"file not found: {value}")


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML/JSON: {exc}") from None
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return config_from_dict(doc, base=path.parent)


def config_to_dict(cfg: RunConfig) -> dict:
    def plain(obj, drop=()):
        d = dataclasses.asdict(obj)
        for k in drop:
            d.pop(k, None)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    doc = {
        "seed": cfg.seed,
        "float_mode": cfg.float_mode,
        "paths": plain(cfg.paths),
        "split": plain(cfg.split),
        "prefix_filters": list(cfg.prefix_filters),
        "vgae": plain(cfg.vgae, _STAGE_RESERVED),
        "snn": plain(cfg.snn, _STAGE_RESERVED),
        "classify": plain(cfg.classify),
        "sweep": {"grid": list(cfg.sweep.grid)},
    }
    if cfg.synth is not None:
        doc["synth"] = plain(cfg.synth, ("seed",))
    return doc


def serialize_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=True)
