"""Run configuration: one JSON document with a section per module.

Unknown keys are rejected. Missing keys take their defaults and are
reported so the caller can warn. Component seeds are not configured per
section; they all derive from the top-level ``seed``.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from . import CLASSES
from .baselines import BaselineConfig
from .cdcgan import GanConfig
from .classify import ClassifyConfig
from .distill import KdConfig
from .features import FeatureConfig
from .galatent import FitnessWeights, GaConfig
from .metrics import MetricConfig, SsimConfig


class ConfigError(ValueError):
    """Invalid or malformed run configuration."""


@dataclass
class DataConfig:
    manifest: str | None = None     # None: use the in-memory procedural fixture
    n_per_class: int = 400
    noise: float = 0.01
    fixture_seed: int = 0
    split_seed: int = 42

    def __post_init__(self):
        if self.n_per_class < 2:
            raise ValueError("dataio.n_per_class must be >= 2")
        if self.noise < 0:
            raise ValueError("dataio.noise must be >= 0")


# section name -> dataclasses whose fields make up that section
SECTIONS = {
    "gan": (GanConfig,),
    "kd": (KdConfig,),
    "ga": (GaConfig, FitnessWeights),
    "features": (FeatureConfig,),
    "classify": (ClassifyConfig,),
    "metrics": (MetricConfig,),
    "dataio": (DataConfig,),
    "baselines": (BaselineConfig,),
}
NESTED = {("metrics", "ssim"): SsimConfig}
EXCLUDED = {"seed", "n_classes"}     # derived from the top-level keys
TOP_LEVEL = {"seed": 0, "out": "run", "classes": list(CLASSES), "synth_per_class": 100,
             "use_ga": True}


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "run"
    classes: tuple = CLASSES
    synth_per_class: int = 100
    use_ga: bool = True
    gan: GanConfig = field(default_factory=GanConfig)
    kd: KdConfig = field(default_factory=KdConfig)
    ga: GaConfig = field(default_factory=GaConfig)
    fitness: FitnessWeights = field(default_factory=FitnessWeights)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    classify: ClassifyConfig = field(default_factory=ClassifyConfig)
    metrics: MetricConfig = field(default_factory=MetricConfig)
    dataio: DataConfig = field(default_factory=DataConfig)
    baselines: BaselineConfig = field(default_factory=BaselineConfig)

    def to_dict(self):
        out = {k: getattr(self, k) for k in TOP_LEVEL}
        out["classes"] = list(self.classes)
        for section, classes in SECTIONS.items():
            body = {}
            for cls in classes:
                body.update(_fields_to_dict(_section_object(self, section, cls), section))
            out[section] = body
        return out

    def with_overrides(self, **kw):
        return dataclasses.replace(self, **{k: v for k, v in kw.items() if v is not None})


def _section_object(run, section, cls):
    return run.fitness if cls is FitnessWeights else getattr(run, section)


def _fields_to_dict(obj, section):
    out = {}
    for f in dataclasses.fields(obj):
        if f.name in EXCLUDED:
            continue
        v = getattr(obj, f.name)
        if (section, f.name) in NESTED:
            v = dataclasses.asdict(v)
        elif isinstance(v, tuple):
            v = list(v)
        out[f.name] = v
    return out


def _check_type(key, value, annotation):
    ann = str(annotation)
    if value is None:
        if "None" in ann:
            return value
        raise ConfigError(f"{key}: null is not allowed")
    if "bool" in ann:
        ok = isinstance(value, bool)
    elif "float" in ann:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif "int" in ann:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif "str" in ann:
        ok = isinstance(value, str)
    elif "tuple" in ann:
        ok = isinstance(value, list)
        value = tuple(value) if ok else value
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{key}: expected {ann}, got {type(value).__name__}")
    return value


def _build(cls, data, prefix, missing, section):
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in EXCLUDED:
            continue
        key = f"{prefix}.{f.name}"
        if (section, f.name) in NESTED:
            sub = data.get(f.name, {})
            if not isinstance(sub, dict):
                raise ConfigError(f"{key}: expected an object")
            unknown = set(sub) - {g.name for g in dataclasses.fields(NESTED[section, f.name])}
            if unknown:
                raise ConfigError(f"unknown key {key}.{sorted(unknown)[0]}")
            kwargs[f.name] = _build(NESTED[section, f.name], sub, key, missing, None)
        elif f.name in data:
            kwargs[f.name] = _check_type(key, data[f.name], f.type)
        else:
            missing.append(key)
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        msg = str(exc)
        if not msg.startswith(section or prefix):
            msg = f"{prefix}: {msg}"
        raise ConfigError(msg) from None


def config_from_dict(doc):
    """Validate ``doc`` and fill defaults. Returns ``(RunConfig, missing)``
    where ``missing`` lists the dotted keys that took default values."""
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(doc) - set(TOP_LEVEL) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown key {sorted(unknown)[0]}")
    missing, kwargs = [], {}
    for key, default in TOP_LEVEL.items():
        if key in doc:
            kwargs[key] = doc[key]
        else:
            missing.append(key)
            kwargs[key] = default
    _check_type("seed", kwargs["seed"], "int")
    _check_type("synth_per_class", kwargs["synth_per_class"], "int")
    _check_type("use_ga", kwargs["use_ga"], "bool")
    _check_type("out", kwargs["out"], "str")
    classes = kwargs["classes"]
    if not (isinstance(classes, list) and len(classes) >= 2 and all(isinstance(c, str) for c in classes)
            and len(set(classes)) == len(classes)):
        raise ConfigError("classes: expected a list of >= 2 distinct strings")
    if kwargs["synth_per_class"] < 1:
        raise ConfigError("synth_per_class must be >= 1")
    kwargs["classes"] = tuple(classes)
    for section, classes_ in SECTIONS.items():
        body = doc.get(section, {})
        if not isinstance(body, dict):
            raise ConfigError(f"{section}: expected an object")
        known = {f.name for c in classes_ for f in dataclasses.fields(c)} - EXCLUDED
        unknown = set(body) - known
        if unknown:
            raise ConfigError(f"unknown key {section}.{sorted(unknown)[0]}")
        if section not in doc:
            missing.append(section)
            sink = []
        else:
            sink = missing
        for cls in classes_:
            name = "fitness" if cls is FitnessWeights else section
            sub = {k: v for k, v in body.items() if k in {f.name for f in dataclasses.fields(cls)}}
            kwargs[name] = _build(cls, sub, section, sink, section)
    n = len(kwargs["classes"])
    kwargs["gan"] = dataclasses.replace(kwargs["gan"], n_classes=n, seed=kwargs["seed"])
    kwargs["ga"] = dataclasses.replace(kwargs["ga"], seed=kwargs["seed"])
    return RunConfig(**kwargs), missing


def parse_config(path):
    """Read and validate a JSON config file."""
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    return config_from_dict(doc)


def write_resolved(run, out_dir):
    path = Path(out_dir) / "config_resolved.json"
    path.write_text(json.dumps(run.to_dict(), indent=2, sort_keys=True) + "\n")
    return path
