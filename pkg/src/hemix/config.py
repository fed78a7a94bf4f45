"""Run configuration: one YAML file drives generate, train, eval, ablate and bench-scaling.

Layout (every section optional)::

    seed: 1                 # seeds both the generator and the model/batch order
    data:                   # SyntheticSpec fields
      n_train: 200000
      planted: {pattern_weight: 6.0}
      schema:               # toy schema sizes, or a full FeatureSchema dict (with "groups")
        global_max_len: 100
        id_dim: 4
    model:                  # ModelConfig fields except the schema
      token_dim: 16
      training: {steps: 2000, learning_rate: 0.001}
      ablation: {no_fixed_query: false}
    ablate: {seeds: [1, 2, 3], variants: [full, no_fixed_query, autosplit, self_attention]}
    bench:  {steps: 300, sweep: [{n_blocks: 1}, {n_blocks: 2}, {n_blocks: 4}]}

Precedence is command-line flag > ``--override`` > file > built-in default.
"""
from __future__ import annotations

import copy
import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .data import SyntheticSpec, toy_schema
from .model import ModelConfig
from .tokenizer import ConfigError, FeatureSchema

SECTIONS = ("seed", "data", "model", "ablate", "bench")
VARIANTS = {
    "full": {},
    "no_fixed_query": {"no_fixed_query": True},
    "autosplit": {"autosplit_tokenizer": True},
    "self_attention": {"self_attention_blocks": True},
}
TOY_SCHEMA_KEYS = ("global_max_len", "realtime_max_len", "id_dim", "side_dim")


class _Loader(yaml.SafeLoader):
    """SafeLoader that also reads ``1e-4`` (no dot) as a float, as YAML 1.2 does."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"""^[-+]?(?:[0-9][0-9_]*\.[0-9_]*(?:[eE][-+]?[0-9]+)?
                |[-+]?[0-9][0-9_]*[eE][-+]?[0-9]+
                |\.[0-9_]+(?:[eE][-+]?[0-9]+)?
                |[-+]?\.(?:inf|Inf|INF)
                |\.(?:nan|NaN|NAN))$""", re.X),
    list("-+0123456789."),
)


def _parse(text: str):
    return yaml.load(text, Loader=_Loader)  # noqa: S506 - SafeLoader subclass


def load_yaml(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = _parse(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return raw


def apply_override(raw: dict, item: str) -> None:
    """Set a dotted key from ``KEY=VALUE``; the value is parsed as YAML."""
    key, sep, value = item.partition("=")
    if not sep or not key:
        raise ConfigError(f"override must look like KEY=VALUE, got {item!r}")
    parts = key.split(".")
    node = raw
    for p in parts[:-1]:
        nxt = node.setdefault(p, {})
        if not isinstance(nxt, dict):
            raise ConfigError(f"override {key!r}: {p!r} is not a section")
        node = nxt
    try:
        node[parts[-1]] = _parse(value)
    except yaml.YAMLError as exc:
        raise ConfigError(f"override {key!r}: bad value: {exc}") from exc


@dataclass
class RunConfig:
    seed: int
    data: SyntheticSpec
    model: ModelConfig
    ablate_seeds: list[int] = field(default_factory=lambda: [1, 2, 3])
    ablate_variants: list[str] = field(default_factory=lambda: list(VARIANTS))
    bench_steps: int = 300
    bench_sweep: list[dict] = field(default_factory=list)
    raw: dict = field(default_factory=dict)

    @property
    def schema(self) -> FeatureSchema:
        return self.data.schema

    def run_id(self) -> str:
        blob = json.dumps(self.raw, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def model_config(self, seed: int | None = None, variant: str = "full", **model_overrides) -> ModelConfig:
        """Model config for one run; ``seed`` replaces the training seed."""
        d = copy.deepcopy(self.raw.get("model") or {})
        d.update(model_overrides)
        d["schema"] = self.schema
        train = dict(d.get("training") or {})
        train["seed"] = self.seed if seed is None else seed
        d["training"] = train
        d["ablation"] = {**(d.get("ablation") or {}), **VARIANTS[variant]}
        return ModelConfig.from_dict(d)

    def data_spec(self, seed: int | None = None) -> SyntheticSpec:
        spec = copy.copy(self.data)
        spec.seed = self.seed if seed is None else seed
        return spec


def _schema(spec: SyntheticSpec, d) -> FeatureSchema:
    if d is None:
        d = {}
    if not isinstance(d, dict):
        raise ConfigError("data.schema must be a mapping")
    if "groups" in d:
        return FeatureSchema.from_dict(d)
    unknown = set(d) - set(TOY_SCHEMA_KEYS)
    if unknown:
        raise ConfigError(f"unknown data.schema keys: {sorted(unknown)}")
    return toy_schema(spec, **d)


def build(raw: dict, seed: int | None = None, steps: int | None = None) -> RunConfig:
    raw = copy.deepcopy(raw)
    unknown = set(raw) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    if seed is not None:
        raw["seed"] = seed
    if steps is not None:
        raw.setdefault("model", {}).setdefault("training", {})["steps"] = steps
    run_seed = raw.setdefault("seed", 1)
    if not isinstance(run_seed, int):
        raise ConfigError("seed must be an integer")

    data = dict(raw.get("data") or {})
    schema_raw = data.pop("schema", None)
    data.pop("seed", None)
    try:
        spec = SyntheticSpec(seed=run_seed, **data)
    except TypeError as exc:
        raise ConfigError(f"data: {exc}") from exc
    spec.schema = _schema(spec, schema_raw)
    spec.__post_init__()  # check the schema against the generator

    ablate = raw.get("ablate") or {}
    bench = raw.get("bench") or {}
    variants = list(ablate.get("variants", VARIANTS))
    bad = [v for v in variants if v not in VARIANTS]
    if bad:
        raise ConfigError(f"unknown ablation variants {bad}; choose from {list(VARIANTS)}")
    rc = RunConfig(run_seed, spec, None, list(ablate.get("seeds", [1, 2, 3])), variants,
                   int(bench.get("steps", 300)), list(bench.get("sweep", [])), raw)
    try:
        rc.model = rc.model_config()
    except TypeError as exc:
        raise ConfigError(f"model: {exc}") from exc
    return rc


def load(path, overrides=(), seed: int | None = None, steps: int | None = None) -> RunConfig:
    raw = load_yaml(path)
    for item in overrides:
        apply_override(raw, item)
    return build(raw, seed=seed, steps=steps)
