"""Run configuration: dataclass sections, TOML loading and dotted overrides."""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping, Optional

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .estimators import EQUIVALENCE_MODES, METHODS


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


@dataclass(frozen=True)
class BackendSection:
    kind: str = "synthetic"  # synthetic | remote
    world: str = ""  # world.json for the synthetic backend
    url: str = ""
    model: str = ""
    token_env: str = ""
    timeout: float = 120.0
    max_in_flight: int = 8
    # optional separate models for the summary and the equivalence judge
    summary_url: str = ""
    summary_model: str = ""
    judge_url: str = ""
    judge_model: str = ""


@dataclass(frozen=True)
class RetrievalSection:
    corpus: str = ""
    index: str = ""  # optional serialized snapshot
    k: int = 3
    rerank_url: str = ""
    pool_size: int = 20
    rerank_timeout: float = 30.0


@dataclass(frozen=True)
class EngineSection:
    max_steps: int = 10
    most_likely_temperature: float = 0.7
    sample_temperature: float = 1.0
    max_tokens: int = 512
    retries: int = 2
    backoff: float = 0.5


@dataclass(frozen=True)
class EstimatorsSection:
    methods: tuple[str, ...] = ("R2C", "SelfC")
    B: int = 10
    equivalence: str = "normalized-exact"
    ptrue_use_samples: bool = True
    reference: str = "SelfC"  # method the report tests others against


@dataclass(frozen=True)
class DownstreamSection:
    tau: float = 0.9
    calibrate_metric: str = "abstain_accuracy"
    aggregation: str = "sum"
    clustering: bool = True
    selection_method: str = "R2C"


@dataclass(frozen=True)
class RunSection:
    dataset: str = ""
    master_seed: int = 0
    workers: int = 4
    runs_dir: str = "runs"
    run_id: str = ""


@dataclass(frozen=True)
class Config:
    backend: BackendSection = field(default_factory=BackendSection)
    retrieval: RetrievalSection = field(default_factory=RetrievalSection)
    engine: EngineSection = field(default_factory=EngineSection)
    estimators: EstimatorsSection = field(default_factory=EstimatorsSection)
    downstream: DownstreamSection = field(default_factory=DownstreamSection)
    run: RunSection = field(default_factory=RunSection)
    prompts: Mapping[str, str] = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {f.name: asdict(getattr(self, f.name)) for f in fields(self) if f.name != "prompts"}
        d["estimators"]["methods"] = list(d["estimators"]["methods"])
        d["prompts"] = dict(sorted(self.prompts.items()))
        return d

    def digest(self) -> str:
        return config_digest(self.to_dict())


# execution knobs that cannot change results; left out of the digest so a run
# can be resumed with a different degree of parallelism
_NOT_DIGESTED = {("run", "workers"), ("run", "runs_dir"), ("run", "run_id"), ("backend", "max_in_flight")}


def config_digest(resolved: Mapping) -> str:
    pruned = {
        section: {k: v for k, v in values.items() if (section, k) not in _NOT_DIGESTED}
        if isinstance(values, Mapping) else values
        for section, values in resolved.items()
    }
    blob = json.dumps(pruned, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _coerce(section: str, name: str, default: Any, value: Any) -> Any:
    where = f"{section}.{name}"
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, tuple):
        if isinstance(value, str):
            value = [v.strip() for v in value.split(",") if v.strip()]
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        return tuple(str(v) for v in value)
    if not isinstance(value, str):
        raise ConfigError(f"{where}: expected a string, got {value!r}")
    return value


def _build_section(name: str, cls, raw: Mapping) -> Any:
    if not isinstance(raw, Mapping):
        raise ConfigError(f"[{name}] must be a table")
    base = cls()
    known = {f.name for f in fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"{name}.{sorted(unknown)[0]}: unknown field")
    updates = {k: _coerce(name, k, getattr(base, k), v) for k, v in raw.items()}
    return replace(base, **updates)


def validate(cfg: Config) -> Config:
    est = cfg.estimators
    for m in est.methods:
        if m not in METHODS:
            raise ConfigError(f"estimators.methods: unknown method {m!r}; expected one of {METHODS}")
    if not est.methods:
        raise ConfigError("estimators.methods: at least one method required")
    if est.B < 1:
        raise ConfigError("estimators.B: must be >= 1")
    if est.equivalence not in EQUIVALENCE_MODES:
        raise ConfigError(f"estimators.equivalence: expected one of {EQUIVALENCE_MODES}")
    if cfg.backend.kind not in ("synthetic", "remote"):
        raise ConfigError("backend.kind: expected 'synthetic' or 'remote'")
    if cfg.backend.kind == "remote" and not cfg.backend.url:
        raise ConfigError("backend.url: required for the remote backend")
    if cfg.backend.max_in_flight < 1:
        raise ConfigError("backend.max_in_flight: must be >= 1")
    if cfg.retrieval.k < 1:
        raise ConfigError("retrieval.k: must be >= 1")
    if cfg.engine.max_steps < 1:
        raise ConfigError("engine.max_steps: must be >= 1")
    for name in ("most_likely_temperature", "sample_temperature"):
        if not 0.0 <= getattr(cfg.engine, name) <= 2.0:
            raise ConfigError(f"engine.{name}: must lie in [0, 2]")
    if cfg.downstream.aggregation not in ("sum", "mean"):
        raise ConfigError("downstream.aggregation: expected 'sum' or 'mean'")
    if cfg.downstream.calibrate_metric not in ("abstain_accuracy", "abstain_f1"):
        raise ConfigError("downstream.calibrate_metric: expected 'abstain_accuracy' or 'abstain_f1'")
    if cfg.run.workers < 1:
        raise ConfigError("run.workers: must be >= 1")
    from .prompts import DEFAULTS

    for name in cfg.prompts:
        if name not in DEFAULTS:
            raise ConfigError(f"prompts.{name}: unknown template")
    return cfg


_SECTIONS = {
    "backend": BackendSection,
    "retrieval": RetrievalSection,
    "engine": EngineSection,
    "estimators": EstimatorsSection,
    "downstream": DownstreamSection,
    "run": RunSection,
}


def from_mapping(raw: Mapping) -> Config:
    unknown = set(raw) - set(_SECTIONS) - {"prompts"}
    if unknown:
        raise ConfigError(f"[{sorted(unknown)[0]}]: unknown section")
    sections = {name: _build_section(name, cls, raw.get(name, {})) for name, cls in _SECTIONS.items()}
    prompts = raw.get("prompts", {})
    if not isinstance(prompts, Mapping) or not all(isinstance(v, str) for v in prompts.values()):
        raise ConfigError("[prompts] must map template names to strings")
    return validate(Config(**sections, prompts=dict(prompts)))


def _parse_value(text: str) -> Any:
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def apply_overrides(raw: dict, overrides: Mapping[str, str]) -> dict:
    """Apply ``{"section.key": "value"}`` overrides; values are parsed as TOML literals when possible."""
    out = {k: dict(v) if isinstance(v, Mapping) else v for k, v in raw.items()}
    for dotted, text in overrides.items():
        if "." not in dotted:
            raise ConfigError(f"{dotted}: override must be of the form section.key")
        section, key = dotted.split(".", 1)
        out.setdefault(section, {})[key] = _parse_value(text) if isinstance(text, str) else text
    return out


def load_config(path: Optional[str] = None, overrides: Optional[Mapping[str, str]] = None) -> Config:
    raw: dict = {}
    if path:
        p = Path(path)
        try:
            raw = tomllib.loads(p.read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        # relative paths in the file resolve against its directory
        base = p.resolve().parent
        for section, key in (("backend", "world"), ("retrieval", "corpus"), ("retrieval", "index"), ("run", "dataset"), ("run", "runs_dir")):
            v = raw.get(section, {}).get(key)
            if isinstance(v, str) and v and not Path(v).is_absolute():
                raw[section][key] = str(base / v)
    return from_mapping(apply_overrides(raw, overrides or {}))


def dump_toml(cfg: Config) -> str:
    """Minimal TOML writer for the flat section layout used here."""

    def lit(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, (int, float)):
            return repr(v)
        if isinstance(v, (list, tuple)):
            return "[" + ", ".join(lit(x) for x in v) + "]"
        return json.dumps(v)

    lines = []
    for section, values in cfg.to_dict().items():
        if section == "prompts" and not values:
            continue
        lines.append(f"[{section}]")
        lines += [f"{k} = {lit(v)}" for k, v in values.items()]
        lines.append("")
    return "\n".join(lines)
