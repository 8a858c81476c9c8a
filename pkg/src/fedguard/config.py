"""JSON experiment configs: parsing, dotted-key overrides and stable hashing."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, fields
from pathlib import Path

from .aggregation import PostStage, RuleConfig
from .attacks import AttackConfig
from .harness import DatasetConfig, ExperimentConfig, PartitionConfig
from .models import TrainConfig

__all__ = ["ConfigError", "load_raw", "apply_overrides", "parse_config", "resolved_dict", "config_hash", "DEFAULT_FLTRUST_ROOT"]

DEFAULT_FLTRUST_ROOT = 100

_TOP_KEYS = {
    "seed", "dataset", "partition", "n_clients", "malicious", "model", "train",
    "rule", "attack", "rounds", "eval_every", "root_size", "export_images", "output",
}


class ConfigError(ValueError):
    """Malformed config; ``field`` names the offending dotted key when known."""

    def __init__(self, message: str, field: str | None = None, line: int | None = None):
        self.field = field
        self.line = line
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field:
            where.append(f"field '{field}'")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)


def load_raw(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc.msg} (column {exc.colno})", line=exc.lineno) from exc
    if not isinstance(raw, dict):
        raise ConfigError("top level must be a JSON object")
    return raw


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(raw: dict, overrides) -> dict:
    """Apply ``dotted.key=value`` strings; values are read as JSON, else as plain strings."""
    out = copy.deepcopy(raw)
    for item in overrides or ():
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        parts = key.split(".")
        node = out
        for p in parts[:-1]:
            nxt = node.get(p)
            if nxt is None:
                nxt = node[p] = {}
            if not isinstance(nxt, dict):
                raise ConfigError("cannot descend into a non-object", field=key)
            node = nxt
        node[parts[-1]] = _parse_value(value)
    return out


def _section(raw: dict, name: str, cls, renames: dict | None = None, drop=()):
    data = raw.get(name, {})
    if not isinstance(data, dict):
        raise ConfigError("must be an object", field=name)
    renames = renames or {}
    allowed = {f.name for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        attr = renames.get(key, key)
        if attr not in allowed or key in drop:
            raise ConfigError("unknown key", field=f"{name}.{key}")
        if isinstance(value, list):
            value = tuple(value)
        kwargs[attr] = value
    return kwargs


def _build(cls, kwargs, name):
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc), field=name) from exc


def parse_config(raw: dict) -> ExperimentConfig:
    for key in raw:
        if key not in _TOP_KEYS:
            raise ConfigError("unknown key", field=key)
    if "rule" not in raw:
        raise ConfigError("required field is missing", field="rule")
    rule_raw = raw["rule"]
    if not isinstance(rule_raw, dict) or "name" not in rule_raw:
        raise ConfigError("required field is missing", field="rule.name")
    rule_kw = _section(raw, "rule", RuleConfig, renames={"lambda": "lam"}, drop=("lam",))
    stages = []
    for j, st in enumerate(rule_kw.pop("postprocess", ())):
        if not isinstance(st, dict) or "name" not in st:
            raise ConfigError("each stage needs a name", field=f"rule.postprocess[{j}]")
        stages.append(_build(PostStage, st, f"rule.postprocess[{j}]"))
    rule = _build(RuleConfig, {**rule_kw, "postprocess": tuple(stages)}, "rule")

    model_raw = raw.get("model", {})
    if isinstance(model_raw, str):
        model_raw = {"kind": model_raw}
    if not isinstance(model_raw, dict) or set(model_raw) - {"kind", "hidden"}:
        raise ConfigError("expected {kind, hidden}", field="model")

    top = {}
    for key in ("seed", "n_clients", "rounds", "eval_every", "root_size", "export_images"):
        if key in raw:
            if not isinstance(raw[key], int) or isinstance(raw[key], bool):
                raise ConfigError("must be an integer", field=key)
            top[key] = raw[key]
    if "malicious" in raw:
        mal = raw["malicious"]
        if not isinstance(mal, list) or not all(isinstance(m, int) for m in mal):
            raise ConfigError("must be a list of client ids", field="malicious")
        top["malicious"] = tuple(mal)
    if rule.name == "fltrust" and "root_size" not in raw:
        top["root_size"] = DEFAULT_FLTRUST_ROOT

    kwargs = dict(
        rule=rule,
        dataset=_build(DatasetConfig, _section(raw, "dataset", DatasetConfig), "dataset"),
        partition=_build(PartitionConfig, _section(raw, "partition", PartitionConfig), "partition"),
        train=_build(TrainConfig, _section(raw, "train", TrainConfig), "train"),
        attack=_build(AttackConfig, _section(raw, "attack", AttackConfig), "attack"),
        model=model_raw.get("kind", "logistic"),
        hidden=model_raw.get("hidden", 32),
        **top,
    )
    cfg = _build(ExperimentConfig, kwargs, "config")
    if cfg.model not in ("logistic", "mlp"):
        raise ConfigError(f"unknown model kind {cfg.model!r}", field="model.kind")
    return cfg


def resolved_dict(cfg: ExperimentConfig) -> dict:
    """Every setting with defaults filled in, in the config-file key layout."""
    d = asdict(cfg)
    d.pop("threads", None)
    rule = d["rule"]
    rule["lambda"] = rule.pop("lam")
    d["model"] = {"kind": d.pop("model"), "hidden": d.pop("hidden")}
    d["malicious"] = list(d["malicious"])
    return json.loads(json.dumps(d))  # tuples -> lists


def config_hash(cfg: ExperimentConfig) -> str:
    blob = json.dumps(resolved_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()
