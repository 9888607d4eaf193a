"""TOML run configuration, dotted-key overrides and the run manifest."""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import tomli
import tomli_w

from . import __version__
from .bench import OracleConfig
from .search import SearchConfig

SCHEMAS = {
    "dataset_csv": "x1,x2,label/1",
    "bench_csv": "arch_id,op_indices,val_acc,test_acc,seed/1",
    "trace_jsonl": "distnas-trace/1",
    "dist_json": "distnas-dist/1",
    "weights": "distnas-weights/1",
    "scores_csv": "arch_id,metric,score,init_seed/1",
    "diag_csv": "step,trace_est,dom_eig,measured_gap,taylor_gap/1",
    "report_csv": "step,arch_id,op_indices,val_acc,regret,rank/1",
    "sweep_csv": "distnas-sweep/1",
}


class ConfigError(ValueError):
    """Malformed or unknown configuration; maps to CLI exit code 3."""


def defaults() -> dict:
    search = SearchConfig().to_dict()
    search["checkpoint_every"] = 100  # the CLI keeps a resumable checkpoint by default
    return {
        "data": {"kind": "moons", "n": 2000, "noise": 0.15, "seed": 0, "num_classes": 3},
        "oracle": dataclasses.asdict(OracleConfig()),
        "search": search,
        "diag": {"every": 10, "probes": 16, "iters": 30},
        "sweep": {"seeds": [0, 1, 2, 3, 4], "grid": {"M": [1, 2, 3, 4]}},
    }


# tables whose keys are free-form
_OPEN_TABLES = {("sweep", "grid")}


def merge(base: dict, new: dict, _path=()) -> dict:
    """Recursive merge; unknown keys are rejected so typos fail loudly."""
    out = copy.deepcopy(base)
    for k, v in new.items():
        path = _path + (k,)
        if k not in out and _path not in _OPEN_TABLES:
            raise ConfigError(f"unknown config key {'.'.join(path)}")
        if isinstance(v, dict) and isinstance(out.get(k), dict) and path not in _OPEN_TABLES:
            out[k] = merge(out[k], v, path)
        else:
            out[k] = v
    return out


def load_config(path=None, overrides=()) -> dict:
    cfg = defaults()
    if path is not None:
        try:
            with open(path, "rb") as fh:
                cfg = merge(cfg, tomli.load(fh))
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for item in overrides:
        cfg = apply_override(cfg, item)
    return cfg


def _parse_value(text):
    try:
        return tomli.loads(f"v = {text}")["v"]
    except tomli.TOMLDecodeError:
        return text  # bare strings need no quoting on the command line


def apply_override(cfg: dict, item: str) -> dict:
    """Apply one ``table.key=value`` override (value parsed as a TOML literal)."""
    key, sep, text = item.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"override {item!r} is not of the form table.key=value")
    parts = key.strip().split(".")
    nested = _parse_value(text.strip())
    for p in reversed(parts):
        nested = {p: nested}
    return merge(cfg, nested)


def dump_config(cfg: dict) -> str:
    """TOML text; keys whose value is None are written as comments."""
    lines = []
    for table, body in cfg.items():
        plain = {k: v for k, v in body.items() if v is not None and not isinstance(v, dict)}
        subs = {k: v for k, v in body.items() if isinstance(v, dict)}
        lines.append(f"[{table}]")
        text = tomli_w.dumps(plain).rstrip()
        if text:
            lines.append(text)
        lines += [f"# {k} = (unset)" for k, v in body.items() if v is None]
        for k, v in subs.items():
            lines += ["", f"[{table}.{k}]", tomli_w.dumps(v).rstrip()]
        lines.append("")
    return "\n".join(lines)


def config_hash(cfg: dict) -> str:
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def search_config(cfg: dict) -> SearchConfig:
    try:
        return SearchConfig.from_dict(cfg["search"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"[search]: {exc}") from exc


def oracle_config(cfg: dict) -> OracleConfig:
    try:
        return OracleConfig(**cfg["oracle"])
    except TypeError as exc:
        raise ConfigError(f"[oracle]: {exc}") from exc


@dataclass
class RunManifest:
    command: str
    config_hash: str
    seeds: dict
    artifacts: dict = field(default_factory=dict)
    version: str = __version__
    schemas: dict = field(default_factory=lambda: dict(SCHEMAS))

    def write(self, path):
        """Artifact paths are stored relative to the manifest's directory."""
        path = Path(path)
        base = path.parent.resolve()
        rec = dataclasses.asdict(self)
        rec["artifacts"] = {k: os.path.relpath(Path(v).resolve(), base) for k, v in self.artifacts.items()}
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(rec, indent=1, sort_keys=True) + "\n")
        return path

    @classmethod
    def read(cls, path):
        return cls(**json.loads(Path(path).read_text()))
