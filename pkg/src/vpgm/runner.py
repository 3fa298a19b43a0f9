"""Run configuration, content digests and stage manifests.

Configuration is merged from defaults, a TOML file (``--config`` or
``$VPGM_CONFIG``), ``VPGM_<KEY>`` environment variables and command-line
flags, later sources winning. Each stage writes a manifest next to its
primary output; a stage whose inputs and parameters match its manifest,
and whose outputs still match their recorded digests, is skipped.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Callable

from . import __version__
from .data import write_json
from .errors import ConfigError, DigestMismatch

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

log = logging.getLogger(__name__)

CONFIG_ENV = "VPGM_CONFIG"
ENV_PREFIX = "VPGM_"
PATH_KEYS = {
    "mock_script", "template_dir", "structure", "spec", "data", "dev_data", "test_data", "out",
    "records", "fit", "reliability", "svg", "clean", "noisy", "run_dir", "report",
}


@dataclass
class RunConfig:
    # provider
    endpoint: str = "http://localhost:8000/v1"
    model: str = "meta-llama/Meta-Llama-3-8B-Instruct"
    temperature: float | None = None
    max_tokens: int = 1024
    timeout: float = 60.0
    max_retries: int = 3
    max_parallel: int = 4
    api_key_env: str = "LLM_API_KEY"
    mock_script: str | None = None
    template_dir: str | None = None
    # data and stages
    structure: str | None = None
    spec: str | None = None
    max_latents: int = 4
    data: str | None = None
    dev_data: str | None = None
    test_data: str | None = None
    out: str | None = None
    records: str | None = None
    fit: str | None = None
    report: str | None = None
    reliability: str | None = None
    svg: str | None = None
    clean: str | None = None
    noisy: str | None = None
    run_dir: str | None = None
    samples: int = 3
    parallel: int = 1
    seed: int | None = None
    beta: float = 1.0
    lambda_init: float = 1.0
    epsilon_smooth: float = 1e-8
    bins: int = 10
    method: str = "bayes_vpgm"
    var: str = "Z2"
    threshold: float = 0.5
    target: str = "correct"
    force: bool = False

    def public(self) -> dict:
        return dataclasses.asdict(self)


def _coerce(name: str, raw, typ: str):
    if raw is None:
        return None
    try:
        if "bool" in typ:
            if isinstance(raw, str):
                if raw.lower() in ("1", "true", "yes", "on"):
                    return True
                if raw.lower() in ("0", "false", "no", "off", ""):
                    return False
                raise ValueError(raw)
            return bool(raw)
        if "int" in typ:
            return int(raw)
        if "float" in typ:
            return float(raw)
        return str(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"config key {name}: cannot interpret {raw!r} as {typ}") from None


def _flatten(d: dict) -> dict:
    out = {}
    for k, v in d.items():
        if isinstance(v, dict):
            out.update(_flatten(v))
        else:
            out[k.replace("-", "_")] = v
    return out


def load_config(flags: dict | None = None, config_path=None, environ=None) -> RunConfig:
    """Merge defaults < file < environment < flags and resolve paths."""
    environ = os.environ if environ is None else environ
    flags = {k: v for k, v in (flags or {}).items() if v is not None}
    types = {f.name: str(f.type) for f in fields(RunConfig)}
    merged: dict = {}

    path = config_path or flags.pop("config", None) or environ.get(CONFIG_ENV)
    base_dir = Path.cwd()
    if path:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} does not exist")
        try:
            file_vals = _flatten(tomllib.loads(p.read_text(encoding="utf-8")))
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"config file {p}: {exc}") from None
        unknown = sorted(set(file_vals) - set(types))
        if unknown:
            raise ConfigError(f"config file {p}: unknown keys {unknown}")
        for k, v in file_vals.items():
            if k in PATH_KEYS and v is not None:
                v = str((p.parent / v).resolve()) if not Path(v).is_absolute() else v
            merged[k] = v
    flags.pop("config", None)

    for name in types:
        env_key = ENV_PREFIX + name.upper()
        if env_key in environ and env_key != CONFIG_ENV:
            merged[name] = environ[env_key]
    for k, v in flags.items():
        if k in types:
            merged[k] = v

    values = {k: _coerce(k, v, types[k]) for k, v in merged.items()}
    for k in PATH_KEYS:
        if values.get(k):
            values[k] = str((base_dir / values[k]).resolve())
    cfg = RunConfig(**values)
    if cfg.samples < 1:
        raise ConfigError("samples (M) must be at least 1")
    if cfg.max_parallel < 1 or cfg.parallel < 1:
        raise ConfigError("parallelism bounds must be at least 1")
    if cfg.beta < 0:
        raise ConfigError("beta must be non-negative")
    if cfg.lambda_init <= 0:
        raise ConfigError("lambda_init must be positive")
    return cfg


def require(cfg: RunConfig, *keys: str) -> None:
    missing = [k for k in keys if getattr(cfg, k) in (None, "")]
    if missing:
        raise ConfigError("missing required setting(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


# -- digests and manifests ---------------------------------------------------

def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def params_digest(params: dict) -> str:
    canon = json.dumps(params, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canon.encode()).hexdigest()


def _rel(path, base: Path) -> str:
    try:
        return os.path.relpath(path, base)
    except ValueError:
        return str(path)


def manifest_path(primary_output) -> Path:
    p = Path(primary_output)
    return p.with_name(p.name + ".manifest.json")


class Stage:
    """One pipeline stage with digest-checked skipping.

    ``inputs`` and ``outputs`` are file paths; ``params`` are the settings
    that influence the outputs.
    """

    def __init__(self, name: str, inputs: list, outputs: list, params: dict):
        self.name = name
        self.inputs = [Path(p) for p in inputs if p]
        self.outputs = [Path(p) for p in outputs if p]
        self.params = params
        self.manifest = manifest_path(self.outputs[0])

    def _input_digests(self) -> dict:
        base = self.manifest.parent
        out = {}
        for p in self.inputs:
            if not p.exists():
                raise ConfigError(f"stage {self.name}: input {p} does not exist")
            out[_rel(p, base)] = file_digest(p)
        return out

    def up_to_date(self) -> bool:
        """True if the stage can be skipped. Raises ``DigestMismatch`` when
        an output recorded by a matching manifest has been altered."""
        if not self.manifest.exists():
            return False
        rec = json.loads(self.manifest.read_text(encoding="utf-8"))
        if rec.get("inputs") != self._input_digests() or rec.get("params") != params_digest(self.params):
            return False
        base = self.manifest.parent
        for p in self.outputs:
            expected = rec.get("outputs", {}).get(_rel(p, base))
            if not p.exists() or expected is None:
                return False
            actual = file_digest(p)
            if actual != expected:
                raise DigestMismatch(str(p), expected, actual)
        return True

    def invalidate(self, keep_partial: bool = False) -> None:
        """Drop the manifest, and the outputs unless ``keep_partial``."""
        if self.manifest.exists():
            self.manifest.unlink()
        if not keep_partial:
            for p in self.outputs:
                if p.exists():
                    p.unlink()

    def record(self, run_id: str) -> dict:
        base = self.manifest.parent
        doc = {
            "run_id": run_id,
            "stage": self.name,
            "tool_version": __version__,
            "created_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
            "params": params_digest(self.params),
            "inputs": self._input_digests(),
            "outputs": {_rel(p, base): file_digest(p) for p in self.outputs},
        }
        write_json(self.manifest, doc)
        return doc


def run_stage(stage: Stage, action: Callable[[], None], run_id: str, force: bool = False,
              resumable: bool = False) -> bool:
    """Run ``action`` unless the stage is up to date. Returns whether it ran.

    Outputs are cleared before running, except for a resumable stage
    without ``force``: its existing output is kept and extended.
    """
    if not force and stage.up_to_date():
        log.info("skip %s (up to date)", stage.name, extra={"event": "skip", "stage": stage.name})
        return False
    stage.invalidate(keep_partial=True)
    if force or not resumable:
        for p in stage.outputs:
            if p.exists():
                p.unlink()
    log.info("run %s", stage.name, extra={"event": "run", "stage": stage.name})
    action()
    stage.record(run_id)
    return True


def make_run_id(cfg: RunConfig) -> str:
    digest = params_digest(cfg.public())[:10]
    return time.strftime("%Y%m%dT%H%M%S", time.gmtime()) + "-" + digest


class JsonEventFormatter(logging.Formatter):
    def format(self, record):
        doc = {
            "ts": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(record.created)),
            "level": record.levelname,
            "logger": record.name,
            "message": record.getMessage(),
        }
        for key in ("event", "stage"):
            if hasattr(record, key):
                doc[key] = getattr(record, key)
        return json.dumps(doc, sort_keys=True)
