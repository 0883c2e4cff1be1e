"""Flat key=value pipeline configuration.

Config files hold one `key = value` pair per line; `#` starts a comment.
Relative paths are resolved against the config file's directory. Unknown
keys are a configuration error so typos fail loudly.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError

_BOOL_TRUE = {"1", "true", "on", "yes"}
_BOOL_FALSE = {"0", "false", "off", "no"}

# dataclass field name -> config file key (only where they differ)
_KEY_ALIASES = {"lam": "lambda"}

_PATH_FIELDS = {
    "corpus_lm",
    "corpus_store",
    "corpus_valid",
    "corpus_test",
    "lm",
    "datastore",
    "index",
    "adaptor",
    "datastore_gm",
    "index_gm",
    "datastore_dr",
    "index_dr",
    "datastore_all",
    "index_all",
    "adaptor_all",
}


@dataclass
class PipelineConfig:
    # corpus splits
    corpus_lm: str = "data/lm.txt"
    corpus_store: str = "data/store.txt"
    corpus_valid: str = "data/valid.txt"
    corpus_test: str = "data/test.txt"
    # artifacts
    lm: str = "artifacts/lm.knnl"
    datastore: str = "artifacts/base.knnd"
    index: str = "artifacts/base.knni"
    adaptor: str = "artifacts/adaptor.knna"
    datastore_gm: str = "artifacts/gm.knnd"
    index_gm: str = "artifacts/gm.knni"
    datastore_dr: str = "artifacts/dr.knnd"
    index_dr: str = "artifacts/dr.knni"
    datastore_all: str = "artifacts/all.knnd"
    index_all: str = "artifacts/all.knni"
    adaptor_all: str = "artifacts/all.knna"
    # interpolation / retrieval
    lam: float = 0.25
    k: int = 1024
    nlist: int = 0  # 0 = 4 * sqrt(N), rounded
    nprobe: int = 32
    pq_m: int = 0  # 0 = product quantization off
    pq_bits: int = 8
    ivf_train_sample: int = 0  # 0 = train the coarse quantizer on all keys
    ivf_iters: int = 25
    distance_power: float = 2.0  # exponent of the L2 distance fed to exp(-d)
    # reference model
    encoder_dim: int = 64
    encoder_gamma: float = 0.5
    encoder_window: int = 8
    lm_order: int = 3
    lm_alpha: float = 0.1
    # adaptive retrieval
    ar_prune_fraction: float = 0.5
    ar_features: str = "all"
    ar_l1: float = 0.05
    ar_lr: float = 0.0005
    ar_epochs: int = 20
    ar_batch: int = 256
    # pruning / reduction defaults
    gm_k: int = 30
    dr_dim: int = 16
    dr_rotate: bool = True
    # run environment
    seed: int = 0
    threads: int = 1


def _coerce(name: str, kind: type, raw: str):
    raw = raw.strip()
    if kind is bool:
        low = raw.lower()
        if low in _BOOL_TRUE:
            return True
        if low in _BOOL_FALSE:
            return False
        raise ConfigError(f"config key {name!r}: expected a boolean, got {raw!r}")
    try:
        return kind(raw)
    except ValueError as exc:
        raise ConfigError(f"config key {name!r}: {exc}") from exc


def parse_config_file(path: str | Path) -> dict[str, str]:
    entries: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected key = value, got {line!r}")
        key, value = stripped.split("=", 1)
        entries[key.strip()] = value.strip()
    return entries


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> PipelineConfig:
    """Defaults, then file entries, then explicit overrides."""
    cfg = PipelineConfig()
    by_key = {}
    for f in fields(PipelineConfig):
        by_key[_KEY_ALIASES.get(f.name, f.name)] = f
    if path is not None:
        base = Path(path).resolve().parent
        for key, raw in parse_config_file(path).items():
            f = by_key.get(key)
            if f is None:
                raise ConfigError(f"{path}: unknown config key {key!r}")
            value = _coerce(key, type(getattr(cfg, f.name)), raw)
            if f.name in _PATH_FIELDS:
                p = Path(value)
                value = str(p if p.is_absolute() else base / p)
            setattr(cfg, f.name, value)
    for name, value in (overrides or {}).items():
        if value is None:
            continue
        if not hasattr(cfg, name):
            raise ConfigError(f"unknown config field {name!r}")
        setattr(cfg, name, value)
    return cfg


def config_hash(cfg: PipelineConfig) -> str:
    """Short fingerprint of the resolved configuration."""
    lines = []
    for f in sorted(fields(PipelineConfig), key=lambda f: f.name):
        lines.append(f"{_KEY_ALIASES.get(f.name, f.name)}={getattr(cfg, f.name)}")
    return hashlib.sha256("\n".join(lines).encode("utf-8")).hexdigest()[:12]


def write_config(cfg: PipelineConfig, path: str | Path) -> None:
    lines = []
    for f in fields(PipelineConfig):
        key = _KEY_ALIASES.get(f.name, f.name)
        value = getattr(cfg, f.name)
        if isinstance(value, bool):
            value = "on" if value else "off"
        lines.append(f"{key} = {value}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
