"""Run configuration: INI-style key = value sections, strictly validated.

Every key is declared in a schema with a parser and default; unknown
sections or keys are rejected outright so typos cannot silently fall
back to defaults. Credentials are never stored in the file, only the
names of environment variables that hold them.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field
from pathlib import Path


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


_SCHEMA: dict[str, dict[str, tuple]] = {
    "run": {
        "workdir": (str, "."),
        "seed": (int, 0),
        "concurrency": (int, 4),
    },
    "concepts": {
        "file": (str, ""),
    },
    "captions": {
        "endpoint": (str, ""),
        "model": (str, ""),
        "api_key_env": (str, ""),
        "n_per_concept": (int, 1),
        "max_words": (int, 25),
        "max_attempts": (int, 4),
        "dedup": (_parse_bool, True),
        "drop_concept_absent": (_parse_bool, False),
    },
    "matching": {
        "raw_substring": (_parse_bool, False),
    },
    "balance": {
        "target_size": (int, 0),
        "tolerance": (float, 0.5),
        "combiner": (str, "max"),
        "random_sampling": (_parse_bool, False),
    },
    "images": {
        "endpoint": (str, ""),
        "api_key_env": (str, ""),
        "guidance_scale": (float, 2.0),
        "num_steps": (int, 50),
        "gen_width": (int, 512),
        "gen_height": (int, 512),
        "store_size": (int, 256),
        "retries": (int, 3),
        "mock": (_parse_bool, False),
    },
    "train": {
        "epochs": (int, 20),
        "batch_size": (int, 64),
        "base_lr": (float, 1e-2),
        "weight_decay": (float, 1e-4),
        "warmup_epochs": (int, 1),
        "embed_dim": (int, 64),
        "augment": (_parse_bool, False),
    },
    "eval": {
        "shots": (int, 1),
        "recall_k": (int, 1),
    },
    "nsfw": {
        "endpoint": (str, ""),
        "model": (str, ""),
        "api_key_env": (str, ""),
        "retries": (int, 3),
        "mock_denylist_file": (str, ""),
    },
}


@dataclass
class RunConfig:
    values: dict[str, dict[str, object]] = field(default_factory=dict)

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    @property
    def workdir(self) -> Path:
        return Path(self.values["run"]["workdir"])

    @property
    def seed(self) -> int:
        return int(self.values["run"]["seed"])

    @property
    def concurrency(self) -> int:
        return int(self.values["run"]["concurrency"])

    def api_key(self, section: str) -> str | None:
        env_name = str(self.values[section]["api_key_env"])
        return os.environ.get(env_name) if env_name else None


def default_config() -> RunConfig:
    return RunConfig(
        values={
            section: {key: default for key, (_p, default) in keys.items()}
            for section, keys in _SCHEMA.items()
        }
    )


def load_config(path: Path | None) -> RunConfig:
    """Parse and validate a config file; None yields pure defaults."""
    cfg = default_config()
    if path is None:
        return cfg
    parser = configparser.ConfigParser(interpolation=None)
    with open(path, "r", encoding="utf-8") as f:
        parser.read_file(f)
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ValueError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            if key not in _SCHEMA[section]:
                raise ValueError(f"unknown config key [{section}] {key}")
            parse, _default = _SCHEMA[section][key]
            try:
                cfg.values[section][key] = parse(raw)
            except ValueError as exc:
                raise ValueError(f"invalid value for [{section}] {key}: {exc}") from exc
    _validate_paths(cfg)
    return cfg


def _validate_paths(cfg: RunConfig) -> None:
    concept_file = str(cfg.values["concepts"]["file"])
    if concept_file and not Path(concept_file).exists():
        raise ValueError(f"concepts file not found: {concept_file}")
    denylist = str(cfg.values["nsfw"]["mock_denylist_file"])
    if denylist and not Path(denylist).exists():
        raise ValueError(f"denylist file not found: {denylist}")
    combiner = str(cfg.values["balance"]["combiner"])
    if combiner not in ("max", "noisy_or"):
        raise ValueError(f"invalid balance combiner: {combiner}")
