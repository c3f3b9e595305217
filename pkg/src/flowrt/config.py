"""Runtime configuration, loadable from TOML/JSON and overridable by flags."""

from __future__ import annotations

import json
import os
import sys
from dataclasses import dataclass, field, fields
from enum import Enum
from pathlib import Path
from typing import Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ScratchUnwritable, WorkerSpawnFailure
from .scheduler import Policy


class Backend(Enum):
    THREADS = "threads"
    PROCS = "procs"

    @classmethod
    def parse(cls, name: str) -> "Backend":
        try:
            return cls(name.lower())
        except ValueError:
            raise ValueError(
                f"unknown backend {name!r}; expected threads|procs") from None


@dataclass
class RuntimeConfig:
    backend: Backend = Backend.THREADS
    worker_count: int = 4
    virtual_node_count: int = 1
    scheduler_policy: Policy = Policy.FIFO
    max_retries: int = 0
    scratch_dir: Optional[Path] = None  # None = private temp dir per session
    trace_enabled: bool = False
    graph_export_enabled: bool = False
    base_seed: int = 0
    app_name: str = "app"
    output_dir: Path = field(default_factory=Path.cwd)

    def validate(self) -> None:
        if self.worker_count < 1:
            raise WorkerSpawnFailure(
                f"worker_count must be >= 1, got {self.worker_count}")
        if self.virtual_node_count < 1:
            raise WorkerSpawnFailure(
                f"virtual_node_count must be >= 1, got "
                f"{self.virtual_node_count}")
        if self.max_retries < 0:
            raise WorkerSpawnFailure(
                f"max_retries must be >= 0, got {self.max_retries}")
        if self.backend is Backend.PROCS:
            if self.worker_count % self.virtual_node_count != 0:
                raise WorkerSpawnFailure(
                    f"worker_count {self.worker_count} not divisible across "
                    f"{self.virtual_node_count} virtual nodes")
        if self.scratch_dir is not None:
            p = Path(self.scratch_dir)
            if not p.is_dir():
                raise ScratchUnwritable(f"{p} does not exist")
            if not os.access(p, os.W_OK):
                raise ScratchUnwritable(f"{p} is not writable")

    @property
    def workers_per_node(self) -> int:
        return self.worker_count // self.virtual_node_count

    def format(self) -> str:
        """Stable one-line-per-field rendering of the effective config."""
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, Enum):
                v = v.value
            elif v is None:
                v = "(auto)"
            lines.append(f"config.{f.name} = {v}")
        return "\n".join(lines)


_PARSERS = {
    "backend": Backend.parse,
    "scheduler_policy": Policy.parse,
    "scratch_dir": Path,
    "output_dir": Path,
}


def config_from_dict(doc: dict) -> RuntimeConfig:
    known = {f.name for f in fields(RuntimeConfig)}
    kwargs = {}
    for key, value in doc.items():
        if key not in known:
            raise ValueError(f"unknown config key {key!r}")
        parser = _PARSERS.get(key)
        kwargs[key] = parser(value) if parser else value
    return RuntimeConfig(**kwargs)


def load_config(path) -> RuntimeConfig:
    """Read a RuntimeConfig from a .toml or .json file."""
    p = Path(path)
    if p.suffix == ".json":
        doc = json.loads(p.read_text(encoding="utf-8"))
    elif p.suffix == ".toml":
        with open(p, "rb") as fh:
            doc = tomllib.load(fh)
    else:
        raise ValueError(f"config file must be .toml or .json, got {p.name}")
    return config_from_dict(doc)
