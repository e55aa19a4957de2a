"""Run manifests: provenance records for every produced artifact.

``manifest.json`` holds only deterministic content, so two identical runs
write byte-identical manifests. Wall-clock timing goes to the sidecar named
in its ``timing_file`` field.
"""
from __future__ import annotations

import hashlib
import json
import platform
import sys
from dataclasses import asdict, dataclass, field
from importlib import metadata
from pathlib import Path


def tool_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        from . import __version__
        return __version__


def platform_fingerprint() -> dict:
    import numpy
    import torch
    return {"python": sys.version.split()[0], "machine": platform.machine(),
            "system": platform.system(), "numpy": numpy.__version__,
            "torch": torch.__version__}


@dataclass
class RunManifest:
    command: str
    config_hash: str | None = None
    lineage: list = field(default_factory=list)
    inputs: dict = field(default_factory=dict)
    artifacts: list = field(default_factory=list)
    metrics: dict = field(default_factory=dict)
    tool_version: str = field(default_factory=tool_version)
    platform: dict = field(default_factory=platform_fingerprint)
    timing_file: str = "timing.json"

    @property
    def manifest_id(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["manifest_id"] = self.manifest_id
        return d

    def write(self, directory, wall_clock: dict | None = None) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / "manifest.json"
        path.write_text(json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n")
        if wall_clock is not None:
            (directory / self.timing_file).write_text(
                json.dumps({"manifest_id": self.manifest_id, **wall_clock},
                           sort_keys=True, indent=1) + "\n")
        return path


def read_manifest(path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    return json.loads(path.read_text())
