"""Run manifests: every artifact directory records the exact configuration,
input content hashes and seed that produced it, so any output can be traced
and reproduced bit for bit.

The manifest hash covers everything except wall-clock metadata; two runs of
the same command agree on the hash even though their timestamps differ.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__

MANIFEST_NAME = "manifest.json"


def hash_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def hash_path(path) -> str:
    """Content hash of a file, or of a directory tree (file names plus
    their hashes, in sorted order)."""
    path = Path(path)
    if path.is_dir():
        digest = hashlib.sha256()
        for child in sorted(p for p in path.rglob("*") if p.is_file()):
            digest.update(str(child.relative_to(path)).encode())
            digest.update(hash_bytes(child.read_bytes()).encode())
        return digest.hexdigest()
    return hash_bytes(path.read_bytes())


@dataclass
class RunManifest:
    """Provenance record for one CLI command."""

    command: str
    config: dict
    input_hashes: dict
    seed: int
    tool_version: str = __version__
    wall_clock: dict = field(default_factory=dict)

    def content_hash(self) -> str:
        """Hash of the manifest with wall-clock metadata excluded, so the
        value is identical across reruns of the same command."""
        body = {
            "command": self.command,
            "config": self.config,
            "input_hashes": self.input_hashes,
            "seed": self.seed,
            "tool_version": self.tool_version,
        }
        return hash_bytes(json.dumps(body, sort_keys=True).encode())

    def to_dict(self) -> dict:
        return {
            "command": self.command,
            "config": self.config,
            "input_hashes": self.input_hashes,
            "seed": self.seed,
            "tool_version": self.tool_version,
            "manifest_hash": self.content_hash(),
            "wall_clock": self.wall_clock,
        }


def start_clock() -> dict:
    return {"started_unix": time.time()}


def finish_clock(clock: dict) -> dict:
    now = time.time()
    clock["finished_unix"] = now
    clock["duration_s"] = now - clock["started_unix"]
    return clock


def write_manifest(out_dir, manifest: RunManifest) -> str:
    """Write manifest.json into out_dir; returns the manifest hash that
    other artifacts in the directory should reference."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = manifest.to_dict()
    with open(out_dir / MANIFEST_NAME, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return payload["manifest_hash"]


def read_manifest(out_dir) -> dict:
    with open(Path(out_dir) / MANIFEST_NAME) as fh:
        return json.load(fh)
