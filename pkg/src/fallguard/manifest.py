"""Run manifests: every output artifact gets a sibling JSON manifest tying
it to the exact config, seeds, code version, and input artifacts that
produced it, so any result can be regenerated bit-for-bit."""

from __future__ import annotations

import hashlib
import json
import platform
import time
from pathlib import Path

from . import __version__


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(output_path, subcommand: str, config_hash: str,
                   seed: int, inputs: dict[str, str],
                   extra: dict | None = None,
                   started: float | None = None) -> Path:
    output_path = Path(output_path)
    input_hashes = {
        name: file_hash(p) for name, p in inputs.items() if Path(p).exists()
    }
    manifest = {
        "subcommand": subcommand,
        "config_hash": config_hash,
        "code_version": __version__,
        "seed": seed,
        "inputs": {str(k): v for k, v in input_hashes.items()},
        "outputs": [output_path.name],
        "wall_clock_s": (time.time() - started) if started else None,
        "host": {
            "platform": platform.platform(),
            "python": platform.python_version(),
        },
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    if extra:
        manifest.update(extra)
    path = output_path.with_name(output_path.name + ".manifest.json")
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path
