"""Run manifests: enough provenance to re-execute a run bit-identically."""

from __future__ import annotations

import datetime
import hashlib
import json
import subprocess
from pathlib import Path

from . import __version__


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def version_string() -> str:
    try:
        described = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True,
            text=True,
            timeout=5,
        ).stdout.strip()
    except Exception:
        described = ""
    return f"unoranic {__version__}" + (f" ({described})" if described else "")


def write_manifest(
    out_dir,
    config: dict,
    seeds: dict,
    artifacts: list,
    started: datetime.datetime,
    path_name: str = "manifest.json",
) -> Path:
    out_dir = Path(out_dir)
    manifest = {
        "version": version_string(),
        "config": config,
        "seeds": seeds,
        "started_utc": started.isoformat(),
        "finished_utc": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "artifacts": [
            {"path": str(Path(a).relative_to(out_dir)), "sha256": _sha256(Path(a))}
            for a in artifacts
        ],
    }
    path = out_dir / path_name
    path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return path
