"""Pipeline manifest: stage outputs with content hashes for provenance.

Re-running a stage with identical inputs and seed must reproduce identical
output hashes; the manifest makes that checkable. Timestamps are recorded for
humans and never participate in any hash.
"""

from __future__ import annotations

import hashlib
import json
from datetime import datetime, timezone
from pathlib import Path

MANIFEST_NAME = "manifest.json"


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def config_hash(effective_config: dict) -> str:
    blob = json.dumps(effective_config, sort_keys=True, ensure_ascii=False)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def record_stage(
    outdir: str | Path,
    stage: str,
    outputs: list[Path],
    effective_config: dict,
    seed: int,
) -> dict:
    """Append/overwrite one stage entry in <outdir>/manifest.json."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    path = outdir / MANIFEST_NAME
    manifest = json.loads(path.read_text(encoding="utf-8")) if path.is_file() else {
        "stages": {}
    }
    manifest["seed"] = seed
    manifest["config_hash"] = config_hash(effective_config)
    manifest["config"] = effective_config
    manifest["stages"][stage] = {
        "outputs": {out.name: file_sha256(out) for out in outputs},
        "completed_at": datetime.now(timezone.utc).isoformat(),
    }
    path.write_text(
        json.dumps(manifest, ensure_ascii=False, sort_keys=True, indent=2) + "\n",
        encoding="utf-8",
    )
    return manifest
