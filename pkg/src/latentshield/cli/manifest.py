"""Run manifest: per-stage keys, artifacts, timing and status, written atomically."""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

from .. import __version__

MANIFEST_NAME = "manifest.json"


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Manifest:
    def __init__(self, out_dir, config_hash: str):
        self.out_dir = Path(out_dir)
        self.path = self.out_dir / MANIFEST_NAME
        self.data = {"config_hash": config_hash, "code_version": __version__, "stages": {}}
        if self.path.exists():
            try:
                old = json.loads(self.path.read_text())
                self.data["stages"] = old.get("stages", {})
            except json.JSONDecodeError:
                pass
        self.data["config_hash"] = config_hash

    def stage(self, name):
        return self.data["stages"].get(name)

    def is_current(self, name: str, key: str) -> bool:
        st = self.stage(name)
        if not st or st.get("key") != key or st.get("status") not in ("complete", "cached"):
            return False
        return all((self.out_dir / p).exists() for p in st.get("artifacts", []))

    def artifacts(self, name: str) -> list:
        st = self.stage(name)
        return [] if not st else list(st.get("artifacts", []))

    def artifact_digest(self, name: str) -> str:
        """Combined hash of a stage's recorded artifacts (upstream key for dependents)."""
        st = self.stage(name)
        if not st:
            return ""
        return st.get("digest", "")

    def record(self, name: str, key: str, artifacts, seconds: float, status="complete", extra=None):
        rel = sorted(str(Path(p).resolve().relative_to(self.out_dir.resolve())) for p in artifacts)
        h = hashlib.sha256()
        for p in rel:
            h.update(p.encode())
            h.update(file_digest(self.out_dir / p).encode())
        entry = {"key": key, "status": status, "artifacts": rel, "seconds": round(seconds, 3),
                 "digest": h.hexdigest()}
        if extra:
            entry.update(extra)
        self.data["stages"][name] = entry
        self.write()

    def mark_cached(self, name: str):
        self.data["stages"][name]["status"] = "cached"
        self.write()

    def write(self):
        self.out_dir.mkdir(parents=True, exist_ok=True)
        tmp = self.path.with_name(self.path.name + ".tmp")
        tmp.write_text(json.dumps(self.data, indent=2, sort_keys=True))
        os.replace(tmp, self.path)
