"""Content-addressed artifact cache.

Trained models and other expensive artifacts are stored under a key derived
from a canonical JSON encoding of everything that defines them (dataset
parameters, architecture, seeds, training knobs). Rerunning a protocol with
an unchanged config therefore performs no retraining. Writes are atomic
(temp file + rename); eviction is manual.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from pathlib import Path

import torch


def canonical_json(payload) -> str:
    """Stable JSON encoding: sorted keys, no whitespace drift."""
    return json.dumps(payload, sort_keys=True, separators=(",", ":"), default=_jsonify)


def _jsonify(obj):
    if hasattr(obj, "tolist"):
        return obj.tolist()
    if hasattr(obj, "__dict__"):
        return vars(obj)
    return str(obj)


def config_hash(payload) -> str:
    """Hex digest naming the artifact defined by ``payload``."""
    return hashlib.sha256(canonical_json(payload).encode("utf-8")).hexdigest()


def default_cache_dir() -> Path:
    env = os.environ.get("ESMAKIT_CACHE")
    if env:
        return Path(env)
    return Path.home() / ".cache" / "esmakit"


class ArtifactCache:
    """Keyed store for torch payloads and JSON blobs.

    ``root=None`` disables the cache (every lookup misses, saves are
    dropped), which keeps call sites branch-free.
    """

    def __init__(self, root: str | Path | None):
        self.root = Path(root) if root is not None else None

    def _path(self, kind: str, key: str, suffix: str) -> Path:
        return self.root / kind / f"{key}{suffix}"

    def load_torch(self, kind: str, key: str):
        if self.root is None:
            return None
        path = self._path(kind, key, ".pt")
        if not path.exists():
            return None
        return torch.load(path, map_location="cpu", weights_only=False)

    def save_torch(self, kind: str, key: str, payload) -> None:
        if self.root is None:
            return
        path = self._path(kind, key, ".pt")
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
        os.close(fd)
        try:
            torch.save(payload, tmp)
            os.replace(tmp, path)
        finally:
            if os.path.exists(tmp):
                os.unlink(tmp)

    def load_json(self, kind: str, key: str):
        if self.root is None:
            return None
        path = self._path(kind, key, ".json")
        if not path.exists():
            return None
        return json.loads(path.read_text())

    def save_json(self, kind: str, key: str, payload) -> None:
        if self.root is None:
            return
        path = self._path(kind, key, ".json")
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
        os.close(fd)
        try:
            Path(tmp).write_text(json.dumps(payload))
            os.replace(tmp, path)
        finally:
            if os.path.exists(tmp):
                os.unlink(tmp)
