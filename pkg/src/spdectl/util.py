"""Small shared helpers: canonical JSON and config hashing."""

from __future__ import annotations

import hashlib
import json


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(obj) -> str:
    """Stable sha256 hex digest of a JSON-serializable configuration."""
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()
