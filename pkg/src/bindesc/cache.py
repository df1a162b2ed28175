"""Content-addressed cache for expensive artifacts (archives, trained models).

The location comes from ``BINDESC_CACHE_DIR`` (default ``~/.cache/bindesc``).
"""

import hashlib
import json
import os
from pathlib import Path

ENV_VAR = "BINDESC_CACHE_DIR"


def cache_dir():
    root = os.environ.get(ENV_VAR) or os.path.join(os.path.expanduser("~"), ".cache", "bindesc")
    p = Path(root)
    p.mkdir(parents=True, exist_ok=True)
    return p


def config_key(cfg):
    """Stable short hash of a JSON-serialisable config."""
    blob = json.dumps(cfg, sort_keys=True, default=str).encode()
    return hashlib.blake2b(blob, digest_size=8).hexdigest()


def cached_path(kind, cfg, suffix):
    d = cache_dir() / kind
    d.mkdir(parents=True, exist_ok=True)
    return d / f"{config_key(cfg)}{suffix}"
