"""Shared helpers: deterministic RNG streams, slugs, JSON I/O."""

from __future__ import annotations

import hashlib
import json
import re
from pathlib import Path

import numpy as np


def _tag_to_int(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        return int(tag) & 0xFFFFFFFF
    # stable across processes/runs, unlike hash()
    digest = hashlib.blake2s(str(tag).encode("utf-8"), digest_size=4).digest()
    return int.from_bytes(digest, "little")


def derive_rng(seed: int, *tags) -> np.random.Generator:
    """Independent deterministic substream keyed by (seed, tags).

    Guarantees the same stream regardless of how many other streams were
    consumed before it, which is what makes scene synthesis replayable
    from a manifest.
    """
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [_tag_to_int(t) for t in tags]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def derive_seed(seed: int, *tags) -> int:
    """A plain integer seed derived like derive_rng (for persisting in manifests)."""
    return int(derive_rng(seed, *tags).integers(0, 2**63 - 1))


def slugify(text: str) -> str:
    slug = re.sub(r"[^a-z0-9]+", "-", text.lower()).strip("-")
    return slug or "query"


def dump_json(obj, path: Path | str) -> None:
    """Canonical JSON writer: sorted keys, fixed layout, trailing newline."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def load_json(path: Path | str):
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)
