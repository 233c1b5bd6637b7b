# Copyright © 2025 PI & Other Tales Inc.. All Rights Reserved.
"""Seeding, hashing and quadrature helpers shared by the solvers."""

from __future__ import annotations

import hashlib
import json
from functools import lru_cache
from typing import Any, Dict, Tuple

import numpy as np
from scipy import special


def derive_seed(seed: int, purpose: str) -> int:
    """Derive a child integer seed for a named purpose (training, benchmark, ...)."""
    digest = hashlib.sha256(f"{seed}:{purpose}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


def config_hash(payload: Dict[str, Any]) -> str:
    """Stable sha256 of a JSON-serialisable mapping."""
    canonical = json.dumps(payload, sort_keys=True, default=str, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


@lru_cache(maxsize=16)
def legendre_nodes(n: int) -> Tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre nodes and weights on [0, 1]."""
    x, w = special.roots_legendre(n)
    return 0.5 * (x + 1.0), 0.5 * w
