"""Counter-based random streams derived from a master seed by fixed labels.

Every consumer asks for its own stream, e.g. ``make_rng(seed, "forest", 1, "tree", 17)``,
so the numbers a tree sees do not depend on which worker builds it or in what order.
"""

from __future__ import annotations

import hashlib
from typing import Union

import numpy as np

Label = Union[str, int]

_MASK64 = (1 << 64) - 1


def derive_seed(master: int, *labels: Label) -> int:
    """Return a 64-bit seed for the stream named by ``labels`` under ``master``."""
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(master)).encode("ascii"))
    for label in labels:
        h.update(b"\x1f")
        h.update(str(label).encode("utf-8"))
    return int.from_bytes(h.digest(), "little") & _MASK64


def make_rng(master: int, *labels: Label) -> np.random.Generator:
    """Philox generator keyed by :func:`derive_seed`."""
    return np.random.Generator(np.random.Philox(key=derive_seed(master, *labels)))
