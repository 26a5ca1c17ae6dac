"""Labeled seed derivation from one master seed."""

from __future__ import annotations

import hashlib


def derive_seed(master: int, *labels) -> int:
    """Stable 63-bit seed for the path ``master/label/label/...``.

    >>> derive_seed(0, "attack", 3, 7) == derive_seed(0, "attack", 3, 7)
    True
    """
    path = "/".join([str(int(master))] + [str(part) for part in labels])
    digest = hashlib.blake2b(path.encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") >> 1
