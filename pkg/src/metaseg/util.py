"""Small shared helpers: stable seed derivation and hashing."""

from __future__ import annotations

import hashlib


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from a tuple of ints/strings.

    Hash-based so derived streams are independent of numpy version and of
    each other; the same parts always give the same seed.
    """
    text = "\x1f".join(str(p) for p in parts)
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") & 0x7FFFFFFFFFFFFFFF
