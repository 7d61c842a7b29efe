"""Deterministic seed derivation for independent RNG streams.

Every source of randomness in a run (model init, batch shuffling,
augmentation views, synthesis, buffer sampling) gets its own seed derived
from the run seed plus a structural key, so resuming a run mid-sequence
reproduces the exact same draws.
"""

import hashlib


def derive_seed(*parts) -> int:
    """Map an arbitrary tuple of ints/strings to a stable 31-bit seed."""
    text = ":".join(str(p) for p in parts)
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") % (2**31 - 1)
