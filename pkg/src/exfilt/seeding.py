"""Derive independent, reproducible stage seeds from one master seed."""

import hashlib


def derive_seed(master: int, *names) -> int:
    """63-bit seed from ``master`` and a path of stage names."""
    key = "/".join(str(n) for n in (master,) + names).encode()
    return int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little") >> 1
