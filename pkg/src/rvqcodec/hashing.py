"""64-bit FNV-1a content hashing for codebook/parameter bytes."""

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data: bytes, seed: int = _FNV_OFFSET) -> int:
    """FNV-1a over ``data``, returned as an unsigned 64-bit integer."""
    h = seed
    for byte in data:
        h = ((h ^ byte) * _FNV_PRIME) & _MASK
    return h
