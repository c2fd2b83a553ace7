"""64-bit FNV-1a fingerprint of a set of named weights."""

from __future__ import annotations

from collections.abc import Mapping

import numpy as np

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data: bytes, h: int = FNV_OFFSET) -> int:
    for byte in data:
        h = ((h ^ byte) * FNV_PRIME) & _MASK
    return h


def weights_fingerprint(params: Mapping[str, np.ndarray]) -> int:
    """Hash every layer in name order: UTF-8 name, then the f32 LE payload.

    The f32 payload is what the checkpoint file stores, so a model and its
    save/load round trip share a fingerprint.
    """
    h = FNV_OFFSET
    for name in sorted(params):
        h = fnv1a64(name.encode("utf-8"), h)
        h = fnv1a64(np.ascontiguousarray(params[name], dtype="<f4").tobytes(), h)
    return h
