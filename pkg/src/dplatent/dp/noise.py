"""Seedable Gaussian noise from a ChaCha20 keystream."""
from __future__ import annotations

import hashlib
import os

import numpy as np
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms
from scipy.special import ndtri


class GaussianStream:
    """Standard normal draws derived from ChaCha20 output.

    With ``seed=None`` the key comes from ``os.urandom``; an integer seed gives
    a reproducible stream (debug runs only, the seed must not be released).
    """

    def __init__(self, seed: int | None = None, label: str = "dp-noise"):
        if seed is None:
            key = os.urandom(32)
        else:
            key = hashlib.sha256(f"{label}:{int(seed)}".encode()).digest()
        self.seeded = seed is not None
        self._enc = Cipher(algorithms.ChaCha20(key, b"\x00" * 16), mode=None).encryptor()

    def uniform(self, n: int) -> np.ndarray:
        """Doubles in the open interval (0, 1)."""
        raw = np.frombuffer(self._enc.update(b"\x00" * (8 * n)), dtype="<u8")
        return ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53

    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        shape = (shape,) if np.isscalar(shape) else tuple(shape)
        n = int(np.prod(shape, dtype=np.int64))
        return std * ndtri(self.uniform(n)).reshape(shape)
