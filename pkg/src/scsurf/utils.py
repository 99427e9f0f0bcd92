"""Small shared helpers: dtype convention, seeded RNG substreams, coercion."""

from __future__ import annotations

import zlib

import numpy as np
import torch

# All internal math is float64. Acceptance tolerances assume 64-bit throughout,
# and on CPU the throughput difference vs float32 is minor for our sizes.
DTYPE = torch.float64


def as_tensor(x, dtype=DTYPE) -> torch.Tensor:
    """Coerce array-likes to a torch tensor of the package dtype."""
    if isinstance(x, torch.Tensor):
        return x.to(dtype)
    arr = np.asarray(x)
    if isinstance(arr, np.ndarray) and not arr.flags.writeable:
        arr = arr.copy()
    return torch.as_tensor(arr, dtype=dtype)


def to_numpy(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().numpy()
    return np.asarray(x)


def substream(seed: int, name: str) -> np.random.Generator:
    """Named, order-independent RNG substream derived from one master seed.

    Streams are independent for distinct names; reproducible across runs and
    platforms (numpy Philox-free SeedSequence spawning by entropy mixing).
    """
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]))


def finite(x: torch.Tensor) -> bool:
    return bool(torch.isfinite(x).all())
