"""Seed splitting.

Every random stream in the package is derived from one master seed with
``numpy.random.SeedSequence``: the child for ``(stream, index)`` is
``SeedSequence(master, spawn_key=(crc32(stream), index))``. A child depends
only on its own key, so adding items to a dataset or stages to a run never
reshuffles the existing ones.
"""
from __future__ import annotations

import zlib

import numpy as np
import torch


def derive_seed(master: int, index: int = 0, stream: str = "") -> int:
    """Return a 32-bit seed for item ``index`` of ``stream`` under ``master``."""
    key = (zlib.crc32(stream.encode("utf-8")), int(index))
    seq = np.random.SeedSequence(int(master), spawn_key=key)
    return int(seq.generate_state(1, dtype=np.uint32)[0])


def torch_generator(seed: int) -> torch.Generator:
    gen = torch.Generator(device="cpu")
    gen.manual_seed(int(seed))
    return gen


def numpy_rng(master: int, index: int = 0, stream: str = "") -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, index, stream))
