"""Bits shared by the three training loops."""
from __future__ import annotations

import csv
import io
import math
from pathlib import Path
from typing import Iterable, Sequence

import torch

from .volume_io import _atomic_write

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


class TrainingDivergedError(RuntimeError):
    """Raised when a loss turns non-finite; the last good checkpoint is kept."""

    def __init__(self, message: str, step: int, last_checkpoint: str | None = None):
        super().__init__(message)
        self.step = step
        self.last_checkpoint = last_checkpoint


def adam(params: Iterable[torch.nn.Parameter], lr: float) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=lr, betas=ADAM_BETAS, eps=ADAM_EPS)


def lr_schedule(opt: torch.optim.Optimizer, kind: str, total_steps: int, start: int = 0):
    if kind == "none":
        return torch.optim.lr_scheduler.LambdaLR(opt, lambda i: 1.0)
    if kind == "cosine":
        total = max(1, int(total_steps))
        return torch.optim.lr_scheduler.LambdaLR(
            opt, lambda i: 0.5 * (1.0 + math.cos(math.pi * min(start + i, total) / total)))
    raise ValueError(f"unknown lr_decay {kind!r}")


def check_finite(value: float, step: int, what: str, last_checkpoint: str | None = None) -> None:
    if not math.isfinite(value):
        raise TrainingDivergedError(f"{what} became {value} at step {step}", step, last_checkpoint)


def write_csv(rows: Sequence[dict], path, columns: Sequence[str]) -> None:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(columns), extrasaction="ignore", lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: row.get(k, "") for k in columns})
    _atomic_write(Path(path), buf.getvalue().encode("utf-8"))


def batch_indices(n: int, batch_size: int, gen: torch.Generator) -> torch.Tensor:
    """Random batch without replacement inside the batch."""
    return torch.randperm(n, generator=gen)[: min(batch_size, n)]


def smoothed(values: Sequence[float], window: int) -> list[float]:
    out = []
    for i in range(0, len(values) - window + 1, window):
        chunk = values[i:i + window]
        out.append(sum(chunk) / len(chunk))
    return out
