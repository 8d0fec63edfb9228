"""Cooperative wall-clock budgets for long-running stages."""

from __future__ import annotations

import time


class StageTimeout(RuntimeError):
    pass


def check_deadline(deadline: float | None, stage: str):
    if deadline is not None and time.monotonic() > deadline:
        raise StageTimeout(f"{stage} exceeded its wall-clock budget")
