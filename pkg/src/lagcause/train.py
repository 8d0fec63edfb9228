"""Adam training loop with teacher forcing over stride-1 lag windows."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .model import (PredictorModel, TrainConfig, _wrap_params, mlp_outputs,
                    transformer_outputs)
from .sim import TimeSeriesDataset
from .timeouts import StageTimeout


class DivergenceError(RuntimeError):
    def __init__(self, step: int, log: "TrainLog | None" = None):
        super().__init__(f"loss became non-finite at step {step}")
        self.step = step
        self.log = log


@dataclass
class TrainLog:
    steps: list[int]
    losses: list[float]
    stopped: str  # "budget" | "plateau" | "timeout"

    def final_loss(self) -> float:
        return self.losses[-1] if self.losses else float("nan")

    def save_csv(self, path: str | Path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "loss"])
            for s, l in zip(self.steps, self.losses):
                w.writerow([s, repr(l)])


def make_windows(data: np.ndarray, L: int):
    """Stride-1 windows: inputs (N, L, p), per-row targets (N, L, p), next step (N, p).

    Window n covers rows n..n+L-1 and its teacher-forcing target row tau is the
    observation following window row tau; the final row's target is step n+L.
    """
    T, p = data.shape
    if T <= L:
        raise ValueError(f"need T > L, got T={T}, L={L}")
    N = T - L
    windows = np.empty((N, L, p))
    row_targets = np.empty((N, L, p))
    for r in range(L):
        windows[:, r, :] = data[r:r + N]
        row_targets[:, r, :] = data[r + 1:r + 1 + N]
    return windows, row_targets, data[L:].copy()


def window_domains(dataset: TimeSeriesDataset) -> np.ndarray:
    """Segment index of each window, assigned by the predicted step's time."""
    L = dataset.L
    n = dataset.T - L
    return np.array([dataset.schedule.segment_of(t) for t in range(L, L + n)], dtype=int)


class Adam:
    def __init__(self, params: dict[str, np.ndarray], cfg: TrainConfig):
        self.cfg = cfg
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1**self.t
        bc2 = 1.0 - c.beta2**self.t
        for name in params:
            g = grads.get(name)
            if g is None:
                continue
            if c.weight_decay:
                g = g + c.weight_decay * params[name]
            m = self.m[name]
            v = self.v[name]
            m *= c.beta1
            m += (1 - c.beta1) * g
            v *= c.beta2
            v += (1 - c.beta2) * g * g
            params[name] -= c.lr * (m / bc1) / (np.sqrt(v / bc2) + c.eps)


def train(
    model: PredictorModel,
    dataset: TimeSeriesDataset | np.ndarray,
    cfg: TrainConfig,
    deadline: float | None = None,
) -> TrainLog:
    """Optimize the model in place; returns the per-step loss log.

    Deterministic for a fixed (seed, config, data): initialization is the
    caller's, shuffling comes from cfg.seed. Raises DivergenceError on a
    non-finite loss and StageTimeout past the wall-clock deadline.
    """
    data = dataset.data if isinstance(dataset, TimeSeriesDataset) else np.asarray(dataset)
    config = model.config
    windows, row_targets, next_targets = make_windows(data, config.L)
    domains = None
    if config.use_domain_embedding:
        if not isinstance(dataset, TimeSeriesDataset):
            raise ValueError("domain conditioning needs a dataset with a schedule")
        domains = window_domains(dataset)

    N = windows.shape[0]
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.params, cfg)
    steps_per_epoch = (N + cfg.batch_size - 1) // cfg.batch_size
    budget = cfg.epochs * steps_per_epoch
    if cfg.max_steps is not None:
        budget = min(budget, cfg.max_steps)

    log = TrainLog([], [], stopped="budget")
    step = 0
    done = False
    for _ in range(cfg.epochs):
        if done:
            break
        order = rng.permutation(N)
        for b in range(steps_per_epoch):
            if step >= budget:
                done = True
                break
            if deadline is not None and time.monotonic() > deadline:
                log.stopped = "timeout"
                raise StageTimeout("training exceeded its wall-clock budget")
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            if idx.size == 0:
                continue
            with Tape() as tape:
                tp = _wrap_params(model.params, trainable=True)
                win = Tensor(windows[idx])
                if config.backbone == "mlp":
                    preds = mlp_outputs(config, tp, win)
                    target = Tensor(next_targets[idx])
                else:
                    dom = domains[idx] if domains is not None else None
                    preds = transformer_outputs(config, tp, win, dom)
                    target = Tensor(row_targets[idx])
                loss = ad.mse_loss(preds, target)
                loss_val = float(loss.values)
                if not np.isfinite(loss_val):
                    log.stopped = "diverged"
                    log.steps.append(step)
                    log.losses.append(loss_val)
                    raise DivergenceError(step, log)
                grads = tape.backward(loss)
            named = {name: grads.get(t.node_id) for name, t in tp.items()}
            opt.step(model.params, named)
            log.steps.append(step)
            log.losses.append(loss_val)
            step += 1

            w = cfg.plateau_window
            if w > 0 and step % w == 0 and len(log.losses) >= 2 * w:
                cur = float(np.mean(log.losses[-w:]))
                prev = float(np.mean(log.losses[-2 * w:-w]))
                if prev > 0 and (prev - cur) / prev < cfg.plateau_rel_tol:
                    log.stopped = "plateau"
                    done = True
                    break
    return log
