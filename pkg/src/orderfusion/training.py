"""Quantile loss, Adam, the epoch loop, rolling folds, and grid search.

Training runs in scaled label space and is deterministic per seed: per-epoch
shuffles come from a generator derived from (seed, epoch), and the best
validation epoch's weights are what the run returns.
"""

from __future__ import annotations

import itertools
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from datetime import datetime

import numpy as np

from . import tensor as T
from .market import Sample
from .model import EncodedBatch, ModelConfig, ModelParams, encode_samples, init_params, predict_batch

__all__ = [
    "TrainConfig",
    "FoldSpec",
    "RollingSpec",
    "OptimizerState",
    "DivergenceError",
    "pinball",
    "aql",
    "aql_loss",
    "adam_step",
    "lr_at",
    "train",
    "TrainResult",
    "rolling_folds",
    "add_months",
    "grid_search",
]

_SHUFFLE_STREAM = 303


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 512
    lr0: float = 7e-4
    decay: float = 0.95
    decay_every_epochs: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def pinball(y: float, yhat: float, tau: float) -> float:
    """Asymmetric absolute loss whose minimizer is the tau-quantile."""
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    if y >= yhat:
        return tau * (y - yhat)
    return (1.0 - tau) * (yhat - y)


def aql(y: np.ndarray, forecasts: np.ndarray, quantiles) -> float:
    """Mean pinball loss over samples and quantile levels."""
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    forecasts = np.asarray(forecasts, dtype=np.float64)
    if forecasts.ndim == 1:
        forecasts = forecasts.reshape(-1, 1)
    quantiles = np.asarray(quantiles, dtype=np.float64).reshape(1, -1)
    if y.shape[0] == 0:
        raise ValueError("aql needs at least one sample")
    if forecasts.shape != (y.shape[0], quantiles.shape[1]):
        raise ValueError(f"forecast shape {forecasts.shape} does not match "
                         f"{y.shape[0]} samples x {quantiles.shape[1]} quantiles")
    diff = y.reshape(-1, 1) - forecasts
    loss = np.where(diff >= 0, quantiles * diff, (quantiles - 1.0) * diff)
    return float(loss.mean())


def aql_loss(pred: T.Tensor, y: T.Tensor, quantiles) -> T.Tensor:
    """Graph-building version of :func:`aql` for training."""
    taus = T.constant(np.asarray(quantiles, dtype=np.float64).reshape(1, -1))
    diff = y - pred                       # (n, q) via broadcast of (n, 1)
    return T.mean_all(T.maximum(taus * diff, (taus - 1.0) * diff))


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)
    step: int = 0

    @classmethod
    def for_params(cls, params: ModelParams) -> "OptimizerState":
        return cls(
            first_moment={p.name: np.zeros_like(p.value.data) for p in params},
            second_moment={p.name: np.zeros_like(p.value.data) for p in params},
            step=0,
        )


def adam_step(params: ModelParams, state: OptimizerState, lr: float, cfg: TrainConfig) -> None:
    """One bias-corrected Adam update from the gradients currently held."""
    state.step += 1
    t = state.step
    b1, b2 = cfg.beta1, cfg.beta2
    for p in params:
        g = p.value.grad
        m = state.first_moment[p.name]
        v = state.second_moment[p.name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        p.value.data -= lr * m_hat / (np.sqrt(v_hat) + cfg.epsilon)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Staircase exponential decay every ``decay_every_epochs`` epochs."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return cfg.lr0 * cfg.decay ** (epoch // cfg.decay_every_epochs)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class EpochStats:
    epoch: int
    train_aql: float
    val_aql: float
    lr: float


@dataclass
class TrainResult:
    params: ModelParams
    best_epoch: int
    history: list[EpochStats]

    @property
    def best_val_aql(self) -> float:
        return self.history[self.best_epoch].val_aql


def _eval_aql(params: ModelParams, config: ModelConfig, batch: EncodedBatch) -> float:
    pred = predict_batch(params, config, batch.buy, batch.sell, batch.mask_buy, batch.mask_sell)
    return aql(batch.labels, pred.data, config.head_quantiles)


def train(
    model_config: ModelConfig,
    train_samples: list[Sample] | EncodedBatch,
    val_samples: list[Sample] | EncodedBatch,
    cfg: TrainConfig = TrainConfig(),
) -> TrainResult:
    """Fit the model, returning the weights of the best validation epoch.

    Accepts scaled samples (encoded here) or pre-encoded batches. The last
    partial batch of each epoch is kept.
    """
    train_batch = train_samples if isinstance(train_samples, EncodedBatch) else encode_samples(train_samples, model_config)
    val_batch = val_samples if isinstance(val_samples, EncodedBatch) else encode_samples(val_samples, model_config)
    if len(train_batch) == 0 or len(val_batch) == 0:
        raise ValueError("train and validation splits must be non-empty")

    params = init_params(model_config)
    state = OptimizerState.for_params(params)
    quantiles = model_config.head_quantiles
    n = len(train_batch)

    history: list[EpochStats] = []
    best_epoch = -1
    best_val = math.inf
    best_arrays = None

    for epoch in range(cfg.epochs):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, _SHUFFLE_STREAM, epoch]))
        order = rng.permutation(n)
        lr = lr_at(epoch, cfg)
        epoch_losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            sub = train_batch.take(idx)
            params.zero_grad()
            pred = predict_batch(params, model_config, sub.buy, sub.sell, sub.mask_buy, sub.mask_sell)
            loss = aql_loss(pred, T.constant(sub.labels), quantiles)
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(
                    f"non-finite training loss at epoch {epoch}, batch starting {start} (lr={lr})")
            T.backward(loss)
            adam_step(params, state, lr, cfg)
            epoch_losses.append((value, len(idx)))

        train_aql = sum(v * w for v, w in epoch_losses) / sum(w for _, w in epoch_losses)
        val_aql = _eval_aql(params, model_config, val_batch)
        if not math.isfinite(val_aql):
            raise DivergenceError(f"non-finite validation loss at epoch {epoch}")
        history.append(EpochStats(epoch=epoch, train_aql=train_aql, val_aql=val_aql, lr=lr))
        if val_aql < best_val:
            best_val = val_aql
            best_epoch = epoch
            best_arrays = params.state_arrays()

    best_params = init_params(model_config)
    best_params.load_arrays(best_arrays)
    return TrainResult(params=best_params, best_epoch=best_epoch, history=history)


# ---------------------------------------------------------------------------
# rolling folds
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FoldSpec:
    """Half-open [start, end) timestamp ranges, ordered train < val < test."""

    train_range: tuple[datetime, datetime]
    val_range: tuple[datetime, datetime]
    test_range: tuple[datetime, datetime]

    def split(self, samples: list[Sample]):
        def inside(rng):
            return [s for s in samples if rng[0] <= s.delivery_start < rng[1]]

        return inside(self.train_range), inside(self.val_range), inside(self.test_range)


@dataclass(frozen=True)
class RollingSpec:
    train_months: int = 20
    val_months: int = 4
    test_months: int = 4
    shift_months: int = 4
    n_folds: int = 3


def add_months(dt: datetime, months: int) -> datetime:
    month_index = dt.year * 12 + (dt.month - 1) + months
    return dt.replace(year=month_index // 12, month=month_index % 12 + 1)


def rolling_folds(start: datetime, spec: RollingSpec = RollingSpec()) -> list[FoldSpec]:
    """Forward-shifting folds on month boundaries.

    With the defaults and a 2022-01-01 start: fold 1 trains on 20 months,
    validates on the next 4, tests on the 4 after that; each further fold
    shifts every boundary 4 months, the last test window ending 2025-01-01.
    """
    folds = []
    for i in range(spec.n_folds):
        t0 = add_months(start, i * spec.shift_months)
        t1 = add_months(t0, spec.train_months)
        t2 = add_months(t1, spec.val_months)
        t3 = add_months(t2, spec.test_months)
        folds.append(FoldSpec(train_range=(t0, t1), val_range=(t1, t2), test_range=(t2, t3)))
    return folds


# ---------------------------------------------------------------------------
# grid search
# ---------------------------------------------------------------------------


@dataclass
class GridCellResult:
    fold: int
    overrides: dict
    val_aql: float
    best_epoch: int


def _expand_space(space: dict) -> list[dict]:
    keys = sorted(space)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(space[k] for k in keys))]


def _run_cell(args):
    base_config, cfg, fold_idx, overrides, train_batch, val_batch = args
    config = replace(base_config, **overrides)
    result = train(config, train_batch, val_batch, cfg)
    return GridCellResult(fold=fold_idx, overrides=overrides,
                          val_aql=result.best_val_aql, best_epoch=result.best_epoch)


def grid_search(
    base_config: ModelConfig,
    train_cfg: TrainConfig,
    space: dict,
    fold_data: list[tuple[list[Sample], list[Sample]]],
    budget: int | None = None,
    jobs: int = 1,
) -> tuple[dict[int, GridCellResult], list[GridCellResult]]:
    """Evaluate every config combination on every fold by validation loss.

    ``space`` maps ModelConfig field names to candidate value lists. Under
    a ``budget`` smaller than the space, an evenly strided subset of the
    enumerated grid is used (documented, deterministic). Returns the best
    cell per fold and the full result table.
    """
    combos = _expand_space(space)
    if budget is not None and budget < len(combos):
        stride_idx = np.linspace(0, len(combos) - 1, budget).round().astype(int)
        combos = [combos[i] for i in sorted(set(stride_idx.tolist()))]

    tasks = []
    for fold_idx, (train_samples, val_samples) in enumerate(fold_data):
        for overrides in combos:
            tasks.append((base_config, train_cfg, fold_idx, overrides, train_samples, val_samples))

    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            table = list(pool.map(_run_cell, tasks))
    else:
        table = [_run_cell(t) for t in tasks]

    best: dict[int, GridCellResult] = {}
    for cell in table:
        if cell.fold not in best or cell.val_aql < best[cell.fold].val_aql:
            best[cell.fold] = cell
    return best, table
