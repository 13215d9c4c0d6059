"""Reference forecasters: naive rules, 1-D trade features, LQR, and an MLP.

The naive family forecasts from past labels alone and turns point
forecasts probabilistic by adding hour-of-day residual percentiles fitted
on training data, which makes them fully deterministic. The feature
baselines compress the trade stream into one number (recent VWAP or last
price) and fit per-quantile linear models or a shared multi-quantile MLP.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field
from datetime import datetime, timedelta

import numpy as np

from . import tensor as T
from .market import TradeRecord
from .model import ModelParams, QUANTILES_DEFAULT
from .training import (
    DivergenceError,
    OptimizerState,
    TrainConfig,
    adam_step,
    aql,
    aql_loss,
    lr_at,
)

__all__ = [
    "NAIVE_VARIANTS",
    "naive_point",
    "ResidualQuantiles",
    "naive_probabilistic",
    "feature_vwap15",
    "feature_last_price",
    "lqr_fit",
    "lqr_predict",
    "MLPConfig",
    "MLPModel",
    "mlp_fit",
]

NAIVE_VARIANTS = ("prev_hour", "prev_day_same_hour", "mean3_same_hour")


# ---------------------------------------------------------------------------
# naive forecasts
# ---------------------------------------------------------------------------


class LabelHistory:
    """Sorted delivery -> label lookup."""

    def __init__(self, labels: dict[datetime, float]):
        self._labels = dict(labels)
        self._sorted = sorted(self._labels)

    def get(self, delivery: datetime) -> float | None:
        return self._labels.get(delivery)

    def most_recent_before(self, delivery: datetime) -> float | None:
        i = bisect.bisect_left(self._sorted, delivery)
        if i == 0:
            return None
        return self._labels[self._sorted[i - 1]]


def naive_point(history: LabelHistory | dict, delivery: datetime, variant: str) -> float | None:
    """Point forecast from past labels; None when the history is missing.

    prev_hour           label of the most recent delivery before the target
    prev_day_same_hour  label exactly 24 hours earlier
    mean3_same_hour     mean of the labels 24, 48 and 72 hours earlier
    """
    if not isinstance(history, LabelHistory):
        history = LabelHistory(history)
    if variant == "prev_hour":
        return history.most_recent_before(delivery)
    if variant == "prev_day_same_hour":
        return history.get(delivery - timedelta(days=1))
    if variant == "mean3_same_hour":
        labels = [history.get(delivery - timedelta(days=d)) for d in (1, 2, 3)]
        if any(v is None for v in labels):
            return None
        return float(np.mean(labels))
    raise ValueError(f"unknown naive variant {variant!r}; known: {NAIVE_VARIANTS}")


@dataclass
class ResidualQuantiles:
    """Per-delivery-hour empirical residual percentiles, monotone in the level."""

    quantiles: tuple
    per_hour: dict[int, np.ndarray] = field(default_factory=dict)

    @classmethod
    def fit(cls, train_labels: dict[datetime, float], variant: str, quantiles=QUANTILES_DEFAULT):
        """Residuals of the naive rule on the training period, grouped by
        delivery hour; each group's percentiles use linear interpolation."""
        history = LabelHistory(train_labels)
        grouped: dict[int, list[float]] = {}
        for delivery in sorted(train_labels):
            point = naive_point(history, delivery, variant)
            if point is None:
                continue
            grouped.setdefault(delivery.hour, []).append(train_labels[delivery] - point)
        per_hour = {
            hour: np.quantile(np.array(resids), quantiles)
            for hour, resids in grouped.items()
        }
        return cls(quantiles=tuple(quantiles), per_hour=per_hour)


def naive_probabilistic(residuals: ResidualQuantiles, point: float, hour: int) -> np.ndarray:
    """Point forecast plus the hour's residual percentiles, one per level."""
    if hour not in residuals.per_hour:
        raise ValueError(f"no residual percentiles fitted for delivery hour {hour}")
    return point + residuals.per_hour[hour]


# ---------------------------------------------------------------------------
# 1-D trade features
# ---------------------------------------------------------------------------


def feature_vwap15(trades: list[TradeRecord], forecast_time: datetime) -> float | None:
    """Pooled VWAP over the 15 minutes before the forecast time.

    Falls back to the last traded price when that window is empty; None
    when the delivery has no prior trades at all.
    """
    start = forecast_time - timedelta(minutes=15)
    num, den = [], []
    for t in trades:
        if start <= t.transaction_time < forecast_time:
            num.append(t.price * t.volume)
            den.append(t.volume)
    if den:
        return math.fsum(num) / math.fsum(den)
    return feature_last_price(trades, forecast_time)


def feature_last_price(trades: list[TradeRecord], forecast_time: datetime) -> float | None:
    """Price of the latest trade before the forecast time; None when empty."""
    best = None
    for t in trades:
        if t.transaction_time < forecast_time and (best is None or t.transaction_time > best.transaction_time):
            best = t
    return None if best is None else best.price


# ---------------------------------------------------------------------------
# linear quantile regression
# ---------------------------------------------------------------------------


def lqr_fit(
    features: np.ndarray,
    targets: np.ndarray,
    quantiles=QUANTILES_DEFAULT,
    l1: float = 0.0,
    iterations: int = 2000,
    lr: float = 1e-2,
) -> dict[float, tuple[np.ndarray, float]]:
    """Independent per-quantile pinball minimization by full-batch
    (sub)gradient descent from zero coefficients.

    Expects standardized features. The l1 penalty applies only with more
    than one feature column. Independence across levels means the fitted
    quantiles can cross.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x.reshape(-1, 1)
    y = np.asarray(targets, dtype=np.float64).reshape(-1)
    n, d = x.shape
    use_l1 = l1 > 0.0 and d > 1
    models: dict[float, tuple[np.ndarray, float]] = {}
    for tau in quantiles:
        w = np.zeros(d)
        b = 0.0
        for _ in range(iterations):
            pred = x @ w + b
            resid = y - pred
            grad_pred = np.where(resid >= 0, -tau, 1.0 - tau) / n
            grad_w = x.T @ grad_pred
            if use_l1:
                grad_w = grad_w + l1 * np.sign(w)
            grad_b = grad_pred.sum()
            w = w - lr * grad_w
            b = b - lr * grad_b
            if not (np.isfinite(w).all() and math.isfinite(b)):
                raise DivergenceError(f"LQR diverged for tau={tau}")
        models[tau] = (w, b)
    return models


def lqr_predict(models: dict[float, tuple[np.ndarray, float]], features: np.ndarray) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x.reshape(-1, 1)
    cols = [x @ w + b for tau, (w, b) in sorted(models.items())]
    return np.column_stack(cols)


# ---------------------------------------------------------------------------
# multi-quantile MLP
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MLPConfig:
    hidden_size: int = 16
    n_layers: int = 2
    dropout: float = 0.1
    epochs: int = 50
    batch_size: int = 512
    lr0: float = 7e-4
    decay: float = 0.95
    seed: int = 0


_MLP_INIT_STREAM = 505
_MLP_DROP_STREAM = 606


class MLPModel:
    """Feed-forward net with a flat multi-quantile head (no hierarchy, so
    predicted quantiles can cross)."""

    def __init__(self, n_features: int, quantiles: tuple, cfg: MLPConfig):
        self.n_features = n_features
        self.quantiles = tuple(quantiles)
        self.cfg = cfg
        self.params = ModelParams()
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, _MLP_INIT_STREAM]))

        def glorot(fan_in, fan_out):
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-limit, limit, size=(fan_in, fan_out))

        width_in = n_features
        for layer in range(cfg.n_layers):
            self.params.add(f"layer{layer}.w", glorot(width_in, cfg.hidden_size))
            self.params.add(f"layer{layer}.b", np.zeros((1, cfg.hidden_size)))
            width_in = cfg.hidden_size
        self.params.add("out.w", glorot(width_in, len(self.quantiles)))
        self.params.add("out.b", np.zeros((1, len(self.quantiles))))

    def forward(self, x: np.ndarray, dropout_rng: np.random.Generator | None = None) -> T.Tensor:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x.reshape(-1, self.n_features)
        h = T.constant(x)
        for layer in range(self.cfg.n_layers):
            h = T.swish(T.matmul(h, self.params[f"layer{layer}.w"].value)
                        + self.params[f"layer{layer}.b"].value)
            if dropout_rng is not None and self.cfg.dropout > 0.0:
                keep = (dropout_rng.random(h.shape) >= self.cfg.dropout) / (1.0 - self.cfg.dropout)
                h = h * T.constant(keep)
        return T.matmul(h, self.params["out.w"].value) + self.params["out.b"].value

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x).data.copy()


def mlp_fit(
    features: np.ndarray,
    targets: np.ndarray,
    quantiles=QUANTILES_DEFAULT,
    cfg: MLPConfig = MLPConfig(),
    val_features: np.ndarray | None = None,
    val_targets: np.ndarray | None = None,
) -> MLPModel:
    """Train the MLP on mean pinball loss with Adam and the staircase
    schedule; with a validation split, the best epoch's weights win."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x.reshape(-1, 1)
    y = np.asarray(targets, dtype=np.float64).reshape(-1, 1)
    model = MLPModel(x.shape[1], quantiles, cfg)
    opt_cfg = TrainConfig(epochs=cfg.epochs, batch_size=cfg.batch_size, lr0=cfg.lr0,
                          decay=cfg.decay, seed=cfg.seed)
    state = OptimizerState.for_params(model.params)
    n = x.shape[0]
    best = None
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, _MLP_DROP_STREAM, epoch]))
        order = rng.permutation(n)
        lr = lr_at(epoch, opt_cfg)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            model.params.zero_grad()
            pred = model.forward(x[idx], dropout_rng=rng)
            loss = aql_loss(pred, T.constant(y[idx]), model.quantiles)
            if not math.isfinite(loss.item()):
                raise DivergenceError(f"MLP training diverged at epoch {epoch}")
            T.backward(loss)
            adam_step(model.params, state, lr, opt_cfg)
        if val_features is not None:
            val_aql = aql(np.asarray(val_targets).reshape(-1), model.predict(val_features), model.quantiles)
            if best is None or val_aql < best[0]:
                best = (val_aql, model.params.state_arrays())
    if best is not None:
        model.params.load_arrays(best[1])
    return model
