"""The buy/sell fusion forecaster.

Pipeline per sample: project each padded side into the hidden space,
iteratively cross-attend buy against sell (and vice versa) for the
configured number of interaction degrees, aggregate the per-degree
representations, pool over time, and emit multiple quantiles through a
non-crossing hierarchical head. Every intermediate row representation is
multiplied by that side's combined mask, so padded or cut-off rows stay
exactly zero.

Ablation switches cover: mask variants, removing fusion entirely (pooled
raw sides feed the heads), aggregation without the residual sum or with
concatenation, max pooling, and the multi / single / post-hoc-sorted head
alternatives.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .market import RobustScaler, Sample
from .masking import MASK_VARIANTS, build_dual_mask, pad_side

__all__ = [
    "CHECKPOINT_MAGIC",
    "QUANTILES_DEFAULT",
    "ModelConfig",
    "ModelParams",
    "QuantileForecast",
    "EncodedBatch",
    "init_params",
    "encode_sample",
    "encode_samples",
    "input_project",
    "cross_attention_fuse",
    "fusion_stack",
    "aggregate_and_pool",
    "hierarchical_head",
    "predict_batch",
    "forward",
    "param_count",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_MAGIC = "ORDERFUSION.v1"

QUANTILES_DEFAULT = (0.10, 0.25, 0.45, 0.50, 0.55, 0.75, 0.90)

FUSION_VARIANTS = ("fusion", "no_fusion")
AGGREGATION_VARIANTS = ("residual", "no_residual", "concat")
POOLING_VARIANTS = ("avg", "max")
HEAD_VARIANTS = ("hierarchical", "multi", "single", "posthoc_sort")

_INIT_STREAM = 101
_MASK_STREAM = 202


@dataclass(frozen=True)
class ModelConfig:
    hidden_dim: int
    interaction_degree: int = 2
    cutoff_exponent: int = 6
    t_max: int = 128
    quantiles: tuple = QUANTILES_DEFAULT
    mask_variant: str = "dual"
    fusion_variant: str = "fusion"
    aggregation_variant: str = "residual"
    pooling_variant: str = "avg"
    head_variant: str = "hierarchical"
    head_tau: float = 0.50
    projection_bias: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.hidden_dim <= 0:
            raise ValueError(f"hidden_dim must be positive, got {self.hidden_dim}")
        if self.interaction_degree < 1:
            raise ValueError("interaction_degree must be >= 1")
        if self.cutoff_exponent < 0:
            raise ValueError("cutoff_exponent must be >= 0")
        if 2 ** self.cutoff_exponent > self.t_max:
            raise ValueError(
                f"cutoff 2^{self.cutoff_exponent} exceeds t_max {self.t_max}"
            )
        q = tuple(self.quantiles)
        if any(b <= a for a, b in zip(q, q[1:])):
            raise ValueError("quantiles must be strictly increasing")
        if 0.50 not in q:
            raise ValueError("quantiles must contain the median 0.50")
        if not 0.0 < self.head_tau < 1.0:
            raise ValueError("head_tau must lie in (0, 1)")
        for name, value, allowed in [
            ("mask_variant", self.mask_variant, MASK_VARIANTS),
            ("fusion_variant", self.fusion_variant, FUSION_VARIANTS),
            ("aggregation_variant", self.aggregation_variant, AGGREGATION_VARIANTS),
            ("pooling_variant", self.pooling_variant, POOLING_VARIANTS),
            ("head_variant", self.head_variant, HEAD_VARIANTS),
        ]:
            if value not in allowed:
                raise ValueError(f"{name} must be one of {allowed}, got {value!r}")
        object.__setattr__(self, "quantiles", q)

    @property
    def head_quantiles(self) -> tuple:
        if self.head_variant == "single":
            return (self.head_tau,)
        return self.quantiles

    @property
    def head_width(self) -> int:
        if self.fusion_variant == "no_fusion":
            return 6
        if self.aggregation_variant == "concat":
            return 2 * self.hidden_dim
        return self.hidden_dim

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["quantiles"] = list(self.quantiles)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["quantiles"] = tuple(d.get("quantiles", QUANTILES_DEFAULT))
        return cls(**d)


class ModelParams:
    """Ordered, uniquely named parameter set."""

    def __init__(self):
        self._params: dict[str, T.Parameter] = {}

    def add(self, name: str, values) -> T.Parameter:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        p = T.Parameter(name, values)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> T.Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self):
        return len(self._params)

    @property
    def names(self) -> list[str]:
        return list(self._params)

    def n_scalars(self) -> int:
        return sum(p.value.data.size for p in self)

    def zero_grad(self) -> None:
        for p in self:
            p.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.value.data.copy() for name, p in self._params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        if set(arrays) != set(self._params):
            missing = set(self._params) ^ set(arrays)
            raise ValueError(f"parameter name mismatch: {sorted(missing)}")
        for name, arr in arrays.items():
            p = self._params[name]
            if p.value.data.shape != arr.shape:
                raise ValueError(f"shape mismatch for {name}: {p.value.data.shape} vs {arr.shape}")
            p.value.data = np.array(arr, dtype=np.float64)


def _head_name(tau: float) -> str:
    return f"head.q{int(round(tau * 100)):02d}"


def init_params(config: ModelConfig) -> ModelParams:
    """Create all weights, Glorot-uniform from the config seed; biases 0."""
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, _INIT_STREAM]))
    params = ModelParams()

    def glorot(fan_in, fan_out):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, size=(fan_in, fan_out))

    dim = config.hidden_dim
    if config.fusion_variant == "fusion":
        for side in ("buy", "sell"):
            params.add(f"proj.{side}.w", glorot(3, dim))
            if config.projection_bias:
                params.add(f"proj.{side}.b", np.zeros((1, dim)))
        for k in range(1, config.interaction_degree + 1):
            for side in ("buy", "sell"):
                params.add(f"fuse{k}.{side}.wq", glorot(dim, dim))
                params.add(f"fuse{k}.{side}.wk", glorot(dim, dim))
                params.add(f"fuse{k}.{side}.wv", glorot(dim, dim))
    width = config.head_width
    for tau in config.head_quantiles:
        params.add(f"{_head_name(tau)}.w", glorot(width, 1))
        params.add(f"{_head_name(tau)}.b", np.zeros((1, 1)))
    return params


def param_count(config: ModelConfig) -> int:
    """Number of trainable scalars the config registers."""
    dim = config.hidden_dim
    n = 0
    if config.fusion_variant == "fusion":
        n += 2 * 3 * dim
        if config.projection_bias:
            n += 2 * dim
        n += 2 * config.interaction_degree * 3 * dim * dim
    n += len(config.head_quantiles) * (config.head_width + 1)
    return n


# ---------------------------------------------------------------------------
# encoding scaled samples into fixed-shape arrays
# ---------------------------------------------------------------------------


@dataclass
class EncodedBatch:
    """Padded, masked, model-ready arrays for a list of samples."""

    buy: np.ndarray          # (n, t_max, 3)
    sell: np.ndarray         # (n, t_max, 3)
    mask_buy: np.ndarray     # (n, t_max, 1)
    mask_sell: np.ndarray    # (n, t_max, 1)
    labels: np.ndarray       # (n, 1), scaled space
    delivery_starts: list

    def __len__(self):
        return self.buy.shape[0]

    def take(self, idx) -> "EncodedBatch":
        return EncodedBatch(
            buy=self.buy[idx],
            sell=self.sell[idx],
            mask_buy=self.mask_buy[idx],
            mask_sell=self.mask_sell[idx],
            labels=self.labels[idx],
            delivery_starts=[self.delivery_starts[i] for i in np.atleast_1d(idx)],
        )


def encode_sample(sample: Sample, config: ModelConfig, rng: np.random.Generator | None = None):
    """Pad and mask one scaled sample; returns (buy, sell, mask_buy, mask_sell)."""
    pb = pad_side(sample.buy_matrix, config.t_max)
    ps = pad_side(sample.sell_matrix, config.t_max)
    mb = build_dual_mask(pb, config.cutoff_exponent, config.mask_variant, rng)
    ms = build_dual_mask(ps, config.cutoff_exponent, config.mask_variant, rng)
    return pb.matrix, ps.matrix, mb.combined.reshape(-1, 1), ms.combined.reshape(-1, 1)


def encode_samples(samples: list[Sample], config: ModelConfig) -> EncodedBatch:
    """Encode scaled samples into stacked arrays.

    Random-mask draws derive from the config seed, one stream for the whole
    batch, so encoding is deterministic per (samples, config).
    """
    rng = None
    if config.mask_variant == "random":
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, _MASK_STREAM]))
    buys, sells, mbs, mss, labels, deliveries = [], [], [], [], [], []
    for s in samples:
        b, sl, mb, ms = encode_sample(s, config, rng)
        buys.append(b)
        sells.append(sl)
        mbs.append(mb)
        mss.append(ms)
        labels.append([s.label])
        deliveries.append(s.delivery_start)
    n = len(samples)
    shape = (n, config.t_max, 3)
    return EncodedBatch(
        buy=np.array(buys).reshape(shape),
        sell=np.array(sells).reshape(shape),
        mask_buy=np.array(mbs).reshape(n, config.t_max, 1),
        mask_sell=np.array(mss).reshape(n, config.t_max, 1),
        labels=np.array(labels, dtype=np.float64).reshape(n, 1),
        delivery_starts=deliveries,
    )


# ---------------------------------------------------------------------------
# network blocks
# ---------------------------------------------------------------------------


def input_project(side_matrix: T.Tensor, w: T.Tensor, b: T.Tensor | None, mask: T.Tensor) -> T.Tensor:
    """Row-wise 3 -> hidden linear map, swish, then mask multiply."""
    out = T.matmul(side_matrix, w)
    if b is not None:
        out = out + b
    return T.swish(out) * mask


def cross_attention_fuse(
    query_side: T.Tensor,
    other_side: T.Tensor,
    w_query: T.Tensor,
    w_key: T.Tensor,
    w_value: T.Tensor,
    mask_q: T.Tensor,
) -> T.Tensor:
    """Scaled dot-product attention of one side over the other.

    Queries come from ``query_side``; keys and values from ``other_side``.
    Inputs are already masked; the output is re-masked with the query
    side's mask. Attention logits carry no extra masking, so zeroed key
    rows contribute uniform terms to the softmax denominator.
    """
    hidden = w_query.data.shape[-1]
    q = T.matmul(query_side, w_query)
    k = T.matmul(other_side, w_key)
    v = T.matmul(other_side, w_value)
    scores = T.matmul(q, T.transpose(k)) * (1.0 / math.sqrt(hidden))
    return T.matmul(T.softmax_rows(scores), v) * mask_q


def fusion_stack(
    buy: T.Tensor,
    sell: T.Tensor,
    params: ModelParams,
    mask_buy: T.Tensor,
    mask_sell: T.Tensor,
    degrees: int,
) -> list[tuple[T.Tensor, T.Tensor]]:
    """Iterate the buy/sell cross-attention for the requested degrees.

    Both sides at degree k read only degree k-1 representations.
    """
    if degrees < 1:
        raise ValueError("fusion_stack needs at least one degree")
    pairs = []
    prev_buy, prev_sell = buy, sell
    for k in range(1, degrees + 1):
        next_buy = cross_attention_fuse(
            prev_buy, prev_sell,
            params[f"fuse{k}.buy.wq"].value,
            params[f"fuse{k}.sell.wk"].value,
            params[f"fuse{k}.sell.wv"].value,
            mask_buy,
        )
        next_sell = cross_attention_fuse(
            prev_sell, prev_buy,
            params[f"fuse{k}.sell.wq"].value,
            params[f"fuse{k}.buy.wk"].value,
            params[f"fuse{k}.buy.wv"].value,
            mask_sell,
        )
        pairs.append((next_buy, next_sell))
        prev_buy, prev_sell = next_buy, next_sell
    return pairs


def aggregate_and_pool(
    pairs: list[tuple[T.Tensor, T.Tensor]],
    aggregation_variant: str = "residual",
    pooling_variant: str = "avg",
) -> T.Tensor:
    """Combine per-degree pairs and pool rows into one vector per sample."""
    if not pairs:
        raise ValueError("aggregate_and_pool needs at least one degree pair")
    if aggregation_variant == "residual":
        combined = None
        for cb, cs in pairs:
            term = cb + cs
            combined = term if combined is None else combined + term
    elif aggregation_variant == "no_residual":
        cb, cs = pairs[-1]
        combined = cb + cs
    elif aggregation_variant == "concat":
        combined = None
        for cb, cs in pairs:
            term = T.concat_cols(cb, cs)
            combined = term if combined is None else combined + term
    else:
        raise ValueError(f"unknown aggregation variant {aggregation_variant!r}")
    if pooling_variant == "avg":
        return T.mean_rows(combined)
    if pooling_variant == "max":
        return T.max_rows(combined)
    raise ValueError(f"unknown pooling variant {pooling_variant!r}")


def hierarchical_head(
    pooled: T.Tensor,
    params: ModelParams,
    head_variant: str = "hierarchical",
    quantiles: tuple = QUANTILES_DEFAULT,
    head_tau: float = 0.50,
) -> T.Tensor:
    """Map the pooled vector to quantile outputs, (batch, n_quantiles).

    hierarchical  median from its own dense layer; each further quantile
                  adds (upper) or subtracts (lower) a |dense| residual to
                  its neighbor, so outputs never cross
    multi         independent dense outputs, crossing possible
    single        one dense output for ``head_tau``
    posthoc_sort  independent dense outputs sorted ascending
    """

    def dense(tau):
        return T.matmul(pooled, params[f"{_head_name(tau)}.w"].value) + params[f"{_head_name(tau)}.b"].value

    if head_variant == "single":
        return dense(head_tau)

    q = tuple(quantiles)
    if head_variant in ("multi", "posthoc_sort"):
        out = dense(q[0])
        for tau in q[1:]:
            out = T.concat_cols(out, dense(tau))
        return T.sort_cols(out) if head_variant == "posthoc_sort" else out

    if head_variant == "hierarchical":
        mid = q.index(0.50)
        outputs = {0.50: dense(0.50)}
        for i in range(mid + 1, len(q)):
            outputs[q[i]] = outputs[q[i - 1]] + T.abs_(dense(q[i]))
        for i in range(mid - 1, -1, -1):
            outputs[q[i]] = outputs[q[i + 1]] - T.abs_(dense(q[i]))
        out = outputs[q[0]]
        for tau in q[1:]:
            out = T.concat_cols(out, outputs[tau])
        return out

    raise ValueError(f"unknown head variant {head_variant!r}")


def predict_batch(
    params: ModelParams,
    config: ModelConfig,
    buy: np.ndarray,
    sell: np.ndarray,
    mask_buy: np.ndarray,
    mask_sell: np.ndarray,
) -> T.Tensor:
    """Full forward pass over a batch of encoded arrays, in scaled space."""
    tb = T.constant(buy)
    ts = T.constant(sell)
    mb = T.constant(mask_buy)
    ms = T.constant(mask_sell)
    if config.fusion_variant == "no_fusion":
        combined = T.concat_cols(tb * mb, ts * ms)
        pooled = T.mean_rows(combined) if config.pooling_variant == "avg" else T.max_rows(combined)
    else:
        proj_b = input_project(
            tb, params["proj.buy.w"].value,
            params["proj.buy.b"].value if "proj.buy.b" in params else None, mb)
        proj_s = input_project(
            ts, params["proj.sell.w"].value,
            params["proj.sell.b"].value if "proj.sell.b" in params else None, ms)
        pairs = fusion_stack(proj_b, proj_s, params, mb, ms, config.interaction_degree)
        pooled = aggregate_and_pool(pairs, config.aggregation_variant, config.pooling_variant)
    return hierarchical_head(pooled, params, config.head_variant, config.quantiles, config.head_tau)


@dataclass
class QuantileForecast:
    """Predicted values per quantile level, ascending in the level."""

    quantiles: tuple
    values: np.ndarray

    def is_monotone(self) -> bool:
        return bool(np.all(np.diff(self.values) >= 0))


def forward(sample: Sample, params: ModelParams, config: ModelConfig) -> QuantileForecast:
    """Forecast one scaled sample; a deterministic composition of the blocks."""
    rng = None
    if config.mask_variant == "random":
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, _MASK_STREAM]))
    b, s, mb, ms = encode_sample(sample, config, rng)
    out = predict_batch(params, config, b[None], s[None], mb[None], ms[None])
    return QuantileForecast(quantiles=config.head_quantiles, values=out.data[0].copy())


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------


def save_checkpoint(
    path,
    config: ModelConfig,
    params: ModelParams,
    feature_scaler: RobustScaler,
    label_scaler: RobustScaler,
    extra: dict | None = None,
) -> None:
    """Write a self-describing JSON checkpoint; floats round-trip exactly."""
    payload = {
        "magic": CHECKPOINT_MAGIC,
        "seed": config.seed,
        "config": config.to_dict(),
        "feature_scaler": feature_scaler.to_dict(),
        "label_scaler": label_scaler.to_dict(),
        "params": {
            name: {"shape": list(arr.shape), "data": arr.reshape(-1).tolist()}
            for name, arr in params.state_arrays().items()
        },
    }
    if extra:
        payload["extra"] = extra
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path):
    """Read a checkpoint; returns (config, params, feature_scaler, label_scaler)."""
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("magic") != CHECKPOINT_MAGIC:
        raise ValueError(f"not a model checkpoint (magic {payload.get('magic')!r})")
    config = ModelConfig.from_dict(payload["config"])
    params = init_params(config)
    params.load_arrays({
        name: np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
        for name, entry in payload["params"].items()
    })
    return (
        config,
        params,
        RobustScaler.from_dict(payload["feature_scaler"]),
        RobustScaler.from_dict(payload["label_scaler"]),
    )
