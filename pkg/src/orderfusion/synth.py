"""Synthetic coupled buy/sell trade streams with known generative structure.

Each delivery hour gets a latent mid price: an hour-of-day seasonal level
plus a within-day mean-reverting anchor, a per-delivery idiosyncratic
offset, and a random walk over the trading session with occasional
downward jumps near delivery. Buy trades quote above the mid, sell trades
below, and each side's quote is pulled toward the opposite side's last
trade by the coupling coefficient. Volumes are log-normal, arrivals
Poisson per side.

Labels are always produced by the real index labeler on the generated
trades, so the generator and the ingest pipeline cannot drift apart.
Days are simulated independently from per-day derived seeds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from datetime import datetime, timedelta, timezone
from pathlib import Path

import numpy as np

from .market import (
    MarketConfig,
    NoLabelError,
    Side,
    TradeRecord,
    compute_index_label,
    format_timestamp,
    write_trades,
)

__all__ = [
    "SynthConfig",
    "LabelRow",
    "simulate_delivery",
    "gen_market",
    "write_market",
    "LABELS_HEADER",
]

LABELS_HEADER = "delivery_start,index_x,label"

_DAY_STREAM = 404


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    n_days: int = 30
    start: datetime = datetime(2024, 1, 1, tzinfo=timezone.utc)
    base_price: float = 80.0
    vol_per_hour: float = 3.0            # session random-walk std over one hour
    vol_hour_amplitude: float = 0.0      # per-delivery-hour modulation of that vol, in [0, 1)
    anchor_vol: float = 7.0              # hour-to-hour anchor innovation std
    anchor_reversion: float = 0.25       # pull toward the seasonal level per hour
    seasonal_amplitude: float = 14.0     # hour-of-day price profile half-range
    offset_sigma: float = 7.0            # per-delivery idiosyncratic level shift
    jump_intensity_per_hour: float = 0.08
    jump_size_mean: float = 6.0
    arrival_rate_per_min: float = 0.25   # per side
    volume_lognorm_mu: float = 0.0
    volume_lognorm_sigma: float = 0.8
    half_spread: float = 1.0
    coupling: float = 0.3
    session_minutes: int = 240

    def __post_init__(self):
        if self.arrival_rate_per_min <= 0:
            raise ValueError("arrival_rate_per_min must be > 0")
        if not 0.0 <= self.coupling <= 1.0:
            raise ValueError("coupling must lie in [0, 1]")
        if not 0.0 <= self.vol_hour_amplitude < 1.0:
            raise ValueError("vol_hour_amplitude must lie in [0, 1)")
        if self.n_days < 1:
            raise ValueError("n_days must be >= 1")


@dataclass(frozen=True)
class LabelRow:
    delivery_start: datetime
    index_x: int
    label: float


def _seasonal_level(cfg: SynthConfig, hour: int) -> float:
    return cfg.seasonal_amplitude * math.sin(2.0 * math.pi * (hour - 6) / 24.0)


def _hour_vol_scale(cfg: SynthConfig, hour: int) -> float:
    return 1.0 + cfg.vol_hour_amplitude * math.sin(2.0 * math.pi * hour / 24.0)


def simulate_delivery(
    cfg: SynthConfig,
    delivery: datetime,
    anchor_level: float,
    rng: np.random.Generator,
    collect_mid: bool = False,
):
    """Trades for one delivery hour; optionally also (side, price, mid) rows."""
    hour = delivery.hour
    per_min_vol = cfg.vol_per_hour / math.sqrt(60.0) * _hour_vol_scale(cfg, hour)
    session_start = delivery - timedelta(minutes=cfg.session_minutes)

    # per-side Poisson arrivals, in minutes from session start
    def arrivals():
        out = []
        t = rng.exponential(1.0 / cfg.arrival_rate_per_min)
        while t < cfg.session_minutes:
            out.append(t)
            t += rng.exponential(1.0 / cfg.arrival_rate_per_min)
        return out

    events = [(t, Side.BUY) for t in arrivals()] + [(t, Side.SELL) for t in arrivals()]

    # downward jumps inside the final hour of the session
    n_jumps = rng.poisson(cfg.jump_intensity_per_hour)
    jump_window_start = cfg.session_minutes - 60.0
    for _ in range(n_jumps):
        t = rng.uniform(max(0.0, jump_window_start), cfg.session_minutes)
        events.append((t, None))  # None marks a jump event
    events.sort(key=lambda e: (e[0], e[1].value if e[1] is not None else ""))

    trades: list[TradeRecord] = []
    diagnostics = []
    mid = anchor_level
    cursor = 0.0
    last_price = {Side.BUY: None, Side.SELL: None}
    for t, side in events:
        dt = t - cursor
        cursor = t
        if dt > 0:
            mid += rng.normal(0.0, per_min_vol * math.sqrt(dt))
        if side is None:
            mid -= rng.exponential(cfg.jump_size_mean)
            continue
        noise = abs(rng.normal(0.0, cfg.half_spread))
        quote = mid + noise if side is Side.BUY else mid - noise
        other = last_price[Side.SELL if side is Side.BUY else Side.BUY]
        price = quote if other is None else quote + cfg.coupling * (other - quote)
        last_price[side] = price
        volume = float(rng.lognormal(cfg.volume_lognorm_mu, cfg.volume_lognorm_sigma))
        trades.append(TradeRecord(
            delivery_start=delivery,
            side=side,
            price=float(price),
            volume=volume,
            transaction_time=session_start + timedelta(minutes=float(t)),
        ))
        if collect_mid:
            diagnostics.append((side, float(price), float(mid)))
    return (trades, diagnostics) if collect_mid else (trades, None)


def gen_market(
    cfg: SynthConfig,
    delta_c_minutes: int = 30,
    indices: tuple = (1, 2, 3),
) -> tuple[list[TradeRecord], list[LabelRow], int]:
    """Simulate the whole horizon; labels come from the real index labeler.

    Returns (trades, label rows, n_label_windows_skipped). Label rows cover
    every requested index for every delivery whose window holds a trade.
    """
    trades: list[TradeRecord] = []
    labels: list[LabelRow] = []
    skipped = 0
    for day in range(cfg.n_days):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, _DAY_STREAM, day]))
        anchor = _seasonal_level(cfg, 0) + rng.normal(0.0, cfg.anchor_vol)
        day_start = cfg.start + timedelta(days=day)
        for hour in range(24):
            level = _seasonal_level(cfg, hour)
            anchor = anchor + cfg.anchor_reversion * (level - anchor) + rng.normal(0.0, cfg.anchor_vol)
            offset = rng.normal(0.0, cfg.offset_sigma)
            delivery = day_start + timedelta(hours=hour)
            day_trades, _ = simulate_delivery(cfg, delivery, cfg.base_price + anchor + offset, rng)
            trades.extend(day_trades)
            for x in indices:
                market_cfg = MarketConfig(index_x=x, delta_c_minutes=delta_c_minutes)
                try:
                    label = compute_index_label(day_trades, delivery, market_cfg)
                except NoLabelError:
                    skipped += 1
                    continue
                labels.append(LabelRow(delivery_start=delivery, index_x=x, label=label))
    return trades, labels, skipped


def write_labels(path, labels: list[LabelRow]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(LABELS_HEADER + "\n")
        for row in labels:
            fh.write(f"{format_timestamp(row.delivery_start)},{row.index_x},{row.label!r}\n")


def write_market(cfg: SynthConfig, out_dir, delta_c_minutes: int = 30) -> tuple[Path, Path, int]:
    """Write trades.csv and labels.csv; returns their paths and skip count."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    trades, labels, skipped = gen_market(cfg, delta_c_minutes)
    trades_path = out / "trades.csv"
    labels_path = out / "labels.csv"
    write_trades(trades_path, trades)
    write_labels(labels_path, labels)
    return trades_path, labels_path, skipped
