"""OHLC ingestion and rule-based synthesis of labeled candlestick windows.

Eight reversal patterns are supported, each defined by an explicit predicate
over the last one to three candles of a window plus the direction of the
trend formed by the preceding bars. The synthetic generator constructs
windows that satisfy those predicates by a margin, so every generated
sample validates against its own label.

Body-size thresholds are fixed ratios of the mean trend-bar body:
a "long" body is at least ``LONG_BODY_RATIO`` times that mean, a "small"
body at most ``SMALL_BODY_RATIO`` times it. Trend direction is the sign of
the net close-to-close move across the prefix bars.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import (
    ConfigInvalid,
    GenerationExhausted,
    InvariantViolation,
    MalformedRow,
)

OHLC_HEADER = ("timestamp", "open", "high", "low", "close")
ARCHIVE_HEADER = ("label", "bar_index", "open", "high", "low", "close")

LONG_BODY_RATIO = 1.5
SMALL_BODY_RATIO = 0.5
SHADOW_BODY_RATIO = 2.0  # shooting star / inverted hammer upper shadow

_EPOCH_BASE = 1_577_836_800  # synthetic windows start 2020-01-01, 1-min bars
_BAR_SECONDS = 60


class PatternClass(enum.IntEnum):
    """The eight supported candlestick patterns; values are label indices."""

    MORNING_STAR = 0
    EVENING_STAR = 1
    BULLISH_ENGULFING = 2
    BEARISH_ENGULFING = 3
    SHOOTING_STAR = 4
    INVERTED_HAMMER = 5
    BULLISH_HARAMI = 6
    BEARISH_HARAMI = 7

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def from_label(cls, label: str) -> "PatternClass":
        try:
            return cls[label.upper()]
        except KeyError:
            raise InvariantViolation(f"unknown pattern label {label!r}") from None


# Number of candles the pattern rule itself inspects ...
SIGNAL_BARS = {
    PatternClass.MORNING_STAR: 3,
    PatternClass.EVENING_STAR: 3,
    PatternClass.BULLISH_ENGULFING: 2,
    PatternClass.BEARISH_ENGULFING: 2,
    PatternClass.SHOOTING_STAR: 1,
    PatternClass.INVERTED_HAMMER: 1,
    PatternClass.BULLISH_HARAMI: 2,
    PatternClass.BEARISH_HARAMI: 2,
}

# ... and the direction of the trend the pattern reverses (+1 up, -1 down).
TREND_DIRECTION = {
    PatternClass.MORNING_STAR: -1,
    PatternClass.EVENING_STAR: +1,
    PatternClass.BULLISH_ENGULFING: -1,
    PatternClass.BEARISH_ENGULFING: +1,
    PatternClass.SHOOTING_STAR: +1,
    PatternClass.INVERTED_HAMMER: -1,
    PatternClass.BULLISH_HARAMI: -1,
    PatternClass.BEARISH_HARAMI: +1,
}


@dataclass(frozen=True)
class OhlcBar:
    """One candlestick: four prices over a single interval."""

    timestamp: int
    open: float
    high: float
    low: float
    close: float

    def __post_init__(self) -> None:
        # Normalize numpy scalars so equality and repr round-trips hold.
        object.__setattr__(self, "timestamp", int(self.timestamp))
        for name in ("open", "high", "low", "close"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if min(self.open, self.high, self.low, self.close) <= 0:
            raise InvariantViolation("all prices must be strictly positive")
        if self.low > min(self.open, self.close):
            raise InvariantViolation(
                f"low ({self.low}) above a body edge "
                f"(open={self.open}, close={self.close})")
        if self.high < max(self.open, self.close):
            raise InvariantViolation(
                f"high ({self.high}) below a body edge "
                f"(open={self.open}, close={self.close})")

    @property
    def body(self) -> float:
        return abs(self.close - self.open)

    @property
    def is_white(self) -> bool:
        """Rising candle (close above open)."""
        return self.close > self.open

    @property
    def is_black(self) -> bool:
        """Falling candle (close below open)."""
        return self.close < self.open

    @property
    def body_top(self) -> float:
        return max(self.open, self.close)

    @property
    def body_bottom(self) -> float:
        return min(self.open, self.close)

    @property
    def body_mid(self) -> float:
        return 0.5 * (self.open + self.close)

    @property
    def upper_shadow(self) -> float:
        return self.high - self.body_top

    @property
    def lower_shadow(self) -> float:
        return self.body_bottom - self.low


@dataclass(frozen=True)
class Window:
    """A fixed-length run of consecutive bars."""

    bars: tuple[OhlcBar, ...]

    def __post_init__(self) -> None:
        if not self.bars:
            raise InvariantViolation("window must contain at least one bar")
        ts = [b.timestamp for b in self.bars]
        if any(b >= a for b, a in zip(ts, ts[1:])):
            raise InvariantViolation("timestamps must be strictly increasing")

    def __len__(self) -> int:
        return len(self.bars)

    def __getitem__(self, i):
        return self.bars[i]

    def channels(self) -> np.ndarray:
        """The four price series as a (4, W) array: open, high, low, close."""
        return np.array([
            [b.open for b in self.bars],
            [b.high for b in self.bars],
            [b.low for b in self.bars],
            [b.close for b in self.bars],
        ])


@dataclass(frozen=True)
class LabeledWindow:
    window: Window
    label: PatternClass


@dataclass(frozen=True)
class GeneratorParams:
    """Knobs for the synthetic pattern generator.

    ``base_body_frac`` sets the mean trend-bar body as a fraction of the
    price scale; everything else is sized relative to that body.
    """

    window_length: int = 10
    price_scale: float = 100.0
    base_body_frac: float = 0.01
    counter_trend_frac: float = 0.25  # max fraction of retracing trend bars
    max_attempts: int = 100

    def __post_init__(self) -> None:
        if self.window_length < 5:
            raise ConfigInvalid("window_length must be >= 5 "
                                "(3 signal bars + 2 trend bars)")
        if self.price_scale <= 0 or self.base_body_frac <= 0:
            raise ConfigInvalid("price_scale and base_body_frac must be > 0")
        if not 0.0 <= self.counter_trend_frac < 0.5:
            raise ConfigInvalid("counter_trend_frac must be in [0, 0.5)")
        if self.max_attempts < 1:
            raise ConfigInvalid("max_attempts must be >= 1")


@dataclass(frozen=True)
class Dataset:
    """Balanced, seed-reproducible train/test splits of labeled windows."""

    train: tuple[LabeledWindow, ...]
    test: tuple[LabeledWindow, ...]
    seed: int
    params: GeneratorParams = field(default_factory=GeneratorParams)


# ---------------------------------------------------------------------------
# Pattern predicates
# ---------------------------------------------------------------------------

def _trend_holds(bars: tuple[OhlcBar, ...], direction: int) -> bool:
    if len(bars) < 2:
        return False
    return direction * (bars[-1].close - bars[0].close) > 0


def _is_long(bar: OhlcBar, mean_body: float) -> bool:
    return bar.body >= LONG_BODY_RATIO * mean_body


def _is_small(bar: OhlcBar, mean_body: float) -> bool:
    return bar.body <= SMALL_BODY_RATIO * mean_body


def _morning_star(b1, b2, b3, mean_body) -> bool:
    return (b1.is_black and _is_long(b1, mean_body)
            and _is_small(b2, mean_body)
            and b3.is_white and b3.close > b1.body_mid)


def _evening_star(b1, b2, b3, mean_body) -> bool:
    return (b1.is_white and _is_long(b1, mean_body)
            and _is_small(b2, mean_body)
            and b3.is_black and b3.close < b1.body_mid)


def _bullish_engulfing(b1, b2) -> bool:
    return (b1.is_black and b2.is_white
            and b2.open <= b1.close and b2.close >= b1.open)


def _bearish_engulfing(b1, b2) -> bool:
    return (b1.is_white and b2.is_black
            and b2.open >= b1.close and b2.close <= b1.open)


def _star_shape(bar, mean_body) -> bool:
    return (_is_small(bar, mean_body)
            and bar.upper_shadow > 0
            and bar.upper_shadow >= SHADOW_BODY_RATIO * bar.body)


def _bullish_harami(b1, b2, mean_body) -> bool:
    return (b1.is_black and _is_long(b1, mean_body)
            and b2.is_white and _is_small(b2, mean_body)
            and b1.close < b2.open and b2.close < b1.open)


def _bearish_harami(b1, b2, mean_body) -> bool:
    return (b1.is_white and _is_long(b1, mean_body)
            and b2.is_black and _is_small(b2, mean_body)
            and b1.open < b2.close and b2.open < b1.close)


def validate_pattern(window: Window, pattern: PatternClass) -> bool:
    """Pure, deterministic check that a window realizes a pattern.

    Windows too short to hold the pattern's signal bars plus a two-bar
    trend prefix return False rather than raising.
    """
    n_sig = SIGNAL_BARS[pattern]
    trend = window.bars[:-n_sig] if len(window) > n_sig else ()
    if not _trend_holds(trend, TREND_DIRECTION[pattern]):
        return False
    mean_body = float(np.mean([b.body for b in trend]))
    if mean_body <= 0:
        return False
    sig = window.bars[-n_sig:]
    if pattern is PatternClass.MORNING_STAR:
        return _morning_star(*sig, mean_body)
    if pattern is PatternClass.EVENING_STAR:
        return _evening_star(*sig, mean_body)
    if pattern is PatternClass.BULLISH_ENGULFING:
        return _bullish_engulfing(*sig)
    if pattern is PatternClass.BEARISH_ENGULFING:
        return _bearish_engulfing(*sig)
    if pattern is PatternClass.SHOOTING_STAR:
        return _star_shape(sig[0], mean_body)
    if pattern is PatternClass.INVERTED_HAMMER:
        return _star_shape(sig[0], mean_body)
    if pattern is PatternClass.BULLISH_HARAMI:
        return _bullish_harami(*sig, mean_body)
    return _bearish_harami(*sig, mean_body)


# ---------------------------------------------------------------------------
# Synthetic generation
# ---------------------------------------------------------------------------

def _make_bar(ts, open_, close, shadow_lo, shadow_hi) -> OhlcBar:
    top, bottom = max(open_, close), min(open_, close)
    return OhlcBar(ts, open_, top + shadow_hi, bottom - shadow_lo, close)


def _build_trend(rng: np.random.Generator, params: GeneratorParams,
                 n: int, direction: int) -> list[OhlcBar]:
    """Drifting random walk of n bars; net close move matches direction.

    At most ``counter_trend_frac`` of the bars retrace, and retraces are
     0.4x the size of with-trend steps, so the net move is directional by
    construction.
    """
    unit = params.price_scale * params.base_body_frac
    level = params.price_scale * (1.0 + 0.1 * rng.uniform(-1, 1))
    # Keep downtrends well above zero even for long windows.
    if direction < 0:
        level += 2.0 * n * unit
    n_counter = int(params.counter_trend_frac * n)
    counter = set(rng.choice(n - 1, size=n_counter, replace=False) + 1) \
        if n_counter else set()
    bars = []
    for i in range(n):
        open_ = level * (1.0 + 1e-4 * rng.uniform(-1, 1))
        step = unit * rng.uniform(0.6, 1.4)
        if i in counter:
            step *= -0.4
        close = open_ + direction * step
        lo, hi = unit * rng.uniform(0.05, 0.35, size=2)
        bars.append(_make_bar(_EPOCH_BASE + _BAR_SECONDS * i, open_, close, lo, hi))
        level = close
    return bars


def _build_signal(rng: np.random.Generator, pattern: PatternClass,
                  trend: list[OhlcBar], unit: float) -> list[OhlcBar]:
    """Construct the pattern's signal bars with margin over the thresholds."""
    mean_body = float(np.mean([b.body for b in trend]))
    t0 = trend[-1].timestamp + _BAR_SECONDS
    prev_close = trend[-1].close
    long_body = mean_body * rng.uniform(1.9, 2.6)
    small_body = mean_body * rng.uniform(0.15, 0.4)

    def shadows():
        return mean_body * rng.uniform(0.05, 0.3, size=2)

    def bar(i, open_, close, lo=None, hi=None):
        s_lo, s_hi = shadows()
        return _make_bar(t0 + _BAR_SECONDS * i, open_, close,
                         s_lo if lo is None else lo,
                         s_hi if hi is None else hi)

    if pattern in (PatternClass.MORNING_STAR, PatternClass.EVENING_STAR):
        sign = -1 if pattern is PatternClass.MORNING_STAR else +1
        o1 = prev_close * (1 + 1e-4 * rng.uniform(-1, 1))
        c1 = o1 + sign * long_body
        b1 = bar(0, o1, c1)
        o2 = c1 + sign * mean_body * rng.uniform(0.1, 0.5)
        c2 = o2 + rng.choice([-1, 1]) * small_body
        b2 = bar(1, o2, c2)
        o3 = c1 + sign * mean_body * rng.uniform(0.0, 0.4)
        c3 = b1.body_mid - sign * b1.body * rng.uniform(0.15, 0.45)
        b3 = bar(2, o3, c3)
        return [b1, b2, b3]

    if pattern in (PatternClass.BULLISH_ENGULFING, PatternClass.BEARISH_ENGULFING):
        sign = -1 if pattern is PatternClass.BULLISH_ENGULFING else +1
        body1 = mean_body * rng.uniform(0.7, 1.2)
        o1 = prev_close * (1 + 1e-4 * rng.uniform(-1, 1))
        c1 = o1 + sign * body1
        o2 = c1 + sign * body1 * rng.uniform(0.08, 0.3)
        c2 = o1 - sign * body1 * rng.uniform(0.08, 0.35)
        return [bar(0, o1, c1), bar(1, o2, c2)]

    if pattern in (PatternClass.SHOOTING_STAR, PatternClass.INVERTED_HAMMER):
        o1 = prev_close * (1 + 1e-4 * rng.uniform(-1, 1))
        c1 = o1 + rng.choice([-1, 1]) * small_body
        up = max(small_body * rng.uniform(2.5, 4.0), mean_body * 0.8)
        lo = small_body * rng.uniform(0.0, 0.25)
        return [bar(0, o1, c1, lo=lo, hi=up)]

    # Harami pair: long first body, small second body strictly inside it.
    sign = -1 if pattern is PatternClass.BULLISH_HARAMI else +1
    o1 = prev_close * (1 + 1e-4 * rng.uniform(-1, 1))
    c1 = o1 + sign * long_body
    b1 = bar(0, o1, c1)
    center = b1.body_bottom + b1.body * rng.uniform(0.35, 0.65)
    o2 = center + sign * small_body / 2
    c2 = center - sign * small_body / 2
    return [b1, bar(1, o2, c2)]


def generate_pattern(pattern: PatternClass, rng: np.random.Generator,
                     params: GeneratorParams | None = None) -> Window:
    """Draw one window realizing ``pattern``; pure function of the stream.

    Raises GenerationExhausted if ``params.max_attempts`` constructions all
    fail validation (does not happen under the default parameters).
    """
    params = params or GeneratorParams()
    n_sig = SIGNAL_BARS[pattern]
    n_trend = params.window_length - n_sig
    unit = params.price_scale * params.base_body_frac
    for _ in range(params.max_attempts):
        trend = _build_trend(rng, params, n_trend, TREND_DIRECTION[pattern])
        window = Window(tuple(trend + _build_signal(rng, pattern, trend, unit)))
        if validate_pattern(window, pattern):
            return window
    raise GenerationExhausted(
        f"no valid {pattern.label} window in {params.max_attempts} attempts")


def build_dataset(per_class_train: int, per_class_test: int, seed: int,
                  params: GeneratorParams | None = None) -> Dataset:
    """Generate balanced train/test splits; bit-identical for a given seed.

    Each sample owns an independent random stream keyed by
    (seed, split, class, index), so samples never share draws and splits
    are disjoint with probability one.
    """
    if per_class_train < 1 or per_class_test < 1:
        raise ConfigInvalid("per-class counts must be >= 1")
    params = params or GeneratorParams()

    def make(split_id: int, count: int) -> tuple[LabeledWindow, ...]:
        out = []
        for pattern in PatternClass:
            for i in range(count):
                rng = np.random.default_rng([seed, split_id, int(pattern), i])
                out.append(LabeledWindow(generate_pattern(pattern, rng, params),
                                         pattern))
        return tuple(out)

    return Dataset(train=make(0, per_class_train),
                   test=make(1, per_class_test),
                   seed=seed, params=params)


# ---------------------------------------------------------------------------
# CSV ingestion and archives
# ---------------------------------------------------------------------------

def load_ohlc_csv(path) -> list[OhlcBar]:
    """Read a `timestamp,open,high,low,close` CSV into validated bars.

    Rows must already be sorted strictly ascending by timestamp. Errors
    identify the offending 1-based row number.
    """
    bars: list[OhlcBar] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != OHLC_HEADER:
            raise MalformedRow(f"row 1: expected header {','.join(OHLC_HEADER)}")
        for row_no, row in enumerate(reader, start=2):
            if len(row) != 5:
                raise MalformedRow(f"row {row_no}: expected 5 fields, got {len(row)}")
            try:
                ts = int(row[0])
                o, h, l, c = (float(v) for v in row[1:])
            except ValueError as exc:
                raise MalformedRow(f"row {row_no}: {exc}") from None
            try:
                bar = OhlcBar(ts, o, h, l, c)
            except InvariantViolation as exc:
                raise InvariantViolation(f"row {row_no}: {exc}") from None
            if bars and bar.timestamp <= bars[-1].timestamp:
                raise InvariantViolation(
                    f"row {row_no}: timestamp {bar.timestamp} not ascending")
            bars.append(bar)
    return bars


def write_ohlc_csv(path, bars) -> None:
    """Inverse of load_ohlc_csv; floats are written in shortest round-trip form."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(OHLC_HEADER)
        for b in bars:
            writer.writerow([b.timestamp, repr(b.open), repr(b.high),
                             repr(b.low), repr(b.close)])


def sliding_windows(bars, length: int, stride: int = 1) -> list[Window]:
    """Extract fixed-length windows, dropping degenerate (zero-range) ones."""
    if length < 1 or stride < 1:
        raise ConfigInvalid("length and stride must be >= 1")
    out = []
    for start in range(0, len(bars) - length + 1, stride):
        chunk = tuple(bars[start:start + length])
        if max(b.high for b in chunk) == min(b.low for b in chunk):
            continue
        out.append(Window(chunk))
    return out


def save_dataset(dataset: Dataset, directory) -> None:
    """Write train.csv / test.csv plus a meta.txt with the provenance."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, split in (("train.csv", dataset.train), ("test.csv", dataset.test)):
        with open(directory / name, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(ARCHIVE_HEADER)
            for item in split:
                for i, b in enumerate(item.window.bars):
                    writer.writerow([item.label.label, i, repr(b.open),
                                     repr(b.high), repr(b.low), repr(b.close)])
    lines = [f"seed={dataset.seed}"]
    for f in fields(GeneratorParams):
        lines.append(f"{f.name}={getattr(dataset.params, f.name)}")
    (directory / "meta.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _read_split(path, window_length: int) -> tuple[LabeledWindow, ...]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != ARCHIVE_HEADER:
            raise MalformedRow(f"{path}: expected header {','.join(ARCHIVE_HEADER)}")
        pending: list[OhlcBar] = []
        label: PatternClass | None = None
        for row_no, row in enumerate(reader, start=2):
            pattern = PatternClass.from_label(row[0])
            bar_index = int(row[1])
            if bar_index != len(pending):
                raise MalformedRow(f"row {row_no}: bar_index out of sequence")
            if label is None:
                label = pattern
            elif pattern is not label:
                raise MalformedRow(f"row {row_no}: label changed mid-window")
            o, h, l, c = (float(v) for v in row[2:])
            pending.append(OhlcBar(_EPOCH_BASE + _BAR_SECONDS * bar_index,
                                   o, h, l, c))
            if len(pending) == window_length:
                out.append(LabeledWindow(Window(tuple(pending)), label))
                pending, label = [], None
    if pending:
        raise MalformedRow(f"{path}: trailing partial window of {len(pending)} bars")
    return tuple(out)


def load_dataset(directory) -> Dataset:
    """Read an archive written by save_dataset."""
    directory = Path(directory)
    meta = {}
    for line in (directory / "meta.txt").read_text(encoding="utf-8").splitlines():
        key, _, value = line.partition("=")
        meta[key] = value
    params = GeneratorParams(
        window_length=int(meta["window_length"]),
        price_scale=float(meta["price_scale"]),
        base_body_frac=float(meta["base_body_frac"]),
        counter_trend_frac=float(meta["counter_trend_frac"]),
        max_attempts=int(meta["max_attempts"]),
    )
    return Dataset(
        train=_read_split(directory / "train.csv", params.window_length),
        test=_read_split(directory / "test.csv", params.window_length),
        seed=int(meta["seed"]),
        params=params,
    )
