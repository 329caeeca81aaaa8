"""Flight-style time series: ingestion, scaling, ranking, windowing, synthesis.

A flight is a set of equal-length channels sampled once per second, one of
which is the vibration target ``Vib``. Real corpora arrive as one CSV per
flight; a synthetic generator provides corpora with known structure.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DegenerateRange,
    EmptyFile,
    FlightTooShort,
    LengthMismatch,
    MissingColumn,
    NoFlights,
    ParseError,
)

VIB_CHANNEL = "Vib"


@dataclass
class FlightSeries:
    """One flight: named channels over a shared per-second time axis.

    ``data`` is (n_channels, length_s) float64; ``names[k]`` labels row k.
    """

    id: str
    names: list[str]
    data: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2 or self.data.shape[0] != len(self.names):
            raise LengthMismatch(
                f"flight {self.id!r}: {len(self.names)} names vs data shape {self.data.shape}"
            )
        if len(set(self.names)) != len(self.names):
            raise ParseError(f"flight {self.id!r}: duplicate channel names")

    @property
    def length_s(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> list[tuple[str, np.ndarray]]:
        return list(zip(self.names, self.data))

    def channel(self, name: str) -> np.ndarray:
        try:
            return self.data[self.names.index(name)]
        except ValueError:
            raise MissingColumn(name) from None


@dataclass
class ParameterRanking:
    """Channels sorted by correlation score, descending; name breaks ties."""

    entries: list[tuple[str, float]]

    def names(self) -> list[str]:
        return [name for name, _ in self.entries]


@dataclass
class WindowedDataset:
    """Supervised samples cut from flights.

    ``X`` is (n_samples, T, width) where width = len(channel_order) + 1 and
    the last input column is the constant-1 bias line. ``y[i]`` is the target
    vibration H seconds past the end of window i. ``flight_ids``/``starts``
    record where each sample came from.
    """

    T: int
    H: int
    channel_order: list[str]
    X: np.ndarray
    y: np.ndarray
    flight_ids: list[str]
    starts: np.ndarray

    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def width(self) -> int:
        return self.X.shape[2]


def load_flight_csv(path, schema=None) -> FlightSeries:
    """Read one flight from CSV; ``schema`` picks and orders channels.

    With schema None the header order is used. Any cell that does not parse
    as a finite float is an error, never silently dropped.
    """
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise EmptyFile(str(path)) from None
        names = list(schema) if schema is not None else header
        for name in names:
            if name not in header:
                raise MissingColumn(name)
        cols = [header.index(name) for name in names]
        rows = []
        for rnum, row in enumerate(reader, start=2):
            if not any(cell.strip() for cell in row):
                continue  # trailing blank line
            if len(row) != len(header):
                raise ParseError(f"{path}:{rnum}: expected {len(header)} cells, got {len(row)}")
            vals = []
            for cnum in cols:
                cell = row[cnum].strip()
                try:
                    v = float(cell)
                except ValueError:
                    raise ParseError(f"{path}:{rnum}: column {cnum + 1}: {cell!r}") from None
                if not math.isfinite(v):
                    raise ParseError(f"{path}:{rnum}: column {cnum + 1}: non-finite {cell!r}")
                vals.append(v)
            rows.append(vals)
    if not rows:
        raise EmptyFile(str(path))
    data = np.array(rows, dtype=np.float64).T
    return FlightSeries(id=path.stem, names=names, data=data)


def save_flight_csv(series: FlightSeries, path) -> None:
    """Write a flight as CSV; ``repr`` formatting round-trips float64 exactly."""
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(series.names)
        for t in range(series.length_s):
            writer.writerow([repr(float(v)) for v in series.data[:, t]])


def channel_ranges(flights) -> dict[str, tuple[float, float]]:
    """Per-channel (min, max) across a corpus; rejects constant channels."""
    flights = list(flights)
    if not flights:
        raise NoFlights("cannot compute ranges over zero flights")
    names = flights[0].names
    ranges = {}
    for name in names:
        lo = min(float(f.channel(name).min()) for f in flights)
        hi = max(float(f.channel(name).max()) for f in flights)
        if hi == lo:
            raise DegenerateRange(name)
        ranges[name] = (lo, hi)
    return ranges


def normalize(series: FlightSeries, ranges) -> FlightSeries:
    """Min-max scale every channel into [0,1] using the supplied ranges.

    Ranges come from the training corpus and are reused verbatim elsewhere;
    values outside a range clamp rather than error.
    """
    out = np.empty_like(series.data)
    for k, name in enumerate(series.names):
        if name not in ranges:
            raise MissingColumn(name)
        lo, hi = ranges[name]
        if hi == lo:
            raise DegenerateRange(name)
        out[k] = np.clip((series.data[k] - lo) / (hi - lo), 0.0, 1.0)
    return FlightSeries(id=series.id, names=list(series.names), data=out, meta=dict(series.meta))


def cross_correlate(x, vib) -> float:
    """Correlation score between two equal-length signals.

    Computes the full zero-padded cross-correlation r[k] = sum_a x[a]*vib[a+k]
    over every lag with any overlap, then returns sum(|r[k]|) / len(x). The
    score is symmetric in its arguments and nonnegative.
    """
    x = np.asarray(x, dtype=np.float64)
    vib = np.asarray(vib, dtype=np.float64)
    if x.shape != vib.shape or x.ndim != 1:
        raise LengthMismatch(f"{x.shape} vs {vib.shape}")
    r = np.correlate(x, vib, mode="full")
    return float(np.abs(r).sum() / x.size)


def rank_parameters(flights) -> ParameterRanking:
    """Rank every channel by its mean correlation score against ``Vib``.

    Flights must already be normalized and share a channel set. Descending
    score; equal scores order by name ascending.
    """
    flights = list(flights)
    if not flights:
        raise NoFlights("rank_parameters needs at least one flight")
    names = flights[0].names
    if VIB_CHANNEL not in names:
        raise MissingColumn(VIB_CHANNEL)
    scores = {name: 0.0 for name in names}
    for f in flights:
        vib = f.channel(VIB_CHANNEL)
        for name in names:
            scores[name] += cross_correlate(f.channel(name), vib)
    entries = [(name, scores[name] / len(flights)) for name in names]
    entries.sort(key=lambda e: (-e[1], e[0]))
    return ParameterRanking(entries=entries)


def make_windows(flights, T: int, H: int, channel_order) -> WindowedDataset:
    """Cut every flight into sliding windows of T seconds with horizon H.

    For each start s with s+T-1+H < length the sample is X = channels at
    seconds s..s+T-1 plus a constant-1 bias column, y = Vib at s+T-1+H.
    Samples are ordered by (flight id, s); windows never span flights.
    """
    flights = sorted(flights, key=lambda f: f.id)
    if not flights:
        raise NoFlights("make_windows needs at least one flight")
    channel_order = list(channel_order)
    xs, ys, fids, starts = [], [], [], []
    for f in flights:
        n_samples = f.length_s - T - H + 1
        if n_samples < 1:
            raise FlightTooShort(f"{f.id}: length {f.length_s} < T + H = {T + H}")
        chans = np.stack([f.channel(name) for name in channel_order])  # (n, length)
        vib = f.channel(VIB_CHANNEL)
        for s in range(n_samples):
            win = chans[:, s:s + T].T  # (T, n)
            xs.append(np.hstack([win, np.ones((T, 1))]))
            ys.append(vib[s + T - 1 + H])
            fids.append(f.id)
            starts.append(s)
    return WindowedDataset(
        T=T,
        H=H,
        channel_order=channel_order,
        X=np.array(xs, dtype=np.float64),
        y=np.array(ys, dtype=np.float64),
        flight_ids=fids,
        starts=np.array(starts, dtype=np.int64),
    )


def synth_flights(seed: int, n_flights: int, length_s: int, n_channels: int):
    """Generate a deterministic corpus with a known learnable structure.

    Each flight has n_channels - 1 smooth parameter channels (slow sinusoids
    around a level, plus mild noise) and a ``Vib`` channel computed as a fixed
    nonlinear lagged mixture of the first min(3, n_channels-1) parameters.
    Mixture channels share the flight's level; decoys sit at level 0.5, so a
    correlation ranking separates the two groups. The generating formula and
    the mixture channel names are recorded in each flight's ``meta``.
    """
    if n_channels < 2:
        raise ValueError("n_channels must be >= 2")
    if length_s < 40:
        raise ValueError("length_s must be >= 40")
    rng = np.random.default_rng(seed)
    n_aux = n_channels - 1
    n_mix = min(3, n_aux)
    aux_names = [f"P{k + 1:02d}" for k in range(n_aux)]
    formula = (
        "Vib[t] = 0.10 + 0.55*c1[t-2] + 0.22*c2[t-4]*c3[t-1]"
        " + 0.08*c1[t-3]^2 + N(0, 0.006), clipped to [0,1]"
    )

    def lag(x, d):
        # edge-padded shift: value at t is x[max(t - d, 0)]
        return np.concatenate([np.full(d, x[0]), x[:-d]]) if d else x

    t = np.arange(length_s, dtype=np.float64)
    # stratified flight levels: one per equal slice of [0.15, 0.85], shuffled,
    # so every corpus realizes the full operating range
    strata = rng.permutation(n_flights)
    levels = 0.15 + 0.7 * (strata + rng.uniform(0.1, 0.9, n_flights)) / n_flights
    flights = []
    for fnum in range(n_flights):
        level = levels[fnum]
        aux = np.empty((n_aux, length_s))
        for k in range(n_aux):
            base = np.clip(level + rng.uniform(-0.04, 0.04), 0.05, 0.95) if k < n_mix else 0.5
            slow_amp = rng.uniform(0.06, 0.11)
            slow_per = length_s * rng.uniform(2.0, 3.5)
            fast_amp = rng.uniform(0.02, 0.05)
            fast_per = length_s / rng.uniform(3.0, 6.0)
            wave = (
                slow_amp * np.sin(2 * np.pi * t / slow_per + rng.uniform(0, 2 * np.pi))
                + fast_amp * np.sin(2 * np.pi * t / fast_per + rng.uniform(0, 2 * np.pi))
            )
            # center the waveform so the flight mean equals base; the
            # correlation ranking keys on flight-level means
            wave -= wave.mean()
            aux[k] = np.clip(base + wave + rng.normal(0.0, 0.008, length_s), 0.0, 1.0)
        c1, c2, c3 = aux[0], aux[1 % n_mix], aux[2 % n_mix]
        vib = (
            0.10
            + 0.55 * lag(c1, 2)
            + 0.22 * lag(c2, 4) * lag(c3, 1)
            + 0.08 * lag(c1, 3) ** 2
            + rng.normal(0.0, 0.006, length_s)
        )
        data = np.vstack([aux, np.clip(vib, 0.0, 1.0)])
        flights.append(
            FlightSeries(
                id=f"flight_{fnum:03d}",
                names=aux_names + [VIB_CHANNEL],
                data=data,
                meta={
                    "generator_seed": seed,
                    "mixture_channels": aux_names[:n_mix],
                    "formula": formula,
                    "level": level,
                },
            )
        )
    return flights
