"""Glucose/context ingestion, windowing and synthetic data.

Glucose values are mg/dl with ``0`` as the missing-value sentinel. Real
readings must be at least 10 mg/dl so the sentinel is never ambiguous.
"""

import csv
import enum
import logging
import re
from collections import Counter, OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import InputShapeError, MissingValueError, ParseError, SchemaError, SplitError

log = logging.getLogger(__name__)

MISSING = 0.0
PHYSIOLOGICAL_FLOOR = 10.0
HYPO_BELOW = 70.0
HYPER_ABOVE = 180.0
SAMPLE_MINUTES = 5
WEEK_MINUTES = 7 * 24 * 60

GLUCOSE_HEADER = ("user_id", "timestamp_min", "bg_mgdl")
TEXT_HEADER = ("user_id", "timestamp_min", "text")


class GlycemicLabel(enum.IntEnum):
    HYPO = 0
    EU = 1
    HYPER = 2

    def __str__(self):
        return _LABEL_NAMES[self]

    @classmethod
    def parse(cls, name):
        for label, label_name in _LABEL_NAMES.items():
            if name.strip().lower() == label_name.lower():
                return label
        raise ValueError(f"unknown glycemic label {name!r}")


_LABEL_NAMES = {GlycemicLabel.HYPO: "Hypo", GlycemicLabel.EU: "Eu", GlycemicLabel.HYPER: "Hyper"}

# Tie-breaking order, most safety-relevant first.
LABEL_PRIORITY = (GlycemicLabel.HYPO, GlycemicLabel.HYPER, GlycemicLabel.EU)


DEFAULT_THRESHOLDS = (HYPO_BELOW, HYPER_ABOVE)


def categorize(v, thresholds=DEFAULT_THRESHOLDS):
    """Map a reading in mg/dl to its glycemic range.

    Below 70 is hypoglycemic, above 180 hyperglycemic, and both boundary
    values themselves count as euglycemic.
    """
    v = float(v)
    if not v >= PHYSIOLOGICAL_FLOOR:
        raise MissingValueError(f"{v} mg/dl is the missing sentinel or below the physiological floor")
    low, high = thresholds
    if v < low:
        return GlycemicLabel.HYPO
    if v > high:
        return GlycemicLabel.HYPER
    return GlycemicLabel.EU


def categorize_array(values, thresholds=DEFAULT_THRESHOLDS):
    values = np.asarray(values, dtype=float)
    if values.size and not np.all(values >= PHYSIOLOGICAL_FLOOR):
        raise MissingValueError("cannot categorize missing or sub-floor readings")
    low, high = thresholds
    out = np.full(values.shape, int(GlycemicLabel.EU), dtype=int)
    out[values < low] = GlycemicLabel.HYPO
    out[values > high] = GlycemicLabel.HYPER
    return out


@dataclass(frozen=True)
class GlucoseSeries:
    user_id: str
    timestamps: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype=np.int64)
        vals = np.asarray(self.values, dtype=float)
        if ts.ndim != 1 or ts.shape != vals.shape:
            raise InputShapeError("timestamps and values must be equal-length vectors")
        if ts.size > 1 and not np.all(np.diff(ts) > 0):
            bad = int(np.argmax(np.diff(ts) <= 0)) + 1
            raise ParseError(f"timestamps for user {self.user_id!r} not strictly increasing at index {bad}")
        ambiguous = (vals != MISSING) & ~(vals >= PHYSIOLOGICAL_FLOOR)
        if np.any(ambiguous):
            raise MissingValueError(
                f"user {self.user_id!r}: readings below {PHYSIOLOGICAL_FLOOR} mg/dl are ambiguous with the sentinel")
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "values", vals)

    def __len__(self):
        return self.values.size

    @property
    def n_observed(self):
        return int(np.count_nonzero(self.values != MISSING))


@dataclass(frozen=True)
class SideInfo:
    user_id: str
    timestamps: np.ndarray
    features: np.ndarray
    feature_names: tuple

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype=np.int64)
        feats = np.asarray(self.features, dtype=float)
        if feats.ndim == 1:
            feats = feats.reshape(ts.size, -1)
        names = tuple(self.feature_names)
        if feats.shape != (ts.size, len(names)):
            raise InputShapeError(f"features {feats.shape} do not match {ts.size} timestamps x {len(names)} names")
        if len(set(names)) != len(names):
            raise SchemaError("side feature names must be unique")
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "feature_names", names)

    @property
    def n_features(self):
        return len(self.feature_names)

    def select(self, names):
        idx = [self.feature_names.index(n) for n in names]
        return SideInfo(self.user_id, self.timestamps, self.features[:, idx], tuple(names))


@dataclass
class WindowedDataset:
    """Supervised windows: glucose history V, context S and targets."""

    V: np.ndarray
    S: np.ndarray
    y_value: np.ndarray
    y_label: np.ndarray
    window_len: int
    horizon: int
    t_end: np.ndarray = None
    t_target: np.ndarray = None
    user_ids: np.ndarray = None
    side_names: tuple = ()
    flags: list = field(default_factory=list)

    def __post_init__(self):
        n = self.V.shape[0]
        if self.t_end is None:
            self.t_end = np.zeros(n, dtype=np.int64)
        if self.t_target is None:
            self.t_target = np.zeros(n, dtype=np.int64)
        if self.user_ids is None:
            self.user_ids = np.array([""] * n, dtype=object)
        self.side_names = tuple(self.side_names)

    def __len__(self):
        return self.V.shape[0]

    def subset(self, index):
        return WindowedDataset(self.V[index], self.S[index], self.y_value[index], self.y_label[index],
                               self.window_len, self.horizon, self.t_end[index], self.t_target[index],
                               self.user_ids[index], self.side_names, list(self.flags))

    def select_side(self, names):
        idx = [self.side_names.index(n) for n in names]
        out = self.subset(slice(None))
        out.S = self.S[:, idx]
        out.side_names = tuple(names)
        return out

    @classmethod
    def concat(cls, parts):
        parts = list(parts)
        if not parts:
            raise ValueError("nothing to concatenate")
        first = parts[0]
        return cls(np.vstack([p.V for p in parts]), np.vstack([p.S for p in parts]),
                   np.concatenate([p.y_value for p in parts]), np.concatenate([p.y_label for p in parts]),
                   first.window_len, first.horizon,
                   np.concatenate([p.t_end for p in parts]), np.concatenate([p.t_target for p in parts]),
                   np.concatenate([p.user_ids for p in parts]), first.side_names,
                   [f for p in parts for f in p.flags])


# --------------------------------------------------------------------------
# CSV input/output


def _open_csv(path):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    return path.open("r", encoding="utf-8", newline="")


def _read_rows(path, expected_prefix):
    with _open_csv(path) as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if tuple(header[:len(expected_prefix)]) != expected_prefix:
            raise SchemaError(f"{path}: header must start with {','.join(expected_prefix)}, got {','.join(header)}")
        rows = [(reader.line_num, row) for row in reader if row]
    return header, rows


def _parse_timestamp(text, line):
    try:
        ts = int(text)
    except ValueError:
        raise ParseError(f"timestamp_min {text!r} is not an integer", line) from None
    if ts < 0:
        raise ParseError(f"negative timestamp_min {ts}", line)
    return ts


def _parse_float(text, line, column):
    try:
        value = float(text)
    except ValueError:
        raise ParseError(f"{column} value {text!r} is not a number", line) from None
    if not np.isfinite(value):
        raise ParseError(f"{column} value {text!r} is not finite", line)
    return value


def read_glucose_csv(path):
    """Read ``user_id,timestamp_min,bg_mgdl`` rows into per-user series (file order of users kept)."""
    header, rows = _read_rows(path, GLUCOSE_HEADER)
    if len(header) != len(GLUCOSE_HEADER):
        raise SchemaError(f"{path}: unknown columns {header[len(GLUCOSE_HEADER):]}")
    per_user = OrderedDict()
    for line, row in rows:
        if len(row) != 3:
            raise ParseError(f"expected 3 fields, got {len(row)}", line)
        user, ts_text, bg_text = row
        ts = _parse_timestamp(ts_text, line)
        bg = MISSING if bg_text.strip() == "" else _parse_float(bg_text, line, "bg_mgdl")
        if bg != MISSING and bg < PHYSIOLOGICAL_FLOOR:
            raise ParseError(f"bg_mgdl {bg} is below the {PHYSIOLOGICAL_FLOOR} mg/dl floor", line)
        entries = per_user.setdefault(user, [])
        if entries and ts <= entries[-1][0]:
            raise ParseError(f"timestamp {ts} for user {user!r} does not increase", line)
        entries.append((ts, bg))
    return OrderedDict(
        (user, GlucoseSeries(user, np.array([e[0] for e in entries], dtype=np.int64),
                             np.array([e[1] for e in entries], dtype=float)))
        for user, entries in per_user.items())


def read_side_csv(path):
    """Read ``user_id,timestamp_min,<features...>`` rows into per-user SideInfo."""
    header, rows = _read_rows(path, GLUCOSE_HEADER[:2])
    names = tuple(header[2:])
    if len(set(names)) != len(names) or any(not n for n in names):
        raise SchemaError(f"{path}: feature names must be unique and non-empty")
    per_user = OrderedDict()
    for line, row in rows:
        if len(row) != len(header):
            raise ParseError(f"expected {len(header)} fields, got {len(row)}", line)
        ts = _parse_timestamp(row[1], line)
        feats = [_parse_float(t, line, n) for t, n in zip(row[2:], names)]
        entries = per_user.setdefault(row[0], [])
        if entries and ts <= entries[-1][0]:
            raise ParseError(f"timestamp {ts} for user {row[0]!r} does not increase", line)
        entries.append((ts, feats))
    return OrderedDict(
        (user, SideInfo(user, np.array([e[0] for e in entries], dtype=np.int64),
                        np.array([e[1] for e in entries], dtype=float).reshape(len(entries), len(names)),
                        names))
        for user, entries in per_user.items())


def parse_series_csv(path_glucose, path_side=None):
    """Parse glucose (and optional side) CSVs into ``{user_id: (GlucoseSeries, SideInfo or None)}``.

    Side rows are aligned onto the glucose timestamps with :func:`align_side`.
    """
    series = read_glucose_csv(path_glucose)
    sides = read_side_csv(path_side) if path_side is not None else {}
    out = OrderedDict()
    for user, s in series.items():
        side = sides.get(user)
        if path_side is not None:
            names = next(iter(sides.values())).feature_names if sides else ()
            if side is None:
                side = SideInfo(user, np.empty(0, dtype=np.int64), np.empty((0, len(names))), names)
            side = align_side(s, side)
        out[user] = (s, side)
    return out


def _fmt(value):
    return repr(float(value))


def write_glucose_csv(path, series_list):
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(GLUCOSE_HEADER)
        for s in series_list:
            for ts, v in zip(s.timestamps, s.values):
                writer.writerow([s.user_id, int(ts), "" if v == MISSING else _fmt(v)])


def write_side_csv(path, side_list):
    side_list = list(side_list)
    names = side_list[0].feature_names if side_list else ()
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(GLUCOSE_HEADER[:2] + tuple(names))
        for side in side_list:
            if side.feature_names != names:
                raise SchemaError("all users must share the same side feature names")
            for ts, row in zip(side.timestamps, side.features):
                writer.writerow([side.user_id, int(ts)] + [_fmt(x) for x in row])


def read_text_bundles(path):
    """Read ``user_id,timestamp_min,text`` posts (RFC-4180 quoting)."""
    header, rows = _read_rows(path, TEXT_HEADER)
    if len(header) != 3:
        raise SchemaError(f"{path}: unknown columns {header[3:]}")
    out = []
    for line, row in rows:
        if len(row) != 3:
            raise ParseError(f"expected 3 fields, got {len(row)}", line)
        out.append((row[0], _parse_timestamp(row[1], line), row[2]))
    return out


def align_side(series, side, add_gap=False):
    """Aggregate side events onto the glucose timestamps.

    Each glucose timestamp receives the sum of the side rows in
    ``(previous timestamp, timestamp]``; the first one also absorbs all earlier
    rows. With ``add_gap`` a ``gap_min`` column holds the minutes since the
    previous glucose timestamp (0 for the first).
    """
    ts = series.timestamps
    feats = np.zeros((ts.size, side.n_features))
    if side.timestamps.size:
        slot = np.searchsorted(ts, side.timestamps, side="left")
        keep = slot < ts.size
        np.add.at(feats, slot[keep], side.features[keep])
        if np.any(~keep):
            log.debug("dropped %d side rows after the last glucose reading", int(np.sum(~keep)))
    names = side.feature_names
    if add_gap:
        gap = np.diff(ts, prepend=ts[:1]).astype(float) if ts.size else np.zeros(0)
        feats = np.column_stack([feats, gap])
        names = names + ("gap_min",)
    return SideInfo(series.user_id, ts, feats, names)


# --------------------------------------------------------------------------
# windowing and scaling


def windowize(series, side=None, window_len=6, horizon=6, policy="drop", thresholds=DEFAULT_THRESHOLDS):
    """Slide a glucose-history window over one user's series.

    The target of the window starting at ``k`` is the value at
    ``k + window_len + horizon - 1``; the context row is the side row at the
    window's final timestamp.
    """
    if window_len < 1 or horizon < 1:
        raise ValueError("window_len and horizon must be >= 1")
    if policy not in ("drop", "forward_fill"):
        raise ValueError(f"unknown missing-value policy {policy!r}")
    values = series.values
    T = values.size
    if side is None:
        side_feats = np.zeros((T, 0))
        side_names = ()
    else:
        if side.timestamps.size != T or not np.array_equal(side.timestamps, series.timestamps):
            side = align_side(series, side)
        side_feats = side.features
        side_names = side.feature_names

    rows, starts = [], []
    for start in range(0, T - window_len - horizon + 1):
        window = values[start:start + window_len].copy()
        target = values[start + window_len + horizon - 1]
        if target == MISSING or window[0] == MISSING:
            continue
        if np.any(window == MISSING):
            if policy == "drop":
                continue
            for k in range(1, window_len):
                if window[k] == MISSING:
                    window[k] = window[k - 1]
        rows.append(window)
        starts.append(start)

    starts = np.array(starts, dtype=np.int64)
    n = starts.size
    V = np.array(rows, dtype=float).reshape(n, window_len)
    ends = starts + window_len - 1
    targets_idx = starts + window_len + horizon - 1
    y_value = values[targets_idx] if n else np.zeros(0)
    flags = [] if n else [f"user {series.user_id}: no complete windows"]
    return WindowedDataset(
        V=V, S=side_feats[ends].reshape(n, len(side_names)), y_value=y_value,
        y_label=categorize_array(y_value, thresholds), window_len=window_len, horizon=horizon,
        t_end=series.timestamps[ends], t_target=series.timestamps[targets_idx],
        user_ids=np.array([series.user_id] * n, dtype=object), side_names=side_names, flags=flags)


def history_windows(series, side=None, window_len=6, policy="drop"):
    """Every complete glucose window (no target needed), for forecasting.

    Returns ``(V, S, t_end)`` under the same missing-value policy as
    :func:`windowize`.
    """
    values = series.values
    T = values.size
    if side is not None and (side.timestamps.size != T or not np.array_equal(side.timestamps, series.timestamps)):
        side = align_side(series, side)
    feats = side.features if side is not None else np.zeros((T, 0))
    rows, ends = [], []
    for start in range(0, T - window_len + 1):
        window = values[start:start + window_len].copy()
        if window[0] == MISSING or (policy == "drop" and np.any(window == MISSING)):
            continue
        for k in range(1, window_len):
            if window[k] == MISSING:
                window[k] = window[k - 1]
        rows.append(window)
        ends.append(start + window_len - 1)
    ends = np.array(ends, dtype=np.int64)
    V = np.array(rows, dtype=float).reshape(ends.size, window_len)
    return V, feats[ends].reshape(ends.size, feats.shape[1]), series.timestamps[ends]


@dataclass(frozen=True)
class StandardizationStats:
    mean: np.ndarray
    std: np.ndarray


def standardize_fit(X):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[0] < 1:
        raise InputShapeError("cannot fit standardization on an empty matrix")
    std = X.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return StandardizationStats(X.mean(axis=0), std)


def standardize_apply(stats, X):
    return (np.asarray(X, dtype=float) - stats.mean) / stats.std


def standardize_inverse(stats, Z):
    return np.asarray(Z, dtype=float) * stats.std + stats.mean


# --------------------------------------------------------------------------
# text features, filtering and splitting

_TOKEN_SPLIT = re.compile(r"[^0-9a-z]+")


def tokenize(text):
    return [t for t in _TOKEN_SPLIT.split(text.lower()) if len(t) >= 2]


def unigram_featurize(docs, min_count=10):
    """Unigram counts per (user, timestamp) bundle, normalized by the user's post count.

    ``docs`` is an iterable of ``(user_id, timestamp_min, text)`` posts. The
    vocabulary keeps tokens seen more than ``min_count`` times corpus-wide,
    sorted lexicographically. Returns ``{user_id: SideInfo}``.
    """
    if min_count < 0:
        raise ValueError("min_count must be >= 0")
    docs = list(docs)
    tokenized = [(u, int(t), tokenize(text)) for u, t, text in docs]
    corpus = Counter(tok for _, _, toks in tokenized for tok in toks)
    vocab = tuple(sorted(tok for tok, c in corpus.items() if c > min_count))
    index = {tok: i for i, tok in enumerate(vocab)}

    posts = Counter(u for u, _, _ in tokenized)
    bundles = OrderedDict()
    for user, ts, toks in tokenized:
        bundle = bundles.setdefault(user, OrderedDict()).setdefault(ts, np.zeros(len(vocab)))
        for tok in toks:
            if tok in index:
                bundle[index[tok]] += 1.0
    out = OrderedDict()
    for user, per_ts in bundles.items():
        stamps = sorted(per_ts)
        feats = np.array([per_ts[t] for t in stamps]).reshape(len(stamps), len(vocab)) / posts[user]
        out[user] = SideInfo(user, np.array(stamps, dtype=np.int64), feats, vocab)
    return out


def sparsity_filter(users, min_bg):
    """Keep users with at least ``min_bg`` observed (non-sentinel) readings.

    ``users`` maps user_id to either a GlucoseSeries or a tuple whose first
    element is one.
    """
    if min_bg < 0:
        raise ValueError("min_bg must be >= 0")

    def series_of(item):
        return item[0] if isinstance(item, tuple) else item

    return OrderedDict((u, item) for u, item in users.items() if series_of(item).n_observed >= min_bg)


def choose_holdout_interval(series, seed, test_minutes=WEEK_MINUTES):
    t0, t1 = int(series.timestamps[0]), int(series.timestamps[-1])
    if t1 - t0 < 2 * test_minutes:
        raise SplitError(
            f"user {series.user_id!r} spans {t1 - t0} minutes; a {test_minutes}-minute holdout needs twice "
            "that span (pool users or use a shorter holdout)")
    rng = np.random.default_rng(seed)
    start = int(rng.integers(t0, t1 - test_minutes, endpoint=True))
    return start, start + test_minutes


def holdout_split(series, side=None, seed=0, window_len=6, horizon=6, policy="drop",
                  test_minutes=WEEK_MINUTES, thresholds=DEFAULT_THRESHOLDS):
    """Hold out every window whose target falls inside one seeded random interval.

    Returns ``(train, test, (start, stop))`` with the interval half-open in minutes.
    """
    start, stop = choose_holdout_interval(series, seed, test_minutes)
    full = windowize(series, side, window_len, horizon, policy, thresholds)
    in_test = (full.t_target >= start) & (full.t_target < stop)
    return full.subset(~in_test), full.subset(in_test), (start, stop)


# --------------------------------------------------------------------------
# synthetic two-view data


@dataclass(frozen=True)
class SynthConfig:
    n_users: int = 3
    points_per_user: int = 500
    latent_freq: float = 4.0  # cycles per day
    context_informative: bool = True
    noise_sd: float = 3.0  # mg/dl
    seed: int = 0
    n_informative: int = 2
    n_noise_features: int = 0
    context_lead: int = 6  # samples by which the context leads glucose
    latent_amplitude: float = 1.5
    latent_noise_sd: float = 1.0
    latent_noise_ar: float = 0.97


@dataclass(frozen=True)
class SynthUser:
    series: GlucoseSeries
    side: SideInfo
    latent: np.ndarray


def _informative_maps(z, k):
    maps = [np.tanh(1.5 * z), np.log1p(np.exp(z)) - 0.7, np.sin(z), z ** 2 / 2.0]
    return [maps[i % len(maps)] for i in range(k)]


def synth_generate(cfg):
    """Seeded synthetic users sharing a sinusoid-plus-AR(1) latent.

    Glucose is ``120 + 60 tanh(z) + noise`` at 5-minute steps (floored at
    10 mg/dl). Informative context features are smooth maps of the latent
    ``context_lead`` samples ahead, mimicking meals and insulin that precede
    glucose excursions; uninformative ones are independent noise.
    """
    if cfg.n_users < 1 or cfg.points_per_user < 1:
        raise ValueError("n_users and points_per_user must be positive")
    users = []
    for u in range(cfg.n_users):
        rng = np.random.default_rng([cfg.seed, u])
        total = cfg.points_per_user + cfg.context_lead
        t = np.arange(total) * SAMPLE_MINUTES
        phase = rng.uniform(0, 2 * np.pi)
        z = cfg.latent_amplitude * np.sin(2 * np.pi * cfg.latent_freq * t / 1440.0 + phase)
        innov = rng.normal(size=total) * cfg.latent_noise_sd * np.sqrt(1 - cfg.latent_noise_ar ** 2)
        ar = np.empty(total)
        ar[0] = rng.normal() * cfg.latent_noise_sd
        for k in range(1, total):
            ar[k] = cfg.latent_noise_ar * ar[k - 1] + innov[k]
        z = z + ar

        n = cfg.points_per_user
        glucose = 120.0 + 60.0 * np.tanh(z[:n]) + cfg.noise_sd * rng.normal(size=n)
        glucose = np.round(np.maximum(glucose, PHYSIOLOGICAL_FLOOR), 1)

        lead = z[cfg.context_lead:cfg.context_lead + n]
        if cfg.context_informative:
            cols = [m + 0.05 * rng.normal(size=n) for m in _informative_maps(lead, cfg.n_informative)]
        else:
            cols = [rng.normal(size=n) for _ in range(cfg.n_informative)]
        cols += [rng.normal(size=n) for _ in range(cfg.n_noise_features)]
        names = tuple(f"ctx_{i + 1}" for i in range(cfg.n_informative)) + \
            tuple(f"noise_{i + 1}" for i in range(cfg.n_noise_features))
        feats = np.column_stack(cols) if cols else np.zeros((n, 0))
        user_id = f"u{u:03d}"
        series = GlucoseSeries(user_id, t[:n], glucose)
        users.append(SynthUser(series, SideInfo(user_id, t[:n], np.round(feats, 6), names), z[:n]))
    return users
