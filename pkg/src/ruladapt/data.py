"""Turbofan degradation data pipeline.

Covers parsing of the 26-column whitespace text format (unit, cycle, three
operational settings, 21 sensors), piecewise-linear RUL labelling, per-domain
min-max or z-score normalization, the sliding time-window transform with
left zero-padding for short series, engine-level train/validation splitting,
cross-domain batch pairing with oversampling of the smaller domain, and a
synthetic two-domain generator used as a fast adaptation oracle.

Every dataset is normalized with its own statistics only; source and target
scalers never see each other's data.
"""

import io
import math
from dataclasses import dataclass, field, replace

import numpy as np

CMAPSS_FIELDS = 26  # unit, cycle, 3 settings, 21 sensors
CMAPSS_FEATURES = CMAPSS_FIELDS - 2
DEFAULT_RUL_CAP = 125.0


class DataError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Core types
# ---------------------------------------------------------------------------


@dataclass
class EngineRun:
    """One unit's multivariate time series; cycles are implicitly 1..T."""

    unit_id: int
    features: np.ndarray  # (T, q)
    rul: np.ndarray | None = None  # (T,) labels when available

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise DataError("features must be a (T, q) matrix")
        if self.rul is not None:
            self.rul = np.asarray(self.rul, dtype=np.float64)
            if self.rul.shape != (self.features.shape[0],):
                raise DataError("rul must have one value per cycle")

    @property
    def length(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def cycles(self) -> np.ndarray:
        return np.arange(1, self.length + 1)


@dataclass
class WindowSample:
    """Fixed-length input slab plus its label and domain tag.

    ``origin`` is (dataset name, unit id, t) where t is the time index of the
    predicted step in the (possibly zero-padded) series, so the window covers
    the t_w steps strictly before t.
    """

    x: np.ndarray  # (t_w, q)
    y: float | None
    d: int
    origin: tuple


@dataclass
class Scaler:
    """Per-feature normalization statistics plus the RUL-channel rule.

    For minmax, ``center``/``spread`` are the per-feature minima and ranges;
    for zscore they are means and population standard deviations. Labels are
    always mapped by y / label_max so normalized targets span [0, 1] up to
    the training-time cap.
    """

    kind: str  # minmax | zscore
    center: np.ndarray
    spread: np.ndarray
    label_max: float | None = None

    def __post_init__(self):
        if self.kind not in ("minmax", "zscore"):
            raise DataError(f"unknown scaler kind {self.kind!r}")
        self.center = np.asarray(self.center, dtype=np.float64)
        self.spread = np.asarray(self.spread, dtype=np.float64)
        if np.any(self.spread < 0):
            raise DataError("scaler spread must be non-negative")

    def transform_features(self, x: np.ndarray) -> np.ndarray:
        # zero-spread (constant) features map to 0
        with np.errstate(invalid="ignore", divide="ignore"):
            out = (x - self.center) / self.spread
        return np.where(self.spread > 0, out, 0.0)

    def transform_label(self, y):
        if self.label_max is None:
            raise DataError("scaler has no label statistics")
        return np.asarray(y, dtype=np.float64) / self.label_max

    def inverse_label(self, y_norm):
        if self.label_max is None:
            raise DataError("scaler has no label statistics")
        return np.asarray(y_norm, dtype=np.float64) * self.label_max

    def transform_runs(self, runs, include_rul: bool | None = None):
        out = []
        for run in runs:
            rul = run.rul
            include = include_rul if include_rul is not None else rul is not None
            if include and rul is not None:
                rul = self.transform_label(rul)
            out.append(EngineRun(run.unit_id, self.transform_features(run.features), rul))
        return out


@dataclass
class DomainDataset:
    """A named collection of runs sharing one scaler."""

    name: str
    runs: list
    scaler: Scaler | None = None

    def window_count(self, t_w: int) -> int:
        return sum(max(r.length, t_w + 1) - t_w for r in self.runs)

    def windows(self, t_w: int, domain: int = 0, labeled: bool = True):
        out = []
        for run in self.runs:
            out.extend(window(run, t_w, domain=domain, dataset=self.name, labeled=labeled))
        return out

    def last_windows(self, t_w: int, domain: int = 0, labeled: bool = True):
        return [
            window(run, t_w, domain=domain, dataset=self.name, labeled=labeled)[-1]
            for run in self.runs
        ]


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------


def _lines(text):
    if isinstance(text, bytes):
        text = text.decode("ascii")
    if isinstance(text, str):
        return io.StringIO(text)
    return text


def parse_cmapss(text) -> list[EngineRun]:
    """Parse the 26-column text format into per-unit runs.

    Rows are grouped by unit id; each unit's cycles must count up
    contiguously from 1. Raises :class:`DataError` with the offending line
    number on malformed input.
    """
    rows: dict[int, list[np.ndarray]] = {}
    order: list[int] = []
    for lineno, line in enumerate(_lines(text), start=1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != CMAPSS_FIELDS:
            raise DataError(f"line {lineno}: expected {CMAPSS_FIELDS} fields, got {len(parts)}")
        try:
            values = np.array([float(p) for p in parts])
        except ValueError:
            raise DataError(f"line {lineno}: non-numeric field") from None
        unit, cycle = values[0], values[1]
        if unit != int(unit) or cycle != int(cycle):
            raise DataError(f"line {lineno}: unit and cycle must be integers")
        unit, cycle = int(unit), int(cycle)
        if unit not in rows:
            rows[unit] = []
            order.append(unit)
        if cycle != len(rows[unit]) + 1:
            raise DataError(
                f"line {lineno}: unit {unit} expected cycle {len(rows[unit]) + 1}, got {cycle}"
            )
        rows[unit].append(values[2:])
    return [EngineRun(uid, np.vstack(rows[uid])) for uid in order]


def parse_rul_truth(text) -> list[int]:
    """One non-negative integer per line: true RUL at each test unit's last cycle."""
    out = []
    for lineno, line in enumerate(_lines(text), start=1):
        s = line.strip()
        if not s:
            continue
        try:
            value = float(s)
        except ValueError:
            raise DataError(f"line {lineno}: non-numeric RUL value") from None
        if value != int(value) or value < 0:
            raise DataError(f"line {lineno}: RUL must be a non-negative integer")
        out.append(int(value))
    return out


# ---------------------------------------------------------------------------
# Labelling and normalization
# ---------------------------------------------------------------------------


def label_rul(run: EngineRun, r_e: float = DEFAULT_RUL_CAP) -> EngineRun:
    """Piecewise-linear targets: y_t = min(r_e, T - t), so failure is at 0.

    Assumes the run comes from a training set where the final cycle is the
    failure point.
    """
    if r_e <= 0:
        raise DataError("r_e must be positive")
    t = np.arange(1, run.length + 1)
    return replace(run, rul=np.minimum(float(r_e), (run.length - t).astype(np.float64)))


def _stack_features(runs) -> np.ndarray:
    if not runs:
        raise DataError("need at least one run to fit a scaler")
    return np.vstack([r.features for r in runs])


def _label_cap(runs, rul_max) -> float | None:
    if rul_max is not None:
        return float(rul_max)
    labelled = [r.rul for r in runs if r.rul is not None]
    if not labelled:
        return None
    return float(max(np.max(r) for r in labelled)) or 1.0


def fit_transform_minmax(runs, include_rul: bool = True, rul_max: float | None = None):
    """Fit per-feature min-max statistics on these runs and transform them.

    Each feature is mapped to [0, 1]; constant features map to 0. When
    ``include_rul`` and labels are present they are divided by ``rul_max``
    (default: the observed maximum, which equals the piecewise cap on
    clipped training labels).
    """
    x = _stack_features(runs)
    lo, hi = x.min(axis=0), x.max(axis=0)
    scaler = Scaler("minmax", lo, hi - lo, _label_cap(runs, rul_max) if include_rul else None)
    return scaler.transform_runs(runs, include_rul=include_rul), scaler


def fit_transform_zscore(runs, include_rul: bool = True, rul_max: float | None = None):
    """Fit per-feature zero-mean unit-variance statistics (population stddev).

    Constant features map to 0. Labels keep the same divide-by-cap rule as
    the min-max path so predicted values de-normalize identically.
    """
    x = _stack_features(runs)
    mean, std = x.mean(axis=0), x.std(axis=0)
    scaler = Scaler("zscore", mean, std, _label_cap(runs, rul_max) if include_rul else None)
    return scaler.transform_runs(runs, include_rul=include_rul), scaler


# ---------------------------------------------------------------------------
# Windowing, splitting, batching
# ---------------------------------------------------------------------------


def window(run: EngineRun, t_w: int, domain: int = 0, dataset: str = "", labeled: bool = True):
    """Slide a window of t_w steps over the run, predicting the next step.

    For t = t_w+1 .. T the sample covers steps t-t_w .. t-1 and is labelled
    with the RUL at t. Runs with T <= t_w are left-padded with zero rows to
    length t_w+1 and yield exactly one sample, so every run produces
    max(T, t_w+1) - t_w samples.
    """
    if t_w < 1:
        raise DataError("t_w must be >= 1")
    feats = run.features
    rul = run.rul if labeled else None
    samples = []
    if run.length <= t_w:
        pad = np.zeros((t_w + 1 - run.length, run.n_features))
        padded = np.vstack([pad, feats])
        y = float(rul[-1]) if rul is not None else None
        samples.append(WindowSample(padded[:t_w], y, domain, (dataset, run.unit_id, t_w + 1)))
        return samples
    for t in range(t_w + 1, run.length + 1):
        x = feats[t - 1 - t_w : t - 1]
        y = float(rul[t - 1]) if rul is not None else None
        samples.append(WindowSample(x, y, domain, (dataset, run.unit_id, t)))
    return samples


def split_train_val(runs, val_fraction: float = 0.10, seed: int = 0):
    """Deterministic engine-level split; both parts are non-empty."""
    if not 0.0 < val_fraction < 1.0:
        raise DataError("val_fraction must be in (0, 1)")
    if len(runs) < 2:
        raise DataError("need at least 2 engines to split")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(runs))
    n_val = min(len(runs) - 1, max(1, round(len(runs) * val_fraction)))
    val_idx = set(order[:n_val].tolist())
    train = [runs[i] for i in range(len(runs)) if i not in val_idx]
    val = [runs[i] for i in range(len(runs)) if i in val_idx]
    return train, val


@dataclass
class SampleBatch:
    x: np.ndarray  # (B, t_w, q)
    y: np.ndarray | None  # (B,) normalized labels, None for unlabelled domains
    d: np.ndarray  # (B,) domain labels
    origin: list


def _stack_batch(samples, domain: int, with_labels: bool) -> SampleBatch:
    x = np.stack([s.x for s in samples])
    y = None
    if with_labels:
        if any(s.y is None for s in samples):
            raise DataError("labelled batch requested but some samples carry no label")
        y = np.array([s.y for s in samples], dtype=np.float64)
    d = np.full(len(samples), domain, dtype=np.float64)
    return SampleBatch(x, y, d, [s.origin for s in samples])


def make_epoch_batches(source, target, batch_size: int, seed: int = 0):
    """Pair source and target mini-batches for one epoch.

    The number of pairs is ceil(max(|S|,|T|) / batch_size); the larger domain
    is shuffled and partitioned (each sample appears exactly once), while the
    smaller one is resampled with replacement to pairs*batch_size samples.
    Source batches carry labels and d=0; target batches are label-stripped
    and carry d=1.
    """
    if not source or not target:
        raise DataError("both domains must be non-empty")
    if batch_size < 1:
        raise DataError("batch_size must be >= 1")
    rng = np.random.default_rng(seed)
    n_pairs = math.ceil(max(len(source), len(target)) / batch_size)

    def partition(samples):
        order = rng.permutation(len(samples))
        return [
            [samples[i] for i in order[k * batch_size : (k + 1) * batch_size]]
            for k in range(n_pairs)
        ]

    def resample(samples):
        idx = rng.integers(0, len(samples), size=n_pairs * batch_size)
        return [
            [samples[i] for i in idx[k * batch_size : (k + 1) * batch_size]]
            for k in range(n_pairs)
        ]

    if len(source) >= len(target):
        src_chunks = partition(source)
        tgt_chunks = partition(target) if len(target) == len(source) else resample(target)
    else:
        src_chunks = resample(source)
        tgt_chunks = partition(target)

    return [
        (_stack_batch(s, 0, True), _stack_batch(t, 1, False))
        for s, t in zip(src_chunks, tgt_chunks)
    ]


# ---------------------------------------------------------------------------
# Synthetic two-domain generator
# ---------------------------------------------------------------------------


@dataclass
class SyntheticShift:
    """Distribution shift applied to the target domain.

    ``feature_offset`` is added to every raw target feature. ``feature_scale``
    multiplies the degradation coupling of the first half of the features in
    the target domain (1 = unchanged, 0 = those sensors stop tracking wear),
    which is the kind of shift that survives per-domain renormalization.
    ``noise`` overrides the target noise level when set.
    """

    feature_offset: float = 0.0
    feature_scale: float = 1.0
    noise: float | None = None

    @property
    def is_identity(self) -> bool:
        return self.feature_offset == 0.0 and self.feature_scale == 1.0 and self.noise is None


@dataclass
class SyntheticConfig:
    n_units: int = 40
    t_range: tuple[int, int] = (130, 170)
    q: int = 12
    knee: float = DEFAULT_RUL_CAP  # cycles of healthy plateau before linear decline
    noise: float = 0.02
    shift: SyntheticShift = field(default_factory=SyntheticShift)

    def validate(self):
        if self.q < 2:
            raise DataError("q must be >= 2")
        if self.n_units < 4:
            raise DataError("n_units must be >= 4")
        if not (1 <= self.t_range[0] <= self.t_range[1]):
            raise DataError("invalid t_range")
        if self.noise < 0 or (self.shift.noise is not None and self.shift.noise < 0):
            raise DataError("noise must be non-negative")
        if self.knee <= 0:
            raise DataError("knee must be positive")


def gen_synthetic(config: SyntheticConfig, seed: int = 0):
    """Generate a source and a target domain of degrading units.

    Each unit runs for a sampled lifetime; a latent wear index stays at zero
    through the healthy plateau and then climbs linearly to one at failure.
    Features respond affinely to wear plus Gaussian noise, with shared
    response coefficients across domains so adaptation is possible. True RUL
    (cycles to failure) is attached everywhere in both domains; training code
    is expected to withhold the target labels.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    q = config.q
    base = rng.uniform(0.2, 0.8, size=q)
    slope = rng.uniform(0.6, 1.4, size=q) * rng.choice([-1.0, 1.0], size=q)

    def build(domain: str) -> DomainDataset:
        shifted = domain == "target" and not config.shift.is_identity
        gain = np.ones(q)
        offset = 0.0
        noise = config.noise
        if shifted:
            gain[: q // 2] = config.shift.feature_scale
            offset = config.shift.feature_offset
            if config.shift.noise is not None:
                noise = config.shift.noise
        runs = []
        for unit in range(1, config.n_units + 1):
            life = int(rng.integers(config.t_range[0], config.t_range[1] + 1))
            t = np.arange(1, life + 1)
            rul = (life - t).astype(np.float64)
            wear = 1.0 - np.minimum(1.0, rul / config.knee)
            feats = base + (slope * gain) * wear[:, None] + offset
            feats = feats + noise * rng.standard_normal((life, q))
            runs.append(EngineRun(unit, feats, rul))
        return DomainDataset(f"synthetic-{domain}", runs)

    return build("source"), build("target")


# ---------------------------------------------------------------------------
# 26-column serialization
# ---------------------------------------------------------------------------


def format_cmapss(runs) -> str:
    """Render runs in the 26-column text format, zero-padding to 24 features."""
    chunks = []
    for run in runs:
        if run.n_features > CMAPSS_FEATURES:
            raise DataError(f"cannot serialize {run.n_features} features into 26 columns")
        pad = CMAPSS_FEATURES - run.n_features
        for t in range(run.length):
            vals = [f"{v:.10g}" for v in run.features[t]] + ["0"] * pad
            chunks.append(f"{run.unit_id} {t + 1} " + " ".join(vals))
    return "\n".join(chunks) + ("\n" if chunks else "")


def format_rul_sidecar(runs) -> str:
    """Oracle labels as CSV (unit, cycle, rul) for externally stored datasets."""
    lines = ["unit,cycle,rul"]
    for run in runs:
        if run.rul is None:
            raise DataError("sidecar requires labelled runs")
        for t in range(run.length):
            lines.append(f"{run.unit_id},{t + 1},{run.rul[t]:.10g}")
    return "\n".join(lines) + "\n"
