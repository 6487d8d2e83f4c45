"""Reference models: single-domain LSTM regressors and correlation alignment.

The single-domain network (used both as the lower-bound SOURCE-ONLY and the
upper-bound TARGET-ONLY reference) is a fixed stack: ReLU(LSTM(100)),
dropout 0.5, ReLU(Dense(30)), dropout 0.1, ReLU(Dense(20)), Dense(1), trained
with MSE and Adam at lr 0.001 for 100 epochs. The correlation-alignment
baseline whitens source features with the inverse square root of their
covariance and recolors them with the target covariance square root (means
aligned as well by default) before training a plain feed-forward regressor on
per-timestep features.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from . import losses
from .data import DataError, DomainDataset
from .dann import EpochRow, TrainReport, _denorm
from .layers import DenseParams, DenseStack, LstmStack, init_dense, init_lstm
from .linalg import inv_sqrt_psd, sqrt_psd
from .optim import _check_shapes

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# Window sizes used for the single-domain turbofan reference models.
BASELINE_T_W = {"FD001": 30, "FD002": 20, "FD003": 30, "FD004": 15}


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0


def adam_step(params, grads, lr: float, state: AdamState | None = None,
              beta1: float = ADAM_BETA1, beta2: float = ADAM_BETA2, eps: float = ADAM_EPS):
    """Bias-corrected Adam update, in place. Pass state=None on the first call."""
    if state is None:
        state = AdamState([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])
    _check_shapes(params, grads)
    _check_shapes(params, state.m)
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


# ---------------------------------------------------------------------------
# Single-domain LSTM regressor
# ---------------------------------------------------------------------------


@dataclass
class BaselineSpec:
    """Fixed reference architecture; override fields only for desk-scale runs."""

    lstm_layers: list[int] = field(default_factory=lambda: [100])
    lstm_dropout: float = 0.5
    dense_layers: list[int] = field(default_factory=lambda: [30, 20])
    dense_dropouts: list[float] = field(default_factory=lambda: [0.1, 0.0])
    epochs: int = 100
    lr: float = 0.001
    batch_size: int = 512
    t_w: int = 30
    p: int = 2  # MSE loss

    def __post_init__(self):
        if len(self.dense_dropouts) != len(self.dense_layers):
            raise ValueError("one dropout rate per dense hidden layer")
        if self.epochs < 1 or self.batch_size < 1 or self.t_w < 1:
            raise ValueError("epochs, batch_size and t_w must be >= 1")


@dataclass
class BaselineModel:
    spec: BaselineSpec
    q: int
    lstm: LstmStack
    dense: DenseStack
    rng: np.random.Generator
    label_scaler: object = None

    @property
    def t_w(self) -> int:
        return self.spec.t_w

    def arrays(self) -> list[np.ndarray]:
        return self.lstm.arrays() + self.dense.arrays()

    def forward(self, x, train: bool = False):
        h, lstm_cache = self.lstm.forward(x, train, self.rng)
        out, dense_cache = self.dense.forward(h, train, self.rng)
        return out[:, 0], (lstm_cache, dense_cache)

    def backward(self, caches, grad_pred):
        lstm_cache, dense_cache = caches
        g_dense, grad_h = self.dense.backward(dense_cache, grad_pred[:, None])
        g_lstm, _ = self.lstm.backward(lstm_cache, grad_h)
        return g_lstm + g_dense

    def predict_norm_batch(self, x) -> np.ndarray:
        pred, _ = self.forward(x, train=False)
        return pred


def build_baseline(spec: BaselineSpec, q: int, seed: int = 0) -> BaselineModel:
    rng = np.random.default_rng([seed, 0])
    dims = [q] + list(spec.lstm_layers)
    lstm = LstmStack(
        [init_lstm(dims[k + 1], dims[k], rng) for k in range(len(spec.lstm_layers))],
        [spec.lstm_dropout] * len(spec.lstm_layers),
    )
    sizes = [dims[-1]] + list(spec.dense_layers)
    dense_params = [
        init_dense(sizes[k + 1], sizes[k], "relu", rng) for k in range(len(spec.dense_layers))
    ]
    dense_params.append(init_dense(1, sizes[-1], "linear", rng, zero=True))
    dense = DenseStack(dense_params, list(spec.dense_dropouts) + [0.0])
    return BaselineModel(spec, q, lstm, dense, np.random.default_rng([seed, 1]))


def train_single_domain(train: DomainDataset, spec: BaselineSpec, seed: int = 0):
    """Supervised training on whichever domain supplies the labels.

    SOURCE-ONLY and TARGET-ONLY runs share this exact code path; only the
    dataset passed in differs. Returns (model, TrainReport).
    """
    t0 = time.perf_counter()
    samples = train.windows(spec.t_w, domain=0)
    if any(s.y is None for s in samples):
        raise DataError("single-domain training requires labelled runs")
    q = train.runs[0].n_features
    model = build_baseline(spec, q, seed)
    model.label_scaler = train.scaler

    xs = np.stack([s.x for s in samples])
    ys = np.array([s.y for s in samples], dtype=np.float64)
    params = model.arrays()
    state = AdamState([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])

    report = TrainReport(epochs=[])
    nan = float("nan")
    for epoch in range(1, spec.epochs + 1):
        order = np.random.default_rng([seed, epoch]).permutation(len(samples))
        total, batches = 0.0, 0
        for k in range(0, len(samples), spec.batch_size):
            idx = order[k : k + spec.batch_size]
            pred, caches = model.forward(xs[idx], train=True)
            total += losses.regression_loss(pred, ys[idx], spec.p)
            grad = losses.regression_loss_grad(pred, ys[idx], spec.p)
            grads = model.backward(caches, grad)
            adam_step(params, grads, spec.lr, state)
            batches += 1
        report.epochs.append(EpochRow(epoch, total / batches, nan, nan, nan))

    report.stop_epoch = spec.epochs
    report.best_epoch = spec.epochs
    report.wall_clock_s = time.perf_counter() - t0
    return model, report


# ---------------------------------------------------------------------------
# Correlation alignment
# ---------------------------------------------------------------------------


@dataclass
class CoralTransform:
    """Whiten with the source covariance, recolor with the target covariance."""

    whiten: np.ndarray  # (q, q), symmetric
    recolor: np.ndarray  # (q, q), symmetric
    source_mean: np.ndarray
    target_mean: np.ndarray
    align_means: bool = True

    def apply(self, x: np.ndarray) -> np.ndarray:
        z = (np.asarray(x, dtype=np.float64) - self.source_mean) @ self.whiten @ self.recolor
        return z + (self.target_mean if self.align_means else self.source_mean)


def _adaptive_eps(cov: np.ndarray) -> float:
    return 1e-6 * float(np.trace(cov)) / cov.shape[0]


def coral_fit(source_feats, target_feats, eps: float | None = None,
              align_means: bool = True) -> CoralTransform:
    """Fit the second-order alignment of source features to target features.

    ``eps`` is the ridge added to both covariances before the matrix powers;
    when omitted an adaptive floor of 1e-6 * trace/q per matrix is used.
    """
    xs = np.asarray(source_feats, dtype=np.float64)
    xt = np.asarray(target_feats, dtype=np.float64)
    if xs.ndim != 2 or xt.ndim != 2 or xs.shape[1] != xt.shape[1]:
        raise ValueError("feature matrices must be 2-D with equal column counts")
    cov_s = np.cov(xs, rowvar=False, ddof=1)
    cov_t = np.cov(xt, rowvar=False, ddof=1)
    eps_s = _adaptive_eps(cov_s) if eps is None else eps
    eps_t = _adaptive_eps(cov_t) if eps is None else eps
    return CoralTransform(
        whiten=inv_sqrt_psd(cov_s, eps_s),
        recolor=sqrt_psd(cov_t, eps_t),
        source_mean=xs.mean(axis=0),
        target_mean=xt.mean(axis=0),
        align_means=align_means,
    )


def stepwise_features(runs, labeled: bool = True):
    """Per-timestep pairs: features at t-1 predicting the label at t."""
    xs, ys = [], []
    for run in runs:
        if run.length < 2:
            continue
        xs.append(run.features[:-1])
        if labeled:
            if run.rul is None:
                raise DataError("labelled per-timestep features require RUL values")
            ys.append(run.rul[1:])
    x = np.vstack(xs)
    return (x, np.concatenate(ys)) if labeled else (x, None)


@dataclass
class FfnnModel:
    dense: DenseStack
    rng: np.random.Generator
    label_scaler: object = None

    def arrays(self):
        return self.dense.arrays()

    def predict_norm_batch(self, x) -> np.ndarray:
        out, _ = self.dense.forward(np.asarray(x, dtype=np.float64), False, self.rng)
        return out[:, 0]


FFNN_DEPTHS = {"shallow": [32], "deep": [30, 20]}


def train_ffnn(x, y, depth: str = "shallow", seed: int = 0, epochs: int = 100,
               lr: float = 0.001, batch_size: int = 512):
    """Feed-forward regressor on plain feature vectors (MSE, Adam)."""
    if depth not in FFNN_DEPTHS:
        raise ValueError(f"depth must be one of {sorted(FFNN_DEPTHS)}")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    rng = np.random.default_rng([seed, 0])
    sizes = [x.shape[1]] + FFNN_DEPTHS[depth]
    params = [init_dense(sizes[k + 1], sizes[k], "relu", rng) for k in range(len(sizes) - 1)]
    params.append(init_dense(1, sizes[-1], "linear", rng, zero=True))
    model = FfnnModel(DenseStack(params, [0.0] * len(params)), np.random.default_rng([seed, 1]))

    arrays = model.arrays()
    state = AdamState([np.zeros_like(p) for p in arrays], [np.zeros_like(p) for p in arrays])
    for epoch in range(1, epochs + 1):
        order = np.random.default_rng([seed, epoch]).permutation(len(x))
        for k in range(0, len(x), batch_size):
            idx = order[k : k + batch_size]
            pred, cache = model.dense.forward(x[idx], True, model.rng)
            grad = losses.regression_loss_grad(pred[:, 0], y[idx], 2)
            grads, _ = model.dense.backward(cache, grad[:, None])
            adam_step(arrays, grads, lr, state)
    return model


def train_coral_nn(source: DomainDataset, target: DomainDataset, depth: str = "shallow",
                   seed: int = 0, epochs: int = 100, lr: float = 0.001,
                   align_means: bool = True, eps: float | None = None):
    """Align per-timestep source features to the target and fit a regressor.

    Returns (model, transform, diagnostics) where diagnostics holds the
    relative covariance Frobenius gap before and after alignment.
    """
    xs, ys = stepwise_features(source.runs, labeled=True)
    xt, _ = stepwise_features(target.runs, labeled=False)
    transform = coral_fit(xs, xt, eps=eps, align_means=align_means)
    xs_aligned = transform.apply(xs)

    def rel_gap(a, b):
        ca = np.cov(a, rowvar=False, ddof=1)
        cb = np.cov(b, rowvar=False, ddof=1)
        return float(np.linalg.norm(ca - cb) / np.linalg.norm(cb))

    diagnostics = {
        "cov_gap_before": rel_gap(xs, xt),
        "cov_gap_after": rel_gap(xs_aligned, xt),
    }
    model = train_ffnn(xs_aligned, ys, depth=depth, seed=seed, epochs=epochs, lr=lr)
    model.label_scaler = source.scaler
    return model, transform, diagnostics


def evaluate_stepwise(model: FfnnModel, dataset: DomainDataset) -> dict:
    """Cycle-unit metrics of a per-timestep regressor on a labelled dataset."""
    x, y = stepwise_features(dataset.runs, labeled=True)
    scaler = dataset.scaler if dataset.scaler is not None else model.label_scaler
    pred = np.maximum(_denorm(scaler, model.predict_norm_batch(x)), 0.0)
    truth = _denorm(scaler, y)
    return {"rmse": losses.rmse(pred, truth), "nasa_score": losses.nasa_score(pred, truth)}
