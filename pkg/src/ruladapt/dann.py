"""Adversarial adaptation model: shared extractor, regressor, domain head.

The feature extractor (stacked LSTM layers plus a dense embedding) feeds two
heads: a source-domain RUL regressor and a domain classifier that sits behind
a gradient-reversal layer. Training alternates two passes per step: the
regression pass updates extractor and regressor on labelled source windows;
the domain pass updates the classifier to separate domains while the
reversed, alpha-scaled gradient pushes the extractor towards features the
classifier cannot separate.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from . import losses
from .data import DomainDataset, SampleBatch, split_train_val, make_epoch_batches
from .layers import (
    DenseParams,
    DenseStack,
    LstmStack,
    dense_backward,
    dense_forward,
    grl_backward,
    init_dense,
    init_lstm,
    sigmoid,
)
from .optim import Optimizer, OptimizerConfig, StopState, lr_at_epoch, should_stop

PROB_CLAMP = losses.BCE_CLAMP
EVAL_CHUNK = 1024


@dataclass
class DannHyperParams:
    """Architecture and training knobs for one source-target experiment."""

    lstm_layers: list[int] = field(default_factory=lambda: [100])
    lstm_dropout: float = 0.5
    f_units: int = 30
    reg_layers: list[int] = field(default_factory=lambda: [20])
    reg_dropout: float = 0.0
    dom_layers: list[int] = field(default_factory=lambda: [20])
    dom_dropout: float = 0.1
    alpha: float = 1.0
    batch_size: int = 512
    lr_reg: float = 0.01
    lr_dom: float = 0.01
    optimizer: str = "sgd"
    l2: float = 0.01
    t_w: int = 30
    p: int = 1
    max_epochs: int = 200
    patience: int = 20
    val_fraction: float = 0.10

    def __post_init__(self):
        if any(u < 1 for u in self.lstm_layers + self.reg_layers + self.dom_layers):
            raise ValueError("all unit counts must be >= 1")
        if self.f_units < 1 or self.batch_size < 1 or self.t_w < 1:
            raise ValueError("f_units, batch_size and t_w must be >= 1")
        for rate in (self.lstm_dropout, self.reg_dropout, self.dom_dropout):
            if not 0.0 <= rate < 1.0:
                raise ValueError("dropout rates must be in [0, 1)")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.optimizer not in ("sgd", "rmsprop"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.p not in (1, 2):
            raise ValueError("regression exponent p must be 1 or 2")


def _pair_hp(l2, lstm, lstm_do, f, reg, reg_do, dom, dom_do, alpha, batch, lr_r, lr_d):
    return DannHyperParams(
        lstm_layers=list(lstm),
        lstm_dropout=lstm_do,
        f_units=f,
        reg_layers=list(reg),
        reg_dropout=reg_do,
        dom_layers=list(dom),
        dom_dropout=dom_do,
        alpha=alpha,
        batch_size=batch,
        lr_reg=lr_r,
        lr_dom=lr_d,
        optimizer="sgd",
        l2=l2,
        t_w=30,
    )


# Tuned settings per source-target dataset pair (turbofan experiments).
PAIR_HYPERPARAMS = {
    ("FD001", "FD002"): _pair_hp(0.01, [128], 0.5, 64, [32], 0.3, [32], 0.3, 0.8, 256, 0.01, 0.01),
    ("FD001", "FD003"): _pair_hp(0.01, [128], 0.5, 64, [32], 0.3, [32], 0.3, 0.8, 256, 0.01, 0.01),
    ("FD001", "FD004"): _pair_hp(0.01, [128], 0.7, 64, [32, 32], 0.3, [32], 0.3, 1.0, 256, 0.01, 0.1),
    ("FD002", "FD001"): _pair_hp(0.01, [64], 0.1, 64, [32], 0.0, [16, 16], 0.1, 1.0, 512, 0.01, 0.01),
    ("FD002", "FD003"): _pair_hp(0.01, [64], 0.1, 512, [64, 32], 0.0, [64, 32], 0.1, 2.0, 256, 0.1, 0.1),
    ("FD002", "FD004"): _pair_hp(0.01, [32, 32], 0.1, 32, [32], 0.0, [16], 0.1, 1.0, 256, 0.1, 0.1),
    ("FD003", "FD001"): _pair_hp(0.01, [64, 32], 0.3, 128, [32, 32], 0.1, [32, 32], 0.1, 2.0, 256, 0.01, 0.01),
    ("FD003", "FD002"): _pair_hp(0.01, [64, 32], 0.3, 64, [32, 32], 0.1, [32, 32], 0.1, 2.0, 256, 0.01, 0.01),
    ("FD003", "FD004"): _pair_hp(0.01, [64, 32], 0.3, 64, [32, 32], 0.1, [32, 32], 0.1, 2.0, 256, 0.01, 0.01),
    ("FD004", "FD001"): _pair_hp(0.01, [100], 0.5, 30, [20], 0.0, [20], 0.1, 1.0, 512, 0.01, 0.01),
    ("FD004", "FD002"): _pair_hp(0.01, [100], 0.5, 30, [20], 0.0, [20], 0.1, 1.0, 512, 0.01, 0.01),
    ("FD004", "FD003"): _pair_hp(0.01, [100], 0.5, 30, [20], 0.0, [20], 0.1, 1.0, 512, 0.01, 0.01),
}


@dataclass
class DannModel:
    hp: DannHyperParams
    q: int
    feature_lstm: LstmStack
    feature_dense: DenseParams
    regressor: DenseStack
    classifier: DenseStack
    rng: np.random.Generator
    label_scaler: object = None

    @property
    def t_w(self) -> int:
        return self.hp.t_w

    def predict_norm_batch(self, x) -> np.ndarray:
        pred, _ = forward_regression(self, x, train=False)
        return pred

    def theta_f(self) -> list[np.ndarray]:
        return self.feature_lstm.arrays() + self.feature_dense.arrays()

    def theta_y(self) -> list[np.ndarray]:
        return self.regressor.arrays()

    def theta_d(self) -> list[np.ndarray]:
        return self.classifier.arrays()

    def all_arrays(self) -> list[np.ndarray]:
        return self.theta_f() + self.theta_y() + self.theta_d()


def build_model(hp: DannHyperParams, q: int, seed: int = 0) -> DannModel:
    """Assemble the three-part network with deterministic initialization.

    Both scalar output layers start at zero so the first regression output is
    0 and the first domain probability is exactly 0.5.
    """
    init_rng = np.random.default_rng([seed, 0])
    dims = [q] + list(hp.lstm_layers)
    lstm = LstmStack(
        [init_lstm(dims[k + 1], dims[k], init_rng) for k in range(len(hp.lstm_layers))],
        [hp.lstm_dropout] * len(hp.lstm_layers),
    )
    feature_dense = init_dense(hp.f_units, dims[-1], "relu", init_rng)

    def head(hidden_units, dropout_rate):
        sizes = [hp.f_units] + list(hidden_units)
        params = [
            init_dense(sizes[k + 1], sizes[k], "relu", init_rng)
            for k in range(len(hidden_units))
        ]
        params.append(init_dense(1, sizes[-1], "linear", init_rng, zero=True))
        return DenseStack(params, [dropout_rate] * len(hidden_units) + [0.0])

    return DannModel(
        hp=hp,
        q=q,
        feature_lstm=lstm,
        feature_dense=feature_dense,
        regressor=head(hp.reg_layers, hp.reg_dropout),
        classifier=head(hp.dom_layers, hp.dom_dropout),
        rng=np.random.default_rng([seed, 1]),
    )


def _batch_x(batch):
    return batch.x if isinstance(batch, SampleBatch) else np.asarray(batch, dtype=np.float64)


def forward_features(m: DannModel, x, train: bool = False):
    h, lstm_cache = m.feature_lstm.forward(x, train, m.rng)
    f, dense_cache = dense_forward(m.feature_dense, h)
    return f, (lstm_cache, dense_cache)


def backward_features(m: DannModel, caches, grad_f):
    lstm_cache, dense_cache = caches
    g_dense, grad_h = dense_backward(m.feature_dense, dense_cache, grad_f)
    g_lstm, _ = m.feature_lstm.backward(lstm_cache, grad_h)
    return g_lstm + g_dense.arrays()


def forward_regression(m: DannModel, batch, train: bool = False):
    """Predicted RUL in normalized label space for each window in the batch."""
    f, f_caches = forward_features(m, _batch_x(batch), train)
    out, r_cache = m.regressor.forward(f, train, m.rng)
    return out[:, 0], (f_caches, r_cache)


def forward_domain(m: DannModel, batch, train: bool = False):
    """Domain probabilities, strictly inside (0, 1) after clamping."""
    f, f_caches = forward_features(m, _batch_x(batch), train)
    logits, d_cache = m.classifier.forward(f, train, m.rng)
    probs = np.clip(sigmoid(logits[:, 0]), PROB_CLAMP, 1.0 - PROB_CLAMP)
    return probs, (f_caches, d_cache)


def _add_l2(head_grads: list[np.ndarray], head: DenseStack, l2: float):
    """Weight-decay gradient on the weight matrices of a head (not biases)."""
    if l2 <= 0:
        return head_grads
    out = list(head_grads)
    k = 0
    for p in head.layers:
        out[k] = out[k] + 2.0 * l2 * p.W
        k += 2
    return out


def make_opt_states(m: DannModel, hp: DannHyperParams):
    """One optimizer per pass; the extractor appears in both groups, so each
    pass keeps its own accumulator state for it."""
    cfg = lambda: OptimizerConfig(kind=hp.optimizer, lr=hp.lr_reg, clip_norm=1.0)
    return {
        "reg": Optimizer(cfg(), m.theta_f() + m.theta_y()),
        "dom": Optimizer(cfg(), m.theta_f() + m.theta_d()),
    }


def regression_pass(m: DannModel, batch: SampleBatch, hp, opt: Optimizer, lr: float) -> float:
    """Source-domain pass: descend the regression loss over extractor + regressor."""
    pred, (f_caches, r_cache) = forward_regression(m, batch, train=True)
    loss = losses.regression_loss(pred, batch.y, hp.p)
    d_pred = losses.regression_loss_grad(pred, batch.y, hp.p)
    g_reg, grad_f = m.regressor.backward(r_cache, d_pred[:, None])
    g_reg = _add_l2(g_reg, m.regressor, hp.l2)
    g_feat = backward_features(m, f_caches, grad_f)
    opt.step(g_feat + g_reg, lr)
    return loss


def domain_pass(m, x, d, hp, opt: Optimizer, lr: float, update_features: bool = True):
    """Adversarial pass: the classifier descends the domain loss while the
    extractor receives the reversed gradient, both scaled by alpha.

    Returns (bce loss, accuracy at threshold 0.5). With update_features=False
    only the classifier branch moves (the extractor gradient is zeroed), which
    is useful for probing classifier capacity on frozen features.
    """
    probs, (f_caches, d_cache) = forward_domain(m, x, train=True)
    loss = losses.domain_bce(probs, d)
    acc = float(np.mean((probs >= 0.5) == (np.asarray(d) >= 0.5)))
    d_logits = losses.domain_bce_grad_logits(probs, d)
    g_dom, grad_f = m.classifier.backward(d_cache, d_logits[:, None])
    g_dom = [hp.alpha * g for g in g_dom]
    g_dom = _add_l2(g_dom, m.classifier, hp.l2)
    grad_f = grl_backward(grad_f, hp.alpha)
    if not update_features:
        grad_f = np.zeros_like(grad_f)
    g_feat = backward_features(m, f_caches, grad_f)
    opt.step(g_feat + g_dom, lr)
    return loss, acc


def train_step(m: DannModel, source_batch, target_batch, hp, opt_states,
               lr_reg: float | None = None, lr_dom: float | None = None):
    """One two-pass adversarial update on a source/target batch pair."""
    lr_reg = hp.lr_reg if lr_reg is None else lr_reg
    lr_dom = hp.lr_dom if lr_dom is None else lr_dom
    reg_loss = regression_pass(m, source_batch, hp, opt_states["reg"], lr_reg)
    x_cat = np.concatenate([source_batch.x, target_batch.x], axis=0)
    d_cat = np.concatenate([source_batch.d, target_batch.d])
    dom_loss, dom_acc = domain_pass(m, x_cat, d_cat, hp, opt_states["dom"], lr_dom)
    return m, {"src_reg_loss": reg_loss, "dom_loss": dom_loss, "dom_acc": dom_acc}


# ---------------------------------------------------------------------------
# Prediction and evaluation
# ---------------------------------------------------------------------------


def _predict_norm(m, xs: np.ndarray) -> np.ndarray:
    preds = []
    for k in range(0, len(xs), EVAL_CHUNK):
        preds.append(m.predict_norm_batch(xs[k : k + EVAL_CHUNK]))
    return np.concatenate(preds)


def _denorm(scaler, values: np.ndarray) -> np.ndarray:
    if scaler is not None and getattr(scaler, "label_max", None) is not None:
        return scaler.inverse_label(values)
    return values


def predict_windows(m, samples, scaler=None) -> np.ndarray:
    """Predictions in cycles for a list of window samples, clipped at 0."""
    xs = np.stack([s.x for s in samples])
    scaler = scaler if scaler is not None else m.label_scaler
    return np.maximum(_denorm(scaler, _predict_norm(m, xs)), 0.0)


def _eval_samples(dataset: DomainDataset, t_w: int, at: str):
    if at == "all_windows":
        return dataset.windows(t_w)
    if at == "last_window_per_unit":
        return dataset.last_windows(t_w)
    raise ValueError(f"unknown prediction mode {at!r}")


def predict_rul(m, dataset: DomainDataset, at: str = "last_window_per_unit"):
    """De-normalized RUL predictions (cycles, >= 0) for a dataset.

    Works for any model exposing ``t_w`` and ``predict_norm_batch``.
    """
    samples = _eval_samples(dataset, m.t_w, at)
    return predict_windows(m, samples, dataset.scaler or m.label_scaler)


def evaluate(m, dataset: DomainDataset, at: str = "last_window_per_unit") -> dict:
    """RMSE and asymmetric score in cycle units against the dataset's labels."""
    samples = _eval_samples(dataset, m.t_w, at)
    if any(s.y is None for s in samples):
        raise ValueError("evaluation dataset has unlabelled windows")
    scaler = dataset.scaler or m.label_scaler
    pred = predict_windows(m, samples, scaler)
    truth = _denorm(scaler, np.array([s.y for s in samples], dtype=np.float64))
    return {"rmse": losses.rmse(pred, truth), "nasa_score": losses.nasa_score(pred, truth)}


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class EpochRow:
    epoch: int
    src_reg_loss: float
    dom_loss: float
    dom_acc: float
    val_rmse: float


@dataclass
class TrainReport:
    epochs: list
    stop_epoch: int = 0
    best_epoch: int = 0
    best_val_rmse: float = float("nan")
    wall_clock_s: float = 0.0
    final_target: dict | None = None

    CSV_HEADER = "epoch,src_reg_loss,dom_loss,dom_acc,val_rmse"

    def to_csv(self) -> str:
        lines = [self.CSV_HEADER]
        for row in self.epochs:
            lines.append(
                f"{row.epoch},{row.src_reg_loss!r},{row.dom_loss!r},"
                f"{row.dom_acc!r},{row.val_rmse!r}"
            )
        return "\n".join(lines) + "\n"


def _snapshot(m: DannModel) -> list[np.ndarray]:
    return [a.copy() for a in m.all_arrays()]


def _restore(m: DannModel, snap: list[np.ndarray]):
    for a, s in zip(m.all_arrays(), snap):
        a[...] = s


def fit(source: DomainDataset, target: DomainDataset, hp: DannHyperParams, seed: int = 0):
    """Train on labelled source windows and unlabelled target windows.

    The source engines are split 90/10; validation RMSE on the held-out
    source engines drives early stopping and best-weight restoration. Target
    labels are never consumed: target windows enter training label-stripped.
    Returns (model, TrainReport).
    """
    t0 = time.perf_counter()
    if not source.runs or not target.runs:
        raise ValueError("both domains must contain runs")
    q = source.runs[0].n_features
    m = build_model(hp, q, seed)
    m.label_scaler = source.scaler
    opt_states = make_opt_states(m, hp)

    train_runs, val_runs = split_train_val(source.runs, hp.val_fraction, seed)
    src_train = DomainDataset(source.name, train_runs, source.scaler).windows(hp.t_w, domain=0)
    val_samples = DomainDataset(source.name, val_runs, source.scaler).windows(hp.t_w, domain=0)
    tgt_train = target.windows(hp.t_w, domain=1, labeled=False)
    if any(s.y is None for s in src_train):
        raise ValueError("source domain must be fully labelled")

    val_x = np.stack([s.x for s in val_samples])
    val_y = _denorm(source.scaler, np.array([s.y for s in val_samples], dtype=np.float64))

    report = TrainReport(epochs=[])
    stop_state = StopState(patience=hp.patience, max_epochs=hp.max_epochs)
    best = _snapshot(m)

    for epoch in range(1, hp.max_epochs + 1):
        lr_r = lr_at_epoch(hp.lr_reg, epoch - 1)
        lr_d = lr_at_epoch(hp.lr_dom, epoch - 1)
        batches = make_epoch_batches(src_train, tgt_train, hp.batch_size, seed=[seed, epoch])
        sums = np.zeros(3)
        for src_b, tgt_b in batches:
            _, step_losses = train_step(m, src_b, tgt_b, hp, opt_states, lr_r, lr_d)
            sums += (step_losses["src_reg_loss"], step_losses["dom_loss"], step_losses["dom_acc"])
        means = sums / len(batches)

        val_pred = np.maximum(_denorm(source.scaler, _predict_norm(m, val_x)), 0.0)
        val_rmse = losses.rmse(val_pred, val_y)
        report.epochs.append(
            EpochRow(epoch, float(means[0]), float(means[1]), float(means[2]), val_rmse)
        )

        stop, _ = should_stop(stop_state, val_rmse, epoch)
        if stop_state.best_epoch == epoch:
            best = _snapshot(m)
        if stop:
            break

    _restore(m, best)
    report.stop_epoch = report.epochs[-1].epoch if report.epochs else 0
    report.best_epoch = stop_state.best_epoch
    report.best_val_rmse = stop_state.best_val_rmse if stop_state.best_val_rmse is not None else float("nan")
    report.wall_clock_s = time.perf_counter() - t0

    if all(r.rul is not None for r in target.runs):
        report.final_target = evaluate(m, target, at="all_windows")
    return m, report
