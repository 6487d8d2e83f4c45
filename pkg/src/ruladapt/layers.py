"""Neural layers with exact hand-derived gradients.

All layers are pure functions of explicit parameter and cache values: a
forward call returns its output plus a tape cache, and the matching backward
call consumes that cache and the upstream gradient to produce exact parameter
and input gradients. The LSTM backward runs full backpropagation through time
across the window. Inputs may be single samples or batches (leading batch
axis); everything is float64.

Gate algebra per step, with sigmoid s and element-wise products:

    f_t = s(W_f x_t + R_f h_{t-1} + b_f)      forget gate
    i_t = s(W_i x_t + R_i h_{t-1} + b_i)      input gate
    o_t = s(W_o x_t + R_o h_{t-1} + b_o)      output gate
    g_t = tanh(W_C x_t + R_C h_{t-1} + b_C)   cell candidate
    C_t = f_t * C_{t-1} + i_t * g_t
    h_t = o_t * tanh(C_t)
"""

from dataclasses import dataclass, fields

import numpy as np

ACTIVATIONS = ("relu", "sigmoid", "linear")


class ShapeError(ValueError):
    pass


def sigmoid(z):
    # clip keeps exp() in range; the tails are exactly 0/1 in float64 anyway
    return 1.0 / (1.0 + np.exp(-np.clip(z, -60.0, 60.0)))


def relu(z):
    return np.maximum(z, 0.0)


def glorot_uniform(rng, out_dim: int, in_dim: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (in_dim + out_dim))
    return rng.uniform(-limit, limit, size=(out_dim, in_dim))


# ---------------------------------------------------------------------------
# LSTM
# ---------------------------------------------------------------------------


@dataclass
class LstmParams:
    W_f: np.ndarray  # (h, q) input weights per gate
    W_i: np.ndarray
    W_o: np.ndarray
    W_C: np.ndarray
    R_f: np.ndarray  # (h, h) recurrent weights per gate
    R_i: np.ndarray
    R_o: np.ndarray
    R_C: np.ndarray
    b_f: np.ndarray  # (h,) biases per gate
    b_i: np.ndarray
    b_o: np.ndarray
    b_C: np.ndarray

    @property
    def hidden(self) -> int:
        return self.W_f.shape[0]

    @property
    def inputs(self) -> int:
        return self.W_f.shape[1]

    def arrays(self) -> list[np.ndarray]:
        return [getattr(self, f.name) for f in fields(self)]


@dataclass
class LstmState:
    C: np.ndarray
    h: np.ndarray


@dataclass
class LstmTapeCache:
    """Per-step activations retained for backpropagation through time.

    Sequences are stored time-major, (T, B, ...), so each step's slice is
    contiguous; the batch-major convention holds only at the call boundary.
    """

    params: LstmParams
    x: np.ndarray  # (T, B, q)
    gates: np.ndarray  # (T, B, 4h): forget, input, output, candidate
    c_seq: np.ndarray  # (T+1, B, h) cell states including the initial one
    h_seq: np.ndarray  # (T+1, B, h) hidden states including the initial one
    tanh_c: np.ndarray  # (T, B, h) tanh of each new cell state
    squeeze: bool  # input arrived without a batch axis

    @property
    def h_out(self) -> np.ndarray:
        """Hidden state at every step, batch-major (B, T, h)."""
        return self.h_seq[1:].transpose(1, 0, 2)


def init_lstm(hidden: int, inputs: int, rng) -> LstmParams:
    """Glorot-uniform weights, zero biases, forget bias +1 to open the gate."""
    ws = [glorot_uniform(rng, hidden, inputs) for _ in range(4)]
    rs = [glorot_uniform(rng, hidden, hidden) for _ in range(4)]
    bs = [np.zeros(hidden) for _ in range(4)]
    bs[0] = np.ones(hidden)
    return LstmParams(*ws, *rs, *bs)


def _cat_weights(p: LstmParams):
    w = np.concatenate([p.W_f.T, p.W_i.T, p.W_o.T, p.W_C.T], axis=1)  # (q, 4h)
    r = np.concatenate([p.R_f.T, p.R_i.T, p.R_o.T, p.R_C.T], axis=1)  # (h, 4h)
    b = np.concatenate([p.b_f, p.b_i, p.b_o, p.b_C])  # (4h,)
    return w, r, b


def _as_batch(x, expect_cols: int, what: str):
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None, :, :]
    if x.ndim != 3 or x.shape[2] != expect_cols:
        raise ShapeError(f"{what}: expected (..., T, {expect_cols}), got {x.shape}")
    return x, squeeze


def lstm_forward(p: LstmParams, x, s0: LstmState | None = None):
    """Run the cell over a window; returns the final hidden state and the tape.

    ``x`` is (T, q) for one sample or (B, T, q) for a batch. The initial
    state defaults to zeros and is never carried across windows.
    """
    xb, squeeze = _as_batch(x, p.inputs, "lstm_forward")
    x = np.ascontiguousarray(xb.transpose(1, 0, 2))  # time-major
    nt, nb, nq = x.shape
    nh = p.hidden
    w_cat, r_cat, b_cat = _cat_weights(p)

    c_seq = np.zeros((nt + 1, nb, nh))
    h_seq = np.zeros((nt + 1, nb, nh))
    if s0 is not None:
        c_seq[0] = np.asarray(s0.C, dtype=np.float64)
        h_seq[0] = np.asarray(s0.h, dtype=np.float64)
    gates = np.empty((nt, nb, 4 * nh))
    tanh_c = np.empty((nt, nb, nh))

    # input projections for all steps at once; only the recurrence loops
    z_x = (x.reshape(nt * nb, nq) @ w_cat).reshape(nt, nb, 4 * nh)
    z_x += b_cat
    z = np.empty((nb, 4 * nh))
    with np.errstate(over="ignore"):  # exp overflow saturates to the exact limit
        for t in range(nt):
            np.matmul(h_seq[t], r_cat, out=z)
            z += z_x[t]
            gate = gates[t]
            sig = gate[:, : 3 * nh]
            np.negative(z[:, : 3 * nh], out=sig)
            np.exp(sig, out=sig)
            sig += 1.0
            np.reciprocal(sig, out=sig)
            np.tanh(z[:, 3 * nh :], out=gate[:, 3 * nh :])
            c = c_seq[t + 1]
            np.multiply(gate[:, :nh], c_seq[t], out=c)
            c += gate[:, nh : 2 * nh] * gate[:, 3 * nh :]
            np.tanh(c, out=tanh_c[t])
            np.multiply(gate[:, 2 * nh : 3 * nh], tanh_c[t], out=h_seq[t + 1])

    cache = LstmTapeCache(p, x, gates, c_seq, h_seq, tanh_c, squeeze)
    h_final = h_seq[-1]
    return (h_final[0].copy() if squeeze else h_final.copy()), cache


@dataclass
class LstmGrads:
    W_f: np.ndarray
    W_i: np.ndarray
    W_o: np.ndarray
    W_C: np.ndarray
    R_f: np.ndarray
    R_i: np.ndarray
    R_o: np.ndarray
    R_C: np.ndarray
    b_f: np.ndarray
    b_i: np.ndarray
    b_o: np.ndarray
    b_C: np.ndarray

    def arrays(self) -> list[np.ndarray]:
        return [getattr(self, f.name) for f in fields(self)]


def lstm_backward(p: LstmParams, cache: LstmTapeCache, grad_hT=None, grad_seq=None):
    """Exact gradients via backpropagation through time.

    ``grad_hT`` is the loss gradient at the final hidden state; ``grad_seq``
    optionally supplies gradients at every step's output (used when a stacked
    layer consumes the whole sequence). Returns ``(LstmGrads, grad_x)`` with
    ``grad_x`` matching the forward input's shape.
    """
    if cache.params is not p:
        raise ShapeError("cache does not belong to these parameters")
    nt, nb, nq = cache.x.shape
    nh = p.hidden
    w_cat, r_cat, _ = _cat_weights(p)

    if grad_hT is None and grad_seq is None:
        raise ShapeError("need grad_hT and/or grad_seq")
    dh_next = np.zeros((nb, nh))
    if grad_hT is not None:
        g = np.asarray(grad_hT, dtype=np.float64)
        dh_next += g[None, :] if g.ndim == 1 else g
    if grad_seq is not None:
        grad_seq = np.asarray(grad_seq, dtype=np.float64)
        if grad_seq.ndim == 2:
            grad_seq = grad_seq[None, :, :]
        grad_seq = np.ascontiguousarray(grad_seq.transpose(1, 0, 2))  # time-major

    da_all = np.empty((nt, nb, 4 * nh))
    dc = np.zeros((nb, nh))
    dh = np.empty((nb, nh))

    for t in range(nt - 1, -1, -1):
        f = cache.gates[t, :, :nh]
        i = cache.gates[t, :, nh : 2 * nh]
        o = cache.gates[t, :, 2 * nh : 3 * nh]
        g = cache.gates[t, :, 3 * nh :]
        tanh_c = cache.tanh_c[t]

        np.copyto(dh, dh_next)
        if grad_seq is not None:
            dh += grad_seq[t]
        # entering iteration t, dc holds f_{t+1} * dc_{t+1} (zero at the last step)
        dc += dh * o * (1.0 - tanh_c**2)
        da = da_all[t]
        da[:, :nh] = dc * cache.c_seq[t] * f * (1.0 - f)
        da[:, nh : 2 * nh] = dc * g * i * (1.0 - i)
        da[:, 2 * nh : 3 * nh] = dh * tanh_c * o * (1.0 - o)
        da[:, 3 * nh :] = dc * i * (1.0 - g**2)
        dc *= f
        np.matmul(da, r_cat.T, out=dh_next)

    flat = da_all.reshape(nt * nb, 4 * nh)
    dw_cat = cache.x.reshape(nt * nb, nq).T @ flat
    dr_cat = cache.h_seq[:nt].reshape(nt * nb, nh).T @ flat
    db_cat = flat.sum(axis=0)
    dx = (flat @ w_cat.T).reshape(nt, nb, nq).transpose(1, 0, 2)

    grads = LstmGrads(
        dw_cat[:, :nh].T.copy(),
        dw_cat[:, nh : 2 * nh].T.copy(),
        dw_cat[:, 2 * nh : 3 * nh].T.copy(),
        dw_cat[:, 3 * nh :].T.copy(),
        dr_cat[:, :nh].T.copy(),
        dr_cat[:, nh : 2 * nh].T.copy(),
        dr_cat[:, 2 * nh : 3 * nh].T.copy(),
        dr_cat[:, 3 * nh :].T.copy(),
        db_cat[:nh].copy(),
        db_cat[nh : 2 * nh].copy(),
        db_cat[2 * nh : 3 * nh].copy(),
        db_cat[3 * nh :].copy(),
    )
    return grads, (dx[0] if cache.squeeze else dx)


# ---------------------------------------------------------------------------
# Dense layers
# ---------------------------------------------------------------------------


@dataclass
class DenseParams:
    W: np.ndarray  # (out, in)
    b: np.ndarray  # (out,)
    activation: str = "linear"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    def arrays(self) -> list[np.ndarray]:
        return [self.W, self.b]


@dataclass
class DenseGrads:
    W: np.ndarray
    b: np.ndarray

    def arrays(self) -> list[np.ndarray]:
        return [self.W, self.b]


@dataclass
class DenseCache:
    params: DenseParams
    x: np.ndarray
    y: np.ndarray
    squeeze: bool


def init_dense(out_dim: int, in_dim: int, activation: str, rng, zero: bool = False) -> DenseParams:
    w = np.zeros((out_dim, in_dim)) if zero else glorot_uniform(rng, out_dim, in_dim)
    return DenseParams(w, np.zeros(out_dim), activation)


def dense_forward(p: DenseParams, x):
    """y = act(W x + b); accepts (in,) or (B, in)."""
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    xb = x[None, :] if squeeze else x
    if xb.ndim != 2 or xb.shape[1] != p.W.shape[1]:
        raise ShapeError(f"dense_forward: expected (..., {p.W.shape[1]}), got {x.shape}")
    z = xb @ p.W.T + p.b
    if p.activation == "relu":
        y = relu(z)
    elif p.activation == "sigmoid":
        y = sigmoid(z)
    else:
        y = z
    cache = DenseCache(p, xb, y, squeeze)
    return (y[0] if squeeze else y), cache


def dense_backward(p: DenseParams, cache: DenseCache, grad_y):
    """Chain-rule gradients; ReLU derivative at exactly zero is zero."""
    if cache.params is not p:
        raise ShapeError("cache does not belong to these parameters")
    grad_y = np.asarray(grad_y, dtype=np.float64)
    gy = grad_y[None, :] if cache.squeeze else grad_y
    if gy.shape != cache.y.shape:
        raise ShapeError(f"dense_backward: gradient shape {grad_y.shape} mismatches output")
    if p.activation == "relu":
        dz = gy * (cache.y > 0.0)
    elif p.activation == "sigmoid":
        dz = gy * cache.y * (1.0 - cache.y)
    else:
        dz = gy
    grads = DenseGrads(dz.T @ cache.x, dz.sum(axis=0))
    grad_x = dz @ p.W
    return grads, (grad_x[0] if cache.squeeze else grad_x)


# ---------------------------------------------------------------------------
# Dropout and gradient reversal
# ---------------------------------------------------------------------------


def dropout(x, rate: float, mode: str, rng=None):
    """Inverted dropout: survivors are scaled by 1/(1-rate) at train time.

    Eval mode is the identity, so no rescaling happens at inference.
    Returns ``(y, mask)`` where the mask already includes the scale factor.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = np.asarray(x, dtype=np.float64)
    if mode == "eval" or rate == 0.0:
        return x.copy(), np.ones_like(x)
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * mask, mask


def grl_forward(x):
    """Identity on the forward pass."""
    return x


def grl_backward(grad, alpha: float):
    """Flip and scale the downstream gradient: returns -alpha * grad."""
    return -alpha * np.asarray(grad, dtype=np.float64)


# ---------------------------------------------------------------------------
# Finite-difference verification harness
# ---------------------------------------------------------------------------


def grad_check(params, loss_fn, grad_fn, eps: float = 1e-5) -> float:
    """Compare analytic gradients against central finite differences.

    ``params`` is a list of arrays probed in place; ``loss_fn()`` evaluates
    the scalar loss at the current parameters and ``grad_fn()`` returns the
    analytic gradients in the same order. Returns the worst relative error
    over all entries, where differences below 1e-6 in magnitude count as
    zero (absolute floor for near-zero gradients).
    """
    analytic = [np.asarray(g, dtype=np.float64) for g in grad_fn()]
    if len(analytic) != len(params):
        raise ValueError("grad_fn must return one gradient per parameter")
    worst = 0.0
    for theta, grad in zip(params, analytic):
        it = np.nditer(theta, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            orig = theta[idx]
            theta[idx] = orig + eps
            up = loss_fn()
            theta[idx] = orig - eps
            down = loss_fn()
            theta[idx] = orig
            numeric = (up - down) / (2.0 * eps)
            diff = abs(grad[idx] - numeric)
            if diff >= 1e-6:
                rel = diff / max(abs(grad[idx]), abs(numeric))
                worst = max(worst, rel)
            it.iternext()
    return worst


# ---------------------------------------------------------------------------
# Layer stacks shared by the adaptation model and the baselines
# ---------------------------------------------------------------------------


@dataclass
class DenseStackCache:
    steps: list  # (dense cache, dropout mask | None)


class DenseStack:
    """Dense layers applied in order, with dropout after selected layers."""

    def __init__(self, layers: list[DenseParams], dropout_rates: list[float]):
        if len(dropout_rates) != len(layers):
            raise ValueError("one dropout rate per layer (0 to disable)")
        self.layers = layers
        self.dropout_rates = dropout_rates

    def arrays(self) -> list[np.ndarray]:
        return [a for p in self.layers for a in p.arrays()]

    def forward(self, x, train: bool = False, rng=None):
        steps = []
        for p, rate in zip(self.layers, self.dropout_rates):
            x, cache = dense_forward(p, x)
            mask = None
            if rate > 0.0:
                x, mask = dropout(x, rate, "train" if train else "eval", rng)
            steps.append((cache, mask))
        return x, DenseStackCache(steps)

    def backward(self, cache: DenseStackCache, grad_y):
        grads: list[np.ndarray] = []
        for p, (dc, mask) in zip(reversed(self.layers), reversed(cache.steps)):
            if mask is not None:
                grad_y = grad_y * mask
            g, grad_y = dense_backward(p, dc, grad_y)
            grads = g.arrays() + grads
        return grads, grad_y


@dataclass
class LstmStackCache:
    steps: list  # (lstm cache, relu output, dropout mask | None) per layer


class LstmStack:
    """Stacked LSTM layers; each layer's outputs pass through ReLU + dropout.

    Only the final step of the top layer is exposed; intermediate layers feed
    their full activated sequence to the next layer.
    """

    def __init__(self, layers: list[LstmParams], dropout_rates: list[float]):
        if len(dropout_rates) != len(layers):
            raise ValueError("one dropout rate per layer (0 to disable)")
        self.layers = layers
        self.dropout_rates = dropout_rates

    def arrays(self) -> list[np.ndarray]:
        return [a for p in self.layers for a in p.arrays()]

    def forward(self, x, train: bool = False, rng=None):
        steps = []
        last = len(self.layers) - 1
        for k, (p, rate) in enumerate(zip(self.layers, self.dropout_rates)):
            h_final, cache = lstm_forward(p, x)
            out = h_final if k == last else cache.h_out
            out = relu(out)
            mask = None
            if rate > 0.0:
                out, mask = dropout(out, rate, "train" if train else "eval", rng)
            steps.append((cache, out, mask))
            x = out
        return x, LstmStackCache(steps)

    def backward(self, cache: LstmStackCache, grad_top):
        grads: list[np.ndarray] = []
        grad = grad_top
        last = len(self.layers) - 1
        for k in range(last, -1, -1):
            p = self.layers[k]
            lstm_cache, out, mask = cache.steps[k]
            if mask is not None:
                grad = grad * mask
            grad = grad * (out > 0.0)
            if k == last:
                g, grad = lstm_backward(p, lstm_cache, grad_hT=grad)
            else:
                g, grad = lstm_backward(p, lstm_cache, grad_seq=grad)
            grads = g.arrays() + grads
        return grads, grad
