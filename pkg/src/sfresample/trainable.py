"""Learned interpolation kernel.

The kernel is a small perceptron ``k(t; theta)`` of the normalized offset
``u = t * F_in`` (input-sample units):

    Linear(1, 32) -> LayerNorm -> ReLU -> Linear(32, 32) -> LayerNorm -> ReLU
    -> Linear(32, 1)

hard-truncated to |u| <= L / 2. Because the resampling sum only ever evaluates
the kernel at the finite polyphase grid, the forward pass exports the network
onto that grid and reuses the ordinary table engine; the backward pass
collects dL/dtaps from the engine and pulls it through the network.
"""

import csv
import dataclasses
import io
import json
import math

import numpy as np

from sfresample import kernels, resampler, rng
from sfresample.resampler import Signal

HIDDEN = 32
LN_EPS = 1e-5
PARAM_NAMES = ("w1", "b1", "g1", "s1", "w2", "b2", "g2", "s2", "w3", "b3")


@dataclasses.dataclass(frozen=True, eq=False)
class MLPKernelParams:
    """Weights of the kernel network.

    ``g*``/``s*`` are the layer-norm gains and shifts. ``window_length`` is the
    support L in input samples.
    """

    w1: np.ndarray  # (32, 1)
    b1: np.ndarray
    g1: np.ndarray
    s1: np.ndarray
    w2: np.ndarray  # (32, 32)
    b2: np.ndarray
    g2: np.ndarray
    s2: np.ndarray
    w3: np.ndarray  # (1, 32)
    b3: np.ndarray  # (1,)
    window_length: int = 48

    def __post_init__(self):
        for name, shape in param_shapes().items():
            arr = np.array(getattr(self, name), dtype=np.float64).reshape(shape)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"parameter {name} is not finite")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def flat(self):
        return np.concatenate([getattr(self, n).reshape(-1) for n in PARAM_NAMES])

    @classmethod
    def from_flat(cls, vec, window_length=48):
        parts, pos = {}, 0
        for name, shape in param_shapes().items():
            size = int(np.prod(shape))
            parts[name] = np.asarray(vec[pos:pos + size]).reshape(shape)
            pos += size
        if pos != len(vec):
            raise ValueError(f"expected {pos} parameters, got {len(vec)}")
        return cls(window_length=window_length, **parts)

    def to_json(self, seed=None, train_config=None):
        doc = {
            "architecture": [1, HIDDEN, HIDDEN, 1],
            "activations": ["relu", "relu", "identity"],
            "layer_norm": True,
            "input": "t * rate_in_hz",
            "window_length": self.window_length,
            "weights": [getattr(self, n).tolist() for n in ("w1", "w2", "w3")],
            "biases": [getattr(self, n).tolist() for n in ("b1", "b2", "b3")],
            "layer_norm_gains": [self.g1.tolist(), self.g2.tolist()],
            "layer_norm_shifts": [self.s1.tolist(), self.s2.tolist()],
            "seed": seed,
            "train_config": train_config,
        }
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        if doc.get("architecture") != [1, HIDDEN, HIDDEN, 1] or not doc.get("layer_norm"):
            raise ValueError("unsupported kernel network architecture")
        (w1, w2, w3), (b1, b2, b3) = doc["weights"], doc["biases"]
        (g1, g2), (s1, s2) = doc["layer_norm_gains"], doc["layer_norm_shifts"]
        return cls(w1, b1, g1, s1, w2, b2, g2, s2, w3, b3,
                   window_length=int(doc.get("window_length", 48)))


def param_shapes():
    h = HIDDEN
    return {"w1": (h, 1), "b1": (h,), "g1": (h,), "s1": (h,),
            "w2": (h, h), "b2": (h,), "g2": (h,), "s2": (h,),
            "w3": (1, h), "b3": (1,)}


def init_params(seed, window_length=48):
    """Fan-in scaled uniform weights, unit layer-norm gains, zero shifts."""
    gen = rng.generator(seed)
    h = HIDDEN

    def uni(bound, shape):
        return gen.uniform(-bound, bound, shape)

    return MLPKernelParams(
        w1=uni(1.0, (h, 1)), b1=uni(1.0, (h,)), g1=np.ones(h), s1=np.zeros(h),
        w2=uni(1 / math.sqrt(h), (h, h)), b2=uni(1 / math.sqrt(h), (h,)),
        g2=np.ones(h), s2=np.zeros(h),
        w3=uni(1 / math.sqrt(h), (1, h)), b3=uni(1 / math.sqrt(h), (1,)),
        window_length=window_length)


def _layer_norm(h, gain, shift):
    mu = h.mean(axis=1, keepdims=True)
    d = h - mu
    inv = 1.0 / np.sqrt((d * d).mean(axis=1, keepdims=True) + LN_EPS)
    xhat = d * inv
    return xhat * gain + shift, (xhat, inv)


def _layer_norm_backward(dout, cache, gain):
    xhat, inv = cache
    dgain = np.sum(dout * xhat, axis=0)
    dshift = np.sum(dout, axis=0)
    dx = dout * gain
    dh = inv * (dx - dx.mean(axis=1, keepdims=True)
                - xhat * (dx * xhat).mean(axis=1, keepdims=True))
    return dh, dgain, dshift


def _forward(u, theta):
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    inside = np.abs(u) <= theta.window_length / 2.0
    h1 = u[:, None] * theta.w1[:, 0] + theta.b1
    a1, ln1 = _layer_norm(h1, theta.g1, theta.s1)
    r1 = np.maximum(a1, 0.0)
    h2 = r1 @ theta.w2.T + theta.b2
    a2, ln2 = _layer_norm(h2, theta.g2, theta.s2)
    r2 = np.maximum(a2, 0.0)
    out = (r2 @ theta.w3.T)[:, 0] + theta.b3[0]
    out = np.where(inside, out, 0.0)
    return out, (u, inside, ln1, a1, r1, ln2, a2, r2)


def _backward(dout, cache, theta):
    """Gradient of sum(dout * out) with respect to every parameter, flattened."""
    u, inside, ln1, a1, r1, ln2, a2, r2 = cache
    dout = np.where(inside, np.asarray(dout, dtype=np.float64).reshape(-1), 0.0)
    dw3 = (dout @ r2)[None, :]
    db3 = np.array([dout.sum()])
    dr2 = dout[:, None] * theta.w3[0]
    da2 = dr2 * (a2 > 0)
    dh2, dg2, ds2 = _layer_norm_backward(da2, ln2, theta.g2)
    dw2 = dh2.T @ r1
    db2 = dh2.sum(axis=0)
    dr1 = dh2 @ theta.w2
    da1 = dr1 * (a1 > 0)
    dh1, dg1, ds1 = _layer_norm_backward(da1, ln1, theta.g1)
    dw1 = (dh1.T @ u)[:, None]
    db1 = dh1.sum(axis=0)
    grads = {"w1": dw1, "b1": db1, "g1": dg1, "s1": ds1, "w2": dw2, "b2": db2,
             "g2": dg2, "s2": ds2, "w3": dw3, "b3": db3}
    return np.concatenate([grads[n].reshape(-1) for n in PARAM_NAMES])


def mlp_forward(t, theta, rate_in_hz):
    """Kernel amplitude at time offset ``t`` seconds (0 outside the support)."""
    out, _ = _forward(np.asarray(t, dtype=np.float64) * rate_in_hz, theta)
    return out.reshape(np.shape(t)) if np.ndim(t) else float(out[0])


def mlp_param_gradient(t, theta, rate_in_hz):
    """d k(t; theta) / d theta as a flat vector (``PARAM_NAMES`` order)."""
    _, cache = _forward(np.array([float(t) * rate_in_hz]), theta)
    return _backward(np.ones(1), cache, theta)


def _grid(theta, rate_in_hz, rate_out_hz):
    rate_in_hz, rate_out_hz = kernels._check_rates(rate_in_hz, rate_out_hz)
    half_width = kernels.support_half_width(theta.window_length, rate_in_hz, rate_in_hz)
    num = kernels.table_grid(rate_in_hz, rate_out_hz, half_width)
    q = num.shape[0]
    return num / float(q), half_width


def export_kernel(theta, rate_in_hz, rate_out_hz, cfg=None):
    """Sample the network on the polyphase grid of a rate pair.

    ``cfg`` is accepted for symmetry with ``discretize_kernel``; the support
    comes from ``theta.window_length``.
    """
    u, half_width = _grid(theta, rate_in_hz, rate_out_hz)
    out, _ = _forward(u.reshape(-1), theta)
    return kernels.KernelTable(out.reshape(u.shape), int(rate_in_hz), int(rate_out_hz),
                               half_width)


@dataclasses.dataclass(frozen=True, eq=False)
class BackpropCache:
    """What the backward pass needs from a forward call.

    ``table`` fixes the (output m, input n, offset t_mn) structure: output m
    uses phase ``(m P) mod Q`` and inputs ``n = floor(m P / Q) + W - k``.
    """

    table: kernels.KernelTable
    mlp_cache: tuple
    n_inputs: int
    n_outputs: int


def resample_trainable(x, rate_out_hz, theta):
    """Resample with the learned kernel; returns ``(y, cache)``."""
    u, half_width = _grid(theta, x.rate_hz, rate_out_hz)
    out, mlp_cache = _forward(u.reshape(-1), theta)
    table = kernels.KernelTable(out.reshape(u.shape), x.rate_hz, int(rate_out_hz), half_width)
    y = resampler.resample_with_table(x, table)
    return y, BackpropCache(table, mlp_cache, len(x), len(y))


def backward(cache, grad_y, x, theta):
    """dL/dtheta given dL/dy for the output of ``resample_trainable``."""
    grad_y = np.atleast_2d(np.asarray(grad_y, dtype=np.float64))
    if grad_y.shape != (x.n_channels, cache.n_outputs) or len(x) != cache.n_inputs:
        raise ValueError("cache does not match this signal / gradient")
    dtaps = resampler.table_gradient(x.channels, cache.table, grad_y)
    return _backward(dtaps.reshape(-1), cache.mlp_cache, theta)


def _as_arrays(signals):
    if isinstance(signals, Signal):
        return [signals.channels]
    return [s.channels if isinstance(s, Signal) else np.atleast_2d(s) for s in signals]


def _as_signal_array(y):
    return y.channels if isinstance(y, Signal) else np.atleast_2d(np.asarray(y, dtype=np.float64))


def loss_terms(s_hat, s, y_tr, y_ws):
    """(separation term, resampling term) as plain sums of squares."""
    est, ref = _as_arrays(s_hat), _as_arrays(s)
    if len(est) != len(ref) or any(a.shape != b.shape for a, b in zip(est, ref)):
        raise ValueError("estimated and reference sources differ in shape")
    a, b = _as_signal_array(y_tr), _as_signal_array(y_ws)
    if a.shape != b.shape:
        raise ValueError("resampled signals differ in shape")
    sep = float(sum(np.sum((e - r) ** 2) for e, r in zip(est, ref)))
    reg = float(np.sum((a - b) ** 2))
    return sep, reg


def loss(s_hat, s, y_tr, y_ws):
    """||s_hat - s||^2 + ||y_tr - y_ws||^2."""
    sep, reg = loss_terms(s_hat, s, y_tr, y_ws)
    return sep + reg


# -- end-to-end pipeline -----------------------------------------------------


def _fit_length(data, n):
    if data.shape[1] >= n:
        return data[:, :n]
    out = np.zeros((data.shape[0], n))
    out[:, :data.shape[1]] = data
    return out


class Pipeline:
    """Upsample with the learned kernel, separate with a frozen model, go back.

    The return trip uses the conventional windowed-sinc kernel and has no
    trainable parameters. Estimates are cut or zero-padded to the input length.
    """

    def __init__(self, model, rate_in_hz, rate_out_hz, kernel_cfg=kernels.KernelConfig()):
        self.model = model
        self.rate_in_hz = int(rate_in_hz)
        self.rate_out_hz = int(rate_out_hz)
        self.kernel_cfg = kernel_cfg
        self.up_table = kernels.discretize_kernel(kernel_cfg, rate_in_hz, rate_out_hz)
        self.down_table = kernels.discretize_kernel(kernel_cfg, rate_out_hz, rate_in_hz)

    def reference(self, mixture):
        """Windowed-sinc upsampling of the mixture, the regularizer target."""
        return resampler.resample_with_table(mixture, self.up_table)

    def forward(self, theta, mixture, sources, y_ws=None):
        """Returns ``(loss, sep, reg, state)``."""
        if y_ws is None:
            y_ws = self.reference(mixture)
        y_tr, cache = resample_trainable(mixture, self.rate_out_hz, theta)
        ups = self.model.separate(y_tr)
        n = len(mixture)
        est = [Signal(_fit_length(resampler.resample_with_table(s, self.down_table).channels, n),
                      self.rate_in_hz) for s in ups]
        sep, reg = loss_terms(est, sources, y_tr, y_ws)
        state = (mixture, sources, y_tr, y_ws, cache, est)
        return sep + reg, sep, reg, state

    def gradient(self, theta, state):
        mixture, sources, y_tr, y_ws, cache, est = state
        m = len(y_tr)
        m_back = resampler.output_length(m, self.rate_out_hz, self.rate_in_hz)
        grads_up = []
        for e, s in zip(est, sources):
            g = 2.0 * (e.channels - s.channels)
            g = _fit_length(g, m_back)
            grads_up.append(resampler.input_gradient(m, self.down_table, g))
        grad_y = self.model.separate_vjp(y_tr, grads_up)
        grad_y = grad_y + 2.0 * (y_tr.channels - y_ws.channels)
        return backward(cache, grad_y, mixture, theta)


# -- optimization ------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    decay_factor: float = 0.98
    decay_every: int = 2
    grad_clip_norm: float = 5.0
    early_stop_patience: int = 10
    max_epochs: int = 100
    batch_size: int = 4
    seed: int = 0
    rate_in_hz: int = 8000
    rate_out_hz: int = 44100
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        for name in ("decay_factor", "grad_clip_norm", "rate_in_hz", "rate_out_hz",
                     "decay_every", "max_epochs", "batch_size"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.learning_rate < 0 or self.early_stop_patience < 1:
            raise ValueError("learning_rate must be >= 0 and patience >= 1")

    def lr_at(self, epoch):
        return self.learning_rate * self.decay_factor ** (epoch // self.decay_every)


def clip_grad_norm(grad, max_norm):
    """Rescale ``grad`` so its global L2 norm is at most ``max_norm``."""
    norm = float(np.linalg.norm(grad))
    if norm > max_norm:
        return grad * (max_norm / norm), norm
    return grad, norm


class Adam:
    """Adam with bias correction on a flat parameter vector."""

    def __init__(self, n, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, params, grad, lr):
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        return params - lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclasses.dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    sep_term: float
    reg_term: float
    lr: float


@dataclasses.dataclass
class TrainRecord:
    epochs: list = dataclasses.field(default_factory=list)
    best_epoch: int = -1

    @property
    def best_val_loss(self):
        return self.epochs[self.best_epoch].val_loss

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "sep_term", "reg_term", "lr"])
        for e in self.epochs:
            w.writerow([e.epoch, repr(e.train_loss), repr(e.val_loss), repr(e.sep_term),
                        repr(e.reg_term), repr(e.lr)])
        return buf.getvalue()


def _check_finite(value, what):
    if not math.isfinite(value):
        raise FloatingPointError(f"non-finite {what}: {value}")


def evaluate(pipeline, theta, items, targets):
    """Mean (loss, sep, reg) over ``items`` with precomputed regularizer targets."""
    totals = np.zeros(3)
    for (mix, srcs), y_ws in zip(items, targets):
        total, sep, reg, _ = pipeline.forward(theta, mix, srcs, y_ws)
        totals += (total, sep, reg)
    return totals / len(items)


def train_kernel(train_items, val_items, frozen_model, cfg=TrainConfig(), init=None,
                 lr_fn=None, log=None):
    """Fit the kernel network through a frozen separator.

    ``train_items``/``val_items`` are sequences of ``(mixture, sources)`` at
    ``cfg.rate_in_hz``. Each epoch visits the training items in an order drawn
    from a generator seeded by ``(cfg.seed, epoch)``; batches average the
    per-item gradients, which are clipped to ``cfg.grad_clip_norm`` before the
    Adam step. Training stops once ``cfg.early_stop_patience`` epochs pass
    without a strictly lower validation loss. Returns the parameters of the
    best validation epoch and the record.
    """
    if not train_items or not val_items:
        raise ValueError("training and validation sets must be nonempty")
    theta = init if init is not None else init_params(rng.derive_seed(cfg.seed, rng.INIT))
    pipeline = Pipeline(frozen_model, cfg.rate_in_hz, cfg.rate_out_hz)
    train_targets = [pipeline.reference(mix) for mix, _ in train_items]
    val_targets = [pipeline.reference(mix) for mix, _ in val_items]
    lr_fn = lr_fn or cfg.lr_at

    params = theta.flat()
    opt = Adam(params.size, cfg.beta1, cfg.beta2, cfg.adam_eps)
    record = TrainRecord()
    best_params, best_val = params.copy(), math.inf
    for epoch in range(cfg.max_epochs):
        lr = lr_fn(epoch)
        order = rng.generator(rng.derive_seed(cfg.seed, rng.TRAIN, epoch)).permutation(
            len(train_items))
        batch_losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            current = MLPKernelParams.from_flat(params, theta.window_length)
            grad = np.zeros_like(params)
            for i in batch:
                mix, srcs = train_items[i]
                total, _, _, state = pipeline.forward(current, mix, srcs, train_targets[i])
                _check_finite(total, f"training loss at epoch {epoch}, item {i}")
                batch_losses.append(total)
                grad += pipeline.gradient(current, state)
            grad /= len(batch)
            grad, _ = clip_grad_norm(grad, cfg.grad_clip_norm)
            params = opt.step(params, grad, lr)
            if not np.all(np.isfinite(params)):
                raise FloatingPointError(
                    f"non-finite parameters after a step at epoch {epoch} (lr {lr})")
        current = MLPKernelParams.from_flat(params, theta.window_length)
        val, sep, reg = evaluate(pipeline, current, val_items, val_targets)
        _check_finite(val, f"validation loss at epoch {epoch}")
        record.epochs.append(EpochRecord(epoch, float(np.mean(batch_losses)), float(val),
                                         float(sep), float(reg), float(lr)))
        if val < best_val:
            best_val, best_params, record.best_epoch = val, params.copy(), epoch
        if log is not None:
            log(record.epochs[-1])
        if epoch - record.best_epoch >= cfg.early_stop_patience:
            break
    return MLPKernelParams.from_flat(best_params, theta.window_length), record


def fit_to_windowed_sinc(theta, cfg=kernels.KernelConfig(), steps=2000, lr=1e-2,
                         n_points=2048):
    """Warm start: least-squares fit of the network to the windowed sinc.

    Uses ``n_points`` evenly spaced offsets across the support, so the fit is
    independent of any rate pair.
    """
    half = theta.window_length / 2.0
    u = np.linspace(-half, half, n_points)
    target = kernels.windowed_sinc_kernel(u, cfg, 1.0)
    params = theta.flat()
    opt = Adam(params.size)
    for step in range(steps):
        current = MLPKernelParams.from_flat(params, theta.window_length)
        out, cache = _forward(u, current)
        err = out - target
        grad = _backward(2.0 * err / n_points, cache, current)
        params = opt.step(params, grad, lr * 0.5 ** (step / max(1, steps // 4)))
    return MLPKernelParams.from_flat(params, theta.window_length)
