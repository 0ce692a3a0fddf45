"""Deterministic tensor layers with exact forward and gradient contracts.

Conventions shared by every layer:
  - forward(x, training=..., rng=...) caches whatever backward needs
  - backward(gy) returns the input gradient and fills self.grads
  - parameters live in self.params; compute runs in float64 regardless of
    the stored parameter dtype (models keep float32, gradcheck float64)

Tensor layouts: conv2d works on time x freq x channels, the 1-D ops on
time x channels.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, ShapeError

EPS_P = 1e-7  # probability clamp for the cross-entropy


def _f64(a: np.ndarray) -> np.ndarray:
    return a.astype(np.float64, copy=False)


class Layer:
    """Base: parameter/gradient dicts plus the forward/backward protocol."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def forward(self, x, *, training=False, rng=None):
        raise NotImplementedError

    def backward(self, gy):
        raise NotImplementedError


def glorot(shape, fan_in, fan_out, rng, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def _corr2d(x, w):
    """Valid 2-D cross-correlation of (T,F,C) with (kt,kf,C,O).

    Returns (y, x_col) where x_col is the flattened patch matrix reused by
    the weight-gradient computation.
    """
    kt, kf, cin, cout = w.shape
    t_out = x.shape[0] - kt + 1
    f_out = x.shape[1] - kf + 1
    win = np.lib.stride_tricks.sliding_window_view(x, (kt, kf), axis=(0, 1))
    x_col = win.transpose(0, 1, 3, 4, 2).reshape(t_out * f_out, kt * kf * cin)
    y = x_col @ w.reshape(kt * kf * cin, cout)
    return y.reshape(t_out, f_out, cout), x_col


class Conv2d(Layer):
    """Valid cross-correlation over time x freq with multi-channel kernels."""

    def __init__(self, kt, kf, cin, cout, rng=None, dtype=np.float32):
        super().__init__()
        self.kt, self.kf, self.cin, self.cout = kt, kf, cin, cout
        rng = rng or np.random.default_rng(0)
        self.params["w"] = glorot((kt, kf, cin, cout), kt * kf * cin, kt * kf * cout, rng, dtype)
        self.params["b"] = np.zeros(cout, dtype=dtype)

    def forward(self, x, *, training=False, rng=None):
        if x.ndim != 3 or x.shape[2] != self.cin:
            raise ShapeError(f"conv2d expects (time, freq, {self.cin}), got {x.shape}")
        if x.shape[0] < self.kt or x.shape[1] < self.kf:
            raise ShapeError(f"input {x.shape[:2]} smaller than kernel ({self.kt},{self.kf})")
        w = _f64(self.params["w"])
        y, self._x_col = _corr2d(_f64(x), w)
        self._in_shape = x.shape
        return y + _f64(self.params["b"])

    def backward(self, gy):
        kt, kf, cin, cout = self.kt, self.kf, self.cin, self.cout
        w = _f64(self.params["w"])
        t_out, f_out = gy.shape[:2]
        gy2 = gy.reshape(-1, cout)
        self.grads["w"] = (self._x_col.T @ gy2).reshape(kt, kf, cin, cout)
        self.grads["b"] = gy2.sum(axis=0)
        # scatter-accumulate the input gradient tap by tap
        gx = np.zeros(self._in_shape, dtype=np.float64)
        for i in range(kt):
            for j in range(kf):
                gx[i : i + t_out, j : j + f_out] += (gy2 @ w[i, j].T).reshape(
                    t_out, f_out, cin
                )
        return gx


class MaxPoolFreq3(Layer):
    """Non-overlapping max over groups of 3 frequency bins; remainder dropped."""

    def forward(self, x, *, training=False, rng=None):
        if x.ndim != 3 or x.shape[1] < 3:
            raise ShapeError(f"maxpool_freq3 needs (time, freq>=3, ch), got {x.shape}")
        f3 = x.shape[1] // 3
        xr = _f64(x[:, : f3 * 3]).reshape(x.shape[0], f3, 3, x.shape[2])
        self._arg = xr.argmax(axis=2)  # first index on ties
        self._in_shape = x.shape
        return np.take_along_axis(xr, self._arg[:, :, None, :], axis=2)[:, :, 0, :]

    def backward(self, gy):
        t, f, c = self._in_shape
        f3 = f // 3
        gxr = np.zeros((t, f3, 3, c))
        np.put_along_axis(gxr, self._arg[:, :, None, :], gy[:, :, None, :], axis=2)
        gx = np.zeros((t, f, c))
        gx[:, : f3 * 3] = gxr.reshape(t, f3 * 3, c)
        return gx


class DilatedConv1d(Layer):
    """Non-causal dilated 1-D convolution, zero-padded to keep length.

    out[t] = b + sum_j w[j] . x[t + (j - (k-1)/2) * dilation]
    """

    def __init__(self, k, cin, cout, dilation, rng=None, dtype=np.float32):
        super().__init__()
        if k % 2 == 0:
            raise ConfigError(f"kernel size must be odd for a centered kernel, got {k}")
        self.k, self.cin, self.cout, self.dilation = k, cin, cout, dilation
        rng = rng or np.random.default_rng(0)
        self.params["w"] = glorot((k, cin, cout), k * cin, k * cout, rng, dtype)
        self.params["b"] = np.zeros(cout, dtype=dtype)

    def forward(self, x, *, training=False, rng=None):
        if x.ndim != 2 or x.shape[1] != self.cin:
            raise ShapeError(f"dilated_conv1d expects (time, {self.cin}), got {x.shape}")
        k, d = self.k, self.dilation
        h = (k - 1) // 2
        t = x.shape[0]
        xp = np.pad(_f64(x), ((h * d, h * d), (0, 0)))
        # stack the k shifted views so the whole kernel is one matmul
        x_taps = np.concatenate([xp[j * d : j * d + t] for j in range(k)], axis=1)
        w = _f64(self.params["w"])
        y = x_taps @ w.reshape(k * self.cin, self.cout) + _f64(self.params["b"])
        self._x_taps, self._t = x_taps, t
        return y

    def backward(self, gy):
        k, d = self.k, self.dilation
        h = (k - 1) // 2
        t = self._t
        w = _f64(self.params["w"])
        self.grads["w"] = (self._x_taps.T @ gy).reshape(k, self.cin, self.cout)
        self.grads["b"] = gy.sum(axis=0)
        # g_taps holds dLoss/d(shifted copies); fold the shifts back
        g_taps = gy @ w.reshape(k * self.cin, self.cout).T
        gxp = np.zeros((t + 2 * h * d, self.cin))
        for j in range(k):
            gxp[j * d : j * d + t] += g_taps[:, j * self.cin : (j + 1) * self.cin]
        return gxp[h * d : h * d + t]


class Dense(Layer):
    """Per-frame affine map (time, cin) -> (time, cout)."""

    def __init__(self, cin, cout, rng=None, dtype=np.float32):
        super().__init__()
        self.cin, self.cout = cin, cout
        rng = rng or np.random.default_rng(0)
        self.params["w"] = glorot((cin, cout), cin, cout, rng, dtype)
        self.params["b"] = np.zeros(cout, dtype=dtype)

    def forward(self, x, *, training=False, rng=None):
        if x.ndim != 2 or x.shape[1] != self.cin:
            raise ShapeError(f"dense expects (time, {self.cin}), got {x.shape}")
        self._x = _f64(x)
        return self._x @ _f64(self.params["w"]) + _f64(self.params["b"])

    def backward(self, gy):
        self.grads["w"] = self._x.T @ gy
        self.grads["b"] = gy.sum(axis=0)
        return gy @ _f64(self.params["w"]).T


class Elu(Layer):
    def forward(self, x, *, training=False, rng=None):
        x = _f64(x)
        self._neg = x < 0
        self._y = np.where(self._neg, np.expm1(np.minimum(x, 0.0)), x)
        return self._y

    def backward(self, gy):
        return gy * np.where(self._neg, self._y + 1.0, 1.0)


class Sigmoid(Layer):
    def forward(self, x, *, training=False, rng=None):
        x = _f64(x)
        s = np.exp(-np.abs(x))
        self._y = np.where(x >= 0, 1.0 / (1.0 + s), s / (1.0 + s))
        return self._y

    def backward(self, gy):
        return gy * self._y * (1.0 - self._y)


class Dropout(Layer):
    """Inverted dropout: scale survivors by 1/(1-rate) during training."""

    def __init__(self, rate=0.1):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate

    def forward(self, x, *, training=False, rng=None):
        x = _f64(x)
        if not training or self.rate == 0.0:
            self._mask = None
            return x
        if rng is None:
            raise ConfigError("training-mode dropout needs an rng")
        self._mask = (rng.random(x.shape) >= self.rate) / (1.0 - self.rate)
        return x * self._mask

    def backward(self, gy):
        if self._mask is None:
            return gy
        return gy * self._mask


class Sequential(Layer):
    """Chain of layers; backward runs them in reverse."""

    def __init__(self, layers):
        super().__init__()
        self.layers = list(layers)

    def forward(self, x, *, training=False, rng=None):
        for layer in self.layers:
            x = layer.forward(x, training=training, rng=rng)
        return x

    def backward(self, gy):
        for layer in reversed(self.layers):
            gy = layer.backward(gy)
        return gy

    @property
    def params(self):
        return {f"{i}.{k}": v for i, l in enumerate(self.layers) for k, v in l.params.items()}

    @params.setter
    def params(self, value):
        if value:  # base __init__ assigns {}; nested params live in the layers
            raise ConfigError("set parameters on the contained layers")

    @property
    def grads(self):
        return {f"{i}.{k}": v for i, l in enumerate(self.layers) for k, v in l.grads.items()}

    @grads.setter
    def grads(self, value):
        if value:
            raise ConfigError("gradients live in the contained layers")


def conv2d_valid(x, w, b):
    """Functional valid 2-D cross-correlation plus bias."""
    w = np.asarray(w)
    if w.ndim != 4:
        raise ShapeError(f"kernel must be (kt, kf, cin, cout), got {w.shape}")
    layer = Conv2d(*w.shape)
    layer.params["w"], layer.params["b"] = w, np.asarray(b)
    return layer.forward(np.asarray(x))


def maxpool_freq3(x):
    return MaxPoolFreq3().forward(np.asarray(x))


def dilated_conv1d(x, w, b, dilation):
    w = np.asarray(w)
    if w.ndim != 3:
        raise ShapeError(f"kernel must be (k, cin, cout), got {w.shape}")
    layer = DilatedConv1d(w.shape[0], w.shape[1], w.shape[2], dilation)
    layer.params["w"], layer.params["b"] = w, np.asarray(b)
    return layer.forward(np.asarray(x))


def dense(x, w, b):
    w = np.asarray(w)
    layer = Dense(*w.shape)
    layer.params["w"], layer.params["b"] = w, np.asarray(b)
    return layer.forward(np.asarray(x))


def activation(x, kind):
    if kind == "elu":
        return Elu().forward(np.asarray(x))
    if kind == "sigmoid":
        return Sigmoid().forward(np.asarray(x))
    raise ConfigError(f"unknown activation kind {kind!r}")


def dropout(x, rate, rng, training):
    return Dropout(rate).forward(np.asarray(x), training=training, rng=rng)


def bce_loss(p, target):
    """Mean binary cross-entropy with p clamped to [1e-7, 1 - 1e-7]."""
    p, target = np.asarray(p), np.asarray(target)
    if p.shape != target.shape:
        raise ShapeError(f"activation {p.shape} vs target {target.shape}")
    q = np.clip(_f64(p), EPS_P, 1.0 - EPS_P)
    return float(np.mean(-(target * np.log(q) + (1.0 - target) * np.log1p(-q))))


def bce_loss_grad(p, target):
    """dLoss/dp, zero where the clamp is active."""
    p, target = _f64(np.asarray(p)), np.asarray(target)
    q = np.clip(p, EPS_P, 1.0 - EPS_P)
    g = (q - target) / (q * (1.0 - q)) / p.size
    g[(p < EPS_P) | (p > 1.0 - EPS_P)] = 0.0
    return g


def gradcheck(layer, x, seed=0, h=1e-4, max_coords=48):
    """Worst relative error between analytic and central-difference grads.

    Objective: sum(R * layer(x)) for a fixed random projection R, so the
    output gradient is exactly R. Samples up to max_coords coordinates per
    tensor (input and every parameter). Double precision throughout; the
    caller picks seeds that avoid ELU/pool kink points.
    """
    rng = np.random.default_rng(seed)
    x = _f64(np.asarray(x)).copy()

    def run():
        return layer.forward(x, training=False)

    y0 = run()
    proj = rng.standard_normal(y0.shape)
    gx = layer.backward(proj)
    tensors = [(x, gx)] + [(arr, layer.grads[name]) for name, arr in layer.params.items()]

    worst = 0.0
    for arr, grad in tensors:
        size = arr.size
        coords = np.arange(size) if size <= max_coords else rng.choice(size, max_coords, False)
        for ci in coords:
            orig = arr.flat[ci]
            arr.flat[ci] = orig + h
            fp = float(np.sum(proj * run()))
            arr.flat[ci] = orig - h
            fm = float(np.sum(proj * run()))
            arr.flat[ci] = orig
            numeric = (fp - fm) / (2.0 * h)
            analytic = float(grad.flat[ci])
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-3)
            worst = max(worst, rel)
    return worst
