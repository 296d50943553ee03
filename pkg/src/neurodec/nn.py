"""A small deterministic numpy network engine: layers, MSE, Adam and gradient checking.

Images are laid out NHWC. Training runs in float32; ``Model.astype(np.float64)``
gives a double-precision copy for verification.
"""

from __future__ import annotations

import numpy as np

ACTIVATIONS = ("linear", "relu", "swish")


def sigmoid(x):
    # tanh form never overflows
    return 0.5 * (1 + np.tanh(0.5 * x))


def relu(x):
    return np.maximum(x, 0)


def swish(x):
    return x * sigmoid(x)


def linear(x):
    return x


def _activate(name, z):
    if name == "linear":
        return z
    if name == "relu":
        return relu(z)
    if name == "swish":
        return swish(z)
    raise ValueError(f"unknown activation {name!r}")


def _activation_grad(name, z, dout):
    if name == "linear":
        return dout
    if name == "relu":
        return dout * (z > 0)
    if name == "swish":
        s = sigmoid(z)
        return dout * (s + z * s * (1 - s))
    raise ValueError(f"unknown activation {name!r}")


def glorot_uniform(rng, shape, fan_in, fan_out, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Layer:
    params: list[np.ndarray]
    grads: list[np.ndarray]

    def __init__(self):
        self.params, self.grads = [], []
        self._cache = None

    def forward(self, x, training=False, rng=None):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError

    def spec(self) -> dict:
        raise NotImplementedError

    def output_shape(self, in_shape: tuple) -> tuple:
        raise NotImplementedError

    def _need_cache(self):
        if self._cache is None:
            raise RuntimeError(f"{type(self).__name__}.backward called without a cached forward pass")
        return self._cache


class Dense(Layer):
    def __init__(self, n_in, n_out, activation="linear", rng=None, dtype=np.float32):
        super().__init__()
        if n_in < 1 or n_out < 1:
            raise ValueError("Dense dims must be positive")
        self.n_in, self.n_out, self.activation = n_in, n_out, activation
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params = [glorot_uniform(rng, (n_in, n_out), n_in, n_out, dtype),
                       np.zeros(n_out, dtype=dtype)]
        self.grads = [np.zeros_like(p) for p in self.params]

    def forward(self, x, training=False, rng=None):
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ValueError(f"Dense expected [batch, {self.n_in}], got {x.shape}")
        W, b = self.params
        z = x @ W + b
        self._cache = (x, z)
        return _activate(self.activation, z)

    def backward(self, dout):
        x, z = self._need_cache()
        dz = _activation_grad(self.activation, z, dout)
        self.grads[0][...] = x.T @ dz
        self.grads[1][...] = dz.sum(axis=0)
        return dz @ self.params[0].T

    def spec(self):
        return {"type": "dense", "in": self.n_in, "out": self.n_out, "activation": self.activation}

    def output_shape(self, in_shape):
        return (self.n_out,)


class Conv2D(Layer):
    """Stride-1 convolution with 'same' zero padding on NHWC input."""

    def __init__(self, in_ch, out_ch, kh=3, kw=3, activation="linear", rng=None,
                 dtype=np.float32):
        super().__init__()
        if min(in_ch, out_ch, kh, kw) < 1:
            raise ValueError("Conv2D dims must be positive")
        self.in_ch, self.out_ch, self.kh, self.kw = in_ch, out_ch, kh, kw
        self.activation = activation
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in, fan_out = kh * kw * in_ch, kh * kw * out_ch
        self.params = [glorot_uniform(rng, (kh, kw, in_ch, out_ch), fan_in, fan_out, dtype),
                       np.zeros(out_ch, dtype=dtype)]
        self.grads = [np.zeros_like(p) for p in self.params]

    def _pad(self, x):
        ph, pw = self.kh - 1, self.kw - 1
        return np.pad(x, ((0, 0), (ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2), (0, 0)))

    def forward(self, x, training=False, rng=None):
        if x.ndim != 4 or x.shape[3] != self.in_ch:
            raise ValueError(f"Conv2D expected [N, H, W, {self.in_ch}], got {x.shape}")
        n, h, w, _ = x.shape
        W, b = self.params
        xp = self._pad(x)
        z = np.broadcast_to(b, (n, h, w, self.out_ch)).copy()
        for i in range(self.kh):
            for j in range(self.kw):
                z += xp[:, i:i + h, j:j + w, :] @ W[i, j]
        self._cache = (xp, z)
        return _activate(self.activation, z)

    def backward(self, dout):
        xp, z = self._need_cache()
        n, h, w, _ = z.shape
        dz = _activation_grad(self.activation, z, dout)
        W = self.params[0]
        dz2 = dz.reshape(-1, self.out_ch)
        dxp = np.zeros_like(xp)
        for i in range(self.kh):
            for j in range(self.kw):
                xs = xp[:, i:i + h, j:j + w, :]
                self.grads[0][i, j] = xs.reshape(-1, self.in_ch).T @ dz2
                dxp[:, i:i + h, j:j + w, :] += dz @ W[i, j].T
        self.grads[1][...] = dz2.sum(axis=0)
        top, left = (self.kh - 1) // 2, (self.kw - 1) // 2
        return dxp[:, top:top + h, left:left + w, :]

    def spec(self):
        return {"type": "conv2d", "in_ch": self.in_ch, "out_ch": self.out_ch, "kh": self.kh,
                "kw": self.kw, "padding": "same", "stride": 1, "activation": self.activation}

    def output_shape(self, in_shape):
        h, w, _ = in_shape
        return (h, w, self.out_ch)


class MaxPool2D(Layer):
    """Non-overlapping max pooling; trailing rows/cols that do not fill a window are dropped.

    Ties go to the first position of the window in row-major order.
    """

    def __init__(self, ph=2, pw=2):
        super().__init__()
        if ph < 1 or pw < 1:
            raise ValueError("pool size must be positive")
        self.ph, self.pw = ph, pw

    def forward(self, x, training=False, rng=None):
        if x.ndim != 4:
            raise ValueError(f"MaxPool2D expected [N, H, W, C], got {x.shape}")
        n, h, w, c = x.shape
        ho, wo = h // self.ph, w // self.pw
        if ho < 1 or wo < 1:
            raise ValueError(f"input {h}x{w} smaller than pool {self.ph}x{self.pw}")
        win = x[:, :ho * self.ph, :wo * self.pw, :].reshape(n, ho, self.ph, wo, self.pw, c)
        win = win.transpose(0, 1, 3, 5, 2, 4).reshape(n, ho, wo, c, self.ph * self.pw)
        arg = win.argmax(axis=-1)
        self._cache = (x.shape, arg)
        return np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(self, dout):
        shape, arg = self._need_cache()
        n, h, w, c = shape
        ho, wo = dout.shape[1], dout.shape[2]
        win = np.zeros((n, ho, wo, c, self.ph * self.pw), dtype=dout.dtype)
        np.put_along_axis(win, arg[..., None], dout[..., None], axis=-1)
        win = win.reshape(n, ho, wo, c, self.ph, self.pw).transpose(0, 1, 4, 2, 5, 3)
        dx = np.zeros(shape, dtype=dout.dtype)
        dx[:, :ho * self.ph, :wo * self.pw, :] = win.reshape(n, ho * self.ph, wo * self.pw, c)
        return dx

    def spec(self):
        return {"type": "maxpool2d", "ph": self.ph, "pw": self.pw}

    def output_shape(self, in_shape):
        h, w, c = in_shape
        return (h // self.ph, w // self.pw, c)


class Dropout(Layer):
    """Inverted dropout: kept units are scaled by 1/(1 - rate) during training only."""

    def __init__(self, rate):
        super().__init__()
        if not 0 <= rate < 1:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate
        self.enabled = True

    def forward(self, x, training=False, rng=None):
        if not (training and self.enabled and self.rate > 0):
            self._cache = None
            return x
        if rng is None:
            raise ValueError("training-mode dropout needs an rng")
        mask = (rng.random(x.shape) >= self.rate).astype(x.dtype) / x.dtype.type(1 - self.rate)
        self._cache = mask
        return x * mask

    def backward(self, dout):
        return dout if self._cache is None else dout * self._cache

    def spec(self):
        return {"type": "dropout", "rate": self.rate}

    def output_shape(self, in_shape):
        return in_shape


class Flatten(Layer):
    def forward(self, x, training=False, rng=None):
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape(self._need_cache())

    def spec(self):
        return {"type": "flatten"}

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)


def layer_from_spec(spec: dict, rng=None, dtype=np.float32) -> Layer:
    t = spec["type"]
    if t == "dense":
        return Dense(spec["in"], spec["out"], spec.get("activation", "linear"), rng, dtype)
    if t == "conv2d":
        if spec.get("padding", "same") != "same" or spec.get("stride", 1) != 1:
            raise ValueError("only stride-1 'same' convolutions are supported")
        return Conv2D(spec["in_ch"], spec["out_ch"], spec["kh"], spec["kw"],
                      spec.get("activation", "linear"), rng, dtype)
    if t == "maxpool2d":
        return MaxPool2D(spec["ph"], spec["pw"])
    if t == "dropout":
        return Dropout(spec["rate"])
    if t == "flatten":
        return Flatten()
    raise ValueError(f"unknown layer type {t!r}")


class Model:
    """Sequential stack of layers with a fixed input shape (excluding the batch axis)."""

    def __init__(self, layers: list[Layer], input_shape: tuple, dtype=np.float32):
        self.layers = layers
        self.input_shape = tuple(input_shape)
        self.dtype = np.dtype(dtype)
        self._inputs: list | None = None
        shape = self.input_shape
        for layer in layers:
            shape = layer.output_shape(shape)
        self.output_shape = shape

    @classmethod
    def from_specs(cls, specs: list[dict], input_shape, seed: int = 0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        return cls([layer_from_spec(s, rng, dtype) for s in specs], input_shape, dtype)

    def specs(self) -> list[dict]:
        return [layer.spec() for layer in self.layers]

    def parameters(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.params]

    def gradients(self) -> list[np.ndarray]:
        return [g for layer in self.layers for g in layer.grads]

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def get_weights(self) -> list[list[np.ndarray]]:
        return [[p.copy() for p in layer.params] for layer in self.layers]

    def set_weights(self, weights) -> None:
        if len(weights) != len(self.layers):
            raise ValueError(f"{len(weights)} weight groups for {len(self.layers)} layers")
        for layer, ws in zip(self.layers, weights):
            if len(ws) != len(layer.params):
                raise ValueError(f"{type(layer).__name__} expects {len(layer.params)} arrays")
            for p, w in zip(layer.params, ws):
                if p.shape != tuple(np.shape(w)):
                    raise ValueError(f"weight shape {np.shape(w)} does not match {p.shape}")
                p[...] = w

    def astype(self, dtype) -> "Model":
        m = Model.from_specs(self.specs(), self.input_shape, 0, dtype)
        m.set_weights(self.get_weights())
        return m

    def forward(self, x, training=False, rng=None, start: int = 0):
        x = np.asarray(x, dtype=self.dtype)
        if start == 0 and x.shape[1:] != self.input_shape:
            raise ValueError(f"model expects input [batch, {self.input_shape}], got {x.shape}")
        if start == 0:
            self._inputs = []
        for layer in self.layers[start:]:
            if start == 0:
                self._inputs.append(x)
            x = layer.forward(x, training, rng)
        return x

    __call__ = forward

    def backward(self, grad):
        if self._inputs is None:
            raise RuntimeError("backward called without a cached forward pass")
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad


def mse_loss(pred, target):
    """Mean squared error over all elements and its gradient wrt ``pred``."""
    pred = np.asarray(pred)
    diff = pred - np.asarray(target, dtype=pred.dtype)
    return float(np.mean(diff * diff, dtype=np.float64)), (2.0 / diff.size) * diff


class Adam:
    """Bias-corrected Adam on a fixed list of parameter arrays, updated in place."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.step_count = 0
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]

    def step(self, grads) -> None:
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1**t
        c2 = 1 - b2**t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            denom = np.sqrt(v / p.dtype.type(c2))
            denom += p.dtype.type(self.eps)
            p -= p.dtype.type(self.lr / c1) * m / denom

    def state(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
                "step_count": self.step_count}


def grad_check(model: Model, x, y, eps: float = 1e-5, fraction: float = 0.01,
               min_per_array: int = 3, seed: int = 0) -> float:
    """Max relative error between backprop and central differences, in float64.

    Samples ``fraction`` of every parameter array (at least ``min_per_array``
    entries). Dropout layers are switched off for the check.
    """
    m = model.astype(np.float64)
    for layer in m.layers:
        if isinstance(layer, Dropout):
            layer.enabled = False
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    pred = m.forward(x)
    _, g = mse_loss(pred, y)
    m.backward(g)
    inputs = list(m._inputs)
    rng = np.random.default_rng(seed)

    def out_from(li):
        return m.forward(inputs[li], start=li).copy()

    worst = 0.0
    for li, layer in enumerate(m.layers):
        for p, grad in zip(layer.params, layer.grads):
            k = min(p.size, max(min_per_array, int(round(fraction * p.size))))
            flat_idx = rng.choice(p.size, size=k, replace=False)
            flat, gflat = p.reshape(-1), grad.reshape(-1)
            for i in flat_idx:
                orig = flat[i]
                flat[i] = orig + eps
                op = out_from(li)
                flat[i] = orig - eps
                om = out_from(li)
                flat[i] = orig
                # L(+) - L(-) factored so the two losses never cancel
                num = np.mean((op - om) * (op + om - 2 * y)) / (2 * eps)
                ana = gflat[i]
                denom = max(abs(num), abs(ana), 1e-7)
                worst = max(worst, abs(num - ana) / denom)
    return worst
