"""A small float64 CNN engine with hand-written backward passes.

Tensors are plain numpy arrays in NCHW layout. Each op comes as a pair of
functions (forward returning a cache, backward consuming it); the layer
classes wrap those pairs and hold parameters and gradients.

Default architecture::

    [conv3x3 -> batchnorm -> relu -> maxpool2] x 3 -> dropout -> flatten
    -> dense -> relu -> dense -> relu -> dense(2) -> softmax
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class NNError(ValueError):
    pass


class ShapeMismatch(NNError):
    pass


class OddSpatialDim(NNError):
    pass


class BatchTooSmall(NNError):
    pass


# ---------------------------------------------------------------- conv2d

def conv2d(x, w, b=None, padding="same"):
    """Stride-1 cross-correlation. Returns ``(out, cache)``.

    ``padding`` is ``"same"`` (odd kernels only) or an explicit integer;
    ``b`` may be None for a bias-free convolution.
    """
    if (
        x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]
        or (b is not None and b.shape != (w.shape[0],))
    ):
        raise ShapeMismatch(f"conv2d: input {x.shape}, weights {w.shape}, bias {b.shape}")
    f, c, kh, kw = w.shape
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeMismatch("same padding needs an odd kernel")
        ph, pw = kh // 2, kw // 2
    else:
        ph = pw = int(padding)
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x
    # (N, C, Ho, Wo, kh, kw) -> rows of (C*kh*kw) per output position
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    n, _, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    out = cols @ w.reshape(f, -1).T
    if b is not None:
        out += b
    out = out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), (x.shape, cols, w, ph, pw)


def conv2d_backward(d_out, cache):
    x_shape, cols, w, ph, pw = cache
    n, c, h, wd = x_shape
    f, _, kh, kw = w.shape
    ho, wo = d_out.shape[2:]
    d2 = d_out.transpose(0, 2, 3, 1).reshape(-1, f)
    d_w = (d2.T @ cols).reshape(w.shape)
    d_b = d2.sum(axis=0)
    d_cols = (d2 @ w.reshape(f, -1)).reshape(n, ho, wo, c, kh, kw)
    dxp = np.zeros((n, c, h + 2 * ph, wd + 2 * pw))
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + ho, j:j + wo] += d_cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    d_x = dxp[:, :, ph:ph + h, pw:pw + wd]
    return np.ascontiguousarray(d_x), d_w, d_b


# ---------------------------------------------------------------- max pool

def maxpool2(x, floor=False):
    """2x2 max pool with stride 2. Ties go to the first maximum in row-major
    order. With ``floor`` a trailing odd row/column is dropped, otherwise odd
    spatial sizes raise."""
    n, c, h, w = x.shape
    if not floor and (h % 2 or w % 2):
        raise OddSpatialDim(f"maxpool2 needs even spatial dims, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    blocks = x[:, :, : 2 * h2, : 2 * w2].reshape(n, c, h2, 2, w2, 2)
    blocks = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    return out, (x.shape, arg)


def maxpool2_backward(d_out, cache):
    x_shape, arg = cache
    n, c, h, w = x_shape
    h2, w2 = arg.shape[2:]
    d_blocks = np.zeros((n, c, h2, w2, 4))
    np.put_along_axis(d_blocks, arg[..., None], d_out[..., None], axis=-1)
    d_blocks = d_blocks.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    d_x = np.zeros(x_shape)
    d_x[:, :, : 2 * h2, : 2 * w2] = d_blocks.reshape(n, c, 2 * h2, 2 * w2)
    return d_x


# ---------------------------------------------------------------- batchnorm

def batchnorm2d(x, gamma, beta, training, running_mean=None, running_var=None, eps=1e-5):
    """Per-channel batch normalisation over (N, H, W).

    In training mode the batch mean and population variance are used and
    returned in the cache; the caller folds them into the running stats.
    """
    if training:
        if x.shape[0] < 2:
            raise BatchTooSmall("batchnorm needs at least 2 samples in training mode")
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma[None, :, None, None] * x_hat + beta[None, :, None, None]
    return out, (x_hat, inv_std, gamma, training, mean, var)


def batchnorm2d_backward(d_out, cache):
    x_hat, inv_std, gamma, training, _, _ = cache
    d_gamma = (d_out * x_hat).sum(axis=(0, 2, 3))
    d_beta = d_out.sum(axis=(0, 2, 3))
    d_xhat = d_out * gamma[None, :, None, None]
    if not training:
        return d_xhat * inv_std[None, :, None, None], d_gamma, d_beta
    m = d_out.shape[0] * d_out.shape[2] * d_out.shape[3]
    sum_d = d_xhat.sum(axis=(0, 2, 3))[None, :, None, None]
    sum_dx = (d_xhat * x_hat).sum(axis=(0, 2, 3))[None, :, None, None]
    d_x = inv_std[None, :, None, None] / m * (m * d_xhat - sum_d - x_hat * sum_dx)
    return d_x, d_gamma, d_beta


# ---------------------------------------------------------------- elementwise and dense

def relu(x):
    return np.maximum(x, 0.0), x > 0


def relu_backward(d_out, mask):
    return d_out * mask


def dense(x, w, b):
    if x.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeMismatch(f"dense: input {x.shape}, weights {w.shape}, bias {b.shape}")
    return x @ w + b, x


def dense_backward(d_out, x, w):
    return d_out @ w.T, x.T @ d_out, d_out.sum(axis=0)


def dropout(x, rate, training, rng=None):
    """Inverted dropout. Returns ``(out, mask)``; ``mask`` is None when inactive."""
    if not 0 <= rate < 1:
        raise NNError("dropout rate must be in [0, 1)")
    if not training or rate == 0:
        return x, None
    if rng is None:
        raise NNError("training-mode dropout needs an rng")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * mask, mask


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_xent(logits, labels):
    """Mean categorical cross-entropy. ``labels`` are one-hot rows.

    Returns ``(loss, probs, d_logits)``.
    """
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_probs = z - log_norm
    probs = np.exp(log_probs)
    n = logits.shape[0]
    loss = float(-(labels * log_probs).sum() / n)
    return loss, probs, (probs - labels) / n


def one_hot(labels, classes=2):
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((len(labels), classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


# ---------------------------------------------------------------- Adam

@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0


def adam_init(params):
    return AdamState([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params, grads, state: AdamState, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update, in place on ``params``."""
    if len(params) != len(grads) or any(p.shape != g.shape for p, g in zip(params, grads)):
        raise ShapeMismatch("params and grads do not match")
    state.t += 1
    c1 = 1 - beta1**state.t
    c2 = 1 - beta2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


# ---------------------------------------------------------------- layers

class Layer:
    params: dict
    grads: dict
    code = 0
    # non-differentiable switch points hit by the last forward (relu masks, pool argmax)
    switches = None

    def __init__(self):
        self.params = {}
        self.grads = {}
        self.buffers = {}

    def forward(self, x, training, rng=None, update_stats=True):
        raise NotImplementedError

    def backward(self, d_out):
        raise NotImplementedError


class Conv2D(Layer):
    code = 1

    def __init__(self, in_ch, filters, kernel=3, rng=None, bias=True):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        fan_in = in_ch * kernel * kernel
        self.params["w"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), (filters, in_ch, kernel, kernel))
        if bias:
            self.params["b"] = np.zeros(filters)

    def forward(self, x, training, rng=None, update_stats=True):
        out, self._cache = conv2d(x, self.params["w"], self.params.get("b"))
        return out

    def backward(self, d_out):
        d_x, self.grads["w"], d_b = conv2d_backward(d_out, self._cache)
        if "b" in self.params:
            self.grads["b"] = d_b
        return d_x


class BatchNorm2D(Layer):
    code = 2

    def __init__(self, channels, eps=1e-5, momentum=0.1):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.params["gamma"] = np.ones(channels)
        self.params["beta"] = np.zeros(channels)
        self.buffers["running_mean"] = np.zeros(channels)
        self.buffers["running_var"] = np.ones(channels)

    def forward(self, x, training, rng=None, update_stats=True):
        out, self._cache = batchnorm2d(
            x, self.params["gamma"], self.params["beta"], training,
            self.buffers["running_mean"], self.buffers["running_var"], self.eps,
        )
        if training and update_stats:
            mean, var = self._cache[4], self._cache[5]
            m = self.momentum
            self.buffers["running_mean"] = (1 - m) * self.buffers["running_mean"] + m * mean
            self.buffers["running_var"] = (1 - m) * self.buffers["running_var"] + m * var
        return out

    def backward(self, d_out):
        d_x, self.grads["gamma"], self.grads["beta"] = batchnorm2d_backward(d_out, self._cache)
        return d_x


class ReLU(Layer):
    def forward(self, x, training, rng=None, update_stats=True):
        out, self._mask = relu(x)
        self.switches = self._mask
        return out

    def backward(self, d_out):
        return relu_backward(d_out, self._mask)


class MaxPool2(Layer):
    def forward(self, x, training, rng=None, update_stats=True):
        out, self._cache = maxpool2(x, floor=True)
        self.switches = self._cache[1]
        return out

    def backward(self, d_out):
        return maxpool2_backward(d_out, self._cache)


class Dropout(Layer):
    def __init__(self, rate):
        super().__init__()
        self.rate = rate

    def forward(self, x, training, rng=None, update_stats=True):
        out, self._mask = dropout(x, self.rate, training, rng)
        return out

    def backward(self, d_out):
        return d_out if self._mask is None else d_out * self._mask


class Flatten(Layer):
    def forward(self, x, training, rng=None, update_stats=True):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, d_out):
        return d_out.reshape(self._shape)


class Dense(Layer):
    code = 3

    def __init__(self, n_in, n_out, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.params["w"] = rng.normal(0.0, np.sqrt(2.0 / n_in), (n_in, n_out))
        self.params["b"] = np.zeros(n_out)

    def forward(self, x, training, rng=None, update_stats=True):
        out, self._x = dense(x, self.params["w"], self.params["b"])
        return out

    def backward(self, d_out):
        d_x, self.grads["w"], self.grads["b"] = dense_backward(d_out, self._x, self.params["w"])
        return d_x


# ---------------------------------------------------------------- network

@dataclass(frozen=True)
class NetworkConfig:
    input_side: int = 300
    channels: int = 3
    conv_filters: tuple = (16, 32, 64)
    kernel: int = 3
    fc_sizes: tuple = (128, 64, 2)
    dropout_rate: float = 0.0
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def __post_init__(self):
        if len(self.conv_filters) != 3 or len(self.fc_sizes) != 3 or self.fc_sizes[-1] != 2:
            raise NNError("the network has exactly 3 conv blocks and 3 dense layers ending in 2")
        if self.kernel % 2 == 0 or self.kernel < 1:
            raise NNError("kernel must be odd")
        if not 0 <= self.dropout_rate < 1:
            raise NNError("dropout_rate must be in [0, 1)")
        if self.input_side < 8 or self.channels < 1:
            raise NNError("input_side must be at least 8")

    @property
    def final_side(self) -> int:
        side = self.input_side
        for _ in self.conv_filters:
            side //= 2
        return side

    @property
    def flat_size(self) -> int:
        return self.conv_filters[-1] * self.final_side**2


class Network:
    """The classifier. ``forward`` returns logits; ``loss_and_grads`` runs a
    full training-mode step without touching the optimizer."""

    def __init__(self, config: NetworkConfig = NetworkConfig(), seed: int = 0):
        self.config = config
        self.training = False
        rng = np.random.default_rng(seed)
        layers: list[Layer] = []
        in_ch = config.channels
        for filters in config.conv_filters:
            # batchnorm subtracts the channel mean, so a conv bias here is dead weight
            layers += [
                Conv2D(in_ch, filters, config.kernel, rng, bias=False),
                BatchNorm2D(filters, config.bn_eps, config.bn_momentum),
                ReLU(),
                MaxPool2(),
            ]
            in_ch = filters
        layers += [Dropout(config.dropout_rate), Flatten()]
        n_in = config.flat_size
        for i, n_out in enumerate(config.fc_sizes):
            layers.append(Dense(n_in, n_out, rng))
            if i < len(config.fc_sizes) - 1:
                layers.append(ReLU())
            n_in = n_out
        self.layers = layers

    def parameters(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.params.values()]

    def gradients(self) -> list[np.ndarray]:
        return [layer.grads[k] for layer in self.layers for k in layer.params]

    def forward(self, x, training=None, rng=None, update_stats=True, start=0):
        """Run layers ``start:`` on ``x``; ``training`` defaults to the network mode."""
        training = self.training if training is None else training
        if start == 0:
            self._check_input(x)
        for layer in self.layers[start:]:
            x = layer.forward(x, training, rng, update_stats)
        return x

    def backward(self, d_logits):
        d = d_logits
        for layer in reversed(self.layers):
            d = layer.backward(d)
        return d

    def loss_and_grads(self, x, labels_onehot, rng=None, update_stats=True):
        logits = self.forward(x, training=True, rng=rng, update_stats=update_stats)
        loss, probs, d_logits = softmax_xent(logits, labels_onehot)
        self.backward(d_logits)
        return loss, probs

    def predict_proba(self, x):
        return softmax(self.forward(x, training=False))

    def _check_input(self, x):
        c = self.config
        if x.ndim != 4 or x.shape[1:] != (c.channels, c.input_side, c.input_side):
            raise ShapeMismatch(
                f"expected (N, {c.channels}, {c.input_side}, {c.input_side}), got {x.shape}"
            )


def dense_network(sizes, seed=0):
    """A plain dense/ReLU stack (for gradient checking the dense path alone)."""
    net = Network.__new__(Network)
    net.config = None
    net.training = False
    rng = np.random.default_rng(seed)
    net.layers = []
    for i, (a, b) in enumerate(zip(sizes, sizes[1:])):
        net.layers.append(Dense(a, b, rng))
        if i < len(sizes) - 2:
            net.layers.append(ReLU())
    net._check_input = lambda x: None
    return net


# ---------------------------------------------------------------- gradient check

def relative_error(analytic, numeric, floor=1e-8):
    """``|a - n| / max(|a|, |n|, floor)``; the floor keeps near-zero
    gradients from dividing finite-difference round-off by nothing."""
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def grad_check(network, x, labels_onehot, perturbation=1e-5, floor=1e-6, report=None):
    """Max relative error between analytic and central-difference gradients
    over every parameter of ``network``.

    Dropout is off and batchnorm uses batch statistics without touching the
    running buffers, so the loss is a deterministic function of the weights.
    Layers before a perturbed parameter are not re-run.

    A difference whose +h/-h evaluations flip a ReLU mask or a pool argmax
    straddles a kink; it is retried with h/10 and h/100 and dropped if it
    still straddles one. Pass a dict as ``report`` to get the counts.

    ``floor`` bounds the denominator of the relative error; central
    differences of a loss near 1 carry ~1e-11 of round-off at h=1e-5, which
    would swamp gradients much below the floor. It grows with the retry
    steps since round-off scales with 1/h.
    """
    layers = network.layers
    saved = [getattr(layer, "rate", None) for layer in layers]
    for layer in layers:
        if isinstance(layer, Dropout):
            layer.rate = 0.0
    try:
        # cache each layer's input so perturbations only replay downstream layers
        inputs = []
        h = x
        for layer in layers:
            inputs.append(h)
            h = layer.forward(h, True, None, False)
        _, _, d_logits = softmax_xent(h, labels_onehot)
        network.backward(d_logits)
        base_switches = [None if l.switches is None else l.switches.copy() for l in layers]

        def run(start):
            logits = network.forward(inputs[start], training=True, update_stats=False, start=start)
            crossed = any(
                not np.array_equal(layers[j].switches, base_switches[j])
                for j in range(start, len(layers))
                if base_switches[j] is not None
            )
            return softmax_xent(logits, labels_onehot)[0], crossed

        worst = 0.0
        checked = retried = skipped = 0
        for k, layer in enumerate(layers):
            for name, p in layer.params.items():
                analytic = layer.grads[name].reshape(-1).copy()
                flat = p.reshape(-1)
                for i in range(flat.size):
                    orig = flat[i]
                    for step in (perturbation, perturbation / 10, perturbation / 100):
                        flat[i] = orig + step
                        lp, crossed_p = run(k)
                        flat[i] = orig - step
                        lm, crossed_m = run(k)
                        flat[i] = orig
                        if not (crossed_p or crossed_m):
                            break
                        retried += 1
                    else:
                        skipped += 1
                        continue
                    numeric = (lp - lm) / (2 * step)
                    err = relative_error(analytic[i], numeric, floor * perturbation / step)
                    worst = max(worst, float(err))
                    checked += 1
        if report is not None:
            report.update(checked=checked, retried=retried, skipped=skipped)
        return worst
    finally:
        for layer, rate in zip(layers, saved):
            if isinstance(layer, Dropout):
                layer.rate = rate
