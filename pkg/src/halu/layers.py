"""Differentiable 1D network kernels.

Convolution, transposed convolution, batch normalization, ReLU, sigmoid and
the power-law output scaling, each as a forward/backward pair operating on
float64 numpy arrays with layout (batch, channel, position).  Gradients are
exact analytic expressions; `gradient_check` validates every kind against
central finite differences.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ShapeError

GAMMA_INPUT_TOL = 1e-9  # allowed overshoot of [0, 1] before gamma_scale errors
GAMMA_GRAD_FLOOR = 1e-9  # clamp for u when gamma < 1 (derivative unbounded at 0)


def _as_batch3(x, name="input"):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ShapeError(f"{name} must be (batch, channel, position), got shape {x.shape}")
    return x


@dataclass
class ConvParams:
    """Weights for a (transposed) convolution.

    For `conv1d_*` the weight layout is (c_out, c_in, kernel).  For
    `tconv1d_*` the same structure is read in adjoint orientation:
    (c_in, c_out, kernel), so a transposed convolution sharing a weight
    array with a convolution is exactly its adjoint map.  `bias` has one
    entry per output channel of the op it is used with.
    """

    weights: np.ndarray
    bias: np.ndarray
    stride: int = 2
    padding: int = 2

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 3:
            raise ShapeError(f"weights must be 3D, got shape {self.weights.shape}")
        if self.bias.ndim != 1:
            raise ShapeError(f"bias must be 1D, got shape {self.bias.shape}")
        if self.stride < 1:
            raise ShapeError(f"stride must be positive, got {self.stride}")
        if self.padding < 0:
            raise ShapeError(f"padding must be nonnegative, got {self.padding}")
        if not np.all(np.isfinite(self.weights)):
            raise DomainError("weights contain non-finite values")


def init_conv_params(c_in, c_out, kernel, stride, padding, rng):
    """Fan-in-scaled uniform init for a convolution (weights (c_out, c_in, k))."""
    bound = 1.0 / np.sqrt(c_in * kernel)
    return ConvParams(
        weights=rng.uniform(-bound, bound, size=(c_out, c_in, kernel)),
        bias=rng.uniform(-bound, bound, size=c_out),
        stride=stride,
        padding=padding,
    )


def init_tconv_params(c_in, c_out, kernel, stride, padding, rng):
    """Fan-in-scaled uniform init for a transposed convolution (weights (c_in, c_out, k))."""
    bound = 1.0 / np.sqrt(c_in * kernel)
    return ConvParams(
        weights=rng.uniform(-bound, bound, size=(c_in, c_out, kernel)),
        bias=rng.uniform(-bound, bound, size=c_out),
        stride=stride,
        padding=padding,
    )


def _windows(x, kernel, stride, n_windows):
    # Zero-copy view of sliding windows: (B, C, n_windows, kernel).
    b, c, _ = x.shape
    sb, sc, sl = x.strides
    return np.lib.stride_tricks.as_strided(
        x, shape=(b, c, n_windows, kernel), strides=(sb, sc, sl * stride, sl)
    )


def conv1d_out_length(length, kernel, stride, padding):
    return (length + 2 * padding - kernel) // stride + 1


def tconv1d_out_length(length, kernel, stride, padding, output_padding):
    return (length - 1) * stride - 2 * padding + kernel + output_padding


def _pad_positions(x, padding):
    if padding == 0:
        return x
    b, c, l = x.shape
    out = np.zeros((b, c, l + 2 * padding))
    out[:, :, padding : padding + l] = x
    return out


def _window_matrix(x_pad, kernel, stride, n_windows):
    # (B, C, L_pad) -> (B * n_windows, C * kernel) row-per-window matrix
    b, c, _ = x_pad.shape
    win = _windows(x_pad, kernel, stride, n_windows)
    return np.ascontiguousarray(win.transpose(0, 2, 1, 3)).reshape(b * n_windows, c * kernel)


def conv1d_forward(x, p: ConvParams, return_cache=False):
    """Strided cross-correlation of (B, C_in, L) with (C_out, C_in, K) weights.

    With return_cache=True also returns the internal window matrix, which
    conv1d_backward can reuse to skip recomputing it.
    """
    x = _as_batch3(x)
    c_out, c_in, k = p.weights.shape
    b, c, l = x.shape
    if c != c_in:
        raise ShapeError(f"input has {c} channels, weights expect {c_in}")
    if p.bias.shape != (c_out,):
        raise ShapeError(f"bias shape {p.bias.shape} does not match {c_out} output channels")
    l_out = conv1d_out_length(l, k, p.stride, p.padding)
    if l_out < 1:
        raise ShapeError(
            f"no valid output positions: L={l}, K={k}, stride={p.stride}, padding={p.padding}"
        )
    win2 = _window_matrix(_pad_positions(x, p.padding), k, p.stride, l_out)
    out = win2 @ p.weights.reshape(c_out, c_in * k).T  # (B*L_out, C_out)
    out = out.reshape(b, l_out, c_out).transpose(0, 2, 1)
    out += p.bias[:, None]
    return (out, win2) if return_cache else out


def conv1d_backward(x, p: ConvParams, grad_out, win_matrix=None):
    """Gradients of a scalar loss through conv1d_forward.

    Returns (grad_input, grad_weights, grad_bias).  `win_matrix` may be the
    cache from conv1d_forward(..., return_cache=True).
    """
    x = _as_batch3(x)
    grad_out = _as_batch3(grad_out, "grad_out")
    c_out, c_in, k = p.weights.shape
    b, c, l = x.shape
    l_out = conv1d_out_length(l, k, p.stride, p.padding)
    if grad_out.shape != (b, c_out, l_out):
        raise ShapeError(f"grad_out shape {grad_out.shape} != expected {(b, c_out, l_out)}")
    if win_matrix is None:
        win_matrix = _window_matrix(_pad_positions(x, p.padding), k, p.stride, l_out)
    go2 = np.ascontiguousarray(grad_out.transpose(0, 2, 1)).reshape(b * l_out, c_out)
    grad_w = (go2.T @ win_matrix).reshape(c_out, c_in, k)
    grad_b = go2.sum(axis=0)
    # scatter-add window gradients back onto the padded input positions
    gcol = (go2 @ p.weights.reshape(c_out, c_in * k)).reshape(b, l_out, c_in, k)
    gcol = gcol.transpose(0, 2, 1, 3)  # (B, C_in, L_out, K)
    grad_x_pad = np.zeros((b, c_in, l + 2 * p.padding))
    hi = p.stride * (l_out - 1) + 1
    for kk in range(k):
        grad_x_pad[:, :, kk : kk + hi : p.stride] += gcol[:, :, :, kk]
    grad_x = grad_x_pad[:, :, p.padding : p.padding + l] if p.padding else grad_x_pad
    return grad_x, grad_w, grad_b


def tconv1d_forward(x, p: ConvParams, output_padding=0, return_cache=False):
    """Transposed strided convolution; exact adjoint of conv1d_forward.

    Weights are read as (c_in, c_out, kernel).  Output length is
    (L-1)*stride - 2*padding + kernel + output_padding.  With
    return_cache=True also returns the flattened input matrix for reuse by
    tconv1d_backward.
    """
    x = _as_batch3(x)
    c_in, c_out, k = p.weights.shape
    b, c, l = x.shape
    if c != c_in:
        raise ShapeError(f"input has {c} channels, weights expect {c_in}")
    if p.bias.shape != (c_out,):
        raise ShapeError(f"bias shape {p.bias.shape} does not match {c_out} output channels")
    if not 0 <= output_padding < p.stride:
        raise ShapeError(f"output_padding must be in [0, stride), got {output_padding}")
    l_full = (l - 1) * p.stride + k + output_padding
    l_out = l_full - 2 * p.padding
    if l_out < 1:
        raise ShapeError(f"no valid output positions: L={l}, K={k}, padding={p.padding}")
    x2 = np.ascontiguousarray(x.transpose(0, 2, 1)).reshape(b * l, c_in)
    prod = (x2 @ p.weights.reshape(c_in, c_out * k)).reshape(b, l, c_out, k)
    prod = prod.transpose(0, 2, 1, 3)  # (B, C_out, L, K)
    out_full = np.zeros((b, c_out, l_full))
    hi = p.stride * (l - 1) + 1
    for kk in range(k):
        out_full[:, :, kk : kk + hi : p.stride] += prod[:, :, :, kk]
    out = out_full[:, :, p.padding : p.padding + l_out]
    out += p.bias[:, None]
    return (out, x2) if return_cache else out


def tconv1d_backward(x, p: ConvParams, grad_out, output_padding=0, x_matrix=None):
    """Gradients of a scalar loss through tconv1d_forward.

    `x_matrix` may be the cache from tconv1d_forward(..., return_cache=True).
    """
    x = _as_batch3(x)
    grad_out = _as_batch3(grad_out, "grad_out")
    c_in, c_out, k = p.weights.shape
    b, c, l = x.shape
    l_full = (l - 1) * p.stride + k + output_padding
    l_out = l_full - 2 * p.padding
    if grad_out.shape != (b, c_out, l_out):
        raise ShapeError(f"grad_out shape {grad_out.shape} != expected {(b, c_out, l_out)}")
    g_full = np.zeros((b, c_out, l_full))
    g_full[:, :, p.padding : p.padding + l_out] = grad_out
    win2 = _window_matrix(g_full, k, p.stride, l)  # (B*L, C_out*K)
    if x_matrix is None:
        x_matrix = np.ascontiguousarray(x.transpose(0, 2, 1)).reshape(b * l, c_in)
    w2 = p.weights.reshape(c_in, c_out * k)
    grad_w = (x_matrix.T @ win2).reshape(c_in, c_out, k)
    grad_x = (win2 @ w2.T).reshape(b, l, c_in).transpose(0, 2, 1)
    grad_b = grad_out.sum(axis=(0, 2))
    return grad_x, grad_w, grad_b


@dataclass
class BatchNormState:
    """Per-channel affine normalization with running statistics.

    Train mode normalizes with biased batch statistics over (batch, position)
    and updates the running estimates in place (single-writer); eval mode is
    a fixed affine map using the running statistics.
    """

    scale: np.ndarray
    shift: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5
    mode: str = "train"

    def __post_init__(self):
        for name in ("scale", "shift", "running_mean", "running_var"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if not 0.0 < self.momentum <= 1.0:
            raise DomainError(f"momentum must be in (0, 1], got {self.momentum}")
        if self.eps <= 0.0:
            raise DomainError(f"epsilon must be positive, got {self.eps}")
        if np.any(self.running_var < 0.0):
            raise DomainError("running_var must be nonnegative")
        if self.mode not in ("train", "eval"):
            raise DomainError(f"mode must be 'train' or 'eval', got {self.mode!r}")


def batchnorm_init(channels, momentum=0.1, eps=1e-5):
    return BatchNormState(
        scale=np.ones(channels),
        shift=np.zeros(channels),
        running_mean=np.zeros(channels),
        running_var=np.ones(channels),
        momentum=momentum,
        eps=eps,
    )


@dataclass
class BatchNormCache:
    xhat: np.ndarray
    inv_std: np.ndarray
    mode: str


def batchnorm_forward(x, state: BatchNormState, mode=None):
    """Normalize per channel; returns (output, cache).

    In train mode the running statistics of `state` are updated in place
    with the biased batch statistics.
    """
    x = _as_batch3(x)
    mode = state.mode if mode is None else mode
    b, c, l = x.shape
    if c != state.scale.shape[0]:
        raise ShapeError(f"input has {c} channels, state has {state.scale.shape[0]}")
    if mode == "train":
        if b * l < 2:
            raise DomainError(f"train-mode batch statistics need B*L >= 2, got {b}*{l}")
        n = b * l
        mean = x.sum(axis=2).sum(axis=0) / n
        centered = x - mean[:, None]
        var = np.square(centered).sum(axis=2).sum(axis=0) / n  # biased: divide by B*L
        state.running_mean += state.momentum * (mean - state.running_mean)
        state.running_var += state.momentum * (var - state.running_var)
        inv_std = 1.0 / np.sqrt(var + state.eps)
        xhat = centered
        xhat *= inv_std[:, None]
        out = state.scale[:, None] * xhat + state.shift[:, None]
        return out, BatchNormCache(xhat=xhat, inv_std=inv_std, mode=mode)
    if mode != "eval":
        raise DomainError(f"mode must be 'train' or 'eval', got {mode!r}")
    inv_std = 1.0 / np.sqrt(state.running_var + state.eps)
    xhat = (x - state.running_mean[:, None]) * inv_std[:, None]
    out = state.scale[:, None] * xhat + state.shift[:, None]
    return out, BatchNormCache(xhat=xhat, inv_std=inv_std, mode=mode)


def batchnorm_backward(cache: BatchNormCache, state: BatchNormState, grad_out):
    """Gradients through batchnorm_forward: (grad_input, grad_scale, grad_shift).

    The train-mode input gradient accounts for the dependence of the batch
    statistics on the input.
    """
    grad_out = _as_batch3(grad_out, "grad_out")
    b, c, l = grad_out.shape
    xhat, inv_std = cache.xhat, cache.inv_std
    gx = grad_out * xhat
    grad_shift = grad_out.sum(axis=2).sum(axis=0)
    grad_scale = gx.sum(axis=2).sum(axis=0)
    if cache.mode == "train":
        n = b * l
        # d/dx accounting for the batch statistics' dependence on x
        grad_x = grad_out - grad_shift[:, None] / n - xhat * (grad_scale[:, None] / n)
        grad_x *= (state.scale * inv_std)[:, None]
    else:
        grad_x = grad_out * (state.scale * inv_std)[:, None]
    return grad_x, grad_scale, grad_shift


def relu_forward(x):
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def relu_backward(x, grad_out):
    # subgradient 0 at x == 0
    return grad_out * (np.asarray(x) > 0.0)


def sigmoid_forward(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(sig, grad_out):
    """Backward given the forward *output* `sig`."""
    return sig * (1.0 - sig) * grad_out


def gamma_scale_forward(u, gamma, s):
    """Map u in [0, 1] to s * u**gamma meters.

    gamma > 1 allocates more of the unit interval to small outputs; the
    endpoints are fixed: u=0 -> 0 and u=1 -> s for any gamma.
    """
    u = np.asarray(u, dtype=np.float64)
    if gamma <= 0.0:
        raise DomainError(f"gamma must be positive, got {gamma}")
    if s <= 0.0:
        raise DomainError(f"scale s must be positive, got {s}")
    lo, hi = float(u.min()), float(u.max())
    if lo < -GAMMA_INPUT_TOL or hi > 1.0 + GAMMA_INPUT_TOL:
        raise DomainError(f"u must lie in [0, 1] (tolerance {GAMMA_INPUT_TOL}); got range [{lo}, {hi}]")
    uc = np.clip(u, 0.0, 1.0)
    return s * uc**gamma


def gamma_scale_backward(u, gamma, s, grad_out):
    """d/du of gamma_scale_forward: s * gamma * u**(gamma-1) * grad_out.

    At u = 0 the limit is used: 0 for gamma > 1 and s for gamma = 1.  For
    gamma < 1 the derivative is unbounded at 0, so u is clamped to
    GAMMA_GRAD_FLOOR before taking the power.
    """
    u = np.asarray(u, dtype=np.float64)
    uc = np.clip(u, 0.0, 1.0)
    if gamma < 1.0:
        uc = np.maximum(uc, GAMMA_GRAD_FLOOR)
    return s * gamma * uc ** (gamma - 1.0) * grad_out


class GradStore:
    """Per-parameter gradient accumulators, shape-matched to their parameters.

    All slots are views into one contiguous buffer (`flat`), packed in the
    parameter dict's iteration order, so optimizers can treat the whole
    gradient as a single vector.
    """

    def __init__(self, params):
        total = sum(p.size for p in params.values())
        self.flat = np.zeros(total)
        self.grads = {}
        offset = 0
        for name, p in params.items():
            self.grads[name] = self.flat[offset : offset + p.size].reshape(p.shape)
            offset += p.size
        self.accumulate = True

    def add(self, name, g):
        slot = self.grads[name]
        g = np.asarray(g, dtype=np.float64)
        if g.shape != slot.shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, expected {slot.shape}")
        if self.accumulate:
            slot += g
        else:
            slot[...] = g

    def zero_(self):
        self.flat.fill(0.0)

    def norms(self):
        return {name: float(np.linalg.norm(g)) for name, g in self.grads.items()}

    def __getitem__(self, name):
        return self.grads[name]

    def __iter__(self):
        return iter(self.grads)

    def items(self):
        return self.grads.items()


# ---------------------------------------------------------------------------
# Finite-difference gradient checking


def central_difference(f, arr, step=1e-5):
    """Numeric gradient of scalar f() w.r.t. every entry of arr (mutated in place)."""
    grad = np.zeros_like(arr)
    for idx in np.ndindex(arr.shape):
        saved = arr[idx]
        arr[idx] = saved + step
        f_plus = f()
        arr[idx] = saved - step
        f_minus = f()
        arr[idx] = saved
        grad[idx] = (f_plus - f_minus) / (2.0 * step)
    return grad


def relative_error(analytic, numeric, floor=1e-4):
    """Max elementwise |a - n| / max(|a| + |n|, floor)."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.size == 0:
        return 0.0
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def _check_conv(rng, step):
    b, c_in, c_out = rng.integers(1, 4, size=3)
    k = int(rng.choice([1, 3, 5]))
    stride = int(rng.choice([1, 2]))
    padding = int(rng.integers(0, 3))
    l = int(rng.integers(k, k + 8))
    x = rng.normal(size=(b, c_in, l))
    p = ConvParams(
        weights=rng.normal(size=(c_out, c_in, k)) * 0.6,
        bias=rng.normal(size=c_out) * 0.2,
        stride=stride,
        padding=padding,
    )
    r = rng.normal(size=conv1d_forward(x, p).shape)
    f = lambda: float(np.sum(conv1d_forward(x, p) * r))
    gx, gw, gb = conv1d_backward(x, p, r)
    return {
        "input": relative_error(gx, central_difference(f, x, step)),
        "weights": relative_error(gw, central_difference(f, p.weights, step)),
        "bias": relative_error(gb, central_difference(f, p.bias, step)),
    }


def _check_tconv(rng, step):
    b, c_in, c_out = rng.integers(1, 4, size=3)
    k = int(rng.choice([1, 3, 5]))
    stride = int(rng.choice([1, 2]))
    padding = int(rng.integers(0, min(k, 3)))
    out_pad = int(rng.integers(0, stride))
    l = int(rng.integers(2, 8))
    if tconv1d_out_length(l, k, stride, padding, out_pad) < 1:
        padding = 0
    x = rng.normal(size=(b, c_in, l))
    p = ConvParams(
        weights=rng.normal(size=(c_in, c_out, k)) * 0.6,
        bias=rng.normal(size=c_out) * 0.2,
        stride=stride,
        padding=padding,
    )
    r = rng.normal(size=tconv1d_forward(x, p, out_pad).shape)
    f = lambda: float(np.sum(tconv1d_forward(x, p, out_pad) * r))
    gx, gw, gb = tconv1d_backward(x, p, r, out_pad)
    return {
        "input": relative_error(gx, central_difference(f, x, step)),
        "weights": relative_error(gw, central_difference(f, p.weights, step)),
        "bias": relative_error(gb, central_difference(f, p.bias, step)),
    }


def _check_batchnorm(rng, step):
    b = int(rng.integers(2, 5))
    c = int(rng.integers(1, 4))
    l = int(rng.integers(3, 7))
    x = rng.normal(size=(b, c, l))
    state = batchnorm_init(c)
    state.scale = rng.normal(size=c) * 0.5 + 1.0
    state.shift = rng.normal(size=c) * 0.5
    r = rng.normal(size=(b, c, l))
    f = lambda: float(np.sum(batchnorm_forward(x, state, mode="train")[0] * r))
    _, cache = batchnorm_forward(x, state, mode="train")
    gx, gscale, gshift = batchnorm_backward(cache, state, r)
    return {
        "input": relative_error(gx, central_difference(f, x, step)),
        "scale": relative_error(gscale, central_difference(f, state.scale, step)),
        "shift": relative_error(gshift, central_difference(f, state.shift, step)),
    }


def _check_relu(rng, step):
    b, c, l = rng.integers(1, 5, size=3)
    x = rng.normal(size=(b, c, l))
    # keep entries away from the kink at 0
    x = np.where(np.abs(x) < 0.05, 0.1 * np.sign(x) + (x == 0) * 0.1, x)
    r = rng.normal(size=x.shape)
    f = lambda: float(np.sum(relu_forward(x) * r))
    gx = relu_backward(x, r)
    return {"input": relative_error(gx, central_difference(f, x, step))}


def _check_sigmoid(rng, step):
    b, c, l = rng.integers(1, 5, size=3)
    x = rng.normal(size=(b, c, l)) * 2.0
    r = rng.normal(size=x.shape)
    f = lambda: float(np.sum(sigmoid_forward(x) * r))
    gx = sigmoid_backward(sigmoid_forward(x), r)
    return {"input": relative_error(gx, central_difference(f, x, step))}


def _check_gamma_scale(rng, step):
    b, c, l = rng.integers(1, 5, size=3)
    gamma = float(rng.choice([0.5, 1.0, 2.0, 4.0]))
    s = 30.0
    u = rng.uniform(0.05, 0.95, size=(b, c, l))
    r = rng.normal(size=u.shape)
    f = lambda: float(np.sum(gamma_scale_forward(u, gamma, s) * r))
    gu = gamma_scale_backward(u, gamma, s, r)
    return {"input": relative_error(gu, central_difference(f, u, step))}


_LAYER_CHECKS = {
    "conv1d": _check_conv,
    "tconv1d": _check_tconv,
    "batchnorm": _check_batchnorm,
    "relu": _check_relu,
    "sigmoid": _check_sigmoid,
    "gamma_scale": _check_gamma_scale,
}

LAYER_KINDS = tuple(_LAYER_CHECKS)


def gradient_check(layer, trials=10, step=1e-5, tolerance=1e-4, seed=0):
    """Compare a layer kind's analytic gradients against central differences.

    Runs `trials` random shape/seed draws, each scoring the gradient of a
    random scalar projection of the output.  Returns
    {"layer": ..., "errors": {group: max relative error}, "tolerance": ...,
    "passed": bool}.
    """
    if layer not in _LAYER_CHECKS:
        raise DomainError(f"unknown layer kind {layer!r}; choose from {LAYER_KINDS}")
    rng = np.random.default_rng(seed)
    worst: dict[str, float] = {}
    for _ in range(trials):
        for group, err in _LAYER_CHECKS[layer](rng, step).items():
            worst[group] = max(worst.get(group, 0.0), err)
    return {
        "layer": layer,
        "errors": worst,
        "tolerance": tolerance,
        "passed": all(e < tolerance for e in worst.values()),
    }


def gradient_check_all(trials=10, step=1e-5, tolerance=1e-4, seed=0):
    """Run gradient_check for every layer kind; returns {kind: report}."""
    return {
        kind: gradient_check(kind, trials=trials, step=step, tolerance=tolerance, seed=seed + i)
        for i, kind in enumerate(LAYER_KINDS)
    }
