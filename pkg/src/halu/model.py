"""Fully convolutional 1D autoencoder mapping raw laser scans (meters) to
obstacle-distance scans (meters).

The encoder halves the signal length per level (conv, stride 2), the decoder
doubles it back (transposed conv); optional additive skip connections feed
each encoder activation into the same-length decoder stage.  The output head
is sigmoid followed by power-law scaling to [0, max_range] meters.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, asdict

import numpy as np

from .errors import ConfigError, DomainError, FormatError, ShapeError
from .layers import (
    BatchNormState,
    ConvParams,
    GradStore,
    batchnorm_backward,
    batchnorm_forward,
    batchnorm_init,
    conv1d_forward,
    conv1d_backward,
    gamma_scale_backward,
    gamma_scale_forward,
    init_conv_params,
    init_tconv_params,
    relu_backward,
    relu_forward,
    sigmoid_backward,
    sigmoid_forward,
    tconv1d_forward,
    tconv1d_backward,
)

CHECKPOINT_MAGIC = b"HALU"
CHECKPOINT_VERSION = 1

INPUT_NEGATIVE_TOL = 1e-6  # meters; inputs below -tol are rejected, not clamped


@dataclass
class AutoencoderConfig:
    """Architecture hyperparameters.

    `n_points` must be divisible by stride**n_levels so that the encoder
    halvings and decoder doublings reproduce the input length exactly.
    """

    n_points: int = 128
    n_levels: int = 4
    kernel: int = 5
    stride: int = 2
    channels: tuple = (8, 16, 32, 64)
    skip_connections: bool = True
    gamma: float = 2.0
    max_range: float = 30.0

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if self.n_points < 1 or self.n_levels < 1:
            raise ConfigError("n_points and n_levels must be positive")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError(f"kernel must be odd and positive, got {self.kernel}")
        if self.stride < 2:
            raise ConfigError(f"stride must be >= 2, got {self.stride}")
        if self.n_points % self.stride**self.n_levels != 0:
            raise ConfigError(
                f"n_points={self.n_points} is not divisible by stride**n_levels="
                f"{self.stride ** self.n_levels}"
            )
        if len(self.channels) != self.n_levels:
            raise ConfigError(
                f"channels has {len(self.channels)} entries, expected n_levels={self.n_levels}"
            )
        if any(c < 1 for c in self.channels):
            raise ConfigError("channel counts must be positive")
        if self.gamma <= 0.0:
            raise ConfigError(f"gamma must be positive, got {self.gamma}")
        if self.max_range <= 0.0:
            raise ConfigError(f"max_range must be positive, got {self.max_range}")

    @property
    def padding(self):
        return (self.kernel - 1) // 2

    @property
    def output_padding(self):
        return self.stride - 1

    def level_lengths(self):
        """Encoder feature lengths per level, e.g. 128 -> [64, 32, 16, 8]."""
        return [self.n_points // self.stride ** (i + 1) for i in range(self.n_levels)]

    @property
    def latent_dim(self):
        return self.channels[-1] * self.level_lengths()[-1]


@dataclass
class _Level:
    conv: ConvParams
    bn: BatchNormState | None


@dataclass
class _LevelCache:
    x_in: np.ndarray
    bn_cache: object
    pre_relu: np.ndarray
    mat: np.ndarray = None  # conv window matrix / tconv input matrix reuse


@dataclass
class ForwardCache:
    """Everything backward() needs; also exposes intermediate activations."""

    enc: list
    dec: list
    final_in: np.ndarray
    final_mat: np.ndarray
    u: np.ndarray  # sigmoid output feeding the power-law head
    single: bool
    train: bool


class Autoencoder:
    """Encoder/decoder parameter container with explicit forward/backward."""

    def __init__(self, config: AutoencoderConfig, seed=0):
        self.config = config
        rng = np.random.default_rng(seed)
        k, st, pad = config.kernel, config.stride, config.padding
        chans = (1,) + config.channels
        self.encoder = [
            _Level(
                conv=init_conv_params(chans[i], chans[i + 1], k, st, pad, rng),
                bn=batchnorm_init(chans[i + 1]),
            )
            for i in range(config.n_levels)
        ]
        dec_chans = config.channels[::-1] + (1,)
        self.decoder = []
        for i in range(config.n_levels):
            last = i == config.n_levels - 1
            self.decoder.append(
                _Level(
                    conv=init_tconv_params(dec_chans[i], dec_chans[i + 1], k, st, pad, rng),
                    bn=None if last else batchnorm_init(dec_chans[i + 1]),
                )
            )
        self._repack_params()

    def _repack_params(self):
        # back all trainable arrays with one contiguous buffer so the
        # optimizer can update them as a single vector
        named = self.parameters()
        self._param_flat = np.empty(sum(p.size for p in named.values()))
        offset = 0
        views = {}
        for name, p in named.items():
            view = self._param_flat[offset : offset + p.size].reshape(p.shape)
            view[...] = p
            views[name] = view
            offset += p.size
        for i, lv in enumerate(self.encoder):
            lv.conv.weights = views[f"enc{i}.conv.weight"]
            lv.conv.bias = views[f"enc{i}.conv.bias"]
            lv.bn.scale = views[f"enc{i}.bn.scale"]
            lv.bn.shift = views[f"enc{i}.bn.shift"]
        for i, lv in enumerate(self.decoder):
            lv.conv.weights = views[f"dec{i}.tconv.weight"]
            lv.conv.bias = views[f"dec{i}.tconv.bias"]
            if lv.bn is not None:
                lv.bn.scale = views[f"dec{i}.bn.scale"]
                lv.bn.shift = views[f"dec{i}.bn.shift"]

    @property
    def param_flat(self):
        """The contiguous buffer behind parameters(), in declaration order."""
        return self._param_flat

    # -- parameter bookkeeping ------------------------------------------------

    def parameters(self):
        """Trainable arrays keyed by name, in fixed declaration order."""
        params = {}
        for i, lv in enumerate(self.encoder):
            params[f"enc{i}.conv.weight"] = lv.conv.weights
            params[f"enc{i}.conv.bias"] = lv.conv.bias
            params[f"enc{i}.bn.scale"] = lv.bn.scale
            params[f"enc{i}.bn.shift"] = lv.bn.shift
        for i, lv in enumerate(self.decoder):
            params[f"dec{i}.tconv.weight"] = lv.conv.weights
            params[f"dec{i}.tconv.bias"] = lv.conv.bias
            if lv.bn is not None:
                params[f"dec{i}.bn.scale"] = lv.bn.scale
                params[f"dec{i}.bn.shift"] = lv.bn.shift
        return params

    def state_arrays(self):
        """Parameters plus batch-norm running statistics (checkpoint payload)."""
        arrays = dict(self.parameters())
        for prefix, levels in (("enc", self.encoder), ("dec", self.decoder)):
            for i, lv in enumerate(levels):
                if lv.bn is not None:
                    arrays[f"{prefix}{i}.bn.running_mean"] = lv.bn.running_mean
                    arrays[f"{prefix}{i}.bn.running_var"] = lv.bn.running_var
        return arrays

    def parameter_count(self):
        return sum(p.size for p in self.parameters().values())

    def bn_states(self):
        return [lv.bn for lv in self.encoder + self.decoder if lv.bn is not None]

    # -- forward / backward ---------------------------------------------------

    def forward(self, x_meters, train=False):
        """Run the full pipeline on scans in meters; returns (y_hat, cache).

        Input values above max_range are clamped (range saturation); values
        below -INPUT_NEGATIVE_TOL are rejected.  Output is in [0, max_range]
        with the same length as the input.
        """
        cfg = self.config
        x = np.asarray(x_meters, dtype=np.float64)
        single = x.ndim == 1
        if single:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != cfg.n_points:
            raise ShapeError(f"expected scans of length {cfg.n_points}, got shape {x.shape}")
        if x.min() < -INPUT_NEGATIVE_TOL:
            raise DomainError(f"negative range reading {x.min()} m is not a valid scan value")
        mode = "train" if train else "eval"
        h = (np.clip(x, 0.0, cfg.max_range) / cfg.max_range)[:, None, :]

        enc_caches = []
        enc_acts = []
        for lv in self.encoder:
            z, mat = conv1d_forward(h, lv.conv, return_cache=True)
            zb, bn_cache = batchnorm_forward(z, lv.bn, mode=mode)
            a = relu_forward(zb)
            enc_caches.append(_LevelCache(x_in=h, bn_cache=bn_cache, pre_relu=zb, mat=mat))
            enc_acts.append(a)
            h = a

        dec_caches = []
        n = cfg.n_levels
        for d, lv in enumerate(self.decoder[:-1]):
            t, mat = tconv1d_forward(h, lv.conv, cfg.output_padding, return_cache=True)
            if cfg.skip_connections:
                t = t + enc_acts[n - 2 - d]
            zb, bn_cache = batchnorm_forward(t, lv.bn, mode=mode)
            a = relu_forward(zb)
            dec_caches.append(_LevelCache(x_in=h, bn_cache=bn_cache, pre_relu=zb, mat=mat))
            h = a

        final_in = h
        t, final_mat = tconv1d_forward(h, self.decoder[-1].conv, cfg.output_padding, return_cache=True)
        u = sigmoid_forward(t)
        y = gamma_scale_forward(u, cfg.gamma, cfg.max_range)

        y_hat = y[:, 0, :]
        cache = ForwardCache(
            enc=enc_caches,
            dec=dec_caches,
            final_in=final_in,
            final_mat=final_mat,
            u=u,
            single=single,
            train=train,
        )
        return (y_hat[0] if single else y_hat), cache

    def predict(self, x_meters):
        """Eval-mode forward without keeping the cache."""
        y_hat, _ = self.forward(x_meters, train=False)
        return y_hat

    def backward(self, cache: ForwardCache, grad_output):
        """Gradients of a scalar loss w.r.t. every parameter.

        `grad_output` is the loss gradient w.r.t. the meter-valued output,
        shaped like the forward output.
        """
        cfg = self.config
        g = np.asarray(grad_output, dtype=np.float64)
        if cache.single and g.ndim == 1:
            g = g[None, :]
        if g.ndim != 2 or g.shape[1] != cfg.n_points:
            raise ShapeError(f"grad_output shape {g.shape} does not match output")
        store = GradStore(self.parameters())

        g3 = gamma_scale_backward(cache.u, cfg.gamma, cfg.max_range, g[:, None, :])
        g3 = sigmoid_backward(cache.u, g3)
        last = cfg.n_levels - 1
        g3, gw, gb = tconv1d_backward(
            cache.final_in, self.decoder[last].conv, g3, cfg.output_padding, x_matrix=cache.final_mat
        )
        store.add(f"dec{last}.tconv.weight", gw)
        store.add(f"dec{last}.tconv.bias", gb)

        skip_grads = {}
        for d in range(cfg.n_levels - 2, -1, -1):
            lv = self.decoder[d]
            c = cache.dec[d]
            g3 = relu_backward(c.pre_relu, g3)
            g3, gscale, gshift = batchnorm_backward(c.bn_cache, lv.bn, g3)
            store.add(f"dec{d}.bn.scale", gscale)
            store.add(f"dec{d}.bn.shift", gshift)
            if cfg.skip_connections:
                skip_grads[cfg.n_levels - 2 - d] = g3
            g3, gw, gb = tconv1d_backward(c.x_in, lv.conv, g3, cfg.output_padding, x_matrix=c.mat)
            store.add(f"dec{d}.tconv.weight", gw)
            store.add(f"dec{d}.tconv.bias", gb)

        for i in range(cfg.n_levels - 1, -1, -1):
            lv = self.encoder[i]
            c = cache.enc[i]
            if i in skip_grads:
                g3 = g3 + skip_grads[i]
            g3 = relu_backward(c.pre_relu, g3)
            g3, gscale, gshift = batchnorm_backward(c.bn_cache, lv.bn, g3)
            store.add(f"enc{i}.bn.scale", gscale)
            store.add(f"enc{i}.bn.shift", gshift)
            g3, gw, gb = conv1d_backward(c.x_in, lv.conv, g3, win_matrix=c.mat)
            store.add(f"enc{i}.conv.weight", gw)
            store.add(f"enc{i}.conv.bias", gb)

        return store

    # -- windowed inference over wider scans ----------------------------------

    def infer_chunked(self, scan_meters):
        """Run the network over consecutive windows of a scan of any length.

        The final partial window is padded by repeating its last value,
        inferred, then trimmed, so the output length equals the input length.
        Full windows produce bit-identical results to standalone forwards.
        """
        scan = np.asarray(scan_meters, dtype=np.float64).ravel()
        m = scan.size
        if m < 1:
            raise ShapeError("scan must contain at least one reading")
        n = self.config.n_points
        out = np.empty(m)
        for start in range(0, m, n):
            chunk = scan[start : start + n]
            real = chunk.size
            if real < n:
                chunk = np.concatenate([chunk, np.full(n - real, chunk[-1])])
            pred = self.predict(chunk)
            out[start : start + real] = pred[:real]
        return out


def build(config: AutoencoderConfig, seed=0):
    """Deterministically initialize an Autoencoder from a seed."""
    return Autoencoder(config, seed=seed)


# ---------------------------------------------------------------------------
# Checkpoint serialization
#
# Little-endian layout (see README for the byte-level description):
#   magic "HALU" | u32 version | u32 header_len | header JSON (utf-8)
#   then one raw float64 blob per array, in the header's declared order.


def loss_history_digest(history):
    """Stable digest of a loss history for checkpoint metadata."""
    arr = np.asarray(list(history), dtype=np.float64)
    return hashlib.sha256(arr.tobytes()).hexdigest()


def save(model: Autoencoder, path, meta=None):
    """Write a checkpoint whose round trip preserves eval outputs bit-exactly."""
    arrays = model.state_arrays()
    header = {
        "config": asdict(model.config),
        "meta": dict(meta or {}),
        "bn_momentum": model.bn_states()[0].momentum if model.bn_states() else 0.1,
        "bn_eps": model.bn_states()[0].eps if model.bn_states() else 1e-5,
        "arrays": [[name, list(a.shape)] for name, a in arrays.items()],
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for a in arrays.values():
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def _read_exact(fh, n, what):
    data = fh.read(n)
    if len(data) != n:
        raise FormatError(f"checkpoint truncated while reading {what}")
    return data


def load_checkpoint(path):
    """Read a checkpoint; returns (Autoencoder, metadata dict)."""
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"not a checkpoint file: bad magic {magic!r}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise FormatError(
                f"unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"
            )
        (hlen,) = struct.unpack("<I", _read_exact(fh, 4, "header length"))
        try:
            header = json.loads(_read_exact(fh, hlen, "header").decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"corrupt checkpoint header: {exc}") from exc
        try:
            config = AutoencoderConfig(**header["config"])
        except (KeyError, TypeError) as exc:
            raise FormatError(f"checkpoint header missing config fields: {exc}") from exc
        model = Autoencoder(config, seed=0)
        for bn in model.bn_states():
            bn.momentum = header.get("bn_momentum", bn.momentum)
            bn.eps = header.get("bn_eps", bn.eps)
        arrays = model.state_arrays()
        declared = [name for name, _ in header.get("arrays", [])]
        if declared != list(arrays.keys()):
            raise FormatError("checkpoint array list does not match this model layout")
        for name, shape in header["arrays"]:
            target = arrays[name]
            if list(target.shape) != list(shape):
                raise FormatError(f"array {name!r} has shape {shape}, expected {list(target.shape)}")
            raw = _read_exact(fh, target.size * 8, f"array {name!r}")
            target[...] = np.frombuffer(raw, dtype="<f8").reshape(target.shape)
        if fh.read(1):
            raise FormatError("trailing bytes after checkpoint payload")
    return model, header.get("meta", {})


def load(path):
    """Read a checkpoint; returns the Autoencoder only."""
    model, _ = load_checkpoint(path)
    return model
