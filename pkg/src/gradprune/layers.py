"""Layers with explicit forward/backward passes and exposed gradients.

Everything runs on NCHW numpy arrays at 64-bit by default. Convolution is
computed directly in the spatial domain (window view + one tensor
contraction), which keeps results bit-reproducible run to run; there is no
FFT or approximation anywhere.

Gradient buffers accumulate across backward calls; callers zero them
explicitly via zero_grads(). Forward modes:

  TRAIN  - batch statistics, running stats updated (batchnorm)
  SWEEP  - batch statistics, running stats untouched (criterion sweeps)
  EVAL   - running statistics, no caching needed for backward
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import DEFAULT_DTYPE

TRAIN = "train"
SWEEP = "sweep"
EVAL = "eval"


class PrunableConv:
    """2D convolution whose output filters can be removed or zeroed.

    weight: (n_out, n_in, k, k), bias: (n_out,). live_mask tracks which of
    the originally constructed filter slots are still physically present;
    soft_idx holds the currently zeroed filter rows (current indexing) set
    by the most recent pruning event.
    """

    def __init__(self, n_in, n_out, k, stride=1, padding=0, *, rng,
                 dtype=DEFAULT_DTYPE, name=""):
        if n_in < 1 or n_out < 1 or k < 1:
            raise ValueError(f"conv '{name}': bad dimensions n_in={n_in} n_out={n_out} k={k}")
        scale = np.sqrt(2.0 / (n_in * k * k))
        self.weight = (rng.standard_normal((n_out, n_in, k, k)) * scale).astype(dtype)
        self.bias = np.zeros(n_out, dtype=dtype)
        self.grad_weight = np.zeros_like(self.weight)
        self.grad_bias = np.zeros_like(self.bias)
        self.stride = int(stride)
        self.padding = int(padding)
        self.k = int(k)
        self.name = name
        self.original_n_out = n_out
        self.live_mask = np.ones(n_out, dtype=bool)
        self.soft_idx = np.zeros(0, dtype=np.intp)
        self.capture_activations = False
        self.last_output = None
        self.last_grad_output = None
        self._cols3 = None
        self._in_shape = None
        self._out_hw = None

    @property
    def n_out(self):
        return self.weight.shape[0]

    @property
    def n_in(self):
        return self.weight.shape[1]

    def param_names(self):
        return ("weight", "bias")

    def forward(self, x, mode=TRAIN):
        if x.ndim != 4:
            raise ValueError(f"conv '{self.name}': expected NCHW input, got shape {x.shape}")
        if x.shape[1] != self.n_in:
            raise ValueError(
                f"conv '{self.name}': input has {x.shape[1]} channels, layer expects {self.n_in}")
        if self.n_out == 0:
            raise ValueError(f"conv '{self.name}': layer fully pruned (0 filters)")
        p, s, k = self.padding, self.stride, self.k
        n, cin = x.shape[0], x.shape[1]
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        ho = (xp.shape[2] - k) // s + 1
        wo = (xp.shape[3] - k) // s + 1
        if ho < 1 or wo < 1:
            raise ValueError(f"conv '{self.name}': kernel {k} does not fit input {x.shape}")
        # column buffer filled per kernel offset: contiguous-run copies beat a
        # strided window gather by a wide margin on small-channel layers
        cols = np.empty((n, cin, k, k, ho, wo), dtype=xp.dtype)
        for ki in range(k):
            for kj in range(k):
                cols[:, :, ki, kj] = xp[:, :, ki:ki + s * ho:s, kj:kj + s * wo:s]
        cols3 = cols.reshape(n, cin * k * k, ho * wo)
        out3 = self.weight.reshape(self.n_out, -1)[None] @ cols3  # N,F,HoWo
        out = out3.reshape(n, self.n_out, ho, wo)
        out += self.bias[None, :, None, None]
        if mode != EVAL:
            self._cols3 = cols3
            self._in_shape = x.shape
            self._out_hw = (ho, wo)
        if self.capture_activations:
            self.last_output = out.copy()
        return out

    def backward(self, grad_out):
        """Accumulate grad_weight/grad_bias, return gradient w.r.t. input."""
        if self._cols3 is None:
            raise ValueError(f"conv '{self.name}': backward before forward")
        p, s, k = self.padding, self.stride, self.k
        n, cin, h, w = self._in_shape
        ho, wo = self._out_hw
        if grad_out.shape != (n, self.n_out, ho, wo):
            raise ValueError(
                f"conv '{self.name}': grad_out shape {grad_out.shape} does not match "
                f"forward output {(n, self.n_out, ho, wo)}")
        if self.capture_activations:
            self.last_grad_output = grad_out.copy()
        g3 = np.ascontiguousarray(grad_out).reshape(n, self.n_out, ho * wo)
        # gW[f,q] = sum_n g3[n,f,:] . cols3[n,q,:]
        gw = (g3 @ self._cols3.transpose(0, 2, 1)).sum(axis=0)
        self.grad_weight += gw.reshape(self.weight.shape)
        self.grad_bias += grad_out.sum(axis=(0, 2, 3))
        # scatter column gradients back onto the padded input positions
        gcols3 = self.weight.reshape(self.n_out, -1).T[None] @ g3  # N,CKK,HoWo
        gcols = gcols3.reshape(n, cin, k, k, ho, wo)
        gxp = np.zeros((n, cin, h + 2 * p, w + 2 * p), dtype=grad_out.dtype)
        for ki in range(k):
            for kj in range(k):
                gxp[:, :, ki:ki + s * ho:s, kj:kj + s * wo:s] += gcols[:, :, ki, kj]
        if p:
            gxp = gxp[:, :, p:p + h, p:p + w]
        return np.ascontiguousarray(gxp)

    def zero_grads(self):
        self.grad_weight[...] = 0.0
        self.grad_bias[...] = 0.0

    def out_shape(self, chw):
        c, h, w = chw
        ho = (h + 2 * self.padding - self.k) // self.stride + 1
        wo = (w + 2 * self.padding - self.k) // self.stride + 1
        return (self.n_out, ho, wo)

    def param_count(self):
        return self.weight.size + self.bias.size

    def flop_count(self, chw):
        # one multiply-accumulate = 1 FLOP, plus one add per output for bias
        _, ho, wo = self.out_shape(chw)
        return self.n_out * (self.n_in * self.k * self.k + 1) * ho * wo


class Linear:
    """Dense layer y = x W^T + b with weight (out, in)."""

    def __init__(self, n_in, n_out, *, rng, dtype=DEFAULT_DTYPE, name=""):
        scale = np.sqrt(2.0 / n_in)
        self.weight = (rng.standard_normal((n_out, n_in)) * scale).astype(dtype)
        self.bias = np.zeros(n_out, dtype=dtype)
        self.grad_weight = np.zeros_like(self.weight)
        self.grad_bias = np.zeros_like(self.bias)
        self.name = name
        self._x = None

    def param_names(self):
        return ("weight", "bias")

    def forward(self, x, mode=TRAIN):
        if x.ndim != 2 or x.shape[1] != self.weight.shape[1]:
            raise ValueError(
                f"linear '{self.name}': input shape {x.shape} incompatible with "
                f"weight {self.weight.shape}")
        if mode != EVAL:
            self._x = x
        return x @ self.weight.T + self.bias

    def backward(self, grad_out):
        if self._x is None:
            raise ValueError(f"linear '{self.name}': backward before forward")
        if grad_out.shape != (self._x.shape[0], self.weight.shape[0]):
            raise ValueError(f"linear '{self.name}': grad_out shape {grad_out.shape} mismatched")
        self.grad_weight += grad_out.T @ self._x
        self.grad_bias += grad_out.sum(axis=0)
        return grad_out @ self.weight

    def zero_grads(self):
        self.grad_weight[...] = 0.0
        self.grad_bias[...] = 0.0

    def out_shape(self, shape):
        return (self.weight.shape[0],)

    def param_count(self):
        return self.weight.size + self.bias.size

    def flop_count(self, shape):
        return self.weight.size + self.bias.size


class BatchNorm:
    """Per-channel batch normalization over NCHW inputs.

    Biased variance is used both for normalization and for the running
    estimate. Train mode rejects batches of size 1 (degenerate variance).
    """

    def __init__(self, n_ch, eps=1e-5, momentum_bn=0.1, *, dtype=DEFAULT_DTYPE, name=""):
        self.gamma = np.ones(n_ch, dtype=dtype)
        self.beta = np.zeros(n_ch, dtype=dtype)
        self.running_mean = np.zeros(n_ch, dtype=dtype)
        self.running_var = np.ones(n_ch, dtype=dtype)
        self.grad_gamma = np.zeros_like(self.gamma)
        self.grad_beta = np.zeros_like(self.beta)
        self.eps = float(eps)
        self.momentum_bn = float(momentum_bn)
        self.name = name
        self._cache = None

    @property
    def n_ch(self):
        return self.gamma.shape[0]

    def param_names(self):
        return ("gamma", "beta")

    def forward(self, x, mode=TRAIN):
        if x.ndim != 4 or x.shape[1] != self.n_ch:
            raise ValueError(
                f"batchnorm '{self.name}': input shape {x.shape} does not match {self.n_ch} channels")
        if mode == EVAL:
            inv = 1.0 / np.sqrt(self.running_var + self.eps)
            return (x - self.running_mean[None, :, None, None]) * \
                (self.gamma * inv)[None, :, None, None] + self.beta[None, :, None, None]
        if x.shape[0] < 2:
            raise ValueError(f"batchnorm '{self.name}': train mode needs batch size >= 2")
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean[None, :, None, None]) * inv[None, :, None, None]
        if mode == TRAIN:
            m = self.momentum_bn
            self.running_mean = (1 - m) * self.running_mean + m * mean
            self.running_var = (1 - m) * self.running_var + m * var
        self._cache = (xhat, inv, x.shape)
        return self.gamma[None, :, None, None] * xhat + self.beta[None, :, None, None]

    def backward(self, grad_out):
        if self._cache is None:
            raise ValueError(f"batchnorm '{self.name}': backward before train/sweep forward")
        xhat, inv, shape = self._cache
        if grad_out.shape != shape:
            raise ValueError(f"batchnorm '{self.name}': grad_out shape {grad_out.shape} mismatched")
        m = shape[0] * shape[2] * shape[3]
        self.grad_gamma += (grad_out * xhat).sum(axis=(0, 2, 3))
        self.grad_beta += grad_out.sum(axis=(0, 2, 3))
        sum_g = grad_out.sum(axis=(0, 2, 3))
        sum_gx = (grad_out * xhat).sum(axis=(0, 2, 3))
        gx = (self.gamma * inv)[None, :, None, None] * (
            grad_out
            - sum_g[None, :, None, None] / m
            - xhat * sum_gx[None, :, None, None] / m)
        return gx

    def zero_grads(self):
        self.grad_gamma[...] = 0.0
        self.grad_beta[...] = 0.0

    def out_shape(self, chw):
        return chw

    def param_count(self):
        # learnable scalars only; running stats are buffers
        return self.gamma.size + self.beta.size

    def flop_count(self, chw):
        return 0


class ReLU:
    def __init__(self, name=""):
        self.name = name
        self._mask = None

    def forward(self, x, mode=TRAIN):
        if mode != EVAL:
            self._mask = x > 0
        return np.maximum(x, 0.0)

    def backward(self, grad_out):
        if self._mask is None or grad_out.shape != self._mask.shape:
            raise ValueError(f"relu '{self.name}': grad_out does not match forward input")
        return grad_out * self._mask

    def out_shape(self, shape):
        return shape

    def flop_count(self, shape):
        return 0


class MaxPool2x2:
    """2x2 max pooling with stride 2; input spatial dims must be even."""

    def __init__(self, name=""):
        self.name = name
        self._cache = None

    def forward(self, x, mode=TRAIN):
        n, c, h, w = x.shape
        if h % 2 or w % 2:
            raise ValueError(f"maxpool '{self.name}': odd spatial dims {x.shape}")
        win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
        win = win.reshape(n, c, h // 2, w // 2, 4)
        idx = win.argmax(axis=4)
        out = np.take_along_axis(win, idx[..., None], axis=4)[..., 0]
        if mode != EVAL:
            self._cache = (idx, x.shape)
        return out

    def backward(self, grad_out):
        if self._cache is None:
            raise ValueError(f"maxpool '{self.name}': backward before forward")
        idx, (n, c, h, w) = self._cache
        if grad_out.shape != idx.shape:
            raise ValueError(f"maxpool '{self.name}': grad_out shape {grad_out.shape} mismatched")
        flat = np.zeros((n, c, h // 2, w // 2, 4), dtype=grad_out.dtype)
        np.put_along_axis(flat, idx[..., None], grad_out[..., None], axis=4)
        gx = flat.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return np.ascontiguousarray(gx.reshape(n, c, h, w))

    def out_shape(self, chw):
        c, h, w = chw
        return (c, h // 2, w // 2)

    def flop_count(self, chw):
        return 0


class Flatten:
    def __init__(self, name=""):
        self.name = name
        self._shape = None

    def forward(self, x, mode=TRAIN):
        if mode != EVAL:
            self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad_out):
        if self._shape is None:
            raise ValueError(f"flatten '{self.name}': backward before forward")
        return grad_out.reshape(self._shape)

    def out_shape(self, chw):
        c, h, w = chw
        return (c * h * w,)

    def flop_count(self, chw):
        return 0


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy over the batch; returns (loss, grad wrt logits)."""
    n, num_classes = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ValueError(f"cross_entropy: labels shape {labels.shape}, expected ({n},)")
    if not np.issubdtype(labels.dtype, np.integer):
        raise ValueError("cross_entropy: labels must be integers")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(
            f"cross_entropy: label out of range [0, {num_classes}): "
            f"min={labels.min()} max={labels.max()}")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logprobs = shifted - logsumexp
    loss = -float(logprobs[np.arange(n), labels].mean())
    grad = np.exp(logprobs)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n
