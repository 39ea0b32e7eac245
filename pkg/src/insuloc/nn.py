"""Network building blocks on top of the autograd tape.

Convolutions run as im2col + BLAS matmul; the unfold/fold kernels come from
the selected backend (compiled or numpy). Inputs are NCHW, weights OIKK,
all float64.
"""

from __future__ import annotations

import math
from typing import Optional

import numpy as np

from .autograd import Parameter, Tensor, make_op
from .backend import kernels


class EvenSizeViolation(ValueError):
    """Raised when a 2x2 pooling stage would see an odd spatial extent."""


def _conv_geometry(h, w, kh, kw, stride, padding):
    if padding == "same":
        oh = -(-h // stride)
        ow = -(-w // stride)
        ph = max((oh - 1) * stride + kh - h, 0)
        pw = max((ow - 1) * stride + kw - w, 0)
    elif padding == "valid":
        if h < kh or w < kw:
            raise ValueError(
                f"kernel {kh}x{kw} does not fit valid-padded input {h}x{w}")
        oh = (h - kh) // stride + 1
        ow = (w - kw) // stride + 1
        ph = pw = 0
    else:
        raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")
    if oh <= 0 or ow <= 0:
        raise ValueError(f"convolution output would be {oh}x{ow} (zero-size)")
    return oh, ow, ph // 2, ph - ph // 2, pw // 2, pw - pw // 2


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None,
           stride: int = 1, padding: str = "same") -> Tensor:
    """2-D cross-correlation of NCHW input with OIKK weights."""
    n, c, h, width = x.shape
    o, ci, kh, kw = w.shape
    if ci != c:
        raise ValueError(
            f"input has {c} channels but weights expect {ci}")
    oh, ow, pt, pb, pl, pr = _conv_geometry(h, width, kh, kw, stride, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    cols = kernels.im2col(xp, kh, kw, stride, stride, oh, ow)
    w2 = w.data.reshape(o, c * kh * kw)
    out = np.empty((n, o, oh * ow), dtype=np.float64)
    for i in range(n):
        np.matmul(w2, cols[i], out=out[i])
    out = out.reshape(n, o, oh, ow)
    if b is not None:
        if b.shape != (o,):
            raise ValueError(f"bias shape {b.shape} does not match {o} output channels")
        out = out + b.data[None, :, None, None]
    hp, wp = xp.shape[2], xp.shape[3]
    del xp, cols  # recomputed in backward; keeping them would pin large buffers

    def backward(g):
        g2 = g.reshape(n, o, oh * ow)
        if b is not None and b.requires_grad:
            b.accumulate_grad(g.sum(axis=(0, 2, 3)))
        need_w = w.requires_grad
        need_x = x.requires_grad
        if not (need_w or need_x):
            return
        xp2 = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
        cols2 = kernels.im2col(xp2, kh, kw, stride, stride, oh, ow)
        if need_w:
            gw = np.zeros((o, c * kh * kw), dtype=np.float64)
            for i in range(n):
                gw += g2[i] @ cols2[i].T
            w.accumulate_grad(gw.reshape(w.shape))
        if need_x:
            gcols = np.empty_like(cols2)
            for i in range(n):
                np.matmul(w2.T, g2[i], out=gcols[i])
            gxp = kernels.col2im(gcols, c, hp, wp, kh, kw, stride, stride, oh, ow)
            x.accumulate_grad(gxp[:, :, pt:pt + h, pl:pl + width])

    parents = (x, w) if b is None else (x, w, b)
    return make_op(out, parents, backward)


def transposed_conv2d(x: Tensor, w: Tensor, stride: int = 2) -> Tensor:
    """Stride-2 transposed convolution with a 2x2 kernel; doubles H and W."""
    if stride != 2:
        raise ValueError("only stride 2 is supported")
    n, c, h, width = x.shape
    ci, o, kh, kw = w.shape
    if (kh, kw) != (2, 2):
        raise ValueError("only 2x2 kernels are supported")
    if ci != c:
        raise ValueError(f"input has {c} channels but weights expect {ci}")
    # out[n,o,2i+u,2j+v] = sum_c x[n,c,i,j] * w[c,o,u,v]; windows never overlap
    t = np.tensordot(x.data, w.data, axes=([1], [0]))  # (N,H,W,O,2,2)
    out = np.ascontiguousarray(t.transpose(0, 3, 1, 4, 2, 5)).reshape(n, o, 2 * h, 2 * width)

    def backward(g):
        if g.shape != (n, o, 2 * h, 2 * width):
            raise ValueError(
                f"adjoint shape {g.shape} does not match output {(n, o, 2 * h, 2 * width)}")
        gb = g.reshape(n, o, h, 2, width, 2).transpose(0, 2, 4, 1, 3, 5)
        if x.requires_grad:
            gx = np.tensordot(gb, w.data, axes=([3, 4, 5], [1, 2, 3]))
            x.accumulate_grad(np.ascontiguousarray(gx.transpose(0, 3, 1, 2)))
        if w.requires_grad:
            gw = np.tensordot(x.data, gb, axes=([0, 2, 3], [0, 1, 2]))
            w.accumulate_grad(gw)

    return make_op(out, (x, w), backward)


def maxpool2x2(x: Tensor) -> Tensor:
    """2x2 max pooling; backward routes gradients to argmax positions only."""
    n, c, h, w = x.shape
    if h % 2:
        raise EvenSizeViolation(f"pooling input height {h} is odd")
    if w % 2:
        raise EvenSizeViolation(f"pooling input width {w} is odd")
    out, argmax = kernels.maxpool2x2_forward(x.data)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(kernels.maxpool2x2_backward(
                np.ascontiguousarray(g), argmax, h, w))

    return make_op(out, (x,), backward)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g * (x.data > 0))

    return make_op(out, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-x.data))

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g * out * (1.0 - out))

    return make_op(out, (x,), backward)


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor,
                running_mean: np.ndarray, running_var: np.ndarray,
                train: bool, eps: float = 1e-5, decay: float = 0.9) -> Tensor:
    """Per-channel normalization over batch and spatial axes.

    Train mode normalizes with batch statistics and folds them into the
    running buffers (exponential moving average); infer mode uses the
    buffers. Differentiable w.r.t. input, gamma and beta in both modes.
    """
    n, c, h, w = x.shape
    if c == 0:
        raise ValueError("batch norm over zero channels")
    if eps <= 0:
        raise ValueError("eps must be positive")
    if train:
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= decay
        running_mean += (1.0 - decay) * mu
        running_var *= decay
        running_var += (1.0 - decay) * var
    else:
        mu = running_mean
        var = running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]
    m = n * h * w

    def backward(g):
        if gamma.requires_grad:
            gamma.accumulate_grad((g * xhat).sum(axis=(0, 2, 3)))
        if beta.requires_grad:
            beta.accumulate_grad(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gxhat = g * gamma.data[None, :, None, None]
            if train:
                s1 = gxhat.sum(axis=(0, 2, 3))[None, :, None, None]
                s2 = (gxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
                gx = (inv_std[None, :, None, None] / m) * (m * gxhat - s1 - xhat * s2)
            else:
                gx = gxhat * inv_std[None, :, None, None]
            x.accumulate_grad(gx)

    return make_op(out, (x, gamma, beta), backward)


def crop_resize(feat: Tensor, y0: float, x0: float, y1: float, x1: float,
                size: int) -> Tensor:
    """Bilinear crop of a CHW map resized to size x size; differentiable."""
    if y1 <= y0 or x1 <= x0:
        raise ValueError(f"degenerate crop region ({x0},{y0},{x1},{y1})")
    c, h, w = feat.shape
    out = kernels.crop_resize_forward(feat.data, y0, x0, y1, x1, size)

    def backward(g):
        if feat.requires_grad:
            feat.accumulate_grad(kernels.crop_resize_backward(
                np.ascontiguousarray(g), y0, x0, y1, x1, h, w))

    return make_op(out, (feat,), backward)


def softmax_np(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Plain softmax on raw arrays (inference paths, no tape)."""
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_cross_entropy(logits: Tensor, targets: np.ndarray,
                          class_weights: Optional[np.ndarray] = None) -> Tensor:
    """Mean negative log softmax likelihood of integer targets.

    ``logits`` is (M, C); optional per-class weights turn the mean into a
    weighted mean (weights renormalized over the batch).
    """
    t = np.asarray(targets, dtype=np.int64)
    m, c = logits.shape
    if t.shape != (m,):
        raise ValueError(f"expected {m} targets, got shape {t.shape}")
    if t.size and (t.min() < 0 or t.max() >= c):
        raise ValueError(f"target index out of range for {c} classes")
    p = softmax_np(logits.data, axis=1)
    nll = -np.log(np.maximum(p[np.arange(m), t], 1e-300))
    if class_weights is None:
        wsum = float(m)
        wrow = None
        loss = nll.sum() / wsum
    else:
        cw = np.asarray(class_weights, dtype=np.float64)
        wrow = cw[t]
        wsum = wrow.sum()
        loss = (nll * wrow).sum() / wsum

    def backward(g):
        if logits.requires_grad:
            grad = p.copy()
            grad[np.arange(m), t] -= 1.0
            if wrow is not None:
                grad *= wrow[:, None]
            logits.accumulate_grad(grad * (float(g) / wsum))

    return make_op(np.array(loss), (logits,), backward)


def sigmoid_bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross-entropy on logits; numerically stable form."""
    z = logits.data
    t = np.asarray(targets, dtype=np.float64)
    loss = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    m = z.size

    def backward(g):
        if logits.requires_grad:
            s = 1.0 / (1.0 + np.exp(-z))
            logits.accumulate_grad((s - t) * (float(g) / m))

    return make_op(np.array(loss.sum() / m), (logits,), backward)


def smooth_l1(pred: Tensor, target: np.ndarray, beta: float = 1.0) -> Tensor:
    """Mean smooth-L1 (Huber) distance between predictions and constants."""
    d = pred.data - np.asarray(target, dtype=np.float64)
    ad = np.abs(d)
    quad = ad < beta
    vals = np.where(quad, 0.5 * d * d / beta, ad - 0.5 * beta)
    m = d.size

    def backward(g):
        if pred.requires_grad:
            gd = np.where(quad, d / beta, np.sign(d))
            pred.accumulate_grad(gd * (float(g) / m))

    return make_op(np.array(vals.sum() / m), (pred,), backward)


# --- layer containers -------------------------------------------------------


def he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    limit = math.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


class Module:
    """Container tracking parameters, buffers and child modules."""

    def __init__(self):
        self._params: dict[str, Parameter] = {}
        self._children: dict[str, Module] = {}
        self._buffers: dict[str, np.ndarray] = {}

    def add_param(self, name: str, data) -> Parameter:
        p = Parameter(name, data)
        self._params[name] = p
        return p

    def add_child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def add_buffer(self, name: str, array: np.ndarray) -> np.ndarray:
        arr = np.ascontiguousarray(array, dtype=np.float64)
        self._buffers[name] = arr
        return arr

    def parameters(self) -> list[Parameter]:
        out = list(self._params.values())
        for child in self._children.values():
            out.extend(child.parameters())
        return out

    def named_arrays(self, prefix: str = "") -> dict[str, np.ndarray]:
        """Flat name->array view of parameters and buffers (checkpointing)."""
        out: dict[str, np.ndarray] = {}
        for name, p in self._params.items():
            out[prefix + name] = p.value.data
        for name, buf in self._buffers.items():
            out[prefix + name] = buf
        for cname, child in self._children.items():
            out.update(child.named_arrays(prefix + cname + "."))
        return out

    def finalize_names(self, prefix: str = "") -> None:
        """Assign dotted-path names so every parameter is unique network-wide."""
        for name, p in self._params.items():
            p.name = prefix + name
        for cname, child in self._children.items():
            child.finalize_names(prefix + cname + ".")

    def load_arrays(self, arrays: dict[str, np.ndarray], prefix: str = "") -> None:
        own = self.named_arrays(prefix)
        missing = [k for k in own if k not in arrays]
        if missing:
            raise KeyError(f"checkpoint is missing entries: {missing[:5]}")
        for name, dst in own.items():
            src = arrays[name]
            if src.shape != dst.shape:
                raise ValueError(
                    f"shape mismatch for {name}: checkpoint {src.shape} vs model {dst.shape}")
            dst[...] = src

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, ksize: int,
                 rng: np.random.Generator, stride: int = 1,
                 padding: str = "same", bias: bool = True):
        super().__init__()
        self.stride = stride
        self.padding = padding
        self.weight = self.add_param(
            "weight", he_uniform(rng, (out_ch, in_ch, ksize, ksize),
                                 in_ch * ksize * ksize))
        self.bias = self.add_param("bias", np.zeros(out_ch)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        b = self.bias.value if self.bias is not None else None
        return conv2d(x, self.weight.value, b, self.stride, self.padding)


class ConvTranspose2d(Module):
    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator):
        super().__init__()
        self.weight = self.add_param(
            "weight", he_uniform(rng, (in_ch, out_ch, 2, 2), in_ch * 4))

    def forward(self, x: Tensor) -> Tensor:
        return transposed_conv2d(x, self.weight.value)


class BatchNorm2d(Module):
    def __init__(self, channels: int, eps: float = 1e-5, decay: float = 0.9):
        super().__init__()
        self.eps = eps
        self.decay = decay
        self.gamma = self.add_param("gamma", np.ones(channels))
        self.beta = self.add_param("beta", np.zeros(channels))
        self.running_mean = self.add_buffer("running_mean", np.zeros(channels))
        self.running_var = self.add_buffer("running_var", np.ones(channels))

    def forward(self, x: Tensor, train: bool) -> Tensor:
        return batchnorm2d(x, self.gamma.value, self.beta.value,
                           self.running_mean, self.running_var,
                           train, self.eps, self.decay)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int,
                 rng: np.random.Generator):
        super().__init__()
        self.weight = self.add_param(
            "weight", he_uniform(rng, (in_features, out_features), in_features))
        self.bias = self.add_param("bias", np.zeros(out_features))

    def forward(self, x: Tensor) -> Tensor:
        from .autograd import matmul
        return matmul(x, self.weight.value) + self.bias.value
