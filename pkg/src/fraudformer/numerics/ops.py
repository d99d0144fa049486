"""Differentiable primitives.

Each op computes its numpy forward, and when a tape is active and any
input requires a gradient, records a backward closure. No implicit
broadcasting beyond the bias patterns spelled out per op; reshape
explicitly otherwise.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .tensor import DimensionError, GradTape, Tensor, active_tape

__all__ = [
    "add", "sub", "add_n", "scale", "add_const", "mul", "mul_const",
    "matmul", "matmul_t", "relu", "layer_norm", "dropout",
    "softmax_rows", "softmax_ce", "conv1d", "max_over_time",
    "concat_cols", "slice_cols", "take_rows", "stack_rows",
    "concat_rows", "normalize_rows", "row_diff", "reshape", "sum_all",
]


def _maybe_record(out: Tensor, inputs: Sequence[Tensor], backward) -> Tensor:
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(backward)
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; also accepts a 1-D bias matching a's last axis."""
    bias = a.data.shape != b.data.shape
    if bias and not (b.data.ndim == 1 and a.data.shape[-1] == b.data.shape[0]):
        raise DimensionError(f"add: incompatible shapes {a.data.shape} and {b.data.shape}")
    out = Tensor(a.data + b.data)

    def backward():
        g = out.grad
        if g is None:
            return
        if a.requires_grad:
            a.ensure_grad()
            a.grad += g
        if b.requires_grad:
            b.ensure_grad()
            b.grad += g.reshape(-1, g.shape[-1]).sum(axis=0) if bias else g

    return _maybe_record(out, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise DimensionError(f"sub: incompatible shapes {a.data.shape} and {b.data.shape}")
    out = Tensor(a.data - b.data)

    def backward():
        g = out.grad
        if g is None:
            return
        if a.requires_grad:
            a.ensure_grad()
            a.grad += g
        if b.requires_grad:
            b.ensure_grad()
            b.grad -= g

    return _maybe_record(out, (a, b), backward)


def add_n(tensors: Sequence[Tensor]) -> Tensor:
    """Sum of same-shape tensors (typically scalar loss terms)."""
    tensors = list(tensors)
    out = Tensor(sum(t.data for t in tensors))

    def backward():
        g = out.grad
        if g is None:
            return
        for t in tensors:
            if t.requires_grad:
                t.ensure_grad()
                t.grad += g

    return _maybe_record(out, tensors, backward)


def scale(x: Tensor, c: float) -> Tensor:
    out = Tensor(x.data * c)

    def backward():
        if out.grad is not None and x.requires_grad:
            x.ensure_grad()
            x.grad += out.grad * c

    return _maybe_record(out, (x,), backward)


def add_const(x: Tensor, arr: np.ndarray) -> Tensor:
    """Add a non-learned constant (e.g. an additive attention mask)."""
    out = Tensor(x.data + arr)

    def backward():
        if out.grad is not None and x.requires_grad:
            x.ensure_grad()
            x.grad += out.grad

    return _maybe_record(out, (x,), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise DimensionError(f"mul: incompatible shapes {a.data.shape} and {b.data.shape}")
    out = Tensor(a.data * b.data)

    def backward():
        g = out.grad
        if g is None:
            return
        if a.requires_grad:
            a.ensure_grad()
            a.grad += g * b.data
        if b.requires_grad:
            b.ensure_grad()
            b.grad += g * a.data

    return _maybe_record(out, (a, b), backward)


def mul_const(x: Tensor, arr: np.ndarray) -> Tensor:
    out = Tensor(x.data * arr)

    def backward():
        if out.grad is not None and x.requires_grad:
            x.ensure_grad()
            x.grad += out.grad * arr

    return _maybe_record(out, (x,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product a[m,k] @ b[k,n]."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.data.shape} and {b.data.shape}")
    out = Tensor(a.data @ b.data)

    def backward():
        g = out.grad
        if g is None:
            return
        if a.requires_grad:
            a.ensure_grad()
            a.grad += g @ b.data.T
        if b.requires_grad:
            b.ensure_grad()
            b.grad += a.data.T @ g

    return _maybe_record(out, (a, b), backward)


def matmul_t(a: Tensor, b: Tensor) -> Tensor:
    """a[m,k] @ b[n,k]^T; used for attention scores and tied decoding."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[1]:
        raise DimensionError(f"matmul_t: incompatible shapes {a.data.shape} and {b.data.shape}")
    out = Tensor(a.data @ b.data.T)

    def backward():
        g = out.grad
        if g is None:
            return
        if a.requires_grad:
            a.ensure_grad()
            a.grad += g @ b.data
        if b.requires_grad:
            b.ensure_grad()
            b.grad += g.T @ a.data

    return _maybe_record(out, (a, b), backward)


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0))

    def backward():
        if out.grad is not None and x.requires_grad:
            x.ensure_grad()
            x.grad += out.grad * (x.data > 0)

    return _maybe_record(out, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale+shift."""
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise DimensionError(f"layer_norm: gain/bias must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = Tensor(xhat * gain.data + bias.data)

    def backward():
        g = out.grad
        if g is None:
            return
        gh = g * gain.data
        if x.requires_grad:
            x.ensure_grad()
            m1 = gh.mean(axis=-1, keepdims=True)
            m2 = (gh * xhat).mean(axis=-1, keepdims=True)
            x.grad += inv * (gh - m1 - xhat * m2)
        lead = g.reshape(-1, d)
        if gain.requires_grad:
            gain.ensure_grad()
            gain.grad += (g * xhat).reshape(-1, d).sum(axis=0)
        if bias.requires_grad:
            bias.ensure_grad()
            bias.grad += lead.sum(axis=0)

    return _maybe_record(out, (x, gain, bias), backward)


def dropout(x: Tensor, p: float, rng: Optional[np.random.Generator], training: bool) -> Tensor:
    """Zero entries with probability p, rescale survivors by 1/(1-p).

    Identity in eval mode or at p == 0. The random source is always passed
    explicitly; there is no ambient RNG.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    if not training or p == 0.0:
        mask = None
        out = Tensor(x.data.copy())
    else:
        if rng is None:
            raise ValueError("dropout in training mode needs an explicit rng")
        mask = (rng.random(x.data.shape) >= p) / (1.0 - p)
        mask = mask.astype(x.data.dtype)
        out = Tensor(x.data * mask)

    def backward():
        if out.grad is not None and x.requires_grad:
            x.ensure_grad()
            x.grad += out.grad if mask is None else out.grad * mask

    return _maybe_record(out, (x,), backward)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis. Rows may contain -inf (masked) entries."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(p)

    def backward():
        g = out.grad
        if g is None or not x.requires_grad:
            return
        x.ensure_grad()
        x.grad += p * (g - (p * g).sum(axis=-1, keepdims=True))

    return _maybe_record(out, (x,), backward)


def softmax_ce(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean over rows of -log softmax(logits)[target]."""
    if logits.data.ndim != 2:
        raise DimensionError(f"softmax_ce expects 2-D logits, got {logits.data.shape}")
    n, v = logits.data.shape
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (n,):
        raise DimensionError(f"softmax_ce: {n} logit rows vs targets shape {targets.shape}")
    if targets.min(initial=0) < 0 or targets.max(initial=0) >= v:
        bad = targets[(targets < 0) | (targets >= v)][0]
        raise IndexError(f"target id {bad} out of range [0, {v})")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    rows = np.arange(n)
    nll = -np.log(p[rows, targets])
    out = Tensor(np.asarray(nll.mean(), dtype=logits.data.dtype))

    def backward():
        g = out.grad
        if g is None or not logits.requires_grad:
            return
        logits.ensure_grad()
        gl = p.copy()
        gl[rows, targets] -= 1.0
        logits.grad += (float(g) / n) * gl

    return _maybe_record(out, (logits,), backward)


def conv1d(x: Tensor, kernels: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Valid (no-pad) convolution over the time axis.

    x: [T, C], kernels: [K, C, F] -> [T-K+1, F];
    out[t, f] = sum_{k,c} x[t+k, c] * kernels[k, c, f].
    """
    if x.data.ndim != 2 or kernels.data.ndim != 3:
        raise DimensionError(f"conv1d: need x[T,C] and kernels[K,C,F], got {x.data.shape}, {kernels.data.shape}")
    t_len, c = x.data.shape
    k, kc, f = kernels.data.shape
    if kc != c:
        raise DimensionError(f"conv1d: channel mismatch {c} vs {kc}")
    if k > t_len:
        raise DimensionError(f"conv1d: sequence length {t_len} shorter than kernel size {k}")
    # windows[t, c, k] = x[t+k, c]
    windows = np.lib.stride_tricks.sliding_window_view(x.data, k, axis=0)
    out_data = np.einsum("tck,kcf->tf", windows, kernels.data)
    if bias is not None:
        if bias.data.shape != (f,):
            raise DimensionError(f"conv1d: bias must have shape ({f},)")
        out_data = out_data + bias.data
    out = Tensor(out_data)
    inputs = (x, kernels) if bias is None else (x, kernels, bias)

    def backward():
        g = out.grad
        if g is None:
            return
        if kernels.requires_grad:
            kernels.ensure_grad()
            kernels.grad += np.einsum("tck,tf->kcf", windows, g)
        if x.requires_grad:
            x.ensure_grad()
            for j in range(k):
                x.grad[j:j + g.shape[0]] += g @ kernels.data[j].T
        if bias is not None and bias.requires_grad:
            bias.ensure_grad()
            bias.grad += g.sum(axis=0)

    return _maybe_record(out, inputs, backward)


def max_over_time(x: Tensor) -> Tensor:
    """Global max pool over axis 0: [T, F] -> [F]. Ties go to the earliest t."""
    if x.data.ndim != 2:
        raise DimensionError(f"max_over_time expects 2-D input, got {x.data.shape}")
    idx = np.argmax(x.data, axis=0)
    out = Tensor(x.data[idx, np.arange(x.data.shape[1])])

    def backward():
        g = out.grad
        if g is None or not x.requires_grad:
            return
        x.ensure_grad()
        np.add.at(x.grad, (idx, np.arange(x.data.shape[1])), g)

    return _maybe_record(out, (x,), backward)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    parts = list(parts)
    out = Tensor(np.concatenate([p.data for p in parts], axis=-1))
    widths = [p.data.shape[-1] for p in parts]
    offsets = np.cumsum([0] + widths)

    def backward():
        g = out.grad
        if g is None:
            return
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                p.ensure_grad()
                p.grad += g[..., lo:hi]

    return _maybe_record(out, parts, backward)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    out = Tensor(x.data[..., start:stop].copy())

    def backward():
        if out.grad is not None and x.requires_grad:
            x.ensure_grad()
            x.grad[..., start:stop] += out.grad

    return _maybe_record(out, (x,), backward)


def take_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Gather rows by integer index (also the embedding lookup primitive)."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.min(initial=0) < 0 or (idx.size and idx.max() >= x.data.shape[0]):
        raise IndexError(f"row index out of range [0, {x.data.shape[0]})")
    out = Tensor(x.data[idx])

    def backward():
        if out.grad is not None and x.requires_grad:
            x.ensure_grad()
            np.add.at(x.grad, idx, out.grad)

    return _maybe_record(out, (x,), backward)


def stack_rows(vectors: Sequence[Tensor]) -> Tensor:
    """Stack 1-D tensors into a [B, n] matrix."""
    vectors = list(vectors)
    out = Tensor(np.stack([v.data for v in vectors], axis=0))

    def backward():
        g = out.grad
        if g is None:
            return
        for i, v in enumerate(vectors):
            if v.requires_grad:
                v.ensure_grad()
                v.grad += g[i]

    return _maybe_record(out, vectors, backward)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate 2-D tensors along axis 0."""
    parts = list(parts)
    out = Tensor(np.concatenate([p.data for p in parts], axis=0))
    heights = [p.data.shape[0] for p in parts]
    offsets = np.cumsum([0] + heights)

    def backward():
        g = out.grad
        if g is None:
            return
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                p.ensure_grad()
                p.grad += g[lo:hi]

    return _maybe_record(out, parts, backward)


def normalize_rows(x: Tensor) -> Tensor:
    """L2-normalize each row; zero rows are rejected."""
    norms = np.linalg.norm(x.data, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("cannot L2-normalize a zero row")
    y = x.data / norms
    out = Tensor(y)

    def backward():
        g = out.grad
        if g is None or not x.requires_grad:
            return
        x.ensure_grad()
        x.grad += (g - y * (y * g).sum(axis=-1, keepdims=True)) / norms

    return _maybe_record(out, (x,), backward)


def row_diff(x: Tensor) -> Tensor:
    """First-order difference over axis 0: out[t] = x[t+1] - x[t]."""
    if x.data.shape[0] < 2:
        raise DimensionError(f"row_diff needs at least 2 rows, got {x.data.shape[0]}")
    out = Tensor(np.diff(x.data, axis=0))

    def backward():
        g = out.grad
        if g is None or not x.requires_grad:
            return
        x.ensure_grad()
        x.grad[1:] += g
        x.grad[:-1] -= g

    return _maybe_record(out, (x,), backward)


def sum_all(x: Tensor) -> Tensor:
    """Sum of all entries, as a scalar tensor."""
    out = Tensor(np.asarray(x.data.sum(), dtype=x.data.dtype))

    def backward():
        if out.grad is not None and x.requires_grad:
            x.ensure_grad()
            x.grad += float(out.grad)

    return _maybe_record(out, (x,), backward)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    out = Tensor(x.data.reshape(shape))

    def backward():
        if out.grad is not None and x.requires_grad:
            x.ensure_grad()
            x.grad += out.grad.reshape(x.data.shape)

    return _maybe_record(out, (x,), backward)
