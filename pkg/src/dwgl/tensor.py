"""Dense float32 tensors with tape-based reverse-mode autodiff.

The op set is intentionally small: exactly what a conv/relu/eltwise residual
classifier needs (plus ``sum_all``/``square``/``scale`` so losses can be
composed in tests). Data lives in float32; reductions (conv inner products,
means, log-sum-exp) accumulate in float64 before rounding back, which keeps
finite-difference gradient checks stable and makes removal of exactly-zero
channels a no-op on downstream values.

A ``Tape`` records one forward pass. ``backward`` replays it in exact reverse
order, accumulating gradients additively; a tape can be consumed only once.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError, TapeError


class Tensor:
    """A named dense array. ``data`` is always a C-contiguous float32 ndarray."""

    __slots__ = ("data", "name")

    def __init__(self, data, name=None):
        self.data = np.ascontiguousarray(data, dtype=np.float32)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={tuple(self.shape)}{tag})"


class Tape:
    """Ordered record of primitive ops for one forward pass."""

    def __init__(self):
        self._ops = []  # (op name, backward closure)
        self._spent = False
        self.visited = None  # op names in backward visit order, for inspection

    def record(self, name, backward_fn):
        self._ops.append((name, backward_fn))

    @property
    def op_names(self):
        return [name for name, _ in self._ops]

    def __len__(self):
        return len(self._ops)


class _Grads:
    """Gradient accumulator keyed by tensor identity. Accumulation is additive."""

    def __init__(self):
        self._by_id = {}

    def get(self, t):
        return self._by_id.get(id(t))

    def add(self, t, delta):
        cur = self._by_id.get(id(t))
        if cur is None:
            self._by_id[id(t)] = np.ascontiguousarray(delta, dtype=np.float32)
        else:
            cur += delta.astype(np.float32, copy=False)


def backward(tape, loss, params):
    """Replay ``tape`` in reverse from scalar ``loss``.

    Returns a gradient map name -> float32 ndarray for every tensor in
    ``params`` (dict name -> Tensor); parameters not reached by the loss get
    zeros. A tape may only be walked once.
    """
    if tape._spent:
        raise TapeError("backward already called on this tape; re-record the forward pass")
    tape._spent = True
    if loss.data.size != 1:
        raise ShapeError("backward expects a scalar loss", shape=tuple(loss.shape))
    grads = _Grads()
    grads.add(loss, np.ones_like(loss.data))
    visited = []
    for name, fn in reversed(tape._ops):
        visited.append(name)
        fn(grads)
    tape.visited = visited
    out = {}
    for name, p in params.items():
        g = grads.get(p)
        out[name] = np.zeros_like(p.data) if g is None else g
    return out


def sgd_step(params, grads, lr, weight_decay=0.0):
    """In-place SGD: p <- p - lr * (g + weight_decay * p) for every parameter."""
    lr = np.float32(lr)
    wd = np.float32(weight_decay)
    for name, p in params.items():
        g = grads[name]
        if wd != 0.0:
            p.data -= lr * (g + wd * p.data)
        else:
            p.data -= lr * g


# ---------------------------------------------------------------------------
# primitive ops


def _conv_out_size(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def _im2col(x, kh, kw, stride, pad):
    # (B, Cin, H, W) -> float64 (B, Cin*kh*kw, Hp*Wp)
    b, c, _, _ = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    hp, wp = win.shape[2], win.shape[3]
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(b, c * kh * kw, hp * wp)
    return np.ascontiguousarray(cols, dtype=np.float64), hp, wp


def conv2d(x, w, b, stride=1, pad=0, tape=None):
    """2-D correlation: x (B,Cin,H,W) * w (K,Cin,kh,kw) + b (K) -> (B,K,H',W')."""
    if x.data.ndim != 4:
        raise ShapeError("conv2d input must be 4-D (B,Cin,H,W)", shape=tuple(x.shape))
    if w.data.ndim != 4:
        raise ShapeError("conv2d weight must be 4-D (K,Cin,kh,kw)", shape=tuple(w.shape))
    bs, cin, h, wd_ = x.shape
    k, cw, kh, kw = w.shape
    if cw != cin:
        raise ShapeError(
            "conv2d input-channel mismatch", input_channels=cin, weight_channels=cw
        )
    if b.data.shape != (k,):
        raise ShapeError("conv2d bias must have one entry per filter", bias=tuple(b.shape), filters=k)
    if stride < 1:
        raise ShapeError("conv2d stride must be >= 1", stride=stride)
    if kh > h + 2 * pad or kw > wd_ + 2 * pad:
        raise ShapeError(
            "conv2d kernel larger than padded input",
            kernel=(kh, kw),
            padded_input=(h + 2 * pad, wd_ + 2 * pad),
        )

    cols, hp, wp = _im2col(x.data, kh, kw, stride, pad)
    wmat = w.data.reshape(k, -1).astype(np.float64)
    out64 = wmat @ cols + b.data.astype(np.float64)[:, None]
    out = Tensor(out64.reshape(bs, k, hp, wp))

    if tape is not None:
        def bwd(grads):
            g = grads.get(out)
            if g is None:
                return
            gmat = g.reshape(bs, k, hp * wp).astype(np.float64)
            gw = np.matmul(gmat, cols.transpose(0, 2, 1)).sum(axis=0)
            grads.add(w, gw.reshape(w.shape).astype(np.float32))
            grads.add(b, gmat.sum(axis=(0, 2)).astype(np.float32))
            gcols = np.matmul(wmat.T, gmat)  # (B, Cin*kh*kw, L)
            gx = np.zeros((bs, cin, h + 2 * pad, wd_ + 2 * pad), dtype=np.float64)
            gc = gcols.reshape(bs, cin, kh, kw, hp, wp)
            for i in range(kh):
                for j in range(kw):
                    gx[:, :, i : i + stride * hp : stride, j : j + stride * wp : stride] += gc[
                        :, :, i, j
                    ]
            if pad:
                gx = gx[:, :, pad:-pad, pad:-pad]
            grads.add(x, gx.astype(np.float32))

        tape.record("conv2d", bwd)
    return out


def eltwise_add(a, b, tape=None):
    """Elementwise sum of two equal-shaped tensors; gradient passes to both unchanged."""
    if a.data.shape != b.data.shape:
        raise ShapeError("eltwise_add shape mismatch", a=tuple(a.shape), b=tuple(b.shape))
    out = Tensor(a.data + b.data)
    if tape is not None:
        def bwd(grads):
            g = grads.get(out)
            if g is None:
                return
            grads.add(a, g)
            grads.add(b, g)

        tape.record("eltwise_add", bwd)
    return out


def relu(x, tape=None):
    out = Tensor(np.maximum(x.data, np.float32(0.0)))
    if tape is not None:
        mask = x.data > 0

        def bwd(grads):
            g = grads.get(out)
            if g is None:
                return
            grads.add(x, np.where(mask, g, np.float32(0.0)))

        tape.record("relu", bwd)
    return out


def avgpool_global(x, tape=None):
    """Global average pool (B,C,H,W) -> (B,C); mean accumulated in float64."""
    if x.data.ndim != 4:
        raise ShapeError("avgpool_global input must be 4-D", shape=tuple(x.shape))
    _, _, h, w = x.shape
    out = Tensor(x.data.astype(np.float64).mean(axis=(2, 3)))
    if tape is not None:
        def bwd(grads):
            g = grads.get(out)
            if g is None:
                return
            gx = (g.astype(np.float64) / (h * w))[:, :, None, None]
            grads.add(x, np.broadcast_to(gx, x.shape).astype(np.float32))

        tape.record("avgpool_global", bwd)
    return out


def linear(x, w, b, tape=None):
    """Affine map: x (B,C) @ w (C,M) + b (M)."""
    if x.data.ndim != 2 or w.data.ndim != 2:
        raise ShapeError("linear expects 2-D input and weight", x=tuple(x.shape), w=tuple(w.shape))
    if x.shape[1] != w.shape[0]:
        raise ShapeError("linear feature mismatch", input_features=x.shape[1], weight_rows=w.shape[0])
    x64 = x.data.astype(np.float64)
    w64 = w.data.astype(np.float64)
    out = Tensor(x64 @ w64 + b.data.astype(np.float64))
    if tape is not None:
        def bwd(grads):
            g = grads.get(out)
            if g is None:
                return
            g64 = g.astype(np.float64)
            grads.add(x, (g64 @ w64.T).astype(np.float32))
            grads.add(w, (x64.T @ g64).astype(np.float32))
            grads.add(b, g64.sum(axis=0).astype(np.float32))

        tape.record("linear", bwd)
    return out


def softmax_xent(logits, labels, tape=None):
    """Mean cross-entropy of softmax(logits) (B,M) against integer labels."""
    if logits.data.ndim != 2:
        raise ShapeError("softmax_xent expects 2-D logits", shape=tuple(logits.shape))
    bs, m = logits.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (bs,):
        raise ShapeError("one label per batch row required", labels=labels.shape, batch=bs)
    bad = np.nonzero((labels < 0) | (labels >= m))[0]
    if bad.size:
        raise ShapeError(
            "label out of range", index=int(bad[0]), label=int(labels[bad[0]]), classes=m
        )
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    loss = -logp[np.arange(bs), labels].mean()
    out = Tensor(np.float32(loss))
    if tape is not None:
        def bwd(grads):
            g = grads.get(out)
            if g is None:
                return
            p = np.exp(logp)
            p[np.arange(bs), labels] -= 1.0
            g0 = float(g.reshape(-1)[0])
            grads.add(logits, (p * (g0 / bs)).astype(np.float32))

        tape.record("softmax_xent", bwd)
    return out


def sum_all(x, tape=None):
    """Sum of all elements, accumulated in float64; returns a scalar tensor."""
    out = Tensor(np.float32(x.data.astype(np.float64).sum()))
    if tape is not None:
        def bwd(grads):
            g = grads.get(out)
            if g is None:
                return
            grads.add(x, np.full_like(x.data, np.float32(g.reshape(-1)[0])))

        tape.record("sum_all", bwd)
    return out


def square(x, tape=None):
    out = Tensor(x.data * x.data)
    if tape is not None:
        def bwd(grads):
            g = grads.get(out)
            if g is None:
                return
            grads.add(x, np.float32(2.0) * x.data * g)

        tape.record("square", bwd)
    return out


def scale(x, c, tape=None):
    """Multiply by a python scalar constant."""
    c32 = np.float32(c)
    out = Tensor(x.data * c32)
    if tape is not None:
        def bwd(grads):
            g = grads.get(out)
            if g is None:
                return
            grads.add(x, g * c32)

        tape.record("scale", bwd)
    return out
