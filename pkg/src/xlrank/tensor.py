"""Dense float64 tensors with tape-based reverse-mode differentiation.

A ``Tape`` is a single-threaded recording context: operations executed
while a tape is active append one entry each (op name, input/output node
ids, and a backward closure holding the saved activations).  ``backward``
walks the record in reverse and populates ``.grad`` on every leaf tensor
the tape has seen; leaves that do not influence the loss get zeros.

Tensors touched outside any active tape are plain values: forward math
runs, nothing is recorded, and they are safe to share read-only across
threads.  Everything is float64 throughout; stability conventions are
max-subtraction for softmax-style ops and log-sum-exp for the losses.
"""

import numpy as np

from . import kernels as K
from .errors import ContractError, DimensionError, NumericError

_ACTIVE = None


class Tensor:
    """Array value with optional gradient and tape membership."""

    __slots__ = ("data", "grad", "_tape", "_nid")

    def __init__(self, data):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self._tape = None
        self._nid = -1

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"

    def item(self):
        return float(self.data)

    # Operator sugar for the common cases; the module functions are the API.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


class TapeEntry:
    __slots__ = ("op", "input_ids", "output_id", "backward")

    def __init__(self, op, input_ids, output_id, backward):
        self.op = op
        self.input_ids = input_ids
        self.output_id = output_id
        self.backward = backward


class Tape:
    """Ordered operation record; use as a context manager.

    Entries are appended in execution order, so every entry's inputs have
    smaller node ids than its output (topological order by construction).
    """

    def __init__(self):
        self.entries = []
        self._leaves = {}  # node id -> Tensor, for grad population
        self._next_id = 0
        self._done = False

    def __enter__(self):
        global _ACTIVE
        if _ACTIVE is not None:
            raise ContractError("a tape is already active; tapes do not nest")
        _ACTIVE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE
        _ACTIVE = None
        return False

    def _register_leaf(self, t):
        t._tape = self
        t._nid = self._next_id
        self._leaves[t._nid] = t
        self._next_id += 1
        return t._nid

    def _node_of(self, t):
        if t._tape is self:
            return t._nid
        return self._register_leaf(t)

    def _record(self, op, inputs, out_data, backward):
        ids = [self._node_of(t) for t in inputs]
        out = Tensor(out_data)
        out._tape = self
        out._nid = self._next_id
        self._next_id += 1
        self.entries.append(TapeEntry(op, ids, out._nid, backward))
        return out

    def backward(self, loss):
        """Reverse-accumulate d(loss)/d(leaf) into every leaf's .grad."""
        if not isinstance(loss, Tensor) or loss._tape is not self:
            raise ContractError("loss must be a tensor recorded on this tape")
        if loss.data.shape != ():
            raise ContractError(
                f"loss must be a scalar, got shape {loss.data.shape}"
            )
        if self._done:
            raise ContractError("backward was already run on this tape")
        self._done = True

        grads = {loss._nid: np.ones((), dtype=np.float64)}
        for entry in reversed(self.entries):
            gy = grads.pop(entry.output_id, None)
            if gy is None:
                continue
            for nid, g in zip(entry.input_ids, entry.backward(gy)):
                if g is None:
                    continue
                acc = grads.get(nid)
                grads[nid] = g if acc is None else acc + g
        for nid, leaf in self._leaves.items():
            g = grads.get(nid)
            leaf.grad = np.zeros_like(leaf.data) if g is None else g


def active_tape():
    return _ACTIVE


def backward(loss):
    """Run reverse-mode accumulation for ``loss`` on the active tape."""
    if _ACTIVE is None:
        raise ContractError("backward requires an active tape")
    _ACTIVE.backward(loss)


def _emit(op, inputs, out_data, backward_fn):
    if _ACTIVE is None:
        return Tensor(out_data)
    return _ACTIVE._record(op, inputs, out_data, backward_fn)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g, shape):
    """Sum gradient g down to ``shape`` (inverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_finite(op, x):
    if not np.isfinite(x).all():
        raise NumericError(f"{op}: input contains non-finite values")


def matmul(a, b):
    """Matrix product; supports stacked batch dims when they match exactly,
    or a 2-D right operand shared across the left operand's batch."""
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise DimensionError(f"matmul needs >=2-D operands, got {ad.shape} @ {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {ad.shape} @ {bd.shape}")
    shared_rhs = bd.ndim == 2 and ad.ndim > 2
    if not shared_rhs and ad.shape[:-2] != bd.shape[:-2]:
        raise DimensionError(f"matmul batch dimensions differ: {ad.shape} @ {bd.shape}")
    out = ad @ bd

    def bwd(gy):
        ga = gy @ bd.swapaxes(-1, -2)
        if shared_rhs:
            k = ad.shape[-1]
            gb = ad.reshape(-1, k).T @ gy.reshape(-1, gy.shape[-1])
        else:
            gb = ad.swapaxes(-1, -2) @ gy
        return ga, gb

    return _emit("matmul", [a, b], out, bwd)


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    out = ad + bd

    def bwd(gy):
        return _unbroadcast(gy, ad.shape), _unbroadcast(gy, bd.shape)

    return _emit("add", [a, b], out, bwd)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    out = ad - bd

    def bwd(gy):
        return _unbroadcast(gy, ad.shape), -_unbroadcast(gy, bd.shape)

    return _emit("sub", [a, b], out, bwd)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    out = ad * bd

    def bwd(gy):
        return _unbroadcast(gy * bd, ad.shape), _unbroadcast(gy * ad, bd.shape)

    return _emit("mul", [a, b], out, bwd)


def scale(a, s):
    """Multiply by a python scalar (no gradient for the scalar)."""
    a = _as_tensor(a)
    s = float(s)
    return _emit("scale", [a], a.data * s, lambda gy: (gy * s,))


def relu(a):
    a = _as_tensor(a)
    _check_finite("relu", a.data)
    mask = a.data > 0
    return _emit("relu", [a], np.where(mask, a.data, 0.0), lambda gy: (gy * mask,))


def sigmoid(a):
    a = _as_tensor(a)
    _check_finite("sigmoid", a.data)
    ad = a.data
    out = np.empty_like(ad)
    pos = ad >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-ad[pos]))
    e = np.exp(ad[~pos])
    out[~pos] = e / (1.0 + e)

    def bwd(gy):
        return (gy * out * (1.0 - out),)

    return _emit("sigmoid", [a], out, bwd)


def softmax(a, axis=-1):
    """Stable softmax along ``axis``; rows sum to 1."""
    a = _as_tensor(a)
    _check_finite("softmax", a.data)
    ad = a.data
    moved = axis not in (-1, ad.ndim - 1)
    x = np.moveaxis(ad, axis, -1) if moved else ad
    xshape = x.shape
    y2 = K.softmax_fwd(np.ascontiguousarray(x.reshape(-1, xshape[-1])))
    y = y2.reshape(xshape)
    out = np.moveaxis(y, -1, axis) if moved else y

    def bwd(gy):
        g = np.moveaxis(gy, axis, -1) if moved else gy
        gx2 = K.softmax_bwd(y2, np.ascontiguousarray(g.reshape(-1, xshape[-1])))
        gx = gx2.reshape(xshape)
        return (np.moveaxis(gx, -1, axis) if moved else gx,)

    return _emit("softmax", [a], out, bwd)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize over the last axis to zero mean / unit variance, then affine."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    if eps < 0:
        raise ContractError(f"layer_norm eps must be >= 0, got {eps}")
    h = x.data.shape[-1]
    if gain.data.shape != (h,) or bias.data.shape != (h,):
        raise DimensionError(
            f"layer_norm affine shapes {gain.data.shape}/{bias.data.shape} "
            f"do not match last axis of {x.data.shape}"
        )
    x2 = np.ascontiguousarray(x.data.reshape(-1, h))
    y2, xhat, inv_std = K.layer_norm_fwd(x2, gain.data, bias.data, float(eps))

    def bwd(gy):
        g2 = np.ascontiguousarray(gy.reshape(-1, h))
        gx2, dgain, dbias = K.layer_norm_bwd(g2, xhat, inv_std, gain.data)
        return gx2.reshape(x.data.shape), dgain, dbias

    return _emit("layer_norm", [x, gain, bias], y2.reshape(x.data.shape), bwd)


def cross_entropy(logits, targets):
    """Mean -log softmax probability of the target classes.

    ``logits`` is [n, vocab] (or [vocab] with an int target); the result is
    a scalar averaged over rows.
    """
    logits = _as_tensor(logits)
    _check_finite("cross_entropy", logits.data)
    ld = logits.data
    squeeze = ld.ndim == 1
    if squeeze:
        ld = ld[None, :]
    tgt = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    if tgt.shape[0] != ld.shape[0]:
        raise DimensionError(
            f"cross_entropy got {ld.shape[0]} rows but {tgt.shape[0]} targets"
        )
    if tgt.min(initial=0) < 0 or tgt.max(initial=-1) >= ld.shape[1]:
        raise ContractError("cross_entropy target index out of range")
    losses, probs = K.cross_entropy_fwd(np.ascontiguousarray(ld), tgt)
    n = ld.shape[0]
    out = np.float64(losses.mean())

    def bwd(gy):
        g = K.cross_entropy_bwd(probs, tgt, float(gy) / n)
        return (g[0] if squeeze else g,)

    return _emit("cross_entropy", [logits], out, bwd)


def bce(logits, labels):
    """Mean binary cross entropy on raw logits, log-sum-exp stabilized."""
    logits = _as_tensor(logits)
    _check_finite("bce", logits.data)
    z = np.atleast_1d(logits.data).astype(np.float64)
    y = np.atleast_1d(np.asarray(labels, dtype=np.float64))
    if z.shape != y.shape:
        raise DimensionError(f"bce shapes differ: logits {z.shape}, labels {y.shape}")
    if not np.isin(y, (0.0, 1.0)).all():
        raise ContractError("bce labels must be 0 or 1")
    # max(z,0) - z*y + log(1 + exp(-|z|))
    losses = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    n = z.size
    out = np.float64(losses.mean())

    def bwd(gy):
        p = np.empty_like(z)
        pos = z >= 0
        p[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
        e = np.exp(z[~pos])
        p[~pos] = e / (1.0 + e)
        g = (p - y) * (float(gy) / n)
        return (g.reshape(logits.data.shape),)

    return _emit("bce", [logits], out, bwd)


def tsum(a):
    """Sum of all elements, as a scalar tensor."""
    a = _as_tensor(a)
    out = np.float64(a.data.sum())
    shape = a.data.shape
    return _emit("sum", [a], out, lambda gy: (np.full(shape, float(gy)),))


def reshape(a, shape):
    a = _as_tensor(a)
    old = a.data.shape
    return _emit("reshape", [a], a.data.reshape(shape), lambda gy: (gy.reshape(old),))


def swapaxes(a, ax1, ax2):
    a = _as_tensor(a)
    out = a.data.swapaxes(ax1, ax2)

    def bwd(gy):
        return (gy.swapaxes(ax1, ax2),)

    return _emit("swapaxes", [a], out, bwd)


def embedding(table, ids):
    """Row gather: out[..., :] = table[ids[...], :]; backward scatter-adds."""
    table = _as_tensor(table)
    idx = np.asarray(ids, dtype=np.int64)
    if table.data.ndim != 2:
        raise DimensionError(f"embedding table must be 2-D, got {table.data.shape}")
    if idx.min(initial=0) < 0 or idx.max(initial=-1) >= table.data.shape[0]:
        raise ContractError("embedding index out of range")
    out = table.data[idx]

    def bwd(gy):
        g = np.zeros_like(table.data)
        np.add.at(g, idx.ravel(), gy.reshape(-1, table.data.shape[1]))
        return (g,)

    return _emit("embedding", [table], out, bwd)
