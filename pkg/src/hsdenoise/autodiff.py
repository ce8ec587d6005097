"""Reverse-mode gradient tape over volume operations.

A forward pass executes ops that append records to a :class:`Tape`; since
every op's inputs exist before its output, the record list is already in
topological order and the backward pass is a single reverse sweep. Each
record owns a closure holding whatever activations its gradient needs, and
the sweep visits each record at most once. After ``backward`` the records
(and the activations they retained) are dropped, so per-step memory does not
accumulate across training steps.

Traced volumes are channels-last (B, H, W, C): with that layout every
convolution is one patch-matrix build plus one (voxels x taps*C) GEMM, which
is what keeps CPU training throughput acceptable. Ops accept ``tape=None``
to run untraced (pure inference, nothing retained).

Conventions:
* L1 subgradient at a zero residual is 0.
* LeakyReLU derivative at exactly 0 takes the non-negative branch (slope 1).
* Scalar reductions accumulate in float64 before casting back.
"""

from __future__ import annotations

import numpy as np

from .conv import conv_forward_cl, conv_input_grad_cl, conv_weight_grad_cl
from .errors import GraphError, ShapeError, StateError


class Parameter:
    """Named trainable array. The value is updated in place by the optimizer."""

    __slots__ = ("name", "value")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = np.asarray(value)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape})"


class Var:
    """A value produced during a traced forward pass."""

    __slots__ = ("value", "vid")

    def __init__(self, value, vid=None):
        self.value = value
        self.vid = vid


class _Record:
    __slots__ = ("out_vid", "input_vids", "backward_fn")

    def __init__(self, out_vid, input_vids, backward_fn):
        self.out_vid = out_vid
        self.input_vids = input_vids
        self.backward_fn = backward_fn


class Tape:
    def __init__(self):
        self._records: list[_Record] = []
        self._params: dict[str, Parameter] = {}
        self._param_vids: dict[int, int] = {}
        self._next_vid = 0
        self._consumed = False

    def watch(self, params) -> None:
        """Register parameters; unused ones still get zero gradients."""
        for p in params:
            self._register(p)

    def _register(self, p: Parameter) -> int:
        if id(p) not in self._param_vids:
            if p.name in self._params:
                raise GraphError(f"duplicate parameter name {p.name!r} on tape")
            self._params[p.name] = p
            self._param_vids[id(p)] = self._new_vid()
        return self._param_vids[id(p)]

    def _new_vid(self) -> int:
        vid = self._next_vid
        self._next_vid += 1
        return vid

    def input(self, value: np.ndarray) -> Var:
        """Wrap a data array as a traced leaf."""
        return Var(np.asarray(value), self._new_vid())

    def _append(self, out_vid, input_vids, backward_fn):
        for vid in input_vids:
            if vid is not None and vid >= out_vid:
                raise GraphError("record input does not precede its output")
        self._records.append(_Record(out_vid, input_vids, backward_fn))

    @property
    def num_records(self) -> int:
        return len(self._records)


def _input_vid(tape: Tape, x) -> int | None:
    if isinstance(x, Parameter):
        return tape._register(x)
    if isinstance(x, Var):
        return x.vid
    return None


def _emit(tape: Tape | None, value, inputs, backward_fn) -> Var:
    if tape is None:
        return Var(value, None)
    vids = tuple(_input_vid(tape, x) for x in inputs)
    out = Var(value, tape._new_vid())
    tape._append(out.vid, vids, backward_fn)
    return out


def backward(tape: Tape, loss: Var) -> dict[str, np.ndarray]:
    """Reverse sweep from a scalar loss; returns gradients keyed by parameter name.

    Parameters the loss does not depend on receive zero gradients. The tape
    is consumed: records and retained activations are released.
    """
    if tape._consumed:
        raise StateError("tape already consumed by a previous backward pass")
    if not tape._records:
        raise StateError("backward called before any forward op was recorded")
    if not isinstance(loss, Var) or loss.vid is None or loss.vid >= tape._next_vid:
        raise StateError("loss is not a traced variable of this tape")
    if np.size(loss.value) != 1:
        raise ShapeError(f"loss must be scalar, got shape {np.shape(loss.value)}")

    grads: dict[int, np.ndarray] = {loss.vid: np.ones_like(np.asarray(loss.value))}
    for rec in reversed(tape._records):
        g_out = grads.pop(rec.out_vid, None)
        if g_out is None:
            continue
        for vid, g_in in zip(rec.input_vids, rec.backward_fn(g_out)):
            if vid is None or g_in is None:
                continue
            if vid in grads:
                grads[vid] += g_in
            else:
                grads[vid] = g_in

    out = {}
    for name, p in tape._params.items():
        vid = tape._param_vids[id(p)]
        g = grads.get(vid)
        out[name] = g if g is not None else np.zeros_like(p.value)
    tape._records.clear()
    tape._consumed = True
    return out


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------

def conv3d(
    tape: Tape | None,
    x: Var,
    weight: Parameter,
    bias: Parameter | None = None,
    padding: tuple[int, int, int] = (0, 0, 0),
    stride: tuple[int, int, int] = (1, 1, 1),
) -> Var:
    """Traced convolution of a channels-last (B,H,W,C) volume."""
    xv = x.value
    wv = weight.value
    if xv.ndim != 4:
        raise ShapeError(f"conv3d expects (B,H,W,C) input, got {xv.shape}")
    if xv.shape[-1] != wv.shape[1]:
        raise ShapeError(
            f"input has {xv.shape[-1]} channels, weight expects {wv.shape[1]}"
        )
    y = conv_forward_cl(xv, wv, padding, stride)
    if bias is not None:
        y += bias.value[None, None, None, :]
    in_dims = xv.shape[:3]
    kernel_shape = wv.shape[2:]

    def bwd(g):
        gx = conv_input_grad_cl(g, wv, padding, in_dims, stride)
        gw = conv_weight_grad_cl(g, xv, kernel_shape, padding, stride)
        gb = None
        if bias is not None:
            gb = g.sum(axis=(0, 1, 2), dtype=np.float64).astype(g.dtype)
        return (gx, gw, gb)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    if bias is None:
        return _emit(tape, y, inputs, lambda g: bwd(g)[:2])
    return _emit(tape, y, inputs, bwd)


def compress_channels(
    tape: Tape | None,
    xs: list[Var],
    weight: Parameter,
    col_ranges: list[tuple[int, int]] | None = None,
    bias: Parameter | None = None,
) -> Var:
    """Pointwise 1x1x1 compression of stacked branch outputs.

    Mathematically a 1x1x1 convolution on the channel concat of ``xs``, but
    evaluated branch by branch in the given order: ``weight`` is
    (M, sum Ci, 1, 1, 1) and the column block ``col_ranges[i]`` is applied to
    ``xs[i]``. Callers that store branches in a permuted layout can pass the
    matching column ranges and get arithmetic (hence bits) identical to the
    unpermuted layout. Default ranges are contiguous blocks in ``xs`` order.
    """
    wv = weight.value
    m = wv.shape[0]
    w2 = wv.reshape(m, -1)
    counts = [v.value.shape[-1] for v in xs]
    if col_ranges is None:
        offsets = np.cumsum([0] + counts)
        col_ranges = [(int(offsets[i]), int(offsets[i + 1])) for i in range(len(xs))]
    if sum(counts) != w2.shape[1]:
        raise ShapeError(
            f"compression weight expects {w2.shape[1]} channels, got {sum(counts)}"
        )
    for (c0, c1), cnt in zip(col_ranges, counts):
        if c1 - c0 != cnt:
            raise ShapeError(f"column range ({c0},{c1}) does not cover {cnt} channels")
    dims = xs[0].value.shape[:3]
    for v in xs[1:]:
        if v.value.shape[:3] != dims:
            raise ShapeError("branch outputs must share (B,H,W) dims")
    n = int(np.prod(dims))
    y = np.zeros((n, m), dtype=np.result_type(wv, xs[0].value))
    for (c0, c1), v in zip(col_ranges, xs):
        y += v.value.reshape(n, c1 - c0) @ w2[:, c0:c1].T
    y = y.reshape(dims + (m,))
    if bias is not None:
        y = y + bias.value[None, None, None, :]
    saved = [v.value for v in xs]

    def bwd(g):
        g2 = g.reshape(n, m)
        gxs = []
        gw = np.zeros_like(w2)
        for (c0, c1), xv in zip(col_ranges, saved):
            gxs.append((g2 @ w2[:, c0:c1]).reshape(xv.shape))
            gw[:, c0:c1] = g2.T @ xv.reshape(n, c1 - c0)
        gb = None
        if bias is not None:
            gb = g.sum(axis=(0, 1, 2), dtype=np.float64).astype(g.dtype)
        grads = gxs + [gw.reshape(wv.shape)]
        if bias is not None:
            grads.append(gb)
        return tuple(grads)

    inputs = tuple(xs) + ((weight, bias) if bias is not None else (weight,))
    return _emit(tape, y, inputs, bwd)


def leaky_relu(tape: Tape | None, x: Var, slope: float = 0.2) -> Var:
    v = x.value
    coef = np.where(v >= 0, v.dtype.type(1.0), v.dtype.type(slope))
    y = v * coef

    def bwd(g):
        return (g * coef,)

    return _emit(tape, y, (x,), bwd)


def concat_channels(tape: Tape | None, xs: list[Var]) -> Var:
    counts = [v.value.shape[-1] for v in xs]
    y = np.concatenate([v.value for v in xs], axis=-1)
    offsets = np.cumsum([0] + counts)

    def bwd(g):
        return tuple(
            np.ascontiguousarray(g[..., offsets[i] : offsets[i + 1]])
            for i in range(len(counts))
        )

    return _emit(tape, y, tuple(xs), bwd)


def add(tape: Tape | None, a: Var, b: Var) -> Var:
    if np.shape(a.value) != np.shape(b.value):
        raise ShapeError(f"add shape mismatch: {np.shape(a.value)} vs {np.shape(b.value)}")
    return _emit(tape, a.value + b.value, (a, b), lambda g: (g, g))


def upsample_nearest2x(tape: Tape | None, x: Var) -> Var:
    """Nearest-neighbor x2 upsampling of the two spatial axes of (B,H,W,C)."""
    v = x.value
    y = v.repeat(2, axis=1).repeat(2, axis=2)
    b, h, w, c = v.shape

    def bwd(g):
        return (g.reshape(b, h, 2, w, 2, c).sum(axis=(2, 4)),)

    return _emit(tape, y, (x,), bwd)


def sum_all(tape: Tape | None, x: Var) -> Var:
    v = x.value
    y = np.asarray(v.sum(dtype=np.float64))

    def bwd(g):
        return (np.full_like(v, float(g)),)

    return _emit(tape, y, (x,), bwd)


def l1_loss(tape: Tape | None, pred: Var, target) -> Var:
    """Mean absolute difference over all elements (scalar node)."""
    tv = target.value if isinstance(target, Var) else np.asarray(target)
    pv = pred.value
    if pv.shape != tv.shape:
        raise ShapeError(f"l1_loss shape mismatch: {pv.shape} vs {tv.shape}")
    diff = pv - tv
    y = np.asarray(np.mean(np.abs(diff), dtype=np.float64))
    n = diff.size
    sgn = np.sign(diff)

    def bwd(g):
        gp = (float(g) / n) * sgn
        gp = gp.astype(pv.dtype, copy=False)
        if isinstance(target, Var):
            return (gp, -gp)
        return (gp,)

    inputs = (pred, target) if isinstance(target, Var) else (pred,)
    return _emit(tape, y, inputs, bwd)
