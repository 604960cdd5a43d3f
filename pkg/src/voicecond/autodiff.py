"""Minimal reverse-mode differentiation over dense float64 arrays.

Design: define-by-run. A ``Tape`` records one forward pass; ``Tape.backward``
sweeps it once and accumulates gradients into every reachable ``Tensor`` that
has ``requires_grad`` set. Tapes are cheap and rebuilt per forward pass, which
keeps recurrent unrolling trivial. Shapes are always explicit: there is no
broadcasting, and every mismatch is rejected with both shapes in the message.

A tape and its tensors belong to a single worker. Parameters (leaf tensors)
may be shared read-only across workers that each build their own tapes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ShapeError

Array = np.ndarray


def _as_f64(data) -> Array:
    arr = np.asarray(data, dtype=np.float64)
    return arr


class Tensor:
    """Dense float64 value with an optional gradient buffer of the same shape."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = True, name: str | None = None):
        self.data = _as_f64(data)
        self.grad: Array | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate(self, g: Array) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self) -> str:
        label = self.name or "tensor"
        return f"Tensor({label}, shape={self.data.shape})"


def constant(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=False, name=name)


@dataclass
class LstmParams:
    """One LSTM cell: gate order along the 4H axis is [input, forget, cell, output]."""

    w_x: Tensor  # (D, 4H)
    w_h: Tensor  # (H, 4H)
    b: Tensor  # (4H,)

    @property
    def hidden_size(self) -> int:
        return self.w_h.data.shape[0]

    @property
    def input_size(self) -> int:
        return self.w_x.data.shape[0]


def _sigmoid(x: Array) -> Array:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _log_softmax(x: Array, axis: int) -> Array:
    m = np.max(x, axis=axis, keepdims=True)
    shifted = x - m
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    return shifted - lse


class Tape:
    """Ordered record of one forward pass.

    With ``record=False`` the same ops run inference-only: no nodes are kept
    and ``backward`` is unavailable. Node order is construction order, which
    is a valid topological order by construction.
    """

    def __init__(self, record: bool = True):
        self.record = record
        self._nodes: list[tuple[Tensor, Callable[[Array], None]]] = []

    # -- recording machinery -------------------------------------------------

    def _emit(self, out: Tensor, inputs: Sequence[Tensor], bw: Callable[[Array], None]) -> Tensor:
        out.requires_grad = any(t.requires_grad for t in inputs)
        if self.record and out.requires_grad:
            self._nodes.append((out, bw))
        return out

    def backward(self, loss: Tensor, params: Sequence[Tensor] = ()) -> None:
        """Accumulate d(loss)/d(leaf) into .grad for everything reachable.

        ``params`` may list tensors that must end up with a grad buffer even
        when the loss does not depend on them (they get zeros).
        """
        if not self.record:
            raise ValueError("backward on a non-recording tape")
        if loss.data.shape != ():
            raise ShapeError(f"loss must be scalar, got shape {loss.data.shape}")
        loss.grad = np.ones((), dtype=np.float64)
        for out, bw in reversed(self._nodes):
            if out.grad is None:
                continue
            bw(out.grad)
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)

    # -- primitive operations -------------------------------------------------

    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        ad, bd = a.data, b.data
        if ad.ndim not in (1, 2) or bd.ndim not in (1, 2):
            raise ShapeError(f"matmul expects 1- or 2-d operands, got {ad.shape} @ {bd.shape}")
        if ad.shape[-1] != bd.shape[0]:
            raise ShapeError(f"matmul inner dims differ: {ad.shape} @ {bd.shape}")
        out = Tensor(ad @ bd)

        def bw(g: Array) -> None:
            if a.requires_grad:
                if bd.ndim == 1:
                    ga = np.outer(g, bd) if ad.ndim == 2 else g * bd
                else:
                    ga = (g[None, :] if ad.ndim == 1 else g) @ bd.T
                    if ad.ndim == 1:
                        ga = ga[0]
                a.accumulate(ga)
            if b.requires_grad:
                if ad.ndim == 1:
                    gb = np.outer(ad, g) if bd.ndim == 2 else g * ad
                else:
                    gb = ad.T @ (g[:, None] if bd.ndim == 1 else g)
                    if bd.ndim == 1:
                        gb = gb[:, 0]
                b.accumulate(gb)

        return self._emit(out, (a, b), bw)

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        if a.data.shape != b.data.shape:
            raise ShapeError(f"add shapes differ: {a.data.shape} vs {b.data.shape}")
        out = Tensor(a.data + b.data)

        def bw(g: Array) -> None:
            if a.requires_grad:
                a.accumulate(g)
            if b.requires_grad:
                b.accumulate(g)

        return self._emit(out, (a, b), bw)

    def add_bias(self, mat: Tensor, vec: Tensor) -> Tensor:
        """Row-wise bias: mat (T, D) + vec (D,). Shapes are checked, not broadcast."""
        if mat.data.ndim != 2 or vec.data.ndim != 1 or mat.data.shape[1] != vec.data.shape[0]:
            raise ShapeError(f"add_bias expects (T,D)+(D,), got {mat.data.shape} + {vec.data.shape}")
        out = Tensor(mat.data + vec.data[None, :])

        def bw(g: Array) -> None:
            if mat.requires_grad:
                mat.accumulate(g)
            if vec.requires_grad:
                vec.accumulate(g.sum(axis=0))

        return self._emit(out, (mat, vec), bw)

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        if a.data.shape != b.data.shape:
            raise ShapeError(f"mul shapes differ: {a.data.shape} vs {b.data.shape}")
        out = Tensor(a.data * b.data)

        def bw(g: Array) -> None:
            if a.requires_grad:
                a.accumulate(g * b.data)
            if b.requires_grad:
                b.accumulate(g * a.data)

        return self._emit(out, (a, b), bw)

    def scale(self, x: Tensor, c: float) -> Tensor:
        c = float(c)
        out = Tensor(x.data * c)

        def bw(g: Array) -> None:
            if x.requires_grad:
                x.accumulate(g * c)

        return self._emit(out, (x,), bw)

    def concat(self, parts: Sequence[Tensor], axis: int = 0) -> Tensor:
        if not parts:
            raise ShapeError("concat of zero tensors")
        ndim = parts[0].data.ndim
        for p in parts[1:]:
            if p.data.ndim != ndim:
                raise ShapeError(f"concat rank mismatch: {parts[0].data.shape} vs {p.data.shape}")
        out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
        sizes = [p.data.shape[axis] for p in parts]
        offsets = np.cumsum([0] + sizes)

        def bw(g: Array) -> None:
            for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
                if p.requires_grad:
                    idx = [slice(None)] * g.ndim
                    idx[axis] = slice(lo, hi)
                    p.accumulate(g[tuple(idx)])

        return self._emit(out, tuple(parts), bw)

    def slice(self, x: Tensor, axis: int, start: int, stop: int) -> Tensor:
        n = x.data.shape[axis]
        if not (0 <= start <= stop <= n):
            raise ShapeError(f"slice [{start}:{stop}] outside axis {axis} of shape {x.data.shape}")
        idx = [slice(None)] * x.data.ndim
        idx[axis] = slice(start, stop)
        idx = tuple(idx)
        out = Tensor(x.data[idx].copy())

        def bw(g: Array) -> None:
            if x.requires_grad:
                full = np.zeros_like(x.data)
                full[idx] = g
                x.accumulate(full)

        return self._emit(out, (x,), bw)

    def take_row(self, mat: Tensor, row: int) -> Tensor:
        if mat.data.ndim != 2:
            raise ShapeError(f"take_row expects a matrix, got {mat.data.shape}")
        out = Tensor(mat.data[row].copy())

        def bw(g: Array) -> None:
            if mat.requires_grad:
                if mat.grad is None:
                    mat.grad = np.zeros_like(mat.data)
                mat.grad[row] += g

        return self._emit(out, (mat,), bw)

    def take_index(self, vec: Tensor, i: int) -> Tensor:
        if vec.data.ndim != 1:
            raise ShapeError(f"take_index expects a vector, got {vec.data.shape}")
        out = Tensor(vec.data[i])

        def bw(g: Array) -> None:
            if vec.requires_grad:
                if vec.grad is None:
                    vec.grad = np.zeros_like(vec.data)
                vec.grad[i] += g

        return self._emit(out, (vec,), bw)

    def tile_rows(self, vec: Tensor, n: int) -> Tensor:
        if vec.data.ndim != 1:
            raise ShapeError(f"tile_rows expects a vector, got {vec.data.shape}")
        out = Tensor(np.tile(vec.data, (n, 1)))

        def bw(g: Array) -> None:
            if vec.requires_grad:
                vec.accumulate(g.sum(axis=0))

        return self._emit(out, (vec,), bw)

    def tanh(self, x: Tensor) -> Tensor:
        y = np.tanh(x.data)
        out = Tensor(y)

        def bw(g: Array) -> None:
            if x.requires_grad:
                x.accumulate(g * (1.0 - y * y))

        return self._emit(out, (x,), bw)

    def sigmoid(self, x: Tensor) -> Tensor:
        y = _sigmoid(x.data)
        out = Tensor(y)

        def bw(g: Array) -> None:
            if x.requires_grad:
                x.accumulate(g * y * (1.0 - y))

        return self._emit(out, (x,), bw)

    def softmax(self, x: Tensor, axis: int = -1) -> Tensor:
        y = np.exp(_log_softmax(x.data, axis))
        out = Tensor(y)

        def bw(g: Array) -> None:
            if x.requires_grad:
                dot = np.sum(g * y, axis=axis, keepdims=True)
                x.accumulate(y * (g - dot))

        return self._emit(out, (x,), bw)

    def log_softmax(self, x: Tensor, axis: int = -1) -> Tensor:
        y = _log_softmax(x.data, axis)
        out = Tensor(y)
        sm = np.exp(y)

        def bw(g: Array) -> None:
            if x.requires_grad:
                x.accumulate(g - sm * np.sum(g, axis=axis, keepdims=True))

        return self._emit(out, (x,), bw)

    def sum(self, x: Tensor) -> Tensor:
        out = Tensor(np.sum(x.data))

        def bw(g: Array) -> None:
            if x.requires_grad:
                x.accumulate(np.full_like(x.data, float(g)))

        return self._emit(out, (x,), bw)

    def mean(self, x: Tensor) -> Tensor:
        n = x.data.size
        out = Tensor(np.mean(x.data))

        def bw(g: Array) -> None:
            if x.requires_grad:
                x.accumulate(np.full_like(x.data, float(g) / n))

        return self._emit(out, (x,), bw)

    def conv1d_same(self, seq: Tensor, filters: Tensor) -> Tensor:
        """Same-length 1-d convolution: seq (T,) * filters (K, W) -> (T, K).

        Zero padding of (W-1)//2 left and W//2 right; kernels wider than the
        sequence just see more padding.
        """
        if seq.data.ndim != 1 or filters.data.ndim != 2:
            raise ShapeError(f"conv1d_same expects (T,), (K,W); got {seq.data.shape}, {filters.data.shape}")
        T = seq.data.shape[0]
        K, W = filters.data.shape
        left = (W - 1) // 2
        padded = np.zeros(T + W - 1)
        padded[left : left + T] = seq.data
        windows = np.lib.stride_tricks.sliding_window_view(padded, W)  # (T, W)
        out = Tensor(windows @ filters.data.T)

        def bw(g: Array) -> None:
            if filters.requires_grad:
                filters.accumulate(g.T @ windows)
            if seq.requires_grad:
                dwin = g @ filters.data  # (T, W)
                dpad = np.zeros(T + W - 1)
                for j in range(W):
                    dpad[j : j + T] += dwin[:, j]
                seq.accumulate(dpad[left : left + T])

        return self._emit(out, (seq, filters), bw)

    # -- recurrent cells -------------------------------------------------------

    def lstm_step(self, params: LstmParams, x: Tensor, state: tuple[Tensor, Tensor]) -> tuple[Tensor, Tensor]:
        """One LSTM cell step on vectors: x (D,), state ((H,), (H,)) -> (h', c')."""
        h_prev, c_prev = state
        H = params.hidden_size
        if x.data.shape != (params.input_size,):
            raise ShapeError(f"lstm_step input shape {x.data.shape}, expected ({params.input_size},)")
        if h_prev.data.shape != (H,) or c_prev.data.shape != (H,):
            raise ShapeError(
                f"lstm_step state shapes {h_prev.data.shape}/{c_prev.data.shape}, expected ({H},)"
            )
        z = x.data @ params.w_x.data + h_prev.data @ params.w_h.data + params.b.data
        i = _sigmoid(z[:H])
        f = _sigmoid(z[H : 2 * H])
        g_ = np.tanh(z[2 * H : 3 * H])
        o = _sigmoid(z[3 * H :])
        c = f * c_prev.data + i * g_
        tc = np.tanh(c)
        h = o * tc
        out_h = Tensor(h)
        out_c = Tensor(c)

        def bw_c(gc: Array) -> None:
            _lstm_cell_backward(params, x, h_prev, c_prev, i, f, g_, o, tc, np.zeros_like(gc), gc)

        def bw_h(gh: Array) -> None:
            _lstm_cell_backward(params, x, h_prev, c_prev, i, f, g_, o, tc, gh, np.zeros_like(gh))

        inputs = (x, h_prev, c_prev, params.w_x, params.w_h, params.b)
        self._emit(out_c, inputs, bw_c)
        self._emit(out_h, inputs, bw_h)
        return out_h, out_c

    def lstm_sequence(self, zx: Tensor, w_h: Tensor, reverse: bool = False) -> Tensor:
        """Unrolled LSTM over precomputed input preactivations, zero initial state.

        zx (T, 4H) holds x_t @ W_x + b for every frame; w_h is (H, 4H). Output
        row t is the hidden state after consuming frame t, scanning right to
        left when ``reverse``. Fused into one tape node so long sequences do
        not pay per-step recording overhead.
        """
        T, four_h = zx.data.shape
        H = w_h.data.shape[0]
        if four_h != 4 * H or w_h.data.shape != (H, 4 * H):
            raise ShapeError(f"lstm_sequence shapes: zx {zx.data.shape}, w_h {w_h.data.shape}")
        order = range(T - 1, -1, -1) if reverse else range(T)
        i_s = np.empty((T, H))
        f_s = np.empty((T, H))
        g_s = np.empty((T, H))
        o_s = np.empty((T, H))
        c_s = np.empty((T, H))
        tc_s = np.empty((T, H))
        hs = np.empty((T, H))
        h = np.zeros(H)
        c = np.zeros(H)
        whd = w_h.data
        zxd = zx.data
        for t in order:
            z = zxd[t] + h @ whd
            i = _sigmoid(z[:H])
            f = _sigmoid(z[H : 2 * H])
            g_ = np.tanh(z[2 * H : 3 * H])
            o = _sigmoid(z[3 * H :])
            c = f * c + i * g_
            tc = np.tanh(c)
            h = o * tc
            i_s[t], f_s[t], g_s[t], o_s[t], c_s[t], tc_s[t], hs[t] = i, f, g_, o, c, tc, h
        out = Tensor(hs)

        def bw(g_out: Array) -> None:
            dzx = np.zeros_like(zxd) if zx.requires_grad else None
            dwh = np.zeros_like(whd) if w_h.requires_grad else None
            dh_next = np.zeros(H)
            dc_next = np.zeros(H)
            steps = list(order)
            for k in range(T - 1, -1, -1):
                t = steps[k]
                t_prev = steps[k - 1] if k > 0 else None
                dh = g_out[t] + dh_next
                i, f, g_, o, tc = i_s[t], f_s[t], g_s[t], o_s[t], tc_s[t]
                do = dh * tc
                dc = dc_next + dh * o * (1.0 - tc * tc)
                c_prev = c_s[t_prev] if t_prev is not None else np.zeros(H)
                di = dc * g_
                df = dc * c_prev
                dg = dc * i
                dc_next = dc * f
                dz = np.concatenate(
                    [di * i * (1 - i), df * f * (1 - f), dg * (1 - g_ * g_), do * o * (1 - o)]
                )
                if dzx is not None:
                    dzx[t] = dz
                h_prev = hs[t_prev] if t_prev is not None else np.zeros(H)
                if dwh is not None:
                    dwh += np.outer(h_prev, dz)
                dh_next = whd @ dz
            if zx.requires_grad:
                zx.accumulate(dzx)
            if w_h.requires_grad:
                w_h.accumulate(dwh)

        return self._emit(out, (zx, w_h), bw)

    def custom(self, out: Tensor, inputs: Sequence[Tensor], bw: Callable[[Array], None]) -> Tensor:
        """Record an externally computed op with a hand-written backward."""
        return self._emit(out, inputs, bw)


def _lstm_cell_backward(params, x, h_prev, c_prev, i, f, g_, o, tc, dh, dc_in):
    do = dh * tc
    dc = dc_in + dh * o * (1.0 - tc * tc)
    di = dc * g_
    df = dc * c_prev.data
    dg = dc * i
    dz = np.concatenate([di * i * (1 - i), df * f * (1 - f), dg * (1 - g_ * g_), do * o * (1 - o)])
    if c_prev.requires_grad:
        c_prev.accumulate(dc * f)
    if x.requires_grad:
        x.accumulate(params.w_x.data @ dz)
    if h_prev.requires_grad:
        h_prev.accumulate(params.w_h.data @ dz)
    if params.w_x.requires_grad:
        params.w_x.accumulate(np.outer(x.data, dz))
    if params.w_h.requires_grad:
        params.w_h.accumulate(np.outer(h_prev.data, dz))
    if params.b.requires_grad:
        params.b.accumulate(dz)


_OP_KINDS = (
    "matmul",
    "add",
    "mul",
    "concat",
    "slice",
    "tanh",
    "sigmoid",
    "softmax",
    "log_softmax",
    "sum",
    "mean",
    "scale",
)


def forward_op(tape: Tape, kind: str, *inputs: Tensor, **kwargs) -> Tensor:
    """Dispatch a primitive by name. Supported kinds: {}.""".format(", ".join(_OP_KINDS))
    if kind not in _OP_KINDS:
        raise ValueError(f"unknown op kind {kind!r}")
    if kind == "concat":
        return tape.concat(list(inputs), **kwargs)
    return getattr(tape, kind)(*inputs, **kwargs)
