"""Tape-based reverse-mode automatic differentiation over dense float64 arrays.

The primitive set is deliberately small and closed: everything the network and
the flow need, nothing more, so every vjp rule can be tested exhaustively
against finite differences.  Rules are themselves written in terms of the
primitives, which makes a replayed backward pass differentiable again; that is
what lets the training loss contain vector-Jacobian products (stochastic trace
and Frobenius-norm estimates) and still receive exact gradients.

All arrays are float64.  A Tensor is immutable by convention once created;
optimizer updates mutate leaf ``data`` in place between tapes.
"""

from __future__ import annotations

import json
import threading

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "Gradients",
    "ParameterStore",
    "ShapeError",
    "TapeError",
    "active_tape",
    "constant",
    "add",
    "sub",
    "mul",
    "scalar_mul",
    "neg",
    "matmul",
    "transpose",
    "concat",
    "slice_axis",
    "pad_axis",
    "sum_all",
    "mean_all",
    "expand_scalar",
    "gather",
    "segment_sum",
    "exp",
    "log",
    "sqrt",
    "square",
    "sigmoid",
    "swish",
    "softmax",
    "dot_all",
    "backward",
    "vjp",
    "check_gradients",
]

# Set to True (e.g. in tests) to assert finiteness after every primitive.
DEBUG_CHECK_FINITE = False


class ShapeError(ValueError):
    """Incompatible shapes passed to a primitive."""


class TapeError(RuntimeError):
    """Invalid tape operation: non-scalar root, node from a foreign tape."""


_STATE = threading.local()


def _tapes() -> list:
    if not hasattr(_STATE, "stack"):
        _STATE.stack = []
        _STATE.pause = 0
    return _STATE.stack


def active_tape():
    """The innermost open Tape on this thread, or None."""
    stack = _tapes()
    return stack[-1] if stack else None


class _PauseRecording:
    def __enter__(self):
        _tapes()  # ensure state exists
        _STATE.pause += 1
        return self

    def __exit__(self, *exc):
        _STATE.pause -= 1
        return False


class Tensor:
    """Dense float64 array, optionally tracked as the output of a tape record."""

    __slots__ = ("data", "tape", "index")

    def __init__(self, data, tape=None, index=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.index = index

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return self.data.item()

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"


def constant(data) -> Tensor:
    """A leaf tensor that never receives a gradient of interest."""
    return Tensor(np.asarray(data, dtype=np.float64))


class Tape:
    """Append-only record of primitive applications, one per forward pass.

    Used as a context manager; primitives executed inside record themselves.
    Distinct tapes may run on distinct threads, a single tape is not
    thread-safe.
    """

    __slots__ = ("records",)

    def __init__(self):
        self.records = []

    def __enter__(self):
        _tapes().append(self)
        return self

    def __exit__(self, *exc):
        popped = _tapes().pop()
        if popped is not self:  # pragma: no cover - misuse guard
            raise TapeError("tape context exited out of order")
        return False

    def __len__(self):
        return len(self.records)


def _apply(op: str, inputs: tuple, out_data: np.ndarray, aux=None) -> Tensor:
    if DEBUG_CHECK_FINITE and not np.all(np.isfinite(out_data)):
        raise FloatingPointError(f"{op}: non-finite output")
    tape = active_tape()
    if tape is None or _STATE.pause:
        return Tensor(out_data)
    out = Tensor(out_data, tape=tape, index=len(tape.records))
    tape.records.append((op, inputs, out, aux))
    return out


# ---------------------------------------------------------------------------
# primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: {a.shape} vs {b.shape}")
    return _apply("add", (a, b), a.data + b.data)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub: {a.shape} vs {b.shape}")
    return _apply("sub", (a, b), a.data - b.data)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: {a.shape} vs {b.shape}")
    return _apply("mul", (a, b), a.data * b.data)


def scalar_mul(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _apply("scalar_mul", (a,), a.data * c, aux=c)


def neg(a: Tensor) -> Tensor:
    return scalar_mul(a, -1.0)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    return _apply("matmul", (a, b), a.data @ b.data)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected 2-d, got {a.shape}")
    return _apply("transpose", (a,), np.ascontiguousarray(a.data.T))


def concat(parts, axis: int) -> Tensor:
    parts = tuple(parts)
    if not parts:
        raise ShapeError("concat: no inputs")
    nd = parts[0].data.ndim
    if nd not in (1, 2) or axis not in (0, 1) or axis >= nd:
        raise ShapeError(f"concat: axis {axis} on ndim {nd}")
    for p in parts[1:]:
        if p.data.ndim != nd:
            raise ShapeError(f"concat: mixed ndim {[q.shape for q in parts]}")
    sizes = tuple(p.shape[axis] for p in parts)
    out = np.concatenate([p.data for p in parts], axis=axis)
    return _apply("concat", parts, out, aux=(axis, sizes))


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    if axis == 0:
        out = a.data[start:stop]
    elif axis == 1:
        out = a.data[:, start:stop]
    else:
        raise ShapeError(f"slice_axis: axis {axis}")
    return _apply("slice_axis", (a,), np.ascontiguousarray(out),
                  aux=(axis, start, stop, a.shape[axis]))


def pad_axis(a: Tensor, axis: int, before: int, total: int) -> Tensor:
    """Zero-pad along axis so the slice [before:before+n] recovers the input."""
    shape = list(a.shape)
    n = shape[axis]
    shape[axis] = total
    out = np.zeros(shape)
    if axis == 0:
        out[before:before + n] = a.data
    elif axis == 1:
        out[:, before:before + n] = a.data
    else:
        raise ShapeError(f"pad_axis: axis {axis}")
    return _apply("pad_axis", (a,), out, aux=(axis, before, n))


def sum_all(a: Tensor) -> Tensor:
    return _apply("sum_all", (a,), np.asarray(a.data.sum()), aux=a.shape)


def mean_all(a: Tensor) -> Tensor:
    return scalar_mul(sum_all(a), 1.0 / a.size)


def expand_scalar(a: Tensor, shape) -> Tensor:
    if a.size != 1:
        raise ShapeError(f"expand_scalar: input has shape {a.shape}")
    return _apply("expand_scalar", (a,), np.full(shape, float(a.data)),
                  aux=tuple(shape))


def gather(a: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError("gather: index list must be 1-d")
    return _apply("gather", (a,), a.data[idx], aux=(idx, a.shape[0]))


def segment_sum(a: Tensor, segments, num_segments: int) -> Tensor:
    """Scatter-add rows of ``a`` into ``num_segments`` buckets."""
    segments = np.asarray(segments, dtype=np.intp)
    if segments.ndim != 1 or segments.shape[0] != a.shape[0]:
        raise ShapeError(f"segment_sum: {a.shape[0]} rows vs {segments.shape} ids")
    out = np.zeros((num_segments,) + a.shape[1:])
    np.add.at(out, segments, a.data)
    return _apply("segment_sum", (a,), out, aux=(segments, num_segments))


def exp(a: Tensor) -> Tensor:
    return _apply("exp", (a,), np.exp(a.data))


def log(a: Tensor) -> Tensor:
    return _apply("log", (a,), np.log(a.data))


def sqrt(a: Tensor) -> Tensor:
    return _apply("sqrt", (a,), np.sqrt(a.data))


def square(a: Tensor) -> Tensor:
    return mul(a, a)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _apply("sigmoid", (a,), out)


def swish(a: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    return mul(a, sigmoid(a))


def softmax(a: Tensor, axis: int) -> Tensor:
    if a.data.ndim != 2 or axis not in (0, 1):
        raise ShapeError(f"softmax: axis {axis} on shape {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    return _apply("softmax", (a,), out, aux=axis)


def dot_all(a: Tensor, b: Tensor) -> Tensor:
    """Sum of the elementwise product; the scalar pairing used everywhere."""
    return sum_all(mul(a, b))


# ---------------------------------------------------------------------------
# vjp rules
#
# Each rule maps (inputs, output, cotangent, aux) to one cotangent per input
# (None where no gradient flows).  Rules call the primitives above, so a rule
# executed while a tape is active is itself recorded and differentiable.


def _rule_add(inputs, out, ct, aux):
    return (ct, ct)


def _rule_sub(inputs, out, ct, aux):
    return (ct, neg(ct))


def _rule_mul(inputs, out, ct, aux):
    a, b = inputs
    return (mul(ct, b), mul(ct, a))


def _rule_scalar_mul(inputs, out, ct, aux):
    return (scalar_mul(ct, aux),)


def _rule_matmul(inputs, out, ct, aux):
    a, b = inputs
    return (matmul(ct, transpose(b)), matmul(transpose(a), ct))


def _rule_transpose(inputs, out, ct, aux):
    return (transpose(ct),)


def _rule_concat(inputs, out, ct, aux):
    axis, sizes = aux
    cts = []
    offset = 0
    for n in sizes:
        cts.append(slice_axis(ct, axis, offset, offset + n))
        offset += n
    return tuple(cts)


def _rule_slice_axis(inputs, out, ct, aux):
    axis, start, stop, total = aux
    return (pad_axis(ct, axis, start, total),)


def _rule_pad_axis(inputs, out, ct, aux):
    axis, before, n = aux
    return (slice_axis(ct, axis, before, before + n),)


def _rule_sum_all(inputs, out, ct, aux):
    return (expand_scalar(ct, aux),)


def _rule_expand_scalar(inputs, out, ct, aux):
    s = sum_all(ct)
    if inputs[0].shape != s.shape:
        s = _apply("_reshape", (s,), s.data.reshape(inputs[0].shape),
                   aux=s.shape)
    return (s,)


def _rule_reshape(inputs, out, ct, aux):
    return (_apply("_reshape", (ct,), ct.data.reshape(inputs[0].shape),
                   aux=ct.shape),)


def _rule_gather(inputs, out, ct, aux):
    idx, n_rows = aux
    return (segment_sum(ct, idx, n_rows),)


def _rule_segment_sum(inputs, out, ct, aux):
    segments, _ = aux
    return (gather(ct, segments),)


def _rule_exp(inputs, out, ct, aux):
    return (mul(ct, out),)


def _rule_log(inputs, out, ct, aux):
    # d/dx log x = 1/x = exp(-log x); reuses the recorded output.
    return (mul(ct, exp(neg(out))),)


def _rule_sqrt(inputs, out, ct, aux):
    # d/dx sqrt x = 0.5 / sqrt x
    return (scalar_mul(mul(ct, exp(neg(log(out)))), 0.5),)


def _rule_sigmoid(inputs, out, ct, aux):
    one = constant(np.ones(out.shape))
    return (mul(mul(ct, out), sub(one, out)),)


def _rule_softmax(inputs, out, ct, aux):
    # Jacobian-vector identity: s * (ct - sum(ct * s, axis)), no dense Jacobian.
    axis = aux
    n = out.shape[axis]
    t = mul(ct, out)
    if axis == 1:
        inner = matmul(matmul(t, constant(np.ones((n, 1)))),
                       constant(np.ones((1, n))))
    else:
        inner = matmul(constant(np.ones((n, 1))),
                       matmul(constant(np.ones((1, n))), t))
    return (mul(out, sub(ct, inner)),)


_RULES = {
    "add": _rule_add,
    "sub": _rule_sub,
    "mul": _rule_mul,
    "scalar_mul": _rule_scalar_mul,
    "matmul": _rule_matmul,
    "transpose": _rule_transpose,
    "concat": _rule_concat,
    "slice_axis": _rule_slice_axis,
    "pad_axis": _rule_pad_axis,
    "sum_all": _rule_sum_all,
    "expand_scalar": _rule_expand_scalar,
    "_reshape": _rule_reshape,
    "gather": _rule_gather,
    "segment_sum": _rule_segment_sum,
    "exp": _rule_exp,
    "log": _rule_log,
    "sqrt": _rule_sqrt,
    "sigmoid": _rule_sigmoid,
    "softmax": _rule_softmax,
}


def _walk(tape: Tape, seeds: dict, start: int, stop: int) -> dict:
    """Reverse-accumulate cotangents over records[start:stop]."""
    table = seeds
    for rec_index in range(stop - 1, start - 1, -1):
        op, inputs, out, aux = tape.records[rec_index]
        ct = table.get(id(out))
        if ct is None:
            continue
        for inp, c in zip(inputs, _RULES[op](inputs, out, ct, aux)):
            if c is None:
                continue
            key = id(inp)
            prev = table.get(key)
            table[key] = c if prev is None else add(prev, c)
    return table


class Gradients:
    """Result of a backward pass; unreached leaves read as zeros."""

    def __init__(self, table: dict):
        self._table = table

    def wrt(self, t: Tensor) -> np.ndarray:
        g = self._table.get(id(t))
        return np.zeros(t.shape) if g is None else g.data


def backward(tape: Tape, root: Tensor) -> Gradients:
    """Gradients of a scalar root with respect to every tape leaf.

    Deterministic: identical tapes give bit-identical gradients.  Recording is
    paused while the rules replay, so the result is plain values.
    """
    if root.size != 1:
        raise TapeError(f"backward: root must be scalar, got shape {root.shape}")
    if root.tape is not tape:
        raise TapeError("backward: root was not produced on this tape")
    seeds = {id(root): constant(np.ones(root.shape))}
    with _PauseRecording():
        table = _walk(tape, seeds, 0, root.index + 1)
    return Gradients(table)


def vjp(tape: Tape, outputs: Tensor, cotangent: Tensor, wrt: Tensor) -> Tensor:
    """cotangent^T (d outputs / d wrt), treating ``wrt`` as an independent input.

    Propagation stops at ``wrt``: its own history is not entered, which is
    exactly the partial derivative the Hutchinson estimators need.  When a
    tape is active the replay is recorded, so the result is differentiable.
    """
    if outputs.tape is not tape:
        raise TapeError("vjp: outputs were not produced on this tape")
    if wrt.tape is not None and wrt.tape is not tape:
        raise TapeError("vjp: named input is not on this tape")
    if cotangent.shape != outputs.shape:
        raise ShapeError(
            f"vjp: cotangent {cotangent.shape} vs outputs {outputs.shape}")
    start = wrt.index + 1 if wrt.tape is tape and wrt.index is not None else 0
    table = _walk(tape, {id(outputs): cotangent}, start, outputs.index + 1)
    g = table.get(id(wrt))
    return constant(np.zeros(wrt.shape)) if g is None else g


def check_gradients(fn, params, coords=None, h: float = 1e-5) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``fn`` must be a deterministic closure over ``params`` returning a scalar
    Tensor.  ``coords`` selects (param_index, flat_index) pairs; all
    coordinates when omitted.  Coordinates where both gradients are below
    1e-10 in magnitude count as exact.
    """
    params = list(params)
    with Tape() as tape:
        y = fn()
    grads = backward(tape, y)
    analytic = [grads.wrt(p) for p in params]

    if coords is None:
        coords = [(pi, fi) for pi, p in enumerate(params)
                  for fi in range(p.size)]

    def value() -> float:
        with Tape():
            return fn().item()

    worst = 0.0
    for pi, fi in coords:
        flat = params[pi].data.reshape(-1)
        keep = flat[fi]
        flat[fi] = keep + h
        up = value()
        flat[fi] = keep - h
        down = value()
        flat[fi] = keep
        numeric = (up - down) / (2.0 * h)
        a = float(analytic[pi].reshape(-1)[fi])
        denom = max(abs(a), abs(numeric))
        if denom < 1e-10:
            continue
        worst = max(worst, abs(a - numeric) / denom)
    return worst


class ParameterStore:
    """Named leaf tensors with deterministic iteration order.

    Serializes to JSON (shape plus row-major values); Python float repr is
    shortest-roundtrip, so save/load round-trips bit-exactly.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, data) -> Tensor:
        if name in self._params:
            raise ValueError(f"parameter {name!r} already registered")
        t = Tensor(np.array(data, dtype=np.float64))
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def tensors(self):
        return list(self._params.values())

    def state_dict(self) -> dict:
        return {
            name: {"shape": list(t.shape), "data": t.data.reshape(-1).tolist()}
            for name, t in self._params.items()
        }

    def load_state_dict(self, state: dict) -> None:
        for name, entry in state.items():
            arr = np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
            if name in self._params:
                self._params[name].data = arr
            else:
                self.add(name, arr)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.state_dict(), fh)

    def load(self, path) -> None:
        with open(path) as fh:
            self.load_state_dict(json.load(fh))
