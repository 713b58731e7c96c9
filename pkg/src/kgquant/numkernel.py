"""Dense float64 arrays with reverse-mode gradient accumulation.

A :class:`Tape` logs every differentiable operation executed while it is
active; :func:`backward` replays the log in reverse, accumulating gradients
additively into every buffer that requires them. All arithmetic is 64-bit.
RNG helpers use the counter-based Philox generator so dropout masks and
parameter init replay exactly from a serialized state.
"""

from __future__ import annotations

import numpy as np

from .errors import ParameterError, ShapeError, StateError

_ACTIVE_TAPES: list["Tape"] = []


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


def rng_state_to_jsonable(rng: np.random.Generator) -> dict:
    """Philox state as plain ints/lists so it survives a JSON round trip."""
    state = rng.bit_generator.state
    return {
        "bit_generator": state["bit_generator"],
        "state": {
            "counter": [int(x) for x in state["state"]["counter"]],
            "key": [int(x) for x in state["state"]["key"]],
        },
        "buffer": [int(x) for x in state["buffer"]],
        "buffer_pos": int(state["buffer_pos"]),
        "has_uint32": int(state["has_uint32"]),
        "uinteger": int(state["uinteger"]),
    }


def rng_from_jsonable(payload: dict) -> np.random.Generator:
    rng = np.random.Generator(np.random.Philox(0))
    rng.bit_generator.state = {
        "bit_generator": payload["bit_generator"],
        "state": {
            "counter": np.array(payload["state"]["counter"], dtype=np.uint64),
            "key": np.array(payload["state"]["key"], dtype=np.uint64),
        },
        "buffer": np.array(payload["buffer"], dtype=np.uint64),
        "buffer_pos": payload["buffer_pos"],
        "has_uint32": payload["has_uint32"],
        "uinteger": payload["uinteger"],
    }
    return rng


class NdBuffer:
    """A dense row-major float64 array plus a lazily allocated gradient."""

    __slots__ = ("values", "grad", "requires_grad", "_tape")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def ensure_grad(self) -> np.ndarray:
        if self.grad is None:
            self.grad = np.zeros_like(self.values)
        return self.grad

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item() needs a single-element buffer, got shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"NdBuffer(shape={self.shape}, requires_grad={self.requires_grad})"


def scalar(value: float) -> NdBuffer:
    return NdBuffer(np.array([float(value)]))


class Tape:
    """Ordered operation log; reverse replay accumulates each use exactly once."""

    def __init__(self):
        self.nodes: list[tuple[NdBuffer, object]] = []

    def __enter__(self) -> "Tape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPES.pop()


def _active_tape() -> Tape | None:
    return _ACTIVE_TAPES[-1] if _ACTIVE_TAPES else None


def _record(out: NdBuffer, backward_fn) -> None:
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        out._tape = tape
        tape.nodes.append((out, backward_fn))


def _result(values: np.ndarray, *inputs: NdBuffer) -> NdBuffer:
    out = NdBuffer(values)
    out.requires_grad = any(b.requires_grad for b in inputs)
    return out


def backward(loss: NdBuffer) -> None:
    """Populate grads of every buffer reachable from ``loss`` on its tape."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise StateError("loss was not produced on an active tape")
    loss.grad = np.ones_like(loss.values)
    for out, backward_fn in reversed(tape.nodes):
        if out.grad is not None:
            backward_fn(out.grad)


# ---------------------------------------------------------------------------
# elementwise operations


def _binary_shapes(a: NdBuffer, b: NdBuffer, op: str) -> None:
    # equal shapes or a single-element operand; no other broadcasting
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not match")


def _reduce_to(grad: np.ndarray, target: NdBuffer) -> np.ndarray:
    if grad.shape == target.shape:
        return grad
    return np.sum(grad).reshape(target.shape)


def add(a: NdBuffer, b: NdBuffer) -> NdBuffer:
    _binary_shapes(a, b, "add")
    out = _result(a.values + b.values, a, b)

    def bwd(g):
        if a.requires_grad:
            a.ensure_grad().__iadd__(_reduce_to(g, a))
        if b.requires_grad:
            b.ensure_grad().__iadd__(_reduce_to(g, b))

    _record(out, bwd)
    return out


def sub(a: NdBuffer, b: NdBuffer) -> NdBuffer:
    _binary_shapes(a, b, "sub")
    out = _result(a.values - b.values, a, b)

    def bwd(g):
        if a.requires_grad:
            a.ensure_grad().__iadd__(_reduce_to(g, a))
        if b.requires_grad:
            b.ensure_grad().__iadd__(_reduce_to(-g, b))

    _record(out, bwd)
    return out


def mul(a: NdBuffer, b: NdBuffer) -> NdBuffer:
    _binary_shapes(a, b, "mul")
    out = _result(a.values * b.values, a, b)

    def bwd(g):
        if a.requires_grad:
            a.ensure_grad().__iadd__(_reduce_to(g * b.values, a))
        if b.requires_grad:
            b.ensure_grad().__iadd__(_reduce_to(g * a.values, b))

    _record(out, bwd)
    return out


def sigmoid(x: NdBuffer) -> NdBuffer:
    # tanh form is overflow-safe in both tails
    vals = 0.5 * (1.0 + np.tanh(0.5 * x.values))
    out = _result(vals, x)

    def bwd(g):
        if x.requires_grad:
            x.ensure_grad().__iadd__(g * vals * (1.0 - vals))

    _record(out, bwd)
    return out


def relu(x: NdBuffer) -> NdBuffer:
    out = _result(np.maximum(x.values, 0.0), x)

    def bwd(g):
        if x.requires_grad:
            x.ensure_grad().__iadd__(g * (x.values > 0.0))

    _record(out, bwd)
    return out


def dropout(x: NdBuffer, p: float, train: bool, rng: np.random.Generator) -> NdBuffer:
    """Inverted dropout: zero with probability p, scale survivors by 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout rate must be in [0, 1), got {p}")
    if not train or p == 0.0:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    out = _result(x.values * keep, x)

    def bwd(g):
        if x.requires_grad:
            x.ensure_grad().__iadd__(g * keep)

    _record(out, bwd)
    return out


def stop_gradient(x: NdBuffer, frozen_values: np.ndarray | None = None) -> NdBuffer:
    """Identity forward, zero backward.

    ``frozen_values`` substitutes the forward value; finite-difference
    harnesses use it to hold stop-gradient outputs at a base point so the
    difference quotient measures the same function backprop differentiates.
    """
    vals = x.values.copy() if frozen_values is None else np.asarray(frozen_values, dtype=np.float64)
    if vals.shape != x.shape:
        raise ShapeError(f"frozen values shape {vals.shape} != input shape {x.shape}")
    return NdBuffer(vals)


# ---------------------------------------------------------------------------
# linear algebra and structure ops


def matmul(a: NdBuffer, b: NdBuffer) -> NdBuffer:
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} x {b.shape}")
    out = _result(a.values @ b.values, a, b)

    def bwd(g):
        if a.requires_grad:
            a.ensure_grad().__iadd__(g @ b.values.T)
        if b.requires_grad:
            b.ensure_grad().__iadd__(a.values.T @ g)

    _record(out, bwd)
    return out


def transpose(x: NdBuffer) -> NdBuffer:
    if x.values.ndim != 2:
        raise ShapeError(f"transpose needs a 2-d buffer, got shape {x.shape}")
    out = _result(x.values.T.copy(), x)

    def bwd(g):
        if x.requires_grad:
            x.ensure_grad().__iadd__(g.T)

    _record(out, bwd)
    return out


def reshape(x: NdBuffer, shape: tuple[int, ...]) -> NdBuffer:
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}")
    out = _result(x.values.reshape(shape), x)

    def bwd(g):
        if x.requires_grad:
            x.ensure_grad().__iadd__(g.reshape(x.shape))

    _record(out, bwd)
    return out


def concat(bufs: list[NdBuffer], axis: int = 0) -> NdBuffer:
    out = _result(np.concatenate([b.values for b in bufs], axis=axis), *bufs)
    sizes = [b.shape[axis] for b in bufs]

    def bwd(g):
        offset = 0
        for b, n in zip(bufs, sizes):
            if b.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(offset, offset + n)
                b.ensure_grad().__iadd__(g[tuple(index)])
            offset += n

    _record(out, bwd)
    return out


def gather_rows(table: NdBuffer, idx: np.ndarray) -> NdBuffer:
    """Row lookup ``table[idx]``; backward scatter-adds into the table."""
    if table.values.ndim != 2:
        raise ShapeError(f"gather_rows needs a 2-d table, got shape {table.shape}")
    idx = np.asarray(idx, dtype=np.int64)
    out = _result(table.values[idx], table)

    def bwd(g):
        if table.requires_grad:
            np.add.at(table.ensure_grad(), idx, g)

    _record(out, bwd)
    return out


def scatter_add_rows(src: NdBuffer, idx: np.ndarray, num_rows: int) -> NdBuffer:
    """Sum rows of ``src`` into ``num_rows`` buckets given by ``idx``.

    Summation follows the order of ``idx``, so callers wanting a fixed
    accumulation order sort their index array first.
    """
    if src.values.ndim != 2:
        raise ShapeError(f"scatter_add_rows needs a 2-d source, got shape {src.shape}")
    idx = np.asarray(idx, dtype=np.int64)
    acc = np.zeros((num_rows, src.shape[1]), dtype=np.float64)
    np.add.at(acc, idx, src.values)
    out = _result(acc, src)

    def bwd(g):
        if src.requires_grad:
            src.ensure_grad().__iadd__(g[idx])

    _record(out, bwd)
    return out


def add_bias(x: NdBuffer, bias: NdBuffer) -> NdBuffer:
    """Add a length-n bias to every row of an [m, n] buffer."""
    if x.values.ndim != 2 or bias.values.ndim != 1 or x.shape[1] != bias.shape[0]:
        raise ShapeError(f"add_bias: shapes {x.shape} and {bias.shape} do not match")
    out = _result(x.values + bias.values, x, bias)

    def bwd(g):
        if x.requires_grad:
            x.ensure_grad().__iadd__(g)
        if bias.requires_grad:
            bias.ensure_grad().__iadd__(g.sum(axis=0))

    _record(out, bwd)
    return out


def add_channel_bias(x: NdBuffer, bias: NdBuffer) -> NdBuffer:
    """Add a per-channel bias to a [batch, channels, h, w] buffer."""
    if x.values.ndim != 4 or bias.values.ndim != 1 or x.shape[1] != bias.shape[0]:
        raise ShapeError(f"add_channel_bias: shapes {x.shape} and {bias.shape} do not match")
    out = _result(x.values + bias.values[None, :, None, None], x, bias)

    def bwd(g):
        if x.requires_grad:
            x.ensure_grad().__iadd__(g)
        if bias.requires_grad:
            bias.ensure_grad().__iadd__(g.sum(axis=(0, 2, 3)))

    _record(out, bwd)
    return out


# ---------------------------------------------------------------------------
# convolution


def _conv_geometry(h: int, w: int, kh: int, kw: int, stride: int, padding: int):
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeError(
            f"conv2d: padded input {h + 2 * padding}x{w + 2 * padding} smaller than kernel {kh}x{kw}"
        )
    return oh, ow


def conv2d(x: NdBuffer, kernels: NdBuffer, stride: int = 1, padding: int = 0) -> NdBuffer:
    """Cross-correlation over [C,H,W] or [B,C,H,W] input with [Cout,Cin,kh,kw] kernels."""
    squeeze = x.values.ndim == 3
    xv = x.values[None] if squeeze else x.values
    if xv.ndim != 4 or kernels.values.ndim != 4:
        raise ShapeError(f"conv2d: input shape {x.shape}, kernel shape {kernels.shape}")
    b, c_in, h, w = xv.shape
    c_out, kc, kh, kw = kernels.shape
    if kc != c_in:
        raise ShapeError(f"conv2d: input channels {c_in} != kernel channels {kc}")
    oh, ow = _conv_geometry(h, w, kh, kw, stride, padding)

    padded = np.pad(xv, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((b, c_in, kh, kw, oh, ow), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = padded[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
    col_mat = cols.transpose(0, 4, 5, 1, 2, 3).reshape(b * oh * ow, c_in * kh * kw)
    k_mat = kernels.values.reshape(c_out, -1)
    out_vals = (col_mat @ k_mat.T).reshape(b, oh, ow, c_out).transpose(0, 3, 1, 2)
    out = _result(out_vals[0] if squeeze else out_vals, x, kernels)

    def bwd(g):
        g4 = g[None] if squeeze else g
        g_mat = g4.transpose(0, 2, 3, 1).reshape(b * oh * ow, c_out)
        if kernels.requires_grad:
            kernels.ensure_grad().__iadd__((g_mat.T @ col_mat).reshape(kernels.shape))
        if x.requires_grad:
            dcols = (g_mat @ k_mat).reshape(b, oh, ow, c_in, kh, kw).transpose(0, 3, 4, 5, 1, 2)
            dpad = np.zeros_like(padded)
            for i in range(kh):
                for j in range(kw):
                    dpad[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += dcols[:, :, i, j]
            dx = dpad[:, :, padding : padding + h, padding : padding + w]
            x.ensure_grad().__iadd__(dx[0] if squeeze else dx)

    _record(out, bwd)
    return out


# ---------------------------------------------------------------------------
# reductions


def _check_axis(x: NdBuffer, axis: int | None) -> None:
    if axis is not None and not -x.values.ndim <= axis < x.values.ndim:
        raise ShapeError(f"axis {axis} out of range for shape {x.shape}")


def _expand(g: np.ndarray, shape: tuple[int, ...], axis: int | None) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g.reshape(()), shape)
    return np.broadcast_to(np.expand_dims(g, axis), shape)


def reduce_sum(x: NdBuffer, axis: int | None = None) -> NdBuffer:
    _check_axis(x, axis)
    vals = np.sum(x.values, axis=axis)
    out = _result(vals.reshape(1) if axis is None else vals, x)

    def bwd(g):
        if x.requires_grad:
            x.ensure_grad().__iadd__(_expand(g, x.shape, axis))

    _record(out, bwd)
    return out


def reduce_mean(x: NdBuffer, axis: int | None = None) -> NdBuffer:
    _check_axis(x, axis)
    n = x.size if axis is None else x.shape[axis]
    vals = np.mean(x.values, axis=axis)
    out = _result(vals.reshape(1) if axis is None else vals, x)

    def bwd(g):
        if x.requires_grad:
            x.ensure_grad().__iadd__(_expand(g, x.shape, axis) / n)

    _record(out, bwd)
    return out


def sq_l2_norm(x: NdBuffer, axis: int | None = None) -> NdBuffer:
    """Sum of squared entries, over everything or along one axis."""
    _check_axis(x, axis)
    vals = np.sum(x.values * x.values, axis=axis)
    out = _result(vals.reshape(1) if axis is None else vals, x)

    def bwd(g):
        if x.requires_grad:
            x.ensure_grad().__iadd__(2.0 * x.values * _expand(g, x.shape, axis))

    _record(out, bwd)
    return out


def bce_with_logits_mean(scores: NdBuffer, targets: np.ndarray) -> NdBuffer:
    """Mean binary cross-entropy of sigmoid(scores) against soft targets.

    Computed in logit space (softplus(s) - t*s) so saturated scores stay
    finite.
    """
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != scores.shape:
        raise ShapeError(f"targets shape {t.shape} != scores shape {scores.shape}")
    per = np.logaddexp(0.0, scores.values) - t * scores.values
    out = _result(np.mean(per).reshape(1), scores)

    def bwd(g):
        if scores.requires_grad:
            sig = 0.5 * (1.0 + np.tanh(0.5 * scores.values))
            scores.ensure_grad().__iadd__(g.reshape(()) * (sig - t) / scores.size)

    _record(out, bwd)
    return out


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Adam with an L2 term folded into the gradient and persistent moments."""

    def __init__(
        self,
        params: dict[str, NdBuffer],
        lr: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {name: np.zeros_like(p.values) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.values) for name, p in params.items()}

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            if p.grad is None:
                raise StateError(f"parameter {name!r} has no gradient; run backward first")
            g = p.grad
            if self.weight_decay != 0.0:
                g = g + self.weight_decay * p.values
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * (g * g)
            m_hat = self.m[name] / bc1
            v_hat = self.v[name] / bc2
            p.values -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for name in self.params:
            out[f"m/{name}"] = self.m[name]
            out[f"v/{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], t: int) -> None:
        self.t = t
        for name in self.params:
            self.m[name] = np.array(arrays[f"m/{name}"], dtype=np.float64)
            self.v[name] = np.array(arrays[f"v/{name}"], dtype=np.float64)
