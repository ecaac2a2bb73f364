"""Dense tensors with tape-based reverse-mode differentiation.

A ``Tensor`` wraps a row-major numpy array. Gradients are recorded on an
explicit ``Tape``: while a tape is active (``with Tape() as tape:``) every
operation whose inputs are tracked appends one node, so the node list is
topologically ordered by construction. Outside an active tape, operations
are plain numpy computation with zero bookkeeping, which is what evaluation
mode uses.

Precision is a process-global default (f32 for training, f64 for gradient
verification) switched with `set_default_dtype` / `using_dtype`. Debug mode
adds a finiteness check after every forward op.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

_DTYPES = {"f32": np.float32, "f64": np.float64}
_DTYPE_NAMES = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}

_state = threading.local()


def _tls():
    if not hasattr(_state, "dtype"):
        _state.dtype = np.float32
        _state.debug = False
        _state.tape = None
    return _state


def set_default_dtype(name: str) -> None:
    """Set the dtype used by tensor constructors: 'f32' or 'f64'."""
    if name not in _DTYPES:
        raise ValueError(f"unknown dtype {name!r}, expected 'f32' or 'f64'")
    _tls().dtype = _DTYPES[name]


def default_dtype() -> np.dtype:
    return np.dtype(_tls().dtype)


def default_dtype_name() -> str:
    return _DTYPE_NAMES[default_dtype()]


@contextlib.contextmanager
def using_dtype(name: str):
    """Temporarily switch the default dtype (e.g. 'f64' for grad checks)."""
    old = default_dtype_name()
    set_default_dtype(name)
    try:
        yield
    finally:
        set_default_dtype(old)


def set_debug(flag: bool) -> None:
    """Enable per-op finiteness checks on every forward result."""
    _tls().debug = bool(flag)


def debug_enabled() -> bool:
    return _tls().debug


def active_tape() -> Optional["Tape"]:
    return _tls().tape


class Tensor:
    """Dense n-dimensional array, optionally linked to a gradient tape.

    ``data`` is always a numpy float array. ``_tape``/``_node`` link the
    tensor to the tape node that produced (or watches) it; a tensor with no
    linkage never receives gradient contributions.
    """

    __slots__ = ("data", "_tape", "_node")

    def __init__(self, data, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype if dtype is not None else default_dtype())
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(default_dtype())
        self.data = arr
        self._tape: Optional[Tape] = None
        self._node: Optional[int] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), dtype=self.data.dtype)

    def astype(self, name: str) -> "Tensor":
        return Tensor(self.data.astype(_DTYPES[name]), dtype=_DTYPES[name])

    def tracked_on(self, tape: "Tape") -> bool:
        return self._tape is tape and self._node is not None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={_DTYPE_NAMES[self.dtype]})"

    # Convenience arithmetic; the canonical API is metaseg.autodiff.ops.
    def __add__(self, other):
        from . import ops

        return ops.add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, _lift(other))

    def __rsub__(self, other):
        from . import ops

        return ops.sub(_lift(other), self)

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, _lift(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops

        return ops.div(self, _lift(other))

    def __rtruediv__(self, other):
        from . import ops

        return ops.div(_lift(other), self)

    def __neg__(self):
        from . import ops

        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, _lift(other))


def _lift(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


TensorLike = Union[Tensor, np.ndarray, float, int, Sequence]


class _Node:
    """One recorded op: ids of tracked inputs and a pullback closure.

    ``fn(upstream, needs)`` returns one gradient array per input slot;
    slots whose ``needs`` entry is False may be returned as None.
    """

    __slots__ = ("input_ids", "fn")

    def __init__(self, input_ids, fn):
        self.input_ids = input_ids
        self.fn = fn


class Gradients:
    """Gradient map returned by ``Tape.backward``, keyed by leaf tensor."""

    def __init__(self, table: dict):
        self._table = table  # id(tensor) -> (tensor, grad array)

    def __getitem__(self, t: Tensor) -> np.ndarray:
        try:
            return self._table[id(t)][1]
        except KeyError:
            raise KeyError("tensor is not a watched leaf of this tape") from None

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._table

    def tensors(self) -> Iterable[Tensor]:
        return (t for t, _ in self._table.values())

    def items(self):
        return ((t, g) for t, g in self._table.values())


class Tape:
    """Ordered op recording for one forward pass; inputs precede uses.

    A tape is confined to a single thread. Entering the context makes it
    the active tape for that thread; ops record themselves while active.
    ``backward`` may run after the context has exited.
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._leaves: list[Tensor] = []

    def __enter__(self) -> "Tape":
        tls = _tls()
        if tls.tape is not None:
            raise RuntimeError("a tape is already active on this thread")
        tls.tape = self
        return self

    def __exit__(self, *exc):
        _tls().tape = None
        return False

    def watch(self, t: Tensor) -> Tensor:
        """Register ``t`` as a differentiable leaf of this tape."""
        if t.tracked_on(self):
            return t
        t._tape = self
        t._node = len(self._nodes)
        self._nodes.append(_Node((), None))
        self._leaves.append(t)
        return t

    def record(self, out: Tensor, inputs: Sequence[Tensor], fn: Callable) -> Tensor:
        ids = tuple(t._node if t.tracked_on(self) else None for t in inputs)
        if all(i is None for i in ids):
            return out
        out._tape = self
        out._node = len(self._nodes)
        self._nodes.append(_Node(ids, fn))
        return out

    def __len__(self) -> int:
        return len(self._nodes)

    def backward(self, loss: Tensor) -> Gradients:
        """Reverse-accumulate d(loss)/d(leaf) for every watched leaf.

        Unused leaves get zero gradients. Accumulation order is the fixed
        reverse node order, so repeated runs are bit-identical.
        """
        if loss.ndim != 0 and loss.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
        buf: list[Optional[np.ndarray]] = [None] * len(self._nodes)
        if loss.tracked_on(self):
            buf[loss._node] = np.ones_like(loss.data)
            for nid in range(len(self._nodes) - 1, -1, -1):
                node = self._nodes[nid]
                g = buf[nid]
                if g is None or node.fn is None:
                    continue
                needs = tuple(i is not None for i in node.input_ids)
                contribs = node.fn(g, needs)
                for iid, contrib in zip(node.input_ids, contribs):
                    if iid is None or contrib is None:
                        continue
                    # accumulation always allocates, so aliased views are safe
                    if buf[iid] is None:
                        buf[iid] = contrib
                    else:
                        buf[iid] = buf[iid] + contrib
        table = {}
        for leaf in self._leaves:
            g = buf[leaf._node]
            if g is None:
                g = np.zeros_like(leaf.data)
            table[id(leaf)] = (leaf, np.asarray(g, dtype=leaf.dtype))
        return Gradients(table)


def backward(loss: Tensor) -> Gradients:
    """Run reverse accumulation on the tape that produced ``loss``."""
    if loss._tape is None:
        raise ValueError("loss is not connected to any tape")
    return loss._tape.backward(loss)
