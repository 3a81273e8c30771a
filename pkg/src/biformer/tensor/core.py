"""Tensor value types, the recording tape, and the MAC counter.

Storage is a row-major contiguous numpy array that is frozen (non-writeable)
once wrapped, so no operation can mutate its inputs.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from ..errors import DimensionError, IndexOutOfRange

DTYPES = (np.dtype(np.float32), np.dtype(np.float64))
DEFAULT_DTYPE = np.dtype(np.float32)


def _check_extents(shape: tuple[int, ...]) -> None:
    if 0 in shape:
        raise DimensionError(f"all extents must be >= 1, got shape {shape}")


class Tensor:
    """Dense n-dimensional array of float32 or float64 scalars.

    ``Tensor(data)`` always copies. Plain Python data defaults to single
    precision; numpy float arrays keep their precision unless ``dtype`` is
    given.
    """

    __slots__ = ("data", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, data, dtype=None):
        if dtype is None:
            if isinstance(data, (np.ndarray, np.generic)) and data.dtype in DTYPES:
                dtype = data.dtype
            else:
                dtype = DEFAULT_DTYPE
        dtype = np.dtype(dtype)
        if dtype not in DTYPES:
            raise TypeError(f"unsupported dtype {dtype}; use float32 or float64")
        arr = np.array(data, dtype=dtype, copy=True, order="C")
        _check_extents(arr.shape)
        arr.setflags(write=False)
        self.data = arr

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        """Adopt a freshly computed array without copying it."""
        t = object.__new__(cls)
        arr = np.ascontiguousarray(arr)
        _check_extents(arr.shape)
        arr.setflags(write=False)
        t.data = arr
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.size != 1:
            raise DimensionError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def tolist(self):
        return self.data.tolist()

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data, dtype=dtype)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name})"

    def __len__(self) -> int:
        return self.shape[0]

    # Arithmetic sugar; the differentiable rules live in ops.
    def __add__(self, other):
        from . import ops
        return ops.add(self, _as_tensor(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, _as_tensor(other, self.dtype))

    def __mul__(self, other):
        from . import ops
        if np.isscalar(other):
            return ops.scale(self, float(other))
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)


def _as_tensor(x, dtype) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.full((), x), dtype=dtype)


class IndexTensor:
    """Non-negative integer tensor, e.g. a routing index matrix."""

    __slots__ = ("data",)

    def __init__(self, data):
        arr = np.array(data, dtype=np.int64, copy=True)
        _check_extents(arr.shape)
        if arr.size and arr.min() < 0:
            raise IndexOutOfRange(f"negative index {int(arr.min())}")
        arr.setflags(write=False)
        self.data = arr

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def tolist(self):
        return self.data.tolist()

    def __eq__(self, other):
        if not isinstance(other, IndexTensor):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self.data, other.data))

    def __repr__(self) -> str:
        return f"IndexTensor({self.data.tolist()})"


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

VJP = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: VJP


@dataclass
class Tape:
    """Records differentiable ops on watched tensors while active.

    Only the innermost active tape records. Nodes are appended in execution
    order, which is already a topological order.
    """

    nodes: list[Node] = field(default_factory=list)
    notes: dict = field(default_factory=dict)
    _tracked: dict = field(default_factory=dict, repr=False)

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def watch(self, *tensors: Tensor) -> None:
        for t in tensors:
            self._tracked[id(t)] = t

    def is_tracked(self, t: Tensor) -> bool:
        return id(t) in self._tracked

    def record(self, op: str, inputs: tuple[Tensor, ...], output: Tensor, vjp: VJP) -> None:
        self.nodes.append(Node(op, inputs, output, vjp))
        self._tracked[id(output)] = output

    def note_min(self, key: str, value: float) -> None:
        self.notes[key] = min(self.notes.get(key, float("inf")), value)

    def gradient(self, target: Tensor, sources: Sequence[Tensor]) -> list[np.ndarray]:
        """Vector-Jacobian product of a scalar ``target`` w.r.t. ``sources``.

        Sources the target does not depend on get a zero gradient.
        """
        if target.size != 1:
            raise DimensionError(f"gradient target must be scalar, got shape {target.shape}")
        keep = {id(s) for s in sources}
        grads: dict[int, np.ndarray] = {id(target): np.ones_like(target.data)}
        for node in reversed(self.nodes):
            out_id = id(node.output)
            g = grads.get(out_id) if out_id in keep else grads.pop(out_id, None)
            if g is None:
                continue
            in_grads = node.vjp(g)
            for inp, gi in zip(node.inputs, in_grads):
                if gi is None or not self.is_tracked(inp):
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = np.asarray(gi, dtype=inp.dtype).reshape(inp.shape)
        return [grads.get(id(s), np.zeros_like(s.data)) for s in sources]


_TAPES: list[Tape] = []


def current_tape() -> Optional[Tape]:
    return _TAPES[-1] if _TAPES else None


@contextlib.contextmanager
def no_tape() -> Iterator[None]:
    """Suspend recording, e.g. for the non-differentiable routing branch."""
    saved = _TAPES[:]
    _TAPES.clear()
    try:
        yield
    finally:
        _TAPES.extend(saved)


# ---------------------------------------------------------------------------
# Multiply-accumulate accounting
# ---------------------------------------------------------------------------


@dataclass
class MacCounter:
    """Tallies multiply-accumulates per named scope while active."""

    totals: dict = field(default_factory=dict)

    def add(self, scope: str, macs: int) -> None:
        self.totals[scope] = self.totals.get(scope, 0) + int(macs)

    @property
    def total(self) -> int:
        return sum(self.totals.values())


_COUNTERS: list[MacCounter] = []
_SCOPES: list[tuple[str, int]] = [("other", 1)]


@contextlib.contextmanager
def count_macs() -> Iterator[MacCounter]:
    counter = MacCounter()
    _COUNTERS.append(counter)
    try:
        yield counter
    finally:
        _COUNTERS.remove(counter)


@contextlib.contextmanager
def mac_scope(name: str, weight: int = 1) -> Iterator[None]:
    """Attribute MACs issued inside the block to ``name``, times ``weight``."""
    _SCOPES.append((name, weight))
    try:
        yield
    finally:
        _SCOPES.pop()


def report_macs(macs: int) -> None:
    if _COUNTERS:
        name, weight = _SCOPES[-1]
        for c in _COUNTERS:
            c.add(name, macs * weight)
