"""Tensor container, reverse-mode tape and the named parameter registry."""

from __future__ import annotations

import contextvars
import zlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from ..errors import ConfigError, NumericalError

DEFAULT_DTYPE = np.float64

_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "mgtanet_active_tape", default=None
)


class Tensor:
    """Dense row-major array plus an optional gradient buffer.

    Tensors produced by ops are treated as immutable values. ``requires_grad``
    marks leaves (parameters) and everything computed from them while a
    :class:`Tape` is active.
    """

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    # Arithmetic sugar; the implementations live in ops.
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


@dataclass
class Node:
    op: str
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of executed primitives.

    Use as a context manager; every op executed inside the block whose inputs
    require gradients is appended in execution order. :meth:`backward` replays
    the record in exact reverse order and accumulates into leaf ``.grad``.
    """

    def __init__(self, record_patterns: bool = False):
        self.nodes: list[Node] = []
        self.record_patterns = record_patterns
        # Discrete branch decisions (relu masks, argmax picks, sample cells);
        # used by gradcheck to reject probes that straddle a kink.
        self.patterns: list[bytes] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor, grad: np.ndarray | None = None,
                 visit: Callable[[Node], None] | None = None) -> None:
        if grad is None:
            if loss.size != 1:
                raise ValueError(f"backward needs an explicit grad for non-scalar output {loss.shape}")
            grad = np.ones_like(loss.data)
        grads: dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=loss.dtype)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            if visit is not None:
                visit(node)
            in_grads = node.backward(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        # whatever is left belongs to leaves
        for node in self.nodes:
            for t in node.inputs:
                g = grads.pop(id(t), None)
                if g is not None:
                    _accumulate_leaf(t, g)
        if id(loss) in grads:
            _accumulate_leaf(loss, grads.pop(id(loss)))


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.dtype, copy=True)
    else:
        t.grad += g


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE.get()


def record(op: str, out_data: np.ndarray, inputs: Sequence[Tensor],
           backward: Callable[[np.ndarray], Sequence[np.ndarray | None]],
           pattern: Callable[[], bytes] | None = None) -> Tensor:
    """Wrap ``out_data`` as a Tensor and log the op on the active tape."""
    if not np.all(np.isfinite(out_data)):
        raise NumericalError(f"non-finite values produced by {op}")
    tape = _ACTIVE_TAPE.get()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        tape.nodes.append(Node(op, out, tuple(inputs), backward))
    if tape is not None and tape.record_patterns and pattern is not None:
        tape.patterns.append(pattern())
    return out


@dataclass
class ParamStore:
    """Named learnable tensors with gradient buffers and optimizer state.

    Initial values depend only on ``(rng_seed, name)``, so two stores built
    from the same seed hold bitwise-identical parameters regardless of which
    other parameters they contain.
    """

    rng_seed: int = 0
    dtype: type = DEFAULT_DTYPE
    params: dict[str, Tensor] = field(default_factory=dict)
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def rng_for(self, name: str) -> np.random.Generator:
        return np.random.default_rng([self.rng_seed, zlib.crc32(name.encode("utf-8"))])

    def add(self, name: str, shape: Sequence[int], init: str = "uniform",
            fan_in: int | None = None, value: float = 0.0) -> Tensor:
        if name in self.params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        shape = tuple(int(s) for s in shape)
        if init == "uniform":
            fan = fan_in if fan_in is not None else (shape[0] if len(shape) else 1)
            bound = np.sqrt(1.0 / max(fan, 1))
            data = self.rng_for(name).uniform(-bound, bound, size=shape)
        elif init == "zeros":
            data = np.zeros(shape)
        elif init == "ones":
            data = np.ones(shape)
        elif init == "const":
            data = np.full(shape, value)
        elif init == "identity":
            if len(shape) != 2 or shape[0] != shape[1]:
                raise ConfigError(f"identity init needs a square matrix, got {shape}")
            data = np.eye(shape[0])
        else:
            raise ConfigError(f"unknown init {init!r}")
        t = Tensor(data.astype(self.dtype), requires_grad=True, name=name)
        self.params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def items(self):
        return self.params.items()

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self.params if n.startswith(prefix)]

    def num_values(self) -> int:
        return sum(t.size for t in self.params.values())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def set(self, name: str, value) -> None:
        t = self.params[name]
        arr = np.asarray(value, dtype=self.dtype)
        if arr.shape != t.shape:
            raise ConfigError(f"shape mismatch for {name}: {arr.shape} vs {t.shape}")
        t.data = arr.copy()

    def scale_grads(self, factor: float) -> None:
        for t in self.params.values():
            if t.grad is not None:
                t.grad *= factor

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray], strict: bool = False) -> tuple[list[str], list[str]]:
        """Copy matching entries in; return (loaded names, names left at init)."""
        loaded, fresh = [], []
        for name, t in self.params.items():
            if name in arrays:
                self.set(name, arrays[name])
                loaded.append(name)
            else:
                fresh.append(name)
        unknown = sorted(set(arrays) - set(self.params))
        if strict and (fresh or unknown):
            raise ConfigError(f"checkpoint mismatch: missing={fresh[:5]} unknown={unknown[:5]}")
        return loaded, fresh
