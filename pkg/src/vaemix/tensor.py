"""Flat float64 tensors.

A Tensor is a shape tuple plus one contiguous ``array('d')`` buffer in
row-major order.  All numeric work happens in the kernel backend; this class
only owns storage and shape bookkeeping.
"""

from array import array
from typing import Iterable, List, Sequence, Tuple

from .backend import kernels as K
from .errors import ShapeError


def _size(shape: Tuple[int, ...]) -> int:
    n = 1
    for s in shape:
        if s < 0:
            raise ShapeError(f"negative dimension in shape {shape}")
        n *= s
    return n


class Tensor:
    __slots__ = ("shape", "data")

    def __init__(self, shape: Sequence[int], data=None):
        self.shape = tuple(int(s) for s in shape)
        n = _size(self.shape)
        if data is None:
            self.data = array("d", bytes(8 * n))
        else:
            if not isinstance(data, array) or data.typecode != "d":
                data = array("d", data)
            if len(data) != n:
                raise ShapeError(
                    f"buffer of length {len(data)} does not fit shape {self.shape}"
                )
            self.data = data

    # -- constructors -------------------------------------------------------

    @classmethod
    def zeros(cls, *shape: int) -> "Tensor":
        return cls(shape)

    @classmethod
    def full(cls, shape: Sequence[int], value: float) -> "Tensor":
        t = cls(shape)
        if value != 0.0:
            for i in range(len(t.data)):
                t.data[i] = value
        return t

    @classmethod
    def from_rows(cls, rows: Iterable[Sequence[float]]) -> "Tensor":
        rows = [list(r) for r in rows]
        if not rows:
            return cls((0, 0))
        m = len(rows[0])
        flat = array("d")
        for r in rows:
            if len(r) != m:
                raise ShapeError("ragged rows")
            flat.extend(float(v) for v in r)
        return cls((len(rows), m), flat)

    @classmethod
    def vector(cls, values: Iterable[float]) -> "Tensor":
        flat = array("d", (float(v) for v in values))
        return cls((len(flat),), flat)

    # -- basics -------------------------------------------------------------

    @property
    def size(self) -> int:
        return len(self.data)

    @property
    def ndim(self) -> int:
        return len(self.shape)

    def copy(self) -> "Tensor":
        return Tensor(self.shape, array("d", self.data))

    def reshape(self, *shape: int) -> "Tensor":
        if _size(tuple(shape)) != self.size:
            raise ShapeError(f"cannot reshape {self.shape} to {shape}")
        return Tensor(shape, self.data)

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return self.data[0]

    def row(self, i: int) -> List[float]:
        if self.ndim != 2:
            raise ShapeError("row() needs a 2-d tensor")
        m = self.shape[1]
        return list(self.data[i * m : (i + 1) * m])

    def tolist(self):
        if self.ndim == 1:
            return list(self.data)
        if self.ndim == 2:
            m = self.shape[1]
            return [list(self.data[i * m : (i + 1) * m]) for i in range(self.shape[0])]
        raise ShapeError(f"tolist() unsupported for ndim {self.ndim}")

    def fill(self, value: float) -> None:
        for i in range(len(self.data)):
            self.data[i] = value

    def all_finite(self) -> bool:
        return bool(K.all_finite(self.data, self.size))

    def __len__(self) -> int:
        return self.shape[0] if self.shape else 0

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"


def glorot_uniform(rng, fan_in: int, fan_out: int, shape: Sequence[int]) -> Tensor:
    """uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out))."""
    a = (6.0 / (fan_in + fan_out)) ** 0.5
    t = Tensor(shape)
    for i in range(t.size):
        t.data[i] = (2.0 * rng.uniform() - 1.0) * a
    return t
