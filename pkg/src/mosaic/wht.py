"""Walsh-Hadamard basis, fast transforms and the separable 2D sampling map.

Conventions: rows of the basis are indexed 1..N in the public API (matching
measurement indices ``(i, j)``); arrays are 0-based internally. The sampling
map is ``Y = Phi X Phi^T / k`` with ``Phi Phi^T = k I`` and ``k = N``, so it
is orthonormal on N x N patches and its inverse is ``X = Phi^T Y Phi / k``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

ORDERINGS = ("sylvester", "sequency")
MAX_ORDER = 2**16


def is_power_of_two(n: int) -> bool:
    return isinstance(n, (int, np.integer)) and n >= 1 and (n & (n - 1)) == 0


def _bit_reverse(x: int, bits: int) -> int:
    out = 0
    for _ in range(bits):
        out = (out << 1) | (x & 1)
        x >>= 1
    return out


def sequency_permutation(order: int) -> np.ndarray:
    """Map sequency index s (0-based) to the Sylvester row holding s sign changes.

    The Sylvester row with ``s`` sign changes is ``bitreverse(gray(s))``.
    """
    bits = order.bit_length() - 1
    return np.array(
        [_bit_reverse(s ^ (s >> 1), bits) for s in range(order)], dtype=np.intp
    )


@dataclass(frozen=True)
class HadamardBasis:
    """A +/-1 Walsh-Hadamard basis of size ``order``.

    The dense matrix is materialised lazily; fast transforms never need it.
    """

    order: int
    ordering: str = "sylvester"

    @property
    def k(self) -> int:
        return self.order

    @cached_property
    def permutation(self) -> np.ndarray | None:
        if self.ordering == "sylvester":
            return None
        return sequency_permutation(self.order)

    @cached_property
    def matrix(self) -> np.ndarray:
        h = np.ones((1, 1), dtype=np.int64)
        while h.shape[0] < self.order:
            h = np.block([[h, h], [h, -h]])
        if self.permutation is not None:
            h = h[self.permutation]
        h.setflags(write=False)
        return h

    def row(self, i: int) -> np.ndarray:
        """Row ``i`` (1-based) of the basis."""
        _check_index(i, self.order, "row")
        if self.order <= 1024:
            return self.matrix[i - 1]
        # Sylvester Phi is symmetric, so row r is Phi e_r.
        r = i - 1 if self.permutation is None else int(self.permutation[i - 1])
        e = np.zeros(self.order, dtype=np.int64)
        e[r] = 1
        return fwht(e)


def build_hadamard(order: int, ordering: str = "sylvester") -> HadamardBasis:
    """Construct the Walsh-Hadamard basis of the given order.

    Raises ValueError unless ``order`` is a power of two in ``[2, 2**16]``.
    """
    if not is_power_of_two(order) or not 2 <= order <= MAX_ORDER:
        raise ValueError(f"order must be a power of two in [2, {MAX_ORDER}], got {order!r}")
    if ordering not in ORDERINGS:
        raise ValueError(f"ordering must be one of {ORDERINGS}, got {ordering!r}")
    return HadamardBasis(int(order), ordering)


def _check_index(i, n, what):
    if not 1 <= i <= n:
        raise ValueError(f"{what} index {i} out of range 1..{n}")


def _working_copy(v) -> np.ndarray:
    a = np.asarray(v)
    if a.dtype.kind in "iub":
        return a.astype(np.int64, copy=True)
    return a.astype(np.float64, copy=True)


def _butterfly(a: np.ndarray) -> np.ndarray:
    """In-place Sylvester-ordered WHT along the last axis of a C-contiguous ``a``.

    Radix-4 stages (one radix-2 stage first when log2(n) is odd) halve the
    number of passes over memory compared with plain radix-2.
    """
    n = a.shape[-1]
    lead = a.shape[:-1]
    h = 1
    if (n.bit_length() - 1) % 2:
        view = a.reshape(lead + (n // 2, 2))
        x, y = view[..., 0], view[..., 1]
        s = x + y
        np.subtract(x, y, out=y)
        x[...] = s
        h = 2
    if h >= n:
        return a
    bufs = [np.empty(lead + (n // 4,), dtype=a.dtype) for _ in range(4)]
    while h < n:
        view = a.reshape(lead + (n // (4 * h), 4, h))
        p, q, r, s = (view[..., c, :] for c in range(4))
        s0, s1, d0, d1 = (b.reshape(p.shape) for b in bufs)
        np.add(p, q, out=s0)
        np.subtract(p, q, out=d0)
        np.add(r, s, out=s1)
        np.subtract(r, s, out=d1)
        np.add(s0, s1, out=p)
        np.add(d0, d1, out=q)
        np.subtract(s0, s1, out=r)
        np.subtract(d0, d1, out=s)
        h *= 4
    return a


def fwht(v, basis: HadamardBasis | None = None, axis: int = -1) -> np.ndarray:
    """Fast Walsh-Hadamard transform: returns ``Phi @ v`` along ``axis``.

    Only additions and subtractions are used, so integer inputs give exact
    integer results. With ``basis=None`` the Sylvester basis of matching
    length is used (no size cap, handy for benchmarking long vectors).
    """
    a = _working_copy(v)
    if a.ndim == 0:
        raise ValueError("fwht needs at least a 1-D input")
    a = np.moveaxis(a, axis, -1)
    n = a.shape[-1]
    if basis is None:
        if not is_power_of_two(n) or n < 2:
            raise ValueError(f"length {n} is not a power of two >= 2")
    elif n != basis.order:
        raise ValueError(f"length {n} does not match basis order {basis.order}")
    a = _butterfly(np.ascontiguousarray(a))
    if basis is not None and basis.permutation is not None:
        a = a[..., basis.permutation]
    return np.moveaxis(a, -1, axis)


def _check_square(x: np.ndarray, basis: HadamardBasis, name: str):
    if x.ndim < 2 or x.shape[-1] != basis.order or x.shape[-2] != basis.order:
        raise ValueError(
            f"{name} must be {basis.order}x{basis.order} (optionally batched), got {x.shape}"
        )


def sample_full(x, basis: HadamardBasis) -> np.ndarray:
    """Full measurement grid ``Y = Phi X Phi^T / k``.

    Accepts a single N x N patch or a stack ``(..., N, N)``.
    """
    x = np.asarray(x, dtype=np.float64)
    _check_square(x, basis, "patch")
    y = fwht(fwht(x, basis, axis=-1), basis, axis=-2)
    return y / basis.k


def _fwht_transpose(v: np.ndarray, basis: HadamardBasis, axis: int) -> np.ndarray:
    # Phi^T v: undo the row permutation, then apply the symmetric Sylvester matrix.
    v = np.moveaxis(np.asarray(v, dtype=np.float64), axis, -1)
    if basis.permutation is not None:
        u = np.empty_like(v)
        u[..., basis.permutation] = v
        v = u
    out = _butterfly(np.ascontiguousarray(v, dtype=np.float64).copy())
    return np.moveaxis(out, -1, axis)


def inverse_full(y, basis: HadamardBasis) -> np.ndarray:
    """Exact inverse of :func:`sample_full`: ``X = Phi^T Y Phi / k``."""
    y = np.asarray(y, dtype=np.float64)
    _check_square(y, basis, "measurement grid")
    x = _fwht_transpose(_fwht_transpose(y, basis, axis=-2), basis, axis=-1)
    return x / basis.k


def measurement_at(x, basis: HadamardBasis, i: int, j: int) -> float:
    """Single measurement ``phi_i X phi_j^T / k`` (1-based ``i``, ``j``)."""
    x = np.asarray(x, dtype=np.float64)
    _check_square(x, basis, "patch")
    _check_index(i, basis.order, "row")
    _check_index(j, basis.order, "column")
    phi_i = basis.row(i).astype(np.float64)
    phi_j = basis.row(j).astype(np.float64)
    return float(phi_i @ x @ phi_j) / basis.k


def convert_h10_measurement(q_i: float, ones_measurement: float) -> float:
    """Map a {1,-1} Hadamard measurement to its {1,0} counterpart.

    ``p_i = (q_i + 1^T x) / 2`` where ``ones_measurement = 1^T x``.
    """
    return (q_i + ones_measurement) / 2
