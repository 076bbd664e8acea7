"""Measurement embeddings: the rank-one lift, learnable projection and 2D positions.

A measurement ``y`` at ``(i, j)`` is lifted to the N x N matrix
``E = phi_i^T y phi_j``; summing all lifts over the full grid and dividing by
``k`` gives back the patch. ``E`` is flattened row-major, mapped to width ``d``
by an affine ``T`` and offset by a fixed sinusoidal code of ``(i, j)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .sampler import CompressedMeasurements
from .wht import HadamardBasis, _check_index

EMBEDDING_MODES = ("hadamard", "ones-times-y", "ones")


@dataclass(frozen=True)
class HandcraftedEmbedding:
    matrix: np.ndarray
    origin: tuple[int, int]


@dataclass
class TokenSequence:
    tokens: ad.Tensor  # (m, d)
    positions: list[tuple[int, int]]

    @property
    def d(self) -> int:
        return self.tokens.shape[-1]


def embed_measurement(y: float, basis: HadamardBasis, i: int, j: int) -> HandcraftedEmbedding:
    """``phi_i^T y phi_j`` for 1-based ``(i, j)``."""
    _check_index(i, basis.order, "row")
    _check_index(j, basis.order, "column")
    phi_i = basis.row(i).astype(np.float64)
    phi_j = basis.row(j).astype(np.float64)
    return HandcraftedEmbedding(np.outer(phi_i, phi_j) * float(y), (i, j))


def embedding_matrices(values, flat, basis: HadamardBasis, mode: str = "hadamard") -> np.ndarray:
    """Vectorised lifts, flattened row-major.

    ``values`` and ``flat`` (0-based row-major positions) share a shape
    ``(..., m)``; the result is ``(..., m, N*N)``.

    ``mode`` selects the lift: ``hadamard`` is ``phi_i^T y phi_j``;
    ``ones-times-y`` replaces the outer product with the all-ones matrix but
    keeps ``y``; ``ones`` drops the measurement entirely.
    """
    values = np.asarray(values, dtype=np.float64)
    flat = np.asarray(flat)
    n_side = basis.order
    if mode == "hadamard":
        phi = basis.matrix.astype(np.float64)
        rows = phi[flat // n_side]  # (..., m, N)
        cols = phi[flat % n_side]
        outer = rows[..., :, None] * cols[..., None, :]
        return (outer * values[..., None, None]).reshape(values.shape + (n_side * n_side,))
    if mode == "ones-times-y":
        return np.broadcast_to(values[..., None], values.shape + (n_side * n_side,)).copy()
    if mode == "ones":
        return np.ones(values.shape + (n_side * n_side,))
    raise ValueError(f"unknown embedding mode {mode!r}; choose from {EMBEDDING_MODES}")


def project_token(E, weight, bias) -> ad.Tensor:
    """Learnable embedding ``T``: affine map of the row-major flattened lift."""
    mat = E.matrix if isinstance(E, HandcraftedEmbedding) else np.asarray(E)
    w = ad.as_tensor(weight)
    flat = mat.reshape(-1)
    if w.ndim != 2 or flat.size != w.shape[0]:
        raise ValueError(
            f"T weight must be ({flat.size}, d) for a {mat.shape} embedding, got {w.shape}"
        )
    x = ad.Tensor(flat.astype(w.dtype)[None, :])
    return ad.reshape(ad.linear(x, w, bias), (w.shape[1],))


def frequencies(d: int) -> np.ndarray:
    """Geometric frequencies shared by both halves of the 2D code."""
    quarter = d // 4
    return 1.0 / 10000.0 ** (np.arange(quarter) / quarter)


def positional_encoding(i: int, j: int, d: int, N: int) -> np.ndarray:
    """Fixed 2D sin/cos code: first ``d/2`` entries encode ``i``, last ``d/2`` encode ``j``.

    Each half interleaves ``sin(p w_f), cos(p w_f)`` over ``d/4`` frequencies.
    """
    if d <= 0 or d % 4:
        raise ValueError(f"positional width d={d} must be a positive multiple of 4")
    _check_index(i, N, "row")
    _check_index(j, N, "column")
    w = frequencies(d)
    out = np.empty(d)
    for half, p in enumerate((i, j)):
        seg = out[half * d // 2 : (half + 1) * d // 2]
        seg[0::2] = np.sin(p * w)
        seg[1::2] = np.cos(p * w)
    return out


@lru_cache(maxsize=16)
def positional_table(N: int, d: int) -> np.ndarray:
    """``(N*N, d)`` read-only table of positional codes in row-major flat order."""
    table = np.empty((N * N, d))
    for f in range(N * N):
        table[f] = positional_encoding(f // N + 1, f % N + 1, d, N)
    table.setflags(write=False)
    return table


def build_sequence(
    cm: CompressedMeasurements,
    basis: HadamardBasis,
    weight,
    bias,
    d: int | None = None,
    mode: str = "hadamard",
) -> TokenSequence:
    """Token ``k`` is ``T(E_k) + Pos(i_k, j_k)`` for the rank-``k`` measurement."""
    w = ad.as_tensor(weight)
    d = w.shape[1] if d is None else d
    if w.shape != (basis.order**2, d):
        raise ValueError(f"T weight must be ({basis.order**2}, {d}), got {w.shape}")
    if cm.mask.side != basis.order:
        raise ValueError("mask side does not match basis order")
    lifts = embedding_matrices(cm.values, cm.mask.flat_array, basis, mode)
    pos = positional_table(basis.order, d)[cm.mask.flat_array]
    x = ad.Tensor(lifts.astype(w.dtype))
    tokens = ad.add(ad.linear(x, w, bias), ad.Tensor(pos.astype(w.dtype)))
    return TokenSequence(tokens, cm.mask.indices)
