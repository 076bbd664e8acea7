"""ISTA baseline for the masked Hadamard measurement operator.

``A x = compress(sample_full(x))`` is a row selection of an orthonormal map,
so ``A A^T = I_m`` and ``||A|| = 1``; its adjoint is zero-fill followed by
the exact inverse transform. The solver minimises
``||A x - y||^2 + lam * ||Psi x||_1`` with ``Psi`` the orthonormal 2D DCT.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.fft import dctn, idctn

from .errors import DivergenceError
from .sampler import CompressedMeasurements, MaskSpec, compress, scatter
from .wht import HadamardBasis, inverse_full, sample_full

SPARSIFIERS = ("dct2d", "identity")


@dataclass(frozen=True)
class IstaConfig:
    lam: float = 1e-2
    alpha: float | None = None  # None -> 1 / (2 ||A||^2) = 0.5
    iters: int = 500
    tol: float = 1e-7
    sparsifier: str = "dct2d"

    def __post_init__(self):
        if self.alpha is not None and not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if self.iters < 1:
            raise ValueError("iters must be >= 1")
        if self.tol < 0:
            raise ValueError("tol must be >= 0")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.sparsifier not in SPARSIFIERS:
            raise ValueError(f"sparsifier must be one of {SPARSIFIERS}")


@dataclass
class IstaResult:
    x: np.ndarray
    iterations: int
    converged: bool
    objective: list[float] = field(default_factory=list)


def forward_op(x, mask: MaskSpec, basis: HadamardBasis) -> np.ndarray:
    return compress(sample_full(x, basis), mask).values


def adjoint_op(v, mask: MaskSpec, basis: HadamardBasis) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (mask.m,):
        raise ValueError(f"expected {mask.m} measurements, got shape {v.shape}")
    return inverse_full(scatter(CompressedMeasurements(mask, v)), basis)


def operator_norm_sq(mask: MaskSpec) -> float:
    """``||A||^2``: 1 for any non-empty mask (orthonormal rows), else 0."""
    return 1.0 if mask.m else 0.0


def _analysis(x, kind):
    return dctn(x, norm="ortho") if kind == "dct2d" else x


def _synthesis(c, kind):
    return idctn(c, norm="ortho") if kind == "dct2d" else c


def soft_threshold(c, t):
    return np.sign(c) * np.maximum(np.abs(c) - t, 0.0)


def objective(x, y, mask, basis, lam, sparsifier="dct2d") -> float:
    r = forward_op(x, mask, basis) - y
    return float(r @ r + lam * np.abs(_analysis(x, sparsifier)).sum())


def ista_solve(cm: CompressedMeasurements, basis: HadamardBasis, cfg: IstaConfig = IstaConfig()) -> IstaResult:
    """Iterate ``x <- Psi^T soft(Psi (x - 2 alpha A^T (A x - y)), lam alpha)`` from zero."""
    mask, y = cm.mask, np.asarray(cm.values, dtype=np.float64)
    if mask.side != basis.order:
        raise ValueError("mask side does not match basis order")
    alpha = cfg.alpha if cfg.alpha is not None else 0.5 / max(operator_norm_sq(mask), 1e-12)
    x = np.zeros((basis.order, basis.order))
    start = objective(x, y, mask, basis, cfg.lam, cfg.sparsifier)
    trace = [start]
    converged = False
    it = 0
    for it in range(1, cfg.iters + 1):
        grad = 2.0 * adjoint_op(forward_op(x, mask, basis) - y, mask, basis)
        z = x - alpha * grad
        x_new = _synthesis(soft_threshold(_analysis(z, cfg.sparsifier), cfg.lam * alpha), cfg.sparsifier)
        f = objective(x_new, y, mask, basis, cfg.lam, cfg.sparsifier)
        trace.append(f)
        if not np.isfinite(f) or f > 10.0 * start and f > 0:
            raise DivergenceError(
                f"ISTA diverged at iteration {it} with alpha={alpha:g}: objective {f:.3e} vs start {start:.3e}",
                alpha=alpha,
            )
        change = np.linalg.norm(x_new - x) / max(np.linalg.norm(x_new), 1e-300)
        x = x_new
        if change < cfg.tol:
            converged = True
            break
    return IstaResult(x, it, converged, trace)


def ista_reconstruct(cm: CompressedMeasurements, basis: HadamardBasis, cfg: IstaConfig = IstaConfig()) -> np.ndarray:
    return ista_solve(cm, basis, cfg).x


def dct_walsh_coherence(basis: HadamardBasis) -> np.ndarray:
    """``(N, N)`` peak coherence of each 2D DCT atom with any 2D Walsh atom.

    Both families are orthonormal tensor products, so the peak factorises into
    the 1D peaks along rows and columns.
    """
    N = basis.order
    C = dctn(np.eye(N), axes=[0], norm="ortho")  # row u is the u-th DCT-II vector
    H = basis.matrix.astype(np.float64) / np.sqrt(N)
    peak = np.abs(C @ H.T).max(axis=1)
    return np.outer(peak, peak)


def sparse_dct_patch(
    basis: HadamardBasis,
    sparsity: int,
    seed: int,
    max_coherence: float = 0.5,
) -> np.ndarray:
    """Patch with ``sparsity`` non-zero 2D DCT coefficients.

    Support is drawn from the atoms whose peak coherence with the Walsh basis
    is at most ``max_coherence`` (the DC atom is always excluded); magnitudes
    are uniform in [0.5, 1.5] with random signs. Highly coherent atoms live on
    one or two Walsh rows and vanish under most masks, which no solver can undo.
    """
    coh = dct_walsh_coherence(basis)
    coh[0, 0] = np.inf
    allowed = np.flatnonzero(coh.reshape(-1) <= max_coherence)
    if sparsity < 1 or sparsity > allowed.size:
        raise ValueError(f"sparsity must be in 1..{allowed.size}, got {sparsity}")
    rng = np.random.default_rng(seed)
    support = rng.choice(allowed, size=sparsity, replace=False)
    coeffs = np.zeros(basis.order**2)
    coeffs[support] = rng.uniform(0.5, 1.5, sparsity) * rng.choice([-1.0, 1.0], sparsity)
    return idctn(coeffs.reshape(basis.order, basis.order), norm="ortho")
