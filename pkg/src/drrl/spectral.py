"""Linear-algebra kernels: SVD, truncation, incremental extension, power
iteration, spectral energy and perturbation bounds.

Matrices are plain 2-D ``float64`` numpy arrays.  Every public entry point
validates its input through :func:`as_matrix`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .constants import POWER_ITERATIONS
from .errors import (
    DecompositionFailure,
    DegenerateSpectrum,
    InvalidMatrix,
    InvalidNorm,
    RankOutOfBounds,
)


def as_matrix(m, name="matrix") -> np.ndarray:
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise InvalidMatrix(f"{name} must be a non-empty 2-D array, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidMatrix(f"{name} contains NaN or Inf")
    return a


class FlopCounter:
    """Accumulates floating-point operation counts for the iterative kernels."""

    def __init__(self):
        self.total = 0

    def add(self, n):
        self.total += int(n)

    def __repr__(self):
        return f"FlopCounter(total={self.total})"


@dataclass(frozen=True)
class SpectralDecomposition:
    """Thin SVD factors ``a ~= u @ diag(sigma) @ v.T`` at rank ``len(sigma)``."""

    u: np.ndarray
    sigma: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        r = self.sigma.shape[0]
        if self.u.ndim != 2 or self.v.ndim != 2 or self.u.shape[1] != r or self.v.shape[1] != r:
            raise InvalidMatrix("factor shapes disagree with the number of singular values")
        if r < 1 or r > min(self.u.shape[0], self.v.shape[0]):
            raise RankOutOfBounds(f"rank {r} invalid for a {self.shape} matrix")
        s = self.sigma
        if np.any(s < 0) or np.any(np.diff(s) > 1e-10 * max(1.0, float(s[0]))):
            raise DegenerateSpectrum("singular values must be nonnegative and nonincreasing")

    @property
    def rank(self) -> int:
        return int(self.sigma.shape[0])

    @property
    def shape(self):
        return (self.u.shape[0], self.v.shape[0])

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.sigma) @ self.v.T

    def orthonormality_error(self) -> float:
        eye = np.eye(self.rank)
        return max(
            float(np.max(np.abs(self.u.T @ self.u - eye))),
            float(np.max(np.abs(self.v.T @ self.v - eye))),
        )


@dataclass(frozen=True)
class PerturbationEstimate:
    frobenius_delta: float
    spectral_delta: float
    output_bound: float


def _fix_signs(u, v):
    # first non-negligible entry of each left vector made nonnegative
    for i in range(u.shape[1]):
        col = u[:, i]
        nz = np.flatnonzero(np.abs(col) > 1e-12)
        if nz.size and col[nz[0]] < 0:
            u[:, i] = -col
            v[:, i] = -v[:, i]
    return u, v


def svd_full(m) -> SpectralDecomposition:
    """Thin SVD at rank ``min(rows, cols)`` (LAPACK ``gesdd``)."""
    a = as_matrix(m)
    try:
        u, s, vt = np.linalg.svd(a, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise DecompositionFailure(str(exc)) from exc
    u, v = _fix_signs(u.copy(), vt.T.copy())
    return SpectralDecomposition(u, s, v)


def singular_values(m) -> np.ndarray:
    a = as_matrix(m)
    try:
        return np.linalg.svd(a, compute_uv=False)
    except np.linalg.LinAlgError as exc:
        raise DecompositionFailure(str(exc)) from exc


def truncate(dec: SpectralDecomposition, r: int) -> SpectralDecomposition:
    if not 1 <= r <= dec.rank:
        raise RankOutOfBounds(f"r={r} outside [1, {dec.rank}]")
    return SpectralDecomposition(dec.u[:, :r], dec.sigma[:r], dec.v[:, :r])


def low_rank(m, r: int) -> np.ndarray:
    """Best rank-``r`` approximation of ``m`` in Frobenius norm."""
    return truncate(svd_full(m), r).reconstruct()


# -- deflated component iteration ------------------------------------------
#
# Declared per-kernel costs used by the counters below:
#   dense product (p x q) @ (q x s)   -> 2pqs
#   Householder QR of p x b           -> 2pb^2
#   thin SVD of p x b (p >= b)        -> 4pb^2 + 22b^3


def _orth(x, counter):
    counter.add(2 * x.shape[0] * x.shape[1] ** 2)
    q, _ = np.linalg.qr(x)
    return q


def _deflate(y, basis, counter):
    if basis is None:
        return y
    counter.add(4 * y.shape[0] * basis.shape[1] * y.shape[1])
    return y - basis @ (basis.T @ y)


def _leading_component(a, ubasis, vbasis, *, seed, index, guard, tol, max_iter, counter):
    """Top singular triplet of ``(I - U U^T) a`` for the given left basis ``U``.

    A small guard block rides along to speed up convergence; only its leading
    Ritz pair is kept.  The start block is seeded by ``(seed, index)`` so the
    work for component ``index`` depends only on the span being deflated.
    """
    n, m = a.shape
    used = 0 if ubasis is None else ubasis.shape[1]
    avail = min(n, m) - used
    b = min(1 + guard, avail)
    anorm = float(np.linalg.norm(a))
    counter.add(2 * n * m)
    rng = np.random.default_rng([seed, index])
    x = _orth(rng.standard_normal((m, b)), counter)
    counter.add(2 * n * m * b)
    ax = _deflate(a @ x, ubasis, counter)
    counter.add(2 * n * b)
    if anorm == 0.0 or float(np.linalg.norm(ax)) <= 1e-14 * anorm:
        # deflated matrix is numerically zero: any unit pair orthogonal to
        # the existing factors will do
        u = _orth(_deflate(rng.standard_normal((n, 1)), ubasis, counter), counter)
        v = _orth(_deflate(rng.standard_normal((m, 1)), vbasis, counter), counter)
        return u[:, 0], 0.0, v[:, 0]
    for _ in range(max_iter):
        y = _orth(ax, counter)
        if ubasis is not None:
            counter.add(2 * n * used * b)
            if np.max(np.abs(ubasis.T @ y)) > 1e-10:
                # cancellation in a nearly exhausted complement
                y = _orth(_deflate(y, ubasis, counter), counter)
        counter.add(2 * n * m * b)
        z = a.T @ y
        counter.add(4 * m * b * b + 22 * b ** 3)
        vz, s, uzt = np.linalg.svd(z, full_matrices=False)
        counter.add(2 * n * b * b)
        u = y @ uzt[0]
        counter.add(2 * n * m * b)
        ax = _deflate(a @ vz, ubasis, counter)
        counter.add(3 * n)
        if float(np.linalg.norm(ax[:, 0] - u * s[0])) <= tol * anorm:
            return u, float(s[0]), vz[:, 0].copy()
    raise DecompositionFailure(f"component {index} did not converge in {max_iter} sweeps")


def _extend_components(a, u, s, v, r_new, *, seed, guard, tol, max_iter, counter):
    r = s.shape[0]
    uu = np.zeros((a.shape[0], r_new))
    vv = np.zeros((a.shape[1], r_new))
    ss = np.zeros(r_new)
    uu[:, :r], ss[:r], vv[:, :r] = u, s, v
    for j in range(r, r_new):
        ub = uu[:, :j] if j else None
        uu[:, j], ss[j], vv[:, j] = _leading_component(
            a, ub, vv[:, :j], seed=seed, index=j, guard=guard, tol=tol,
            max_iter=max_iter, counter=counter)
    return uu, ss, vv


def _sorted(u, s, v):
    # deflation can swap components whose singular values are (nearly) tied
    order = np.argsort(-s, kind="stable")
    return u[:, order], s[order], v[:, order]


def partial_svd(m, k: int, *, seed=0, guard=16, tol=1e-12, max_iter=20000,
                counter: FlopCounter | None = None) -> SpectralDecomposition:
    """Leading ``k`` singular triplets, one deflated component at a time."""
    a = as_matrix(m)
    if not 1 <= k <= min(a.shape):
        raise RankOutOfBounds(f"k={k} outside [1, {min(a.shape)}]")
    counter = counter if counter is not None else FlopCounter()
    empty = np.zeros((a.shape[0], 0)), np.zeros(0), np.zeros((a.shape[1], 0))
    u, s, v = _extend_components(a, *empty, k, seed=seed, guard=guard, tol=tol,
                                 max_iter=max_iter, counter=counter)
    u, s, v = _sorted(u, s, v)
    u, v = _fix_signs(u, v)
    return SpectralDecomposition(u, s, v)


def incremental_extend(dec: SpectralDecomposition, target, r_new: int, *, seed=0,
                       guard=16, tol=1e-12, max_iter=20000,
                       counter: FlopCounter | None = None) -> SpectralDecomposition:
    """Grow ``dec`` (a rank-r factorization of ``target``) to rank ``r_new``.

    Only components ``r+1 .. r_new`` are computed, each by iteration on
    ``target`` deflated against the left singular vectors found so far.
    """
    a = as_matrix(target, "target")
    if a.shape != dec.shape:
        raise InvalidMatrix(f"target shape {a.shape} does not match decomposition {dec.shape}")
    if r_new < dec.rank:
        raise RankOutOfBounds(f"r_new={r_new} < current rank {dec.rank}; use truncate")
    if r_new > min(a.shape):
        raise RankOutOfBounds(f"r_new={r_new} exceeds min(shape)={min(a.shape)}")
    if r_new == dec.rank:
        return dec
    counter = counter if counter is not None else FlopCounter()
    u, s, v = _extend_components(a, dec.u, dec.sigma, dec.v, r_new, seed=seed, guard=guard,
                                 tol=tol, max_iter=max_iter, counter=counter)
    r = dec.rank
    nu, ns, nv = _sorted(u[:, r:], s[r:], v[:, r:])
    nu, nv = _fix_signs(nu, nv)
    return SpectralDecomposition(
        np.hstack([dec.u, nu]), np.concatenate([dec.sigma, ns]), np.hstack([dec.v, nv])
    )


def leading_singular_values(m, k: int, *, seed=0, oversample=16, tol=1e-10,
                            max_iter=1000) -> np.ndarray:
    """Top ``k`` singular values by block subspace iteration.

    Used where only the head of the spectrum is needed and a dense SVD of the
    whole matrix would dominate the run time.
    """
    a = as_matrix(m)
    p = min(a.shape)
    if not 1 <= k <= p:
        raise RankOutOfBounds(f"k={k} outside [1, {p}]")
    b = min(k + oversample, p)
    if b == p:
        return singular_values(a)[:k]
    rng = np.random.default_rng(seed)
    x = np.linalg.qr(rng.standard_normal((a.shape[1], b)))[0]
    prev = None
    for _ in range(max_iter):
        y = np.linalg.qr(a @ x)[0]
        z = a.T @ y
        x, s, _ = np.linalg.svd(z, full_matrices=False)
        if prev is not None and np.max(np.abs(s[:k] - prev[:k])) <= tol * s[0]:
            return s[:k].copy()
        prev = s
    raise DecompositionFailure(f"singular values did not settle in {max_iter} sweeps")


def power_iteration_norm(m, k: int = POWER_ITERATIONS, seed: int = 0) -> float:
    """Estimate sigma_1 from ``k`` normalized applications of ``M^T M``.

    The result is ``||M v_k||`` for the unit iterate ``v_k``, which never
    exceeds the true spectral norm.
    """
    a = as_matrix(m)
    if k < 1:
        raise ValueError("k must be >= 1")
    if not np.any(a):
        return 0.0
    tiny = np.finfo(np.float64).tiny
    attempt = 0
    while True:
        rng = np.random.default_rng(seed + attempt)
        v = rng.uniform(0.0, 1.0, a.shape[1])
        v /= np.linalg.norm(v)
        for _ in range(k):
            w = a.T @ (a @ v)
            nrm = np.linalg.norm(w)
            if nrm <= tiny:
                break
            v = w / nrm
        else:
            return float(np.linalg.norm(a @ v))
        # start vector (numerically) orthogonal to the row space
        attempt += 1
        if attempt > 16:
            return 0.0


def check_spectrum(sigma):
    s = np.asarray(sigma, dtype=np.float64)
    if s.ndim != 1 or s.size == 0:
        raise DegenerateSpectrum("singular-value vector must be 1-D and non-empty")
    if np.any(s < 0) or not np.all(np.isfinite(s)):
        raise DegenerateSpectrum("singular values must be finite and nonnegative")
    return s


def spectral_energy_ratio(sigma, r: int, total_energy: float | None = None) -> float:
    """Fraction of squared singular-value mass kept by the leading ``r`` values.

    ``total_energy`` lets callers holding only a leading slice of the spectrum
    supply the full ``||A||_F^2``.
    """
    s = check_spectrum(sigma)
    if not 1 <= r <= s.size:
        raise RankOutOfBounds(f"r={r} outside [1, {s.size}]")
    total = float(np.sum(s * s)) if total_energy is None else float(total_energy)
    if total <= 0.0:
        raise DegenerateSpectrum("spectrum has no energy")
    return min(1.0, float(np.sum(s[:r] ** 2)) / total)


def rank_transition_norm(sigma, r: int, r_new: int) -> float:
    """``||A_{r_new} - A_r||_F`` for truncations of the same matrix."""
    s = check_spectrum(sigma)
    if not 1 <= r <= r_new <= s.size:
        raise RankOutOfBounds(f"need 1 <= r={r} <= r_new={r_new} <= {s.size}")
    return math.sqrt(float(np.sum(s[r:r_new] ** 2)))


def _nonneg(**kw):
    for name, val in kw.items():
        if not val >= 0:
            raise InvalidNorm(f"{name} must be nonnegative, got {val}")


def qk_perturbation_bound(q_res_norm, k_res_norm, q_norm, k_norm, d) -> float:
    """Upper bound on the scaled logits change ``||Q'K'^T - QK^T||_F / sqrt(d)``
    caused by re-truncating Q and K."""
    _nonneg(q_res_norm=q_res_norm, k_res_norm=k_res_norm, q_norm=q_norm, k_norm=k_norm)
    if d < 1:
        raise InvalidNorm(f"dimension must be >= 1, got {d}")
    return (q_res_norm * k_norm + q_norm * k_res_norm) / math.sqrt(d)


def output_sensitivity_bound(delta_spectral, v_frobenius) -> float:
    _nonneg(delta_spectral=delta_spectral, v_frobenius=v_frobenius)
    return float(delta_spectral) * float(v_frobenius)


def transition_estimate(sigma, r: int, r_new: int, v_frobenius: float) -> PerturbationEstimate:
    """Frobenius and spectral size of ``A_{r'} - A_r`` plus the output bound."""
    lo, hi = min(r, r_new), max(r, r_new)
    s = check_spectrum(sigma)
    fro = rank_transition_norm(s, lo, hi)
    spec = float(s[lo]) if hi > lo else 0.0
    return PerturbationEstimate(fro, spec, output_sensitivity_bound(spec, v_frobenius))
