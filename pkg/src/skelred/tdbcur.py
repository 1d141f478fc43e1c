"""Implicit TDB-CUR: low-rank integration of ``dS/dt = L S + F``.

The sensitivity matrix is carried as ``S^k = U diag(sigma) Y^T``.  A step
advances a few sampled columns ``S(:, I_c)`` with the full BDF4 operator, a
few sampled rows ``S(I_r, :)`` with a reduced system, and rebuilds the factors
from the two blocks (a CUR reassembly followed by a basis rotation).

History bookkeeping
-------------------
BDF4 needs ``S^{k-3..k}``.  :class:`ColumnHistory` keeps the four levels as
factor triplets (warmup matrices are factorized exactly) and forms the
weighted history sum as one stacked product, so samples can be reselected
every step without materializing any full matrix.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy.linalg import lapack

from .fom import (
    BDF_COEFFS,
    TrajectoryTangents,
    bdf_matrix,
    bdf_rhs,
    integrate_problem,
)

log = logging.getLogger(__name__)

PINV_RCOND = 1e-12
DEFAULT_OVERSAMPLING = 2
DEFAULT_WARMUP = 10
# initial iterate S_i^{k+1} = sum_i c_i S^{k-i} of the row correction solve;
# S_sigma is the column block of S^{k+1} - S_i^{k+1}
ITERATES = {
    "unit": (1.0, 1.0, 1.0, 1.0),
    "difference": (1.0, 0.0, 0.0, 0.0),
    "bdf": BDF_COEFFS[4][0],
    "columns": (0.0, 0.0, 0.0, 0.0),
}
S_SIGMA_MODES = tuple(ITERATES)
ROW_SOLVES = ("exact", "closure")


@dataclass
class SensitivityFactors:
    """``S = U diag(sigma) Y^T`` at time ``t``."""

    U: np.ndarray  # (n_eq, r)
    sigma: np.ndarray  # (r,), descending
    Y: np.ndarray  # (n_rc, r)
    t: float = 0.0

    @property
    def r(self):
        return self.sigma.size

    @property
    def shape(self):
        return self.U.shape[0], self.Y.shape[0]

    def matrix(self):
        return (self.U * self.sigma) @ self.Y.T

    def rows(self, idx):
        return (self.U[idx] * self.sigma) @ self.Y.T

    def cols(self, idx):
        return (self.U * self.sigma) @ self.Y[idx].T

    def check(self, tol=1e-10):
        r = self.r
        if self.U.shape[1] != r or self.Y.shape[1] != r:
            raise ValueError("factor shapes disagree with the rank")
        if np.abs(self.U.T @ self.U - np.eye(r)).max() > tol:
            raise ValueError("U is not orthonormal")
        if np.abs(self.Y.T @ self.Y - np.eye(r)).max() > tol:
            raise ValueError("Y is not orthonormal")
        if np.any(self.sigma < 0) or np.any(np.diff(self.sigma) > 0):
            raise ValueError("singular values must be nonnegative and descending")
        return self

    @classmethod
    def from_matrix(cls, S, r, t=0.0):
        """Best rank-``r`` factors of a dense matrix (truncated SVD)."""
        U, s, Vt = np.linalg.svd(np.asarray(S, dtype=float), full_matrices=False)
        return cls(U[:, :r].copy(), s[:r].copy(), Vt[:r].T.copy(), t)


@dataclass(frozen=True)
class SampleIndices:
    rows: np.ndarray  # I_r
    cols: np.ndarray  # I_c
    oversampling: int = DEFAULT_OVERSAMPLING

    def check(self, n_eq, n_rc, r):
        for name, idx, n in (("rows", self.rows, n_eq), ("cols", self.cols, n_rc)):
            if len(np.unique(idx)) != len(idx):
                raise ValueError(f"duplicate {name} indices")
            if len(idx) and (idx.min() < 0 or idx.max() >= n):
                raise ValueError(f"{name} index out of range")
            if len(idx) < r:
                raise ValueError(f"need at least r={r} {name}, got {len(idx)}")
        return self


class ColumnHistory:
    """Last four levels ``S^k, S^{k-1}, S^{k-2}, S^{k-3}`` (newest first).

    Dense levels are converted to exact (untruncated) factors on entry.  The
    sampled blocks ``columns`` and ``rows`` are built on first access, and
    :meth:`combination` gives any weighted sum of the levels in factored form.
    """

    def __init__(self, levels, samples, _scaled=None):
        if len(levels) != 4:
            raise ValueError(f"BDF4 needs four history levels, got {len(levels)}")
        self.levels = [lv if isinstance(lv, SensitivityFactors)
                       else SensitivityFactors.from_matrix(lv, min(np.shape(lv)))
                       for lv in levels]
        self._Ycat = np.hstack([lv.Y for lv in self.levels])
        # U diag(sigma) per level; push() passes the three it keeps
        self._Us = _scaled or [lv.U * lv.sigma for lv in self.levels]
        self._combos = {}
        self.resample(samples)

    def resample(self, samples):
        self.samples = samples
        self._columns = self._rows = None
        return self

    @property
    def columns(self):
        if self._columns is None:
            c = self.samples.cols
            self._columns = [Us @ lv.Y[c].T for Us, lv in zip(self._Us, self.levels)]
        return self._columns

    @property
    def rows(self):
        if self._rows is None:
            r = self.samples.rows
            self._rows = [Us[r] @ lv.Y.T for Us, lv in zip(self._Us, self.levels)]
        return self._rows

    def combination(self, coeffs):
        """``(W, Y)`` with ``sum_i coeffs[i] S^{k-i} = W @ Y.T``."""
        key = tuple(float(c) for c in coeffs)
        if key not in self._combos:
            self._combos[key] = np.hstack([c * Us for c, Us in zip(key, self._Us)])
        return self._combos[key], self._Ycat

    def push(self, level, samples):
        return ColumnHistory([level] + self.levels[:3], samples,
                             [level.U * level.sigma] + self._Us[:3])


# ---------------------------------------------------------------------------
# small dense kernels; the matrices are tiny, so call overhead dominates


def _svd(M):
    """Thin SVD; tall matrices go through a Householder QR first."""
    m, n = M.shape
    if n and m >= 4 * n:
        qr, tau, _, info = lapack.dgeqrf(M)
        if info == 0:
            Q, _, info = lapack.dorgqr(qr, tau)
            if info == 0:
                u, s, vt = _svd(np.triu(qr[:n]))
                return Q @ u, s, vt
    if M.size:
        u, s, vt, info = lapack.dgesdd(M, full_matrices=0)
        if info == 0:
            return u, s, vt
    return np.linalg.svd(M, full_matrices=False)


def _pivots(B):
    """Row order of ``B`` from a column-pivoted QR of ``B^T``."""
    _, jpvt, _, _, info = lapack.dgeqp3(B.T)
    if info != 0:
        raise np.linalg.LinAlgError("pivoted QR failed")
    return jpvt - 1


def _lu_solve(lu, b, trans=0):
    x, info = lapack.dgetrs(lu[0], lu[1], b, trans=trans)
    if info != 0:
        raise ValueError(f"getrs failed with info={info}")
    return x


def _eigh(G):
    w, V, info = lapack.dsyevd(G)
    if info != 0:
        return np.linalg.eigh(G)
    return w, V


# ---------------------------------------------------------------------------
# sampling


def _greedy_bound(B, selected, m):
    """Add rows of ``B`` to ``selected`` until there are ``m``, maximizing a lower
    bound on the smallest singular value of the sampled block.

    The block enters only through its ``r x r`` Gram matrix, updated by one
    outer product per pick.
    """
    n, r = B.shape
    sel = list(selected)
    if len(sel) >= m:
        return sel
    norms2 = np.einsum("ij,ij->i", B, B)
    G = B[sel].T @ B[sel]
    while True:
        if r == 1:
            score = norms2.copy()
        else:
            w, V = _eigh(G)  # ascending: w[0] = s_min^2
            g = max(w[1] - w[0], 0.0)
            z2 = B @ V[:, 0]
            z2 *= z2
            t = norms2 + g
            disc = t * t
            disc -= (4.0 * g) * z2
            np.maximum(disc, 0.0, out=disc)
            score = t - np.sqrt(disc, out=disc)  # twice the bound
        score[sel] = -np.inf
        j = int(np.argmax(score))  # first maximum: lowest index wins ties
        sel.append(j)
        if len(sel) >= m:
            return sel
        G += np.outer(B[j], B[j])


def _greedy_exact(B, selected, m):
    """Like :func:`_greedy_bound` but minimizes the exact condition number."""
    n, r = B.shape
    sel = list(selected)
    mask = np.zeros(n, dtype=bool)
    mask[sel] = True
    while len(sel) < m:
        G = B[sel].T @ B[sel]
        cand = G[None, :, :] + B[:, :, None] * B[:, None, :]
        ev = np.linalg.eigvalsh(cand)
        lo = np.maximum(ev[:, 0], 0.0)
        with np.errstate(divide="ignore"):
            cond = np.where(lo > 0, np.sqrt(ev[:, -1] / np.where(lo > 0, lo, 1.0)), np.inf)
        cond[mask] = np.inf
        j = int(np.argmin(cond))
        if not np.isfinite(cond[j]):
            j = int(np.flatnonzero(~mask)[0])
        sel.append(j)
        mask[j] = True
    return sel


def _select(B, count, criterion):
    n, r = B.shape
    count = min(count, n)
    # column-pivoted QR on B^T ranks rows of B by how much new span they add
    seed = [int(i) for i in _pivots(B)[: min(r, n)]]
    greedy = _greedy_exact if criterion == "exact" else _greedy_bound
    return np.array(greedy(B, seed, count), dtype=np.intp)


def select_samples(U, Y, sigma=None, oversampling=DEFAULT_OVERSAMPLING, criterion="bound"):
    """Row indices from ``U`` and column indices from ``Y``.

    The first ``r`` indices of each set are the pivots of a column-pivoted QR
    of ``U^T`` (``Y^T``); ``oversampling`` more are added greedily.  With
    ``criterion="bound"`` each greedy pick maximizes a closed-form lower bound
    on the smallest singular value of the enlarged block; ``"exact"`` instead
    minimizes its condition number directly.  Ties go to the lowest index.
    Counts are capped by the matrix dimensions.

    ``sigma`` is accepted for symmetry with the factor triplet; the criteria
    only depend on the bases.
    """
    if criterion not in ("bound", "exact"):
        raise ValueError(f"unknown sampling criterion {criterion!r}")
    U = np.asarray(U, dtype=float)
    Y = np.asarray(Y, dtype=float)
    r = U.shape[1]
    rows = _select(U, r + oversampling, criterion)
    cols = _select(Y, r + oversampling, criterion)
    return SampleIndices(rows, cols, oversampling)


# ---------------------------------------------------------------------------
# one step


def _pinv(M):
    """Truncated pseudo-inverse and a flag telling whether anything was cut."""
    if M.size == 0:
        return M.T.copy(), False, 1.0
    Uq, s, Vt = _svd(M)
    if s.size and s[-1] > PINV_RCOND * s[0]:
        return (Vt.T / s) @ Uq.T, False, s[0] / s[-1]
    keep = s > PINV_RCOND * s[0] if s.size and s[0] > 0 else np.zeros(s.size, dtype=bool)
    inv = (Vt[keep].T / s[keep]) @ Uq[:, keep].T
    cond = s[0] / s[keep][-1] if keep.any() else np.inf
    return inv, bool((~keep).any()), cond


@dataclass
class StepDiagnostics:
    step: int
    rows: np.ndarray
    cols: np.ndarray
    sigma_rank: int  # columns kept in U_sigma (0 for the exact row solve)
    cond_row_basis: float  # condition of U_sigma(I_r, :)
    cond_reassembly: float  # condition of U(I_r, :) in the reassembly
    truncated: bool  # a pseudo-inverse dropped singular values


def advance_columns(history, A_lu, forcing_cols, dt):
    """Column block ``S^{k+1}(:, I_c)`` from one factorization of ``I - 12/25 dt L``."""
    alpha, beta = BDF_COEFFS[4]
    W, Y = history.combination(alpha)
    rhs = W @ Y[history.samples.cols].T
    rhs += (beta * dt) * forcing_cols
    return _lu_solve(A_lu, rhs)


def iterate_coefficients(mode):
    """Weights ``c_i`` of the initial iterate ``S_i^{k+1} = sum_i c_i S^{k-i}``."""
    try:
        return ITERATES[mode]
    except KeyError:
        raise ValueError(f"unknown S_sigma mode {mode!r}; expected one of {S_SIGMA_MODES}")


def row_basis(history, C_new, mode="unit"):
    """Orthonormal ``U_sigma`` spanning ``S_sigma = C^{k+1} - S_i^{k+1}(:, I_c)``.

    With ``mode="unit"`` the four previous column blocks are subtracted with
    unit coefficients.  The other modes use the iterates of
    :data:`ITERATES`; ``"columns"`` (no subtraction) gives the basis of the new
    columns themselves.
    """
    c = iterate_coefficients(mode)
    S_sig = C_new - sum(ci * Ci for ci, Ci in zip(c, history.columns) if ci)
    Uq, s, _ = np.linalg.svd(S_sig, full_matrices=False)
    if s.size == 0 or s[0] == 0:
        return Uq[:, :0]
    return Uq[:, s > PINV_RCOND * s[0]]


def _apply_rows(L_rows, level):
    """``L(I_r, :) S`` for a factored level."""
    return ((L_rows @ level.U) * level.sigma) @ level.Y.T


def advance_rows(history, A, L, forcing_rows, U_sigma, dt, mode="unit"):
    """Row block ``S^{k+1}(I_r, :)`` from the reduced correction system.

    Writing ``S^{k+1} = S_i + dS`` with the iterate ``S_i`` of ``mode``, the
    rows ``I_r`` of ``(I - 12/25 dt L) dS = b`` are closed by assuming
    ``dS(~I_r, :) = U_s(~I_r, :) U_s(I_r, :)^+ dS(I_r, :)``::

        A_r = A(I_r, I_r) + A(I_r, ~I_r) U_s(~I_r, :) U_s(I_r, :)^+
        b_r = BDF4 right side on I_r - S_i(I_r, :) + 12/25 dt L(I_r, :) S_i

    Returns ``(rows, cond, truncated)``.
    """
    I_r = history.samples.rows
    n = A.shape[0]
    comp = np.setdiff1d(np.arange(n), I_r, assume_unique=False)
    A_r = A[np.ix_(I_r, I_r)]
    cond, truncated = 1.0, False
    if comp.size and U_sigma.shape[1]:
        P, truncated, cond = _pinv(U_sigma[I_r])
        A_r = A_r + A[np.ix_(I_r, comp)] @ (U_sigma[comp] @ P)
    beta = BDF_COEFFS[4][1]
    c = iterate_coefficients(mode)
    L_rows = L[I_r]
    b = bdf_rhs(history.rows, forcing_rows, dt)
    R0 = np.zeros_like(b)
    for ci, level, rows in zip(c, history.levels, history.rows):
        if ci:
            R0 += ci * rows
            b += (ci * beta * dt) * _apply_rows(L_rows, level)
    b -= R0
    try:
        delta = scipy.linalg.solve(A_r, b, check_finite=False)
    except (np.linalg.LinAlgError, ValueError):
        delta = np.linalg.lstsq(A_r, b, rcond=None)[0]
        truncated = True
    return R0 + delta, cond, truncated


def advance_rows_exact(history, A_lu, point, dt):
    """Row block ``S^{k+1}(I_r, :)`` from the rows of ``(I - 12/25 dt L)^{-1}``.

    ``Z = (I - 12/25 dt L)^{-1}(I_r, :)`` takes ``|I_r|`` transposed solves with
    the column factorization; then ``S^{k+1}(I_r, :) = Z (sum alpha_i S^{k-i}
    + 12/25 dt F)`` with the history applied through its factors and ``F``
    through ``point.forcing_left``.  No closure is involved.
    """
    E = np.eye(A_lu[0].shape[0])[history.samples.rows].T
    Z = _lu_solve(A_lu, E, trans=1).T
    alpha, beta = BDF_COEFFS[4]
    W, Y = history.combination(alpha)
    return (Z @ W) @ Y.T + point.forcing_left((beta * dt) * Z)


def reassemble(C_new, R_new, rows, r, t=0.0):
    """Factors at ``k+1`` from the new column and row blocks.

    ``U`` holds the leading ``r`` left singular vectors of ``C_new``,
    ``V = (U(I_r, :)^+ R_new)^T = Y Sigma W^T`` by a thin SVD, and the basis is
    rotated, ``U <- U W``.

    Returns ``(factors, cond, truncated)``.
    """
    Uc = _svd(C_new)[0][:, :r]
    P, truncated, cond = _pinv(Uc[rows])
    V = (P @ R_new).T
    Yn, s, Wt = _svd(V)
    return SensitivityFactors(Uc @ Wt.T, s, Yn, t), cond, truncated


# ---------------------------------------------------------------------------
# driver


def initialize(problem, r, warmup_steps=DEFAULT_WARMUP, oversampling=DEFAULT_OVERSAMPLING,
               criterion="bound"):
    """Full-order warmup, SVD truncation and history set-up.

    ``problem`` is a :class:`~skelred.fom.TrajectoryTangents` or
    :class:`~skelred.fom.MatrixODE`.  Returns ``(factors, history, fom)`` where
    ``fom`` is the warmup :class:`~skelred.fom.FullSensitivity`.
    """
    n_eq, n_rc = problem.n_eq, problem.n_rc
    if not 1 <= r <= min(n_eq, n_rc):
        raise ValueError(f"rank r={r} must lie in [1, {min(n_eq, n_rc)}]")
    if warmup_steps < 4:
        raise ValueError("warmup must cover the four-level BDF4 stencil")
    if warmup_steps > problem.n_steps:
        raise ValueError("warmup longer than the integration")
    fom = integrate_problem(problem, n_steps=warmup_steps, save_every=1)
    S = fom.S
    factors = SensitivityFactors.from_matrix(S[-1], r, problem.times[warmup_steps])
    samples = select_samples(factors.U, factors.Y, factors.sigma, oversampling, criterion)
    history = ColumnHistory([factors, S[-2], S[-3], S[-4]], samples)
    return factors, history, fom


@dataclass
class RomResult:
    factors: list  # saved SensitivityFactors
    steps: list  # step index of each saved entry
    singular_values: np.ndarray  # (n_steps + 1, r); warmup rows hold the SVD of S
    wall_time: float  # integration only; callbacks excluded
    diagnostics: list  # StepDiagnostics per ROM step
    warmup_steps: int = 0

    @property
    def times(self):
        return np.array([f.t for f in self.factors])


def run_problem(problem, r, warmup_steps=DEFAULT_WARMUP, oversampling=DEFAULT_OVERSAMPLING,
                refresh_every=1, row_solve="exact", s_sigma="unit", criterion="bound",
                save_every=1, n_steps=None, callback=None):
    """TDB-CUR integration of a linear matrix ODE; see :func:`run_rom`."""
    if s_sigma not in S_SIGMA_MODES:
        raise ValueError(f"s_sigma must be one of {S_SIGMA_MODES}")
    if row_solve not in ROW_SOLVES:
        raise ValueError(f"row_solve must be one of {ROW_SOLVES}")
    if refresh_every < 1:
        raise ValueError("refresh_every must be >= 1")
    n_steps = problem.n_steps if n_steps is None else n_steps
    dt = problem.dt
    sv = np.zeros((n_steps + 1, r))
    saved, steps, diags = [], [], []
    excluded = 0.0

    def emit(k, fac):
        nonlocal excluded
        t0 = time.perf_counter()
        sv[k, : fac.r] = fac.sigma
        if save_every and k % save_every == 0:
            saved.append(fac)
            steps.append(k)
        if callback is not None:
            callback(k, fac)
        excluded += time.perf_counter() - t0

    t_start = time.perf_counter()
    factors, history, fom = initialize(problem, r, warmup_steps, oversampling, criterion)
    # reporting factorizations of warmup matrices are not part of the method
    t_warm, before = time.perf_counter(), excluded
    for k, S in zip(fom.steps[:-1], fom.S[:-1]):
        emit(k, SensitivityFactors.from_matrix(S, r, problem.times[k]))
    emit(warmup_steps, factors)
    t_warm = time.perf_counter() - t_warm - (excluded - before)

    samples = history.samples
    for k in range(warmup_steps, n_steps):
        pt = problem.point(k + 1)
        A, lu = bdf_matrix(pt.L, dt, 4, k + 1)
        I_r, I_c = samples.rows, samples.cols
        C_new = advance_columns(history, lu, pt.forcing(None, I_c), dt)
        if row_solve == "exact":
            R_new = advance_rows_exact(history, lu, pt, dt)
            sigma_rank, cond_r, trunc_r = 0, 1.0, False
        else:
            U_sig = row_basis(history, C_new, s_sigma)
            sigma_rank = U_sig.shape[1]
            R_new, cond_r, trunc_r = advance_rows(history, A, pt.L, pt.forcing(I_r, None),
                                                  U_sig, dt, s_sigma)
        factors, cond_u, trunc_u = reassemble(C_new, R_new, I_r, r, problem.times[k + 1])
        if trunc_r or trunc_u:
            log.debug("step %d: truncated pseudo-inverse (cond %.3g, %.3g)", k + 1, cond_r,
                      cond_u)
        diags.append(StepDiagnostics(k + 1, I_r, I_c, sigma_rank, cond_r, cond_u,
                                     trunc_r or trunc_u))
        if (k + 1 - warmup_steps) % refresh_every == 0:
            samples = select_samples(factors.U, factors.Y, factors.sigma, oversampling,
                                     criterion)
        history = history.push(factors, samples)
        emit(k + 1, factors)
    wall = time.perf_counter() - t_start - excluded - t_warm
    return RomResult(saved, steps, sv, wall, diags, warmup_steps)


def run_rom(mechanism, trajectory, r, **options):
    """Low-rank sensitivities along a resolved reactor ``trajectory``.

    A full-order warmup of ``warmup_steps`` steps is factorized by a truncated
    SVD; each later step reselects samples (every ``refresh_every`` steps),
    advances the sampled columns and rows, and reassembles rank-``r`` factors.

    Parameters
    ----------
    r : int
        Retained rank, ``1 <= r <= min(n_eq, n_rc)``.
    warmup_steps : int, default 10
    oversampling : int, default 2
        Extra rows and columns sampled beyond ``r``.
    refresh_every : int, default 1
    row_solve : {"exact", "closure"}
        ``"exact"`` applies rows of the inverse BDF matrix
        (:func:`advance_rows_exact`); ``"closure"`` solves the reduced
        correction system of :func:`advance_rows`.
    s_sigma : {"unit", "difference", "bdf", "columns"}
        Closure only.  Initial iterate of the row correction solve, which also fixes how the
        row-solve basis is built from the column solutions.
    criterion : {"bound", "exact"}
        Greedy oversampling rule of :func:`select_samples`.
    save_every : int, default 1
        Stride of stored factors (0 stores none; use ``callback`` to stream).
    callback : callable, optional
        ``callback(k, factors)`` at every step, including warmup steps.

    Returns
    -------
    RomResult
        ``wall_time`` covers the warmup integration and the ROM steps but not
        callbacks or the factorization of warmup matrices for reporting.
    """
    problem = TrajectoryTangents(mechanism, trajectory, options.pop("n_steps", None))
    return run_problem(problem, r, **options)
