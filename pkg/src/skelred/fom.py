"""Fixed-step BDF4 integration of the reactor state and the full sensitivity matrix.

Starting values
---------------
A k-step method needs k past values.  The first three steps use the
BDF1 -> BDF2 -> BDF3 ramp.  Run literally on the main grid, the ramp's
first-order step would cap the global order at two, so by default the ramp is
executed on a dyadically refined sub-grid: the interval ``[0, 3h]`` is
covered by BDF4 steps of size ``h/2`` whose own starting values come from
``[0, 3h/2]`` at ``h/4``, and so on for ``startup_levels`` levels.  The ramp
itself only runs at the finest level.  ``startup_levels=0`` reproduces the
plain ramp.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .reactor import ReactorState, evaluate

log = logging.getLogger(__name__)

# alpha coefficients (newest history first) and beta for y_new = sum(alpha*y) + beta*h*f(y_new)
BDF_COEFFS = {
    1: ((1.0,), 1.0),
    2: ((4 / 3, -1 / 3), 2 / 3),
    3: ((18 / 11, -9 / 11, 2 / 11), 6 / 11),
    4: ((48 / 25, -36 / 25, 16 / 25, -3 / 25), 12 / 25),
}
DEFAULT_STARTUP_LEVELS = 8
# sub-grids tried when a restart on the main grid fails, and their startup refinement
RECOVERY_SUBSTEPS = (8, 64)
RECOVERY_STARTUP_LEVELS = 2
# reactor steps with a mass fraction below this are rejected and restarted
Y_ADMISSIBLE = -1e-6


class StepFailure(RuntimeError):
    """Newton iteration did not converge on a step."""

    def __init__(self, t, message, diagnostics=None):
        self.t = t
        self.diagnostics = diagnostics or {}
        super().__init__(f"t={t:.9g}: {message}")


class FactorizationError(RuntimeError):
    def __init__(self, step, message):
        self.step = step
        super().__init__(f"step {step}: {message}")


@dataclass(frozen=True)
class StartupEvent:
    node: int  # id of the node produced by this step
    t: float
    h: float
    order: int
    history: tuple  # node ids, newest first


def startup_schedule(dt, levels):
    """Steps that produce starting values at ``dt, 2dt, 3dt`` from the node at t=0.

    Returns ``(events, node_times, main_nodes)``.  Node 0 is the initial
    condition; ``main_nodes`` are the node ids holding the values at
    ``dt, 2dt, 3dt``.
    """
    node_times = [0.0]
    events = []

    def new_node(t, h, order, history):
        node_times.append(t)
        nid = len(node_times) - 1
        events.append(StartupEvent(nid, t, h, order, tuple(history)))
        return nid

    def build(h, level):
        if level == 0:
            ids = [0]
            for q in (1, 2, 3):
                ids.append(new_node(q * h, h, q, ids[::-1][:q]))
            return ids[1:]
        half = h / 2
        ids = [0] + build(half, level - 1)
        for m in (4, 5, 6):
            ids.append(new_node(m * half, half, 4, ids[::-1][:4]))
        return [ids[2], ids[4], ids[6]]

    main = build(dt, levels)
    return events, np.array(node_times), main


def step_count(dt, t_end):
    n = t_end / dt
    steps = int(round(n))
    if steps < 4 or abs(n - steps) > 1e-6 * n:
        raise ValueError(f"t_end/dt = {n:.9g} must be an integer number of steps >= 4")
    return steps


# ---------------------------------------------------------------------------
# nonlinear state integration


def _newton(fun, jac, c, beta_h, y0, t, scale, tol, max_iter):
    """Solve y = c + beta_h * fun(y) by damped Newton; returns (y, iterations).

    The Jacobian is reused while the residual drops by 4x per iteration.  A
    step that does not decrease the scaled 2-norm of the residual is retried
    with a fresh Jacobian, then halved up to 10 times.
    """
    n = y0.size

    def residual(y):
        G = y - c - beta_h * fun(y)
        return G, np.max(np.abs(G) / scale)

    def merit(G):
        with np.errstate(over="ignore"):
            return float(np.sum((G / scale) ** 2))

    def factor(y):
        return scipy.linalg.lu_factor(np.eye(n) - beta_h * jac(y), check_finite=False)

    y = y0.copy()
    try:
        G, res = residual(y)
    except ValueError as exc:
        raise StepFailure(t, f"invalid starting guess: {exc}") from exc
    lu, fresh, prev = None, False, np.inf
    for it in range(1, max_iter + 1):
        if not np.isfinite(res):
            raise StepFailure(t, "non-finite residual", {"iterations": it})
        if res < tol:
            return y, it
        if lu is None or res > 0.25 * prev:
            lu, fresh = factor(y), True
        dy = scipy.linalg.lu_solve(lu, G, check_finite=False)
        lam = 1.0
        for _ in range(10):
            y_try = y - lam * dy
            try:
                G_try, res_try = residual(y_try)
            except ValueError:  # e.g. T <= 0
                G_try, res_try = None, np.inf
            # the Newton direction descends the 2-norm, not the max-norm
            if np.isfinite(res_try) and merit(G_try) < merit(G):
                break
            if not fresh:
                lu, fresh = factor(y), True
                dy = scipy.linalg.lu_solve(lu, G, check_finite=False)
                continue
            lam *= 0.5
        else:
            raise StepFailure(t, "line search failed", {"residual": res, "iterations": it})
        prev, res, G, y = res, res_try, G_try, y_try
        fresh = False
    raise StepFailure(t, f"Newton did not converge in {max_iter} iterations",
                      {"residual": res, "iterations": max_iter})


def bdf4_integrate(fun, jac, y0, dt, n_steps, startup_levels=DEFAULT_STARTUP_LEVELS,
                   scale=None, tol=1e-10, max_iter=30, callback=None, recovered=None,
                   admissible=None):
    """Fixed-step BDF4 for ``y' = fun(t, y)`` with Newton iterations.

    Parameters
    ----------
    fun, jac : callable
        ``fun(t, y)`` and its Jacobian ``jac(t, y)``.
    scale : callable, optional
        ``scale(y)`` gives the per-component residual scale (default 1).
    admissible : callable, optional
        ``admissible(y)`` is False for converged values the caller rejects
        (e.g. negative mass fractions); such a step counts as failed.
    recovered : list, optional
        If given, a main-grid step whose Newton iteration fails triggers a
        restart from the last accepted value (see :func:`_restart`) and its
        index is appended here; otherwise the failure propagates.

    Returns
    -------
    Y : ndarray, shape (n_steps + 1, n)
        Values on the main grid.
    startup : ndarray
        Values at every node of :func:`startup_schedule`.
    """
    y0 = np.asarray(y0, dtype=float)
    scale = scale or (lambda y: np.ones_like(y))

    def solve(hist, t, h, order):
        alpha, beta = BDF_COEFFS[order]
        c = sum(a * y for a, y in zip(alpha, hist))
        args = (lambda y: fun(t, y), lambda y: jac(t, y), c, beta * h)
        y = None
        if order == 4:
            # cubic extrapolation through the equally spaced history; it can
            # overshoot on steep fronts, so fall back to the last value
            guess = 4 * hist[0] - 6 * hist[1] + 4 * hist[2] - hist[3]
            try:
                y = _newton(*args, guess, t, scale(hist[0]), tol, max_iter)[0]
            except StepFailure:
                pass
        if y is None:
            y = _newton(*args, hist[0], t, scale(hist[0]), tol, max_iter)[0]
        if admissible is not None and not admissible(y):
            raise StepFailure(t, "converged to an inadmissible value")
        return y

    events, node_times, main = startup_schedule(dt, startup_levels)
    nodes = np.empty((len(node_times), y0.size))
    nodes[0] = y0
    for ev in events:
        nodes[ev.node] = solve([nodes[i] for i in ev.history], ev.t, ev.h, ev.order)

    Y = np.empty((n_steps + 1, y0.size))
    Y[0] = y0
    Y[1:4] = nodes[main]
    k = 3
    while k < n_steps:
        try:
            Y[k + 1] = solve([Y[k], Y[k - 1], Y[k - 2], Y[k - 3]], (k + 1) * dt, dt, 4)
            done = 1
        except StepFailure as exc:
            if recovered is None:
                raise
            # the history itself is suspect, so restart from the last value
            block = _restart(fun, jac, Y[k], k * dt, dt, startup_levels, scale, tol, max_iter,
                             admissible, exc)
            done = min(len(block), n_steps - k)
            Y[k + 1:k + 1 + done] = block[:done]
            recovered.append(k + 1)
        if callback is not None:
            for i in range(k + 1, k + 1 + done):
                callback(i, Y[i])
        k += done
    return Y, nodes


def _restart(fun, jac, y, t0, dt, startup_levels, scale, tol, max_iter, admissible, failure):
    """Values at ``t0 + dt, t0 + 2dt, t0 + 3dt`` from a fresh start at ``y``.

    The self-starting procedure runs on the main grid first, then on sub-grids
    of ``dt / m`` for ``m`` in :data:`RECOVERY_SUBSTEPS`.
    """
    for m in (1,) + RECOVERY_SUBSTEPS:
        levels = startup_levels if m == 1 else RECOVERY_STARTUP_LEVELS
        try:
            Ys, _ = bdf4_integrate(lambda t, x: fun(t0 + t, x), lambda t, x: jac(t0 + t, x),
                                   y, dt / m, 3 * m, levels, scale, tol, max_iter,
                                   admissible=admissible)
        except StepFailure:
            continue
        log.debug("t=%.9g: restarted with %d substeps per step", t0 + dt, m)
        return Ys[m::m]
    raise failure


@dataclass
class Trajectory:
    """Reactor solution on a uniform grid ``t_k = k dt``."""

    times: np.ndarray
    X: np.ndarray  # (n_steps + 1, n_eq) rows [T, Y...]
    P: float
    dt: float
    startup_levels: int
    startup_X: np.ndarray  # states at the startup sub-grid nodes
    wall_time: float = 0.0
    recovered_steps: list = field(default_factory=list)  # steps that triggered a restart

    @property
    def step_count(self):
        return len(self.times) - 1

    @property
    def temperature(self):
        return self.X[:, 0]

    @property
    def states(self):
        return [ReactorState.from_vector(x, self.P, t) for t, x in zip(self.times, self.X)]

    def state(self, k):
        return ReactorState.from_vector(self.X[k], self.P, self.times[k])

    def truncated(self, n_steps):
        return Trajectory(self.times[: n_steps + 1], self.X[: n_steps + 1], self.P, self.dt,
                          self.startup_levels, self.startup_X)


def integrate_state(mechanism, initial, dt, t_end, startup_levels=DEFAULT_STARTUP_LEVELS,
                    tol=1e-10, max_iter=30, multipliers=None):
    """Integrate the reactor from ``initial`` to ``t_end`` with fixed-step BDF4.

    ``multipliers`` scales individual reaction rates (used by brute-force
    elimination studies).

    Raises
    ------
    StepFailure
        If Newton fails to reach the scaled residual ``tol`` on some step.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    initial.check()
    n_steps = step_count(dt, t_end)
    P = initial.P
    alpha = None if multipliers is None else np.asarray(multipliers, dtype=float)

    def fun(t, x):
        return evaluate(mechanism, x, P, multipliers=alpha).rhs()

    def jac(t, x):
        return evaluate(mechanism, x, P, derivatives=True, multipliers=alpha).jacobian()

    def scale(x):
        s = np.ones_like(x)
        s[0] = max(abs(x[0]), 1.0)
        return s

    t0 = time.perf_counter()
    recovered = []
    X, nodes = bdf4_integrate(fun, jac, initial.x, dt, n_steps, startup_levels, scale, tol,
                              max_iter, recovered=recovered,
                              admissible=lambda x: x[1:].min() >= Y_ADMISSIBLE)
    wall = time.perf_counter() - t0
    if recovered:
        log.info("%d restart(s) after failed steps, first at t=%.9g", len(recovered),
                 recovered[0] * dt)
    return Trajectory(np.arange(n_steps + 1) * dt, X, P, dt, startup_levels, nodes, wall,
                      recovered)


# ---------------------------------------------------------------------------
# linear sensitivity integration


class TangentPoint:
    """``L`` and sub-blocks of ``F`` at one time level."""

    def __init__(self, L, forcing, forcing_left=None):
        self.L = L
        self._forcing = forcing
        self._forcing_left = forcing_left

    def forcing(self, rows=None, cols=None):
        return self._forcing(rows, cols)

    def forcing_left(self, Z):
        """``Z @ F``; cheaper than forming ``F`` when the source knows its structure."""
        if self._forcing_left is not None:
            return self._forcing_left(Z)
        return Z @ self._forcing(None, None)


class TrajectoryTangents:
    """Coefficients of ``dS/dt = L S + F`` along a resolved reactor trajectory."""

    def __init__(self, mechanism, trajectory, n_steps=None):
        self.mechanism = mechanism
        self.trajectory = trajectory
        self.n_eq, self.n_rc = mechanism.n_eq, mechanism.n_rc
        self.dt = trajectory.dt
        self.startup_levels = trajectory.startup_levels
        self.n_steps = trajectory.step_count if n_steps is None else n_steps
        self.times = trajectory.times

    def _point(self, x):
        pt = evaluate(self.mechanism, x, self.trajectory.P, derivatives=True)
        return TangentPoint(pt.jacobian(), pt.forcing, pt.forcing_left)

    def point(self, k):
        return self._point(self.trajectory.X[k])

    def node_point(self, i):
        return self._point(self.trajectory.startup_X[i])


class MatrixODE:
    """``dS/dt = L(t) S + F(t)`` with user-supplied coefficient functions."""

    def __init__(self, L_of_t, F_of_t, dt, n_steps, startup_levels=DEFAULT_STARTUP_LEVELS):
        self.L_of_t, self.F_of_t = L_of_t, F_of_t
        self.dt, self.n_steps, self.startup_levels = dt, n_steps, startup_levels
        F0 = np.atleast_2d(F_of_t(0.0))
        self.n_eq, self.n_rc = F0.shape
        _, self.node_times, _ = startup_schedule(dt, startup_levels)
        self.times = np.arange(n_steps + 1) * dt

    def _point(self, t):
        F = np.atleast_2d(np.asarray(self.F_of_t(t), dtype=float))

        def forcing(rows=None, cols=None):
            out = F if rows is None else F[rows]
            return out if cols is None else out[:, cols]

        return TangentPoint(np.atleast_2d(np.asarray(self.L_of_t(t), dtype=float)), forcing)

    def point(self, k):
        return self._point(k * self.dt)

    def node_point(self, i):
        return self._point(self.node_times[i])


def bdf_matrix(L, h, order=4, where=None):
    """LU factors of ``I - beta h L``."""
    beta = BDF_COEFFS[order][1]
    A = np.eye(L.shape[0]) - (beta * h) * L
    try:
        lu = scipy.linalg.lu_factor(A, check_finite=True)
    except (ValueError, np.linalg.LinAlgError) as exc:
        raise FactorizationError(where, str(exc)) from exc
    if np.any(np.diag(lu[0]) == 0):
        raise FactorizationError(where, "singular BDF matrix")
    return A, lu


def bdf_rhs(history, forcing, h, order=4):
    """``sum(alpha_i S^{k-i}) + beta h F`` with ``history`` newest first."""
    alpha, beta = BDF_COEFFS[order]
    return sum(a * s for a, s in zip(alpha, history)) + (beta * h) * forcing


def startup_history(problem, S0, cols=None):
    """Values at ``dt, 2dt, 3dt`` from the refined startup; columns ``cols`` only."""
    events, _, main = startup_schedule(problem.dt, problem.startup_levels)
    nodes = {0: S0}
    for ev in events:
        pt = problem.node_point(ev.node)
        _, lu = bdf_matrix(pt.L, ev.h, ev.order, f"startup node {ev.node}")
        rhs = bdf_rhs([nodes[i] for i in ev.history], pt.forcing(None, cols), ev.h, ev.order)
        nodes[ev.node] = scipy.linalg.lu_solve(lu, rhs, check_finite=False)
    return [nodes[i] for i in main]


@dataclass
class FullSensitivity:
    times: np.ndarray  # times of the saved matrices
    S: list  # saved (n_eq, n_rc) matrices
    steps: list  # main-grid step index of each saved matrix
    wall_time: float = 0.0  # integration only; callbacks and iSVD excluded
    singular_values: np.ndarray | None = None  # (n_steps + 1, k) iSVD spectrum, if requested


def integrate_problem(problem, n_steps=None, save_every=1, isvd_rank=0, callback=None):
    """Full-order BDF4 integration of ``problem`` from ``S = 0``.

    See :func:`integrate_fom`.
    """
    n_steps = problem.n_steps if n_steps is None else n_steps
    if n_steps < 3:
        raise ValueError("need at least 3 steps")
    saved, steps, times = [], [], []
    sv = np.zeros((n_steps + 1, isvd_rank)) if isvd_rank else None
    excluded = 0.0

    def on_step(k, S):
        nonlocal excluded
        t0 = time.perf_counter()
        if save_every and k % save_every == 0:
            saved.append(S)
            steps.append(k)
            times.append(problem.times[k])
        if sv is not None:
            s = isvd(S, compute_vectors=False)
            m = min(isvd_rank, s.size)
            sv[k, :m] = s[:m]
        if callback is not None:
            callback(k, problem.times[k], S)
        excluded += time.perf_counter() - t0

    t0 = time.perf_counter()
    S0 = np.zeros((problem.n_eq, problem.n_rc))
    hist = [S0] + startup_history(problem, S0)
    for k, S in enumerate(hist):
        on_step(k, S)
    hist = hist[::-1]
    for k in range(3, n_steps):
        pt = problem.point(k + 1)
        _, lu = bdf_matrix(pt.L, problem.dt, 4, k + 1)
        S_new = scipy.linalg.lu_solve(lu, bdf_rhs(hist, pt.forcing(), problem.dt),
                                      check_finite=False)
        on_step(k + 1, S_new)
        hist = [S_new] + hist[:3]
    wall = time.perf_counter() - t0 - excluded
    return FullSensitivity(np.array(times), saved, steps, wall, sv)


def integrate_fom(mechanism, trajectory, n_steps=None, save_every=1, isvd_rank=0,
                  callback=None):
    """Advance all ``n_rc`` sensitivity columns along ``trajectory``.

    Each step solves ``(I - 12/25 dt L) S^{k+1} = 48/25 S^k - 36/25 S^{k-1}
    + 16/25 S^{k-2} - 3/25 S^{k-3} + 12/25 dt F`` with ``L``, ``F`` evaluated
    at ``t^{k+1}``; ``S = 0`` at ``t = 0``.

    Parameters
    ----------
    n_steps : int, optional
        Stop after this many steps (default: the whole trajectory).
    save_every : int
        Keep every ``save_every``-th matrix (0 keeps none).
    isvd_rank : int
        If positive, record the leading ``isvd_rank`` singular values of S at
        every step.
    callback : callable, optional
        ``callback(k, t, S)`` at every step.

    Raises
    ------
    FactorizationError
        If ``I - 12/25 dt L`` is singular at some step.
    """
    return integrate_problem(TrajectoryTangents(mechanism, trajectory), n_steps, save_every,
                             isvd_rank, callback)


def integrate_linear(L_of_t, F_of_t, S0, dt, n_steps, startup_levels=DEFAULT_STARTUP_LEVELS):
    """BDF4 solution of ``dS/dt = L(t) S + F(t)`` on ``t_k = k dt``; returns a list of S."""
    problem = MatrixODE(L_of_t, F_of_t, dt, n_steps, startup_levels)
    S0 = np.asarray(S0, dtype=float).reshape(problem.n_eq, problem.n_rc)
    hist = [S0] + startup_history(problem, S0)
    out = list(hist)
    hist = hist[::-1]
    for k in range(3, n_steps):
        pt = problem.point(k + 1)
        _, lu = bdf_matrix(pt.L, dt, 4, k + 1)
        S_new = scipy.linalg.lu_solve(lu, bdf_rhs(hist, pt.forcing(), dt), check_finite=False)
        out.append(S_new)
        hist = [S_new] + hist[:3]
    return out


def isvd(S, compute_vectors=True):
    """Thin SVD of ``S``; singular values in descending order.

    Returns ``(U, sigma, Y)`` with ``S = U diag(sigma) Y^T`` or, with
    ``compute_vectors=False``, only ``sigma``.
    """
    S = np.asarray(S, dtype=float)
    if not compute_vectors:
        return np.linalg.svd(S, compute_uv=False)
    U, s, Vt = np.linalg.svd(S, full_matrices=False)
    return U, s, Vt.T
