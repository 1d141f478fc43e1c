"""Constant-pressure adiabatic zero-dimensional reactor.

The state vector is ``x = [T, Y_1, ..., Y_nsp]``.  With mass-action rates
scaled by per-reaction multipliers ``alpha``::

    dY_i/dt = wdot_i W_i / rho
    dT/dt   = -sum_i h_i wdot_i / (rho cp)

``jacobian`` returns ``L = d(rhs)/dx`` and ``forcing`` returns
``F = d(rhs)/d(alpha)`` at ``alpha = 1``; these are the coefficient matrices
of the sensitivity equation ``dS/dt = L S + F``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .constants import GAS_CONSTANT
from .kinetics import DomainError

Y_NEG_TOL = 1e-12
Y_SUM_TOL = 1e-8


@dataclass(frozen=True)
class ReactorState:
    T: float
    Y: np.ndarray
    P: float
    t: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "Y", np.asarray(self.Y, dtype=float))

    @classmethod
    def from_vector(cls, x, P, t=0.0):
        return cls(float(x[0]), np.array(x[1:], dtype=float), P, t)

    @property
    def x(self):
        return np.concatenate(([self.T], self.Y))

    def check(self):
        if not self.T > 0:
            raise DomainError(f"temperature must be positive, got {self.T}")
        if not self.P > 0:
            raise DomainError(f"pressure must be positive, got {self.P}")
        if np.any(self.Y < -Y_NEG_TOL):
            raise DomainError("mass fractions must be non-negative")
        if abs(self.Y.sum() - 1.0) > Y_SUM_TOL:
            raise DomainError(f"mass fractions sum to {self.Y.sum()!r}, not 1")
        return self


@dataclass(frozen=True)
class LinearTangent:
    L: np.ndarray  # (n_eq, n_eq)
    F: np.ndarray  # (n_eq, n_rc)


def mole_to_mass_fractions(mech, X):
    X = np.asarray(X, dtype=float)
    m = X * mech.molecular_weights
    return m / m.sum()


def mass_to_mole_fractions(mech, Y):
    Y = np.asarray(Y, dtype=float)
    n = Y / mech.molecular_weights
    return n / n.sum()


def density(mech, T, P, Y):
    return P / (GAS_CONSTANT * T * np.dot(Y, 1.0 / mech.molecular_weights))


class _Point:
    """Everything about one reactor state that rhs, L and F share."""

    def __init__(self, mech, x, P, multipliers=None, derivatives=False):
        T = float(x[0])
        if not T > 0:
            raise DomainError(f"temperature must be positive, got {T}")
        arr = mech.arrays
        self.arr = arr
        Y = np.asarray(x[1:], dtype=float)
        W = arr.W
        self.T, self.Y = T, Y
        self.s = float(Y @ (1.0 / W))
        self.rho = P / (GAS_CONSTANT * T * self.s)
        self.C = self.rho * Y / W
        self.cp_m, self.h_m, s_m, self.dcp_m = arr.thermo(T)
        self.cp = float(Y @ (self.cp_m / W))
        k, dk_dT, dk_dM = arr.rate_constants(T, self.C, self.h_m, s_m)
        if derivatives:
            prod, dprod = arr.concentration_product_jacobian(self.C)
            self.dk_dT, self.dk_dM, self.dprod = dk_dT, dk_dM, dprod
        else:
            prod = arr.concentration_products(self.C)
        self.k, self.prod = k, prod
        self.q = k * prod
        self.alpha = multipliers
        self._fparts = None
        if multipliers is not None:
            self.q = self.q * multipliers
        self.wdot = arr.nu @ self.q
        self.Q = float(self.h_m @ self.wdot)

    def rhs(self):
        f = np.empty(self.arr.n_sp + 1)
        f[0] = -self.Q / (self.rho * self.cp)
        f[1:] = self.wdot * self.arr.W / self.rho
        return f

    def _forcing_parts(self):
        """``F = scale[:, None] * nu_ext * q`` with ``nu_ext = [sum_i h_i nu_ij; nu]``."""
        if self._fparts is None:
            arr = self.arr
            nu_ext = np.empty((arr.n_sp + 1, arr.nu.shape[1]))
            nu_ext[1:] = arr.nu
            nu_ext[0] = self.h_m @ arr.nu  # reaction enthalpies
            scale = np.concatenate(([-1.0 / (self.rho * self.cp)], arr.W / self.rho))
            self._fparts = scale, nu_ext
        return self._fparts

    def forcing(self, rows=None, cols=None):
        scale, nu_ext = self._forcing_parts()
        q = self.q
        if cols is not None:
            nu_ext, q = nu_ext[:, cols], q[cols]
        if rows is not None:
            nu_ext, scale = nu_ext[rows], scale[rows]
        return (scale[:, None] * nu_ext) * q

    def forcing_left(self, Z):
        """``Z @ F`` without forming ``F``."""
        scale, nu_ext = self._forcing_parts()
        return ((Z * scale) @ nu_ext) * self.q

    def jacobian(self):
        arr = self.arr
        T, rho, C, W, s = self.T, self.rho, self.C, arr.W, self.s
        n = arr.n_sp
        # rates of progress: dq/dT at fixed C, dq/dC
        dq_dT = self.dk_dT * self.prod
        dq_dC = self.k[:, None] * self.dprod
        if arr.any_m:
            dq_dC += (self.dk_dM * self.prod)[:, None] * arr.eff
        if self.alpha is not None:
            dq_dT = dq_dT * self.alpha
            dq_dC = dq_dC * self.alpha[:, None]
        dw_dC = arr.nu @ dq_dC
        dw_dT = arr.nu @ dq_dT - dw_dC @ (C / T)
        inv_sW = 1.0 / (s * W)
        dw_dY = dw_dC * (rho / W)[None, :] - np.outer(dw_dC @ C, inv_sW)

        fY = self.wdot * W / rho
        J = np.empty((n + 1, n + 1))
        J[1:, 0] = W * dw_dT / rho + fY / T
        J[1:, 1:] = (W / rho)[:, None] * dw_dY + np.outer(fY, inv_sW)

        cp, Q = self.cp, self.Q
        rcp = rho * cp
        dQ_dT = self.cp_m @ self.wdot + self.h_m @ dw_dT
        dQ_dY = self.h_m @ dw_dY
        drcp_dT = -rho / T * cp + rho * float(self.Y @ (self.dcp_m / W))
        drcp_dY = -rho * inv_sW * cp + rho * self.cp_m / W
        J[0, 0] = -dQ_dT / rcp + Q / rcp**2 * drcp_dT
        J[0, 1:] = -dQ_dY / rcp + Q / rcp**2 * drcp_dY
        return J


def _resolve(state):
    if isinstance(state, ReactorState):
        if not state.T > 0:
            raise DomainError(f"temperature must be positive, got {state.T}")
        return state.x, state.P
    raise TypeError("expected a ReactorState")


def rhs(mechanism, state, multipliers=None):
    """Time derivative of ``[T, Y...]`` at ``state``."""
    x, P = _resolve(state)
    if multipliers is not None:
        multipliers = np.asarray(multipliers, dtype=float)
    return _Point(mechanism, x, P, multipliers).rhs()


def jacobian(mechanism, state):
    """Analytic Jacobian ``L = d(rhs)/d[T, Y]`` at unit multipliers."""
    x, P = _resolve(state)
    return _Point(mechanism, x, P, derivatives=True).jacobian()


def forcing(mechanism, state, rows=None, cols=None):
    """``F[:, j] = d(rhs)/d(alpha_j)``: the contribution of reaction ``j`` to the rhs.

    ``rows``/``cols`` select a sub-block without forming the full matrix.
    """
    x, P = _resolve(state)
    return _Point(mechanism, x, P).forcing(rows, cols)


def linear_tangent(mechanism, state):
    x, P = _resolve(state)
    pt = _Point(mechanism, x, P, derivatives=True)
    return LinearTangent(pt.jacobian(), pt.forcing())


def evaluate(mechanism, x, P, derivatives=False, multipliers=None):
    """Low-level access for integrators: a point object exposing rhs/jacobian/forcing."""
    return _Point(mechanism, x, P, multipliers, derivatives)
