"""Thermochemistry and mass-action rate evaluation.

Scalar entry points (:func:`thermo_eval`, :func:`rate_coefficient`) work on a
single species or reaction and are written for clarity.  The reactor and the
integrators use :class:`KineticArrays`, a vectorized view of a mechanism that
also returns the derivatives needed for analytic Jacobians.
"""

from __future__ import annotations

import math

import numpy as np

from .constants import GAS_CONSTANT, REFERENCE_PRESSURE


class DomainError(ValueError):
    """Input outside the physical domain of an evaluation (T <= 0, T out of range, ...)."""


def thermo_eval(species, T):
    """Molar cp, h and s of one species from its NASA-7 polynomials.

    Parameters
    ----------
    species : Species
    T : float
        Temperature in K, within ``[t_low, t_high]``.

    Returns
    -------
    cp : float
        J/(kmol K)
    h : float
        J/kmol
    s : float
        J/(kmol K), at the 1 atm reference pressure.
    """
    if not species.t_low <= T <= species.t_high:
        raise DomainError(
            f"T={T} K outside [{species.t_low}, {species.t_high}] for species {species.name}"
        )
    a = species.coefficients(T)
    cp_r = a[0] + a[1] * T + a[2] * T**2 + a[3] * T**3 + a[4] * T**4
    h_rt = a[0] + a[1] * T / 2 + a[2] * T**2 / 3 + a[3] * T**3 / 4 + a[4] * T**4 / 5 + a[5] / T
    s_r = (a[0] * math.log(T) + a[1] * T + a[2] * T**2 / 2 + a[3] * T**3 / 3
           + a[4] * T**4 / 4 + a[6])
    R = GAS_CONSTANT
    return cp_r * R, h_rt * R * T, s_r * R


def _arrhenius(arr, T):
    return arr.A * T**arr.b * math.exp(-arr.Ea / (GAS_CONSTANT * T))


def third_body_concentration(reaction, concentrations):
    C = np.asarray(concentrations, dtype=float)
    M = float(C.sum())
    for idx, eff in (reaction.efficiencies or {}).items():
        M += (eff - 1.0) * C[idx]
    return M


def equilibrium_constant(reaction, species, T):
    """Concentration-based K_c of ``reaction`` as written (kmol/m^3 units)."""
    dg = 0.0
    dnu = 0
    for terms, sign in ((reaction.products, 1), (reaction.reactants, -1)):
        for idx, nu in terms.items():
            _, h, s = thermo_eval(species[idx], T)
            dg += sign * nu * (h - T * s)
            dnu += sign * nu
    return math.exp(-dg / (GAS_CONSTANT * T)) * (REFERENCE_PRESSURE / (GAS_CONSTANT * T)) ** dnu


def rate_coefficient(reaction, T, concentrations, species=None):
    """Rate coefficient of one irreversible reaction.

    Elementary reactions use the modified Arrhenius form, three-body reactions
    multiply it by the effective collider concentration and falloff reactions
    use Lindemann blending.  Reverse members of an expanded reversible pair
    divide the forward expression by the forward equilibrium constant, which
    needs the mechanism's ``species`` list.
    """
    if T <= 0:
        raise DomainError(f"temperature must be positive, got {T}")
    C = np.asarray(concentrations, dtype=float)
    if np.any(C < 0):
        raise DomainError("concentrations must be non-negative")
    k = _arrhenius(reaction.arrhenius, T)
    if reaction.kind == "three-body":
        k *= third_body_concentration(reaction, C)
    elif reaction.kind == "falloff":
        M = third_body_concentration(reaction, C)
        pr = _arrhenius(reaction.low_pressure_arrhenius, T) * M / k
        k *= pr / (1.0 + pr)
    if reaction.reverse:
        if species is None:
            raise ValueError("species thermochemistry is required for a reverse reaction")
        # the reverse reaction as written has K_c,rev = 1 / K_c,fwd
        k *= equilibrium_constant(reaction, species, T)
    return k


class KineticArrays:
    """Dense array form of a mechanism for vectorized evaluation."""

    def __init__(self, mech):
        n_sp, n_rc = mech.n_sp, mech.n_rc
        self.n_sp, self.n_rc = n_sp, n_rc
        self.W = mech.molecular_weights.copy()
        self.nasa_low = np.array([sp.nasa7_low for sp in mech.species], dtype=float).reshape(n_sp, 7)
        self.nasa_high = np.array([sp.nasa7_high for sp in mech.species], dtype=float).reshape(n_sp, 7)
        self.t_mid = np.array([sp.t_mid for sp in mech.species], dtype=float)

        nu_r = np.zeros((n_sp, n_rc))
        nu_p = np.zeros((n_sp, n_rc))
        max_slots = 1
        for j, rxn in enumerate(mech.reactions):
            for i, n in rxn.reactants.items():
                nu_r[i, j] += n
            for i, n in rxn.products.items():
                nu_p[i, j] += n
            max_slots = max(max_slots, sum(rxn.reactants.values()))
        self.nu_r, self.nu_p = nu_r, nu_p
        self.nu = nu_p - nu_r
        self.dnu = self.nu.sum(axis=0)

        # reactant "slots": concentration product = prod_s C_ext[slots[:, s]];
        # index n_sp points at a padding entry equal to 1
        slots = np.full((n_rc, max_slots), n_sp, dtype=np.intp)
        for j, rxn in enumerate(mech.reactions):
            flat = [i for i, n in sorted(rxn.reactants.items()) for _ in range(n)]
            slots[j, : len(flat)] = flat
        self.slots = slots
        self.slot_onehot = []
        for s in range(max_slots):
            E = np.zeros((n_rc, n_sp))
            real = slots[:, s] < n_sp
            E[np.nonzero(real)[0], slots[real, s]] = 1.0
            self.slot_onehot.append(E)

        self.lnA = np.log([r.arrhenius.A for r in mech.reactions]) if n_rc else np.zeros(0)
        self.b = np.array([r.arrhenius.b for r in mech.reactions], dtype=float)
        self.Ea_R = np.array([r.arrhenius.Ea for r in mech.reactions], dtype=float) / GAS_CONSTANT
        kinds = [r.kind for r in mech.reactions]
        self.is_tb = np.array([k == "three-body" for k in kinds], dtype=bool)
        self.is_fo = np.array([k == "falloff" for k in kinds], dtype=bool)
        self.is_rev = np.array([r.reverse for r in mech.reactions], dtype=bool)
        self.eff = np.zeros((n_rc, n_sp))
        lo = []
        for j, rxn in enumerate(mech.reactions):
            if rxn.has_third_body:
                self.eff[j, :] = 1.0
                for i, e in (rxn.efficiencies or {}).items():
                    self.eff[j, i] = e
            low = rxn.low_pressure_arrhenius if rxn.kind == "falloff" else None
            lo.append(low if low is not None else (1.0, 0.0, 0.0))
        lo = np.array(lo, dtype=float).reshape(n_rc, 3)
        self.lnA0 = np.log(lo[:, 0])
        self.b0 = lo[:, 1]
        self.Ea0_R = lo[:, 2] / GAS_CONSTANT
        self.has_m = self.is_tb | self.is_fo
        self.any_rev = bool(self.is_rev.any())
        self.any_m = bool(self.has_m.any())

    # -- thermodynamics ------------------------------------------------------

    def thermo(self, T):
        """Molar cp, h, s, dcp/dT per species at ``T`` (polynomials extrapolate)."""
        a = np.where((T < self.t_mid)[:, None], self.nasa_low, self.nasa_high)
        T2, T3, T4 = T * T, T**3, T**4
        cp_r = a[:, 0] + a[:, 1] * T + a[:, 2] * T2 + a[:, 3] * T3 + a[:, 4] * T4
        h_rt = (a[:, 0] + a[:, 1] * T / 2 + a[:, 2] * T2 / 3 + a[:, 3] * T3 / 4
                + a[:, 4] * T4 / 5 + a[:, 5] / T)
        s_r = (a[:, 0] * np.log(T) + a[:, 1] * T + a[:, 2] * T2 / 2 + a[:, 3] * T3 / 3
               + a[:, 4] * T4 / 4 + a[:, 6])
        dcp_r = a[:, 1] + 2 * a[:, 2] * T + 3 * a[:, 3] * T2 + 4 * a[:, 4] * T3
        R = GAS_CONSTANT
        return cp_r * R, h_rt * R * T, s_r * R, dcp_r * R

    # -- rates -----------------------------------------------------------------

    def rate_constants(self, T, C, h=None, s=None):
        """k, dk/dT (fixed C) and dk/dM for every reaction.

        ``h`` and ``s`` (molar enthalpy/entropy) are only needed when the
        mechanism has reverse reactions; pass them to avoid recomputation.
        """
        lnT = math.log(T)
        k = np.exp(self.lnA + self.b * lnT - self.Ea_R / T)
        dlnk = (self.b + self.Ea_R / T) / T
        dk_dT = k * dlnk
        dk_dM = np.zeros_like(k)
        M = self.eff @ C if self.any_m else np.zeros_like(k)
        if self.any_m:
            tb = self.is_tb
            dk_dM[tb] = k[tb]
            dk_dT[tb] *= M[tb]
            k[tb] *= M[tb]
            fo = self.is_fo
            if fo.any():
                k0 = np.exp(self.lnA0[fo] + self.b0[fo] * lnT - self.Ea0_R[fo] / T)
                dlnk0 = (self.b0[fo] + self.Ea0_R[fo] / T) / T
                kinf = k[fo]
                pr = k0 * M[fo] / kinf
                blend = pr / (1.0 + pr)
                kf = kinf * blend
                dk_dT[fo] = kf * (dlnk0 / (1.0 + pr) + dlnk[fo] * blend)
                dk_dM[fo] = k0 / (1.0 + pr) ** 2
                k[fo] = kf
        if self.any_rev:
            if h is None:
                _, h, s, _ = self.thermo(T)
            rev = self.is_rev
            g_rt = (h - T * s) / (GAS_CONSTANT * T)
            nu = self.nu[:, rev]
            lnK = -(g_rt @ nu) + self.dnu[rev] * math.log(REFERENCE_PRESSURE / (GAS_CONSTANT * T))
            dlnK = (h @ nu) / (GAS_CONSTANT * T * T) - self.dnu[rev] / T
            K = np.exp(lnK)
            dk_dT[rev] = (dk_dT[rev] + k[rev] * dlnK) * K
            k[rev] *= K
            dk_dM[rev] *= K
        return k, dk_dT, dk_dM

    def concentration_products(self, C):
        """prod_l C_l^nu'_lj for every reaction."""
        Cext = np.append(C, 1.0)
        return Cext[self.slots].prod(axis=1)

    def concentration_product_jacobian(self, C):
        """Product per reaction and its derivative (n_rc, n_sp) w.r.t. concentrations."""
        Cext = np.append(C, 1.0)
        vals = Cext[self.slots]
        prod = vals.prod(axis=1)
        dprod = np.zeros((self.n_rc, self.n_sp))
        n_slots = vals.shape[1]
        for s in range(n_slots):
            others = np.prod(np.delete(vals, s, axis=1), axis=1) if n_slots > 1 else np.ones(self.n_rc)
            dprod += self.slot_onehot[s] * others[:, None]
        return prod, dprod

    def rates_of_progress(self, T, C, multipliers=None, h=None, s=None):
        k, _, _ = self.rate_constants(T, C, h, s)
        q = k * self.concentration_products(C)
        if multipliers is not None:
            q = q * multipliers
        return q


def production_rates(mechanism, T, concentrations, multipliers=None):
    """Net molar production rate of every species, kmol/(m^3 s).

    ``multipliers`` scales each reaction's rate of progress (default all ones).
    """
    if T <= 0:
        raise DomainError(f"temperature must be positive, got {T}")
    arr = mechanism.arrays
    C = np.asarray(concentrations, dtype=float)
    if multipliers is not None:
        multipliers = np.asarray(multipliers, dtype=float)
        if multipliers.shape != (arr.n_rc,):
            raise ValueError(f"expected {arr.n_rc} multipliers, got shape {multipliers.shape}")
    q = arr.rates_of_progress(T, C, multipliers)
    return arr.nu @ q
