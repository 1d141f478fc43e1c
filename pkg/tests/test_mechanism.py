"""Mechanism grammar, invariants, thermochemistry and rate laws."""

import glob
import math
import os
import re

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from skelred import mechanism as M
from skelred.constants import GAS_CONSTANT, ONE_ATM
from skelred.kinetics import (
    DomainError,
    equilibrium_constant,
    production_rates,
    rate_coefficient,
    thermo_eval,
)
from skelred.mechanism import (
    Arrhenius,
    Reaction,
    Species,
    collapse_reversible_count,
    format_mechanism,
    load_mechanism,
    parse_mechanism,
)

from conftest import CORPUS, data_path, toy_mechanism

MECHS = ("h2o2.mech", "methane.mech", "gri30.mech")


def _expect(path):
    return re.search(r"expect: (.*)", open(path).read()).group(1).split()


def _kv(tokens):
    return dict(t.split("=") for t in tokens if "=" in t)


# ---------------------------------------------------------------------------
# conformance corpus


@pytest.mark.parametrize("path", sorted(glob.glob(os.path.join(CORPUS, "valid", "*.mech"))),
                         ids=os.path.basename)
def test_valid_corpus(path):
    exp = _kv(_expect(path))
    mech = load_mechanism(path)
    assert mech.n_sp == int(exp["n_sp"])
    assert mech.n_rc == int(exp["n_rc"])
    if "lines" in exp:
        assert collapse_reversible_count(mech) == int(exp["lines"])
    mech.validate()


@pytest.mark.parametrize("path", sorted(glob.glob(os.path.join(CORPUS, "invalid", "*.mech"))),
                         ids=os.path.basename)
def test_invalid_corpus(path):
    tokens = _expect(path)
    cls = getattr(M, tokens[0])
    line = int(_kv(tokens[1:])["line"])
    with pytest.raises(cls) as info:
        load_mechanism(path)
    assert info.value.line == line
    assert f"line {line}" in str(info.value)


def test_error_variants_are_distinct():
    classes = [M.MechanismSyntaxError, M.UnbalancedReactionError, M.UnknownSpeciesError,
               M.DuplicateSpeciesError, M.UnsupportedReactionKindError]
    assert len(set(classes)) == len(classes)
    for a in classes:
        assert issubclass(a, M.MechanismError)
        for b in classes:
            if a is not b:
                assert not issubclass(a, b)


def test_minimal_file():
    mech = load_mechanism(os.path.join(CORPUS, "valid", "minimal.mech"))
    assert (mech.n_sp, mech.n_rc, mech.n_eq) == (2, 1, 3)
    assert mech.reactions[0].source_tag == "R1"
    assert not mech.reactions[0].reverse


def test_reversible_expansion_tags():
    mech = load_mechanism(os.path.join(CORPUS, "valid", "reversible.mech"))
    fwd, rev = mech.reactions
    assert (fwd.source_tag, rev.source_tag) == ("fwd of R1", "rev of R1")
    assert rev.reverse and not fwd.reverse
    assert fwd.reactants == rev.products and fwd.products == rev.reactants
    assert fwd.arrhenius == rev.arrhenius


@pytest.mark.parametrize("name", MECHS)
def test_reaction_count_matches_hand_count(name):
    # count lines of the raw file independently of the parser
    text = open(data_path(name)).read()
    body = text.split("REACTIONS", 1)[1].split("\nEND", 1)[0]
    lines = [ln.split("#")[0] for ln in body.splitlines()]
    lines = [ln for ln in lines if "=>" in ln]
    reversible = sum("<=>" in ln for ln in lines)
    mech = load_mechanism(data_path(name))
    assert mech.n_rc == 2 * reversible + (len(lines) - reversible)
    assert collapse_reversible_count(mech) == len(lines)


def test_hydrogen_mechanism_shape(h2o2):
    assert h2o2.n_sp == 9
    assert h2o2.n_rc >= 25
    assert all(not r.reverse or r.source_tag.startswith("rev of") for r in h2o2.reactions)


@pytest.mark.parametrize("name", MECHS)
def test_element_balance_and_invariants(name):
    mech = load_mechanism(data_path(name))
    mech.validate()
    for rxn in mech.reactions:
        total = {}
        for side, sign in ((rxn.reactants, 1), (rxn.products, -1)):
            for i, nu in side.items():
                for el, n in mech.species[i].elements.items():
                    total[el] = total.get(el, 0) + sign * nu * n
        assert all(v == 0 for v in total.values())
        assert rxn.arrhenius.A > 0


@pytest.mark.parametrize("name", MECHS)
def test_format_round_trip(name):
    mech = load_mechanism(data_path(name))
    again = parse_mechanism(format_mechanism(mech))
    assert again.species == mech.species
    assert again.reactions == mech.reactions
    assert collapse_reversible_count(again) == collapse_reversible_count(mech)


def test_duplicate_species_reported_with_first_line():
    path = os.path.join(CORPUS, "invalid", "duplicate_species.mech")
    with pytest.raises(M.DuplicateSpeciesError, match="first declared on line 7"):
        load_mechanism(path)


def test_unbalanced_message_names_element():
    with pytest.raises(M.UnbalancedReactionError, match="elements not balanced: H"):
        load_mechanism(os.path.join(CORPUS, "invalid", "unbalanced.mech"))


def test_metadata_units(h2o2):
    assert h2o2.metadata["activation_energy"] == "J/kmol"
    assert h2o2.metadata["gas_constant"] == GAS_CONSTANT == 8314.46261815324


# ---------------------------------------------------------------------------
# thermochemistry

def _const_species(a1=3.5):
    coeffs = (a1, 0.0, 0.0, 0.0, 0.0, -1000.0, 4.0)
    return Species("X", 28.014, {"N": 2}, coeffs, coeffs, 200.0, 1000.0, 6000.0)


@given(st.floats(200.0, 6000.0))
def test_constant_cp(T):
    cp, h, s = thermo_eval(_const_species(), T)
    assert cp / GAS_CONSTANT == pytest.approx(3.5, rel=1e-14)
    assert h == pytest.approx(GAS_CONSTANT * (3.5 * T - 1000.0), rel=1e-12)


def _poly(a, T):
    cp = sum(a[i] * T**i for i in range(5))
    h = sum(a[i] * T**(i + 1) / (i + 1) for i in range(5)) + a[5]
    s = a[0] * math.log(T) + sum(a[i] * T**i / i for i in range(1, 5)) + a[6]
    return cp, h, s


@pytest.mark.parametrize("name", MECHS)
def test_branches_agree_at_t_mid(name):
    mech = load_mechanism(data_path(name))
    for sp in mech.species:
        lo = _poly(sp.nasa7_low, sp.t_mid)
        hi = _poly(sp.nasa7_high, sp.t_mid)
        assert lo[0] == pytest.approx(hi[0], rel=1e-4)
        # evaluation at t_mid uses the high branch
        cp, h, s = thermo_eval(sp, sp.t_mid)
        assert cp == pytest.approx(GAS_CONSTANT * hi[0], rel=1e-13)


@pytest.mark.parametrize("T", [400.0, 800.0, 1500.0, 2500.0])
def test_enthalpy_is_integral_of_cp(h2o2, T):
    # trapezoid quadrature of cp from t_low; the cp jump at t_mid is below tolerance
    for sp in h2o2.species:
        T0 = sp.t_low
        grid = np.linspace(T0, T, 20001)
        cp = np.array([thermo_eval(sp, t)[0] for t in grid])
        integral = np.sum(0.5 * (cp[1:] + cp[:-1]) * np.diff(grid))
        dh = thermo_eval(sp, T)[1] - thermo_eval(sp, T0)[1]
        assert dh == pytest.approx(integral, rel=2e-4, abs=1e3)


def test_thermo_range_error():
    sp = _const_species()
    with pytest.raises(DomainError):
        thermo_eval(sp, 100.0)
    with pytest.raises(DomainError):
        thermo_eval(sp, 7000.0)


# ---------------------------------------------------------------------------
# rate coefficients


@given(st.floats(300.0, 3000.0))
def test_degenerate_arrhenius(T):
    rxn = Reaction({0: 2}, {1: 1}, Arrhenius(4.2e9, 0.0, 0.0))
    assert rate_coefficient(rxn, T, [1.0, 1.0]) == pytest.approx(4.2e9, rel=1e-15)


def test_three_body_uniform_efficiency():
    rxn = Reaction({0: 2}, {1: 1}, Arrhenius(3.0e10, 0.0, 0.0), kind="three-body")
    C = np.array([0.01, 0.03, 0.5])
    assert rate_coefficient(rxn, 1000.0, C) == pytest.approx(3.0e10 * C.sum(), rel=1e-14)
    eff = Reaction({0: 2}, {1: 1}, Arrhenius(3.0e10, 0.0, 0.0), kind="three-body",
                   efficiencies={2: 0.0})
    assert rate_coefficient(eff, 1000.0, C) == pytest.approx(3.0e10 * 0.04, rel=1e-14)


def test_hand_evaluated_rate(h2o2):
    # H + O2 <=> O + OH forward: A=2.65e13, b=-0.6707, Ea=7.1299544e7 J/kmol
    j = next(j for j, r in enumerate(h2o2.reactions)
             if h2o2.equation(j) == "H + O2 => O + OH" and not r.reverse)
    hand = 2.65e13 * 1000.0**-0.6707 * math.exp(-7.1299544e7 / (8314.46261815324 * 1000.0))
    k = rate_coefficient(h2o2.reactions[j], 1000.0, np.ones(h2o2.n_sp), h2o2.species)
    assert k == pytest.approx(hand, rel=1e-12)


def test_lindemann_limits():
    rxn = Reaction({0: 2}, {1: 1}, Arrhenius(1e10, 0.0, 0.0), kind="falloff",
                   low_pressure_arrhenius=Arrhenius(1e14, 0.0, 0.0))
    for M_tot in (1e-8, 1e-3, 1.0, 1e6):
        C = np.array([0.0, M_tot])
        pr = 1e14 * M_tot / 1e10
        assert rate_coefficient(rxn, 1200.0, C) == pytest.approx(1e10 * pr / (1 + pr), rel=1e-13)
    # low-pressure limit is k0 M, high-pressure limit is k_inf
    assert rate_coefficient(rxn, 1200.0, [0.0, 1e-10]) == pytest.approx(1e14 * 1e-10, rel=1e-5)
    assert rate_coefficient(rxn, 1200.0, [0.0, 1e8]) == pytest.approx(1e10, rel=1e-5)


def test_reverse_rate_uses_equilibrium(h2o2):
    T = 1400.0
    C = np.full(h2o2.n_sp, 0.01)
    for j, rxn in enumerate(h2o2.reactions):
        if not rxn.reverse:
            continue
        fwd = h2o2.reactions[j - 1]
        assert fwd.source_tag == rxn.source_tag.replace("rev", "fwd")
        # independent K_c from Gibbs energies of the forward reaction
        dg = dn = 0.0
        for side, sign in ((fwd.products, 1), (fwd.reactants, -1)):
            for i, nu in side.items():
                cp, h, s = _poly(h2o2.species[i].coefficients(T), T)
                dg += sign * nu * (h - T * s) * GAS_CONSTANT
                dn += sign * nu
        Kc = math.exp(-dg / (GAS_CONSTANT * T)) * (ONE_ATM / (GAS_CONSTANT * T)) ** dn
        kf = rate_coefficient(fwd, T, C, h2o2.species)
        kr = rate_coefficient(rxn, T, C, h2o2.species)
        assert kr == pytest.approx(kf / Kc, rel=1e-10)
        assert equilibrium_constant(fwd, h2o2.species, T) == pytest.approx(Kc, rel=1e-10)


def test_rate_domain_errors():
    rxn = Reaction({0: 2}, {1: 1}, Arrhenius(1.0, 0.0, 0.0))
    with pytest.raises(DomainError):
        rate_coefficient(rxn, 0.0, [1.0, 1.0])
    with pytest.raises(DomainError):
        rate_coefficient(rxn, 1000.0, [-1.0, 1.0])


@pytest.mark.parametrize("name", MECHS)
def test_vectorized_rates_match_scalar(name):
    mech = load_mechanism(data_path(name))
    rng = np.random.default_rng(3)
    arr = mech.arrays
    for T in (700.0, 1000.0, 1800.0):
        C = rng.uniform(1e-4, 1e-2, mech.n_sp)
        k_vec = arr.rate_constants(T, C)[0]
        k_ref = np.array([rate_coefficient(r, T, C, mech.species) for r in mech.reactions])
        np.testing.assert_allclose(k_vec, k_ref, rtol=1e-10)


# ---------------------------------------------------------------------------
# production rates


def test_zero_multipliers(h2o2):
    w = production_rates(h2o2, 1300.0, np.full(h2o2.n_sp, 0.01), np.zeros(h2o2.n_rc))
    assert np.all(w == 0)


def test_unit_mass_action():
    mech = toy_mechanism(["A => B | 2.0 0.0 0.0 | elementary"])
    w = production_rates(mech, 1000.0, [1.0, 0.0])
    np.testing.assert_allclose(w, [-2.0, 2.0], rtol=1e-15)


def test_multiplier_shape_checked(h2o2):
    with pytest.raises(ValueError):
        production_rates(h2o2, 1000.0, np.ones(h2o2.n_sp), np.ones(3))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(MECHS))
def test_mass_conservation(seed, name):
    mech = load_mechanism(data_path(name))
    rng = np.random.default_rng(seed)
    T = rng.uniform(600.0, 2800.0)
    C = rng.uniform(0.0, 0.05, mech.n_sp)
    terms = production_rates(mech, T, C) * mech.molecular_weights
    # each reaction conserves mass, so compare against the largest contribution
    q = mech.arrays.rates_of_progress(T, C)
    scale = np.abs(mech.arrays.nu * mech.molecular_weights[:, None] * q).max()
    assert abs(terms.sum()) <= 1e-10 * max(scale, 1e-300)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-3.0, 3.0), st.floats(-3.0, 3.0))
def test_linear_in_each_multiplier(seed, a, b):
    mech = load_mechanism(data_path("h2o2.mech"))
    rng = np.random.default_rng(seed)
    C = rng.uniform(1e-4, 0.05, mech.n_sp)
    alpha = rng.uniform(0.5, 1.5, mech.n_rc)
    j = int(rng.integers(mech.n_rc))

    def at(v):
        al = alpha.copy()
        al[j] = v
        return production_rates(mech, 1500.0, C, al)

    lhs = at(a + b) - at(0.0)
    rhs = (at(a) - at(0.0)) + (at(b) - at(0.0))
    # differences of full rates cancel, so tolerate roundoff of the totals
    scale = max(np.abs(at(v)).max() for v in (0.0, a, b, a + b))
    np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-12 * scale)
