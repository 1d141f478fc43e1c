"""Reaction weights, species ranking and skeletal models."""

import dataclasses
import re

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from skelred.harness import run_case
from skelred.mechanism import format_mechanism, parse_mechanism
from skelred.ranking import (
    RankingResult,
    build_skeletal,
    chi_aggregate,
    rank,
    rank_species,
    reaction_order,
    reaction_weights,
)

from conftest import data_path, toy_mechanism
from oracles import top_species_over_ties


RATE = " | 1e3 0 0 | elementary"


def orthonormal(rng, n, r):
    return np.linalg.qr(rng.normal(size=(n, r)))[0]


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 6))
def test_weights_bounded(seed, r):
    rng = np.random.default_rng(seed)
    Y = orthonormal(rng, 15, r)
    sigma = np.sort(rng.uniform(0, 5, size=r))[::-1]
    w = reaction_weights(sigma, Y)
    assert np.all(w >= 0) and np.all(w <= 1 + 1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(1e-6, 1e6))
def test_weights_scale_invariant(seed, c):
    rng = np.random.default_rng(seed)
    Y, sigma = orthonormal(rng, 10, 3), np.array([3.0, 2.0, 0.5])
    np.testing.assert_allclose(reaction_weights(c * sigma, Y), reaction_weights(sigma, Y),
                               rtol=1e-12)


def test_weights_hand_values():
    Y = np.array([[1.0, 0.0], [0.0, -1.0], [0.0, 0.0]])
    np.testing.assert_allclose(reaction_weights([3.0, 1.0], Y), [0.75, 0.25, 0.0])
    # single mode: weights are |Y|
    np.testing.assert_allclose(reaction_weights([2.0], Y[:, :1]), [1.0, 0.0, 0.0])


def test_zero_sigma_gives_zero_weights():
    assert np.all(reaction_weights([0.0, 0.0], np.eye(4)[:, :2]) == 0)


def test_chi_is_elementwise_max():
    chi = chi_aggregate([np.array([0.1, 0.5]), np.array([0.3, 0.2]), np.array([0.0, 0.4])])
    np.testing.assert_array_equal(chi, [0.3, 0.5])
    with pytest.raises(ValueError):
        chi_aggregate([])
    with pytest.raises(ValueError):
        chi_aggregate([np.zeros(2), np.zeros(3)])


def test_reaction_order_ties_to_lower_index():
    assert reaction_order(np.array([0.2, 0.5, 0.2, 0.5])).tolist() == [1, 3, 0, 2]


def test_first_presence_rule():
    mech = toy_mechanism(["A + B => C + D" + RATE, "D => A" + RATE],
                         names=("A", "B", "C", "D", "E"))
    order = rank_species([0, 1], mech)
    assert order.tolist() == [0, 1, 2, 3, 4]  # unnamed E last
    # a species first met in the top reaction keeps that position
    assert rank_species([1, 0], mech).tolist() == [3, 0, 1, 2, 4]


def test_reactants_before_products_by_index():
    mech = toy_mechanism(["C + B => D + A" + RATE], names=("A", "B", "C", "D"))
    assert rank_species([0], mech).tolist() == [1, 2, 0, 3]


def test_ranking_result_checks(h2o2):
    chi = np.linspace(0, 1, h2o2.n_rc)
    res = rank(h2o2, chi).check(h2o2.n_sp)
    assert res.reaction_order[0] == h2o2.n_rc - 1
    with pytest.raises(ValueError, match="permutation"):
        RankingResult(chi, res.reaction_order[:-1], res.species_order).check()
    with pytest.raises(ValueError, match="descending"):
        RankingResult(chi, res.reaction_order[::-1], res.species_order).check()
    with pytest.raises(ValueError, match=r"\[0, 1\]"):
        RankingResult(chi * 2, res.reaction_order, res.species_order).check()
    with pytest.raises(ValueError):
        rank(h2o2, chi[:-1])


# ---------------------------------------------------------------------------
# skeletal models


def test_identity_reduction(h2o2):
    order = np.arange(h2o2.n_sp)
    sk = build_skeletal(h2o2, order, h2o2.n_sp)
    assert sk.n_keep == h2o2.n_sp
    assert sk.retained_reactions.tolist() == list(range(h2o2.n_rc))
    assert format_mechanism(sk.mechanism) == format_mechanism(h2o2)


def test_removal_closure(h2o2):
    names = h2o2.species_names
    order = [i for i in range(h2o2.n_sp) if names[i] != "HO2"] + [names.index("HO2")]
    sk = build_skeletal(h2o2, order, h2o2.n_sp - 1)
    assert "HO2" not in sk.mechanism.species_names
    for j in range(h2o2.n_rc):
        named = names.index("HO2") in h2o2.reactions[j].participants()
        assert (j in sk.retained_reactions) != named
    # the reduced file parses again
    again = parse_mechanism(format_mechanism(sk.mechanism))
    assert again.n_rc == sk.mechanism.n_rc


def _grep_reaction_count(path, species):
    """Reactions (reversible lines count twice) whose equation names ``species``."""
    count, inside = 0, False
    with open(path) as fh:
        for line in fh:
            word = line.strip()
            if word == "REACTIONS":
                inside = True
            elif word == "END":
                inside = False
            elif inside and word and not word.startswith("#"):
                equation = word.split("|")[0]
                if re.search(rf"(?<![\w(]){re.escape(species)}(?![\w)])", equation):
                    count += 2 if "<=>" in equation else 1
    return count


def test_dropping_least_ranked_matches_grep(h2o2, h2_case_result):
    res = rank(h2o2, h2_case_result.chi)
    last = h2o2.species_names[res.species_order[-1]]
    sk = build_skeletal(h2o2, res.species_order, h2o2.n_sp - 1)
    dropped = h2o2.n_rc - sk.mechanism.n_rc
    assert dropped == _grep_reaction_count(data_path("h2o2.mech"), last)


def test_keep_always(h2o2):
    order = np.arange(h2o2.n_sp)
    sk = build_skeletal(h2o2, order, 3, keep_always=("N2",))
    kept = [h2o2.species_names[i] for i in sk.retained_species]
    assert "N2" in kept and len(kept) == 3
    assert sk.provenance["n_keep"] == 3
    with pytest.raises(ValueError):
        build_skeletal(h2o2, order, 3, keep_always=("XYZ",))
    with pytest.raises(ValueError):
        build_skeletal(h2o2, order, 1, keep_always=("N2", "O2"))


@pytest.mark.parametrize("n_keep", [0, 10])
def test_n_keep_range(h2o2, n_keep):
    with pytest.raises(ValueError):
        build_skeletal(h2o2, np.arange(h2o2.n_sp), n_keep)


def test_dropped_efficiencies(h2o2):
    names = h2o2.species_names
    keep = ["H", "O", "OH", "O2", "N2", "HO2"]
    order = [names.index(n) for n in keep] + [i for i, n in enumerate(names) if n not in keep]
    sk = build_skeletal(h2o2, order, len(keep))
    for rxn in sk.mechanism.reactions:
        assert set(rxn.efficiencies or {}) <= set(range(sk.mechanism.n_sp))


# ---------------------------------------------------------------------------
# cross-check with one-at-a-time elimination


def test_hydrogen_ranking_matches_elimination(h2o2, h2_case_result, h2_elimination):
    res = rank(h2o2, h2_case_result.chi).check(h2o2.n_sp)
    names = h2o2.species_names
    top5 = {names[i] for i in res.species_order[:5]}
    assert {"H2", "O2"} <= top5
    top6 = set(res.species_order[:6].tolist())
    for brute in top_species_over_ties(h2o2, h2_elimination, 3):
        assert set(brute) <= top6


def test_ranking_equivariant_under_reaction_permutation(h2o2, h2_case, h2_case_result):
    perm = np.random.default_rng(0).permutation(h2o2.n_rc)
    shuffled = dataclasses.replace(h2o2, reactions=tuple(h2o2.reactions[j] for j in perm))
    res = run_case(shuffled, h2_case, 7, compare_fom=False)
    # sampling and reassembly see permuted columns, so chi agrees to roundoff
    np.testing.assert_allclose(res.chi, h2_case_result.chi[perm], rtol=0, atol=1e-8)
    a = rank(h2o2, h2_case_result.chi)
    b = rank(shuffled, res.chi)
    assert ([h2o2.species_names[i] for i in a.species_order]
            == [shuffled.species_names[i] for i in b.species_order])


@pytest.mark.parametrize("n_keep", range(1, 10))
def test_skeletal_models_are_valid(h2o2, h2_case_result, n_keep):
    order = rank(h2o2, h2_case_result.chi).species_order
    sk = build_skeletal(h2o2, order, n_keep)
    text = format_mechanism(sk.mechanism)
    again = parse_mechanism(text)
    again.validate()
    assert again.species_names == sk.mechanism.species_names
    assert sk.retained_species.tolist() == sorted(order[:n_keep].tolist())
