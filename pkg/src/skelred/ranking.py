"""Reaction and species rankings from low-rank sensitivity factors.

Each saved factor triplet yields per-reaction weights (absolute right
singular vectors averaged with singular-value weights).  The importance
``chi`` of a reaction is its largest weight over every step of every case.
Species are ranked by first appearance when walking reactions in
descending ``chi`` order, and skeletal models keep the top ``n_keep``
species together with every reaction that only involves kept species.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .mechanism import Mechanism, subset_mechanism

log = logging.getLogger(__name__)


@dataclass
class RankingResult:
    chi: np.ndarray  # (n_rc,), entries in [0, 1]
    reaction_order: np.ndarray  # reaction indices by descending chi
    species_order: np.ndarray  # species indices, most important first

    def check(self, n_sp=None):
        chi = self.chi
        if np.any(chi < 0) or np.any(chi > 1 + 1e-12):
            raise ValueError("chi entries must lie in [0, 1]")
        order = self.reaction_order
        if sorted(order.tolist()) != list(range(chi.size)):
            raise ValueError("reaction_order is not a permutation")
        if np.any(np.diff(chi[order]) > 0):
            raise ValueError("reaction_order does not sort chi descending")
        n_sp = self.species_order.size if n_sp is None else n_sp
        if sorted(self.species_order.tolist()) != list(range(n_sp)):
            raise ValueError("species_order is not a permutation")
        return self


@dataclass
class SkeletalModel:
    retained_species: np.ndarray  # sorted indices into the detailed mechanism
    retained_reactions: np.ndarray
    mechanism: Mechanism
    provenance: dict = field(default_factory=dict)

    @property
    def n_keep(self):
        return self.retained_species.size


def reaction_weights(sigma, Y):
    """Per-reaction weights ``W_j = sum_n |Y[j, n]| sigma_n / sum_n sigma_n``.

    Returns a zero vector (logged at debug level) when every singular value is zero,
    as happens at the initial time where ``S = 0``.
    """
    sigma = np.asarray(sigma, dtype=float)
    Y = np.asarray(Y, dtype=float)
    total = sigma.sum()
    if total <= 0:
        log.debug("all singular values are zero; reaction weights set to zero")
        return np.zeros(Y.shape[0])
    return np.abs(Y) @ (sigma / total)


def chi_aggregate(weights):
    """Elementwise maximum over an iterable of weight vectors (steps and cases)."""
    chi = None
    for w in weights:
        w = np.asarray(w, dtype=float)
        if chi is None:
            chi = w.copy()
        elif w.shape != chi.shape:
            raise ValueError(f"weight vector of shape {w.shape} does not match {chi.shape}")
        else:
            np.maximum(chi, w, out=chi)
    if chi is None:
        raise ValueError("no weight vectors supplied")
    return chi


def factor_weights(factors):
    """Weight vectors for a sequence of :class:`~skelred.tdbcur.SensitivityFactors`."""
    for f in factors:
        yield reaction_weights(f.sigma, f.Y)


def reaction_order(chi):
    """Indices sorting ``chi`` descending; ties go to the lower index."""
    return np.lexsort((np.arange(chi.size), -np.asarray(chi)))


def rank_species(order, mechanism):
    """Species by first presence when walking reactions in ``order``.

    Within a reaction, reactants come before products, each in declaration
    order.  Species that no reaction names are appended in index order.
    """
    seen = []
    mark = np.zeros(mechanism.n_sp, dtype=bool)
    for j in order:
        rxn = mechanism.reactions[int(j)]
        for side in (rxn.reactants, rxn.products):
            for i in sorted(side):
                if not mark[i]:
                    mark[i] = True
                    seen.append(i)
    seen.extend(np.flatnonzero(~mark).tolist())
    return np.array(seen, dtype=np.intp)


def rank(mechanism, chi):
    """:class:`RankingResult` from an aggregated ``chi``."""
    chi = np.asarray(chi, dtype=float)
    if chi.size != mechanism.n_rc:
        raise ValueError(f"chi has {chi.size} entries, mechanism has {mechanism.n_rc} reactions")
    order = reaction_order(chi)
    return RankingResult(chi, order, rank_species(order, mechanism))


def build_skeletal(mechanism, species_order, n_keep, keep_always=(), provenance=None):
    """Keep the top ``n_keep`` species and every reaction among them.

    A reaction is retained when all its reactants and products are retained;
    collision efficiencies of removed species are dropped.  Species named in
    ``keep_always`` (for example an inert diluent) are retained in addition to
    the ranked ones and count toward ``n_keep``.
    """
    n_sp = mechanism.n_sp
    if not 1 <= n_keep <= n_sp:
        raise ValueError(f"n_keep={n_keep} must lie in [1, {n_sp}]")
    index = mechanism.species_index
    forced = []
    for name in keep_always:
        if name not in index:
            raise ValueError(f"unknown species {name!r} in keep_always")
        forced.append(index[name])
    if len(set(forced)) > n_keep:
        raise ValueError("keep_always lists more species than n_keep")
    keep = list(dict.fromkeys(forced))
    for i in species_order:
        if len(keep) >= n_keep:
            break
        if int(i) not in keep:
            keep.append(int(i))
    keep_set = set(keep)
    rxns = [j for j, rxn in enumerate(mechanism.reactions) if rxn.participants() <= keep_set]
    sub = subset_mechanism(mechanism, keep_set, rxns)
    meta = dict(provenance or {})
    meta["n_keep"] = n_keep
    return SkeletalModel(np.array(sorted(keep_set), dtype=np.intp), np.array(rxns, dtype=np.intp),
                         sub, meta)
