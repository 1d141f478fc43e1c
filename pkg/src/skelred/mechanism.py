"""Mechanism data model and the ``.mech`` text format.

A mechanism file has three sections, each closed by ``END``::

    ELEMENTS
      H O N
    END
    SPECIES
      H2O  auto  H:2 O:1
        T     200.0 1000.0 3500.0
        LOW   a1 a2 a3 a4 a5 a6 a7
        HIGH  a1 a2 a3 a4 a5 a6 a7
    END
    REACTIONS
      H + O2 <=> O + OH | 3.52e13 -0.7 7.13e7 | elementary
      2 H => H2 | 1.0e12 -1.0 0.0 | three-body eff H2:0.0 H2O:0.0
      2 OH <=> H2O2 | 7.4e10 -0.37 0.0 | falloff low 2.3e12 -0.9 -7.11e6 eff H2O:6.0
    END

See ``docs/mechanism-format.md`` for the complete grammar.  Reversible
reactions (``<=>``) are expanded into a forward/reverse pair of irreversible
reactions on parse; the reverse member is evaluated through the equilibrium
constant.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from functools import cached_property
from typing import NamedTuple

import numpy as np

from .constants import ATOMIC_WEIGHTS, GAS_CONSTANT

KINDS = ("elementary", "three-body", "falloff")
UNSUPPORTED_KINDS = ("troe", "sri", "plog", "chebyshev", "chemically-activated")

WEIGHT_RTOL = 5e-3
CP_CONTINUITY_RTOL = 1e-4


class MechanismError(ValueError):
    """Base class for mechanism parse and validation errors."""

    def __init__(self, message, line=None, column=None):
        self.line = line
        self.column = column
        where = ""
        if line is not None:
            where = f"line {line}"
            if column is not None:
                where += f", col {column}"
            where += ": "
        super().__init__(where + message)


class MechanismSyntaxError(MechanismError):
    pass


class UnbalancedReactionError(MechanismError):
    pass


class UnknownSpeciesError(MechanismError):
    pass


class DuplicateSpeciesError(MechanismError):
    pass


class UnsupportedReactionKindError(MechanismError):
    pass


class InvalidSpeciesError(MechanismError):
    """Thermochemistry or weight data violating the species invariants."""


class InvalidReactionError(MechanismError):
    """Rate parameters violating the reaction invariants (e.g. A <= 0)."""


class Arrhenius(NamedTuple):
    A: float
    b: float
    Ea: float  # J/kmol


@dataclass(frozen=True)
class Species:
    name: str
    molecular_weight: float  # kg/kmol
    elements: dict
    nasa7_low: tuple
    nasa7_high: tuple
    t_low: float
    t_mid: float
    t_high: float

    def coefficients(self, T):
        return self.nasa7_low if T < self.t_mid else self.nasa7_high


@dataclass(frozen=True)
class Reaction:
    reactants: dict  # species index -> stoichiometric coefficient
    products: dict
    arrhenius: Arrhenius
    kind: str = "elementary"
    efficiencies: dict | None = None  # species index -> collision efficiency
    low_pressure_arrhenius: Arrhenius | None = None
    source_tag: str = ""
    reverse: bool = False  # rate = forward expression divided by K_c

    @property
    def has_third_body(self):
        return self.kind in ("three-body", "falloff")

    def participants(self):
        """Species indices that appear as reactant or product."""
        return set(self.reactants) | set(self.products)


@dataclass(frozen=True)
class Mechanism:
    species: tuple
    reactions: tuple
    elements: tuple = ()
    metadata: dict = field(default_factory=dict)

    @property
    def n_sp(self):
        return len(self.species)

    @property
    def n_rc(self):
        return len(self.reactions)

    @property
    def n_eq(self):
        return len(self.species) + 1

    @cached_property
    def species_index(self):
        return {sp.name: i for i, sp in enumerate(self.species)}

    @property
    def species_names(self):
        return [sp.name for sp in self.species]

    @cached_property
    def molecular_weights(self):
        return np.array([sp.molecular_weight for sp in self.species])

    @cached_property
    def arrays(self):
        from .kinetics import KineticArrays

        return KineticArrays(self)

    def equation(self, j):
        """Human-readable equation string of reaction ``j``."""
        rxn = self.reactions[j]
        names = self.species_names
        return f"{_side(rxn.reactants, names)} => {_side(rxn.products, names)}"

    def validate(self):
        """Re-check every invariant; raises a :class:`MechanismError` subclass."""
        names = [sp.name for sp in self.species]
        seen = set()
        for name in names:
            if name in seen:
                raise DuplicateSpeciesError(f"duplicate species name {name!r}")
            seen.add(name)
        for sp in self.species:
            _check_species(sp, dict(ATOMIC_WEIGHTS, **self.metadata.get("element_weights", {})))
        for j, rxn in enumerate(self.reactions):
            _check_reaction(rxn, self.species, f"reaction {j + 1} ({rxn.source_tag})")
        return self


def _side(terms, names):
    parts = []
    for idx, nu in terms.items():
        parts.append(names[idx] if nu == 1 else f"{nu} {names[idx]}")
    return " + ".join(parts)


def molecular_weight_from_elements(elements, weights=ATOMIC_WEIGHTS):
    return float(sum(weights[el] * n for el, n in elements.items()))


def nasa7_cp_r(coeffs, T):
    a = coeffs
    return a[0] + T * (a[1] + T * (a[2] + T * (a[3] + T * a[4])))


def _check_species(sp, weights, line=None):
    if not sp.t_low < sp.t_mid < sp.t_high:
        raise InvalidSpeciesError(
            f"species {sp.name}: temperatures must satisfy t_low < t_mid < t_high", line
        )
    if sp.molecular_weight <= 0:
        raise InvalidSpeciesError(f"species {sp.name}: molecular weight must be positive", line)
    for el in sp.elements:
        if el not in weights:
            raise InvalidSpeciesError(f"species {sp.name}: unknown element {el!r}", line)
    if sp.elements:
        w_el = molecular_weight_from_elements(sp.elements, weights)
        if abs(sp.molecular_weight - w_el) > WEIGHT_RTOL * w_el:
            raise InvalidSpeciesError(
                f"species {sp.name}: weight {sp.molecular_weight} differs from "
                f"element-derived {w_el:.6g} by more than 0.5%",
                line,
            )
    lo = nasa7_cp_r(sp.nasa7_low, sp.t_mid)
    hi = nasa7_cp_r(sp.nasa7_high, sp.t_mid)
    if abs(lo - hi) > CP_CONTINUITY_RTOL * max(abs(lo), abs(hi)):
        raise InvalidSpeciesError(
            f"species {sp.name}: cp/R discontinuous at t_mid ({lo:.8g} vs {hi:.8g})", line
        )


def _check_reaction(rxn, species, label, line=None):
    n = len(species)
    for idx in list(rxn.reactants) + list(rxn.products) + list(rxn.efficiencies or {}):
        if not 0 <= idx < n:
            raise UnknownSpeciesError(f"{label}: species index {idx} out of range", line)
    if not rxn.reactants:
        raise MechanismSyntaxError(f"{label}: no reactants", line)
    if rxn.kind not in KINDS:
        raise UnsupportedReactionKindError(f"{label}: unsupported kind {rxn.kind!r}", line)
    if rxn.arrhenius.A <= 0:
        raise InvalidReactionError(f"{label}: pre-exponential factor must be positive", line)
    if rxn.kind == "falloff":
        if rxn.low_pressure_arrhenius is None:
            raise InvalidReactionError(f"{label}: falloff reaction needs low-pressure rate", line)
        if rxn.low_pressure_arrhenius.A <= 0:
            raise InvalidReactionError(f"{label}: low-pressure A must be positive", line)
    if rxn.efficiencies and not rxn.has_third_body:
        raise InvalidReactionError(f"{label}: efficiencies on a {rxn.kind} reaction", line)
    for eff in (rxn.efficiencies or {}).values():
        if eff < 0:
            raise InvalidReactionError(f"{label}: negative collision efficiency", line)
    balance = {}
    for terms, sign in ((rxn.reactants, 1), (rxn.products, -1)):
        for idx, nu in terms.items():
            if nu <= 0 or int(nu) != nu:
                raise InvalidReactionError(f"{label}: coefficients must be positive integers", line)
            for el, cnt in species[idx].elements.items():
                balance[el] = balance.get(el, 0) + sign * nu * cnt
    bad = sorted(el for el, v in balance.items() if v != 0)
    if bad:
        raise UnbalancedReactionError(f"{label}: elements not balanced: {', '.join(bad)}", line)


# ---------------------------------------------------------------------------
# parsing

_NUMBER = re.compile(r"^[+-]?(\d+\.?\d*|\.\d+)([eEdD][+-]?\d+)?$")


def _float(token, line, col, what):
    if not _NUMBER.match(token):
        raise MechanismSyntaxError(f"expected a number for {what}, got {token!r}", line, col)
    return float(token.replace("d", "e").replace("D", "e"))


class _Line(NamedTuple):
    number: int
    text: str  # comment-stripped, right-stripped

    def tokens(self, start=0):
        """(token, 1-based column) pairs, starting at character offset ``start``."""
        return [(m.group(), m.start() + 1) for m in re.finditer(r"\S+", self.text) if m.start() >= start]


def _strip_comment(raw):
    for mark in ("#", "!"):
        pos = raw.find(mark)
        if pos >= 0:
            raw = raw[:pos]
    return raw.rstrip()


def parse_mechanism(text, name=None):
    """Parse mechanism text into a validated :class:`Mechanism`.

    Raises
    ------
    MechanismSyntaxError, UnbalancedReactionError, UnknownSpeciesError,
    DuplicateSpeciesError, UnsupportedReactionKindError, InvalidSpeciesError,
    InvalidReactionError
    """
    lines = [_Line(i + 1, _strip_comment(raw)) for i, raw in enumerate(text.splitlines())]
    lines = [ln for ln in lines if ln.text.strip()]

    sections = {}
    metadata = {"units": "SI", "quantity": "kmol", "concentration": "kmol/m^3",
                "activation_energy": "J/kmol", "gas_constant": GAS_CONSTANT}
    if name:
        metadata["name"] = name
    i = 0
    while i < len(lines):
        ln = lines[i]
        toks = ln.tokens()
        head = toks[0][0].upper()
        if head == "MECHANISM":
            metadata["name"] = " ".join(t for t, _ in toks[1:])
            i += 1
            continue
        if head not in ("ELEMENTS", "SPECIES", "REACTIONS") or len(toks) > 1:
            raise MechanismSyntaxError(f"expected a section header, got {ln.text.strip()!r}",
                                       ln.number, toks[0][1])
        if head in sections:
            raise MechanismSyntaxError(f"section {head} given twice", ln.number, toks[0][1])
        body = []
        i += 1
        while i < len(lines) and lines[i].text.strip().upper() != "END":
            body.append(lines[i])
            i += 1
        if i == len(lines):
            raise MechanismSyntaxError(f"section {head} is not closed by END", ln.number, 1)
        sections[head] = body
        i += 1
    for required in ("ELEMENTS", "SPECIES", "REACTIONS"):
        if required not in sections:
            raise MechanismSyntaxError(f"missing {required} section")

    elements, weights = _parse_elements(sections["ELEMENTS"])
    if any(weights.get(el) != ATOMIC_WEIGHTS.get(el) for el in weights):
        metadata["element_weights"] = {el: w for el, w in weights.items()
                                       if ATOMIC_WEIGHTS.get(el) != w}
    species = _parse_species(sections["SPECIES"], elements, weights)
    reactions = _parse_reactions(sections["REACTIONS"], species)
    return Mechanism(tuple(species), tuple(reactions), tuple(elements), metadata)


def load_mechanism(path):
    with open(path, encoding="utf-8") as fh:
        return parse_mechanism(fh.read())


def _parse_elements(body):
    elements = []
    weights = dict(ATOMIC_WEIGHTS)
    for ln in body:
        for tok, col in ln.tokens():
            sym, _, w = tok.partition("=")
            sym = sym.upper()
            if not re.match(r"^[A-Z][A-Z]?$", sym):
                raise MechanismSyntaxError(f"bad element symbol {tok!r}", ln.number, col)
            if w:
                weights[sym] = _float(w, ln.number, col, "element weight")
            elif sym not in weights:
                raise MechanismSyntaxError(f"element {sym} needs a weight (write {sym}=<w>)",
                                           ln.number, col)
            if sym in elements:
                raise MechanismSyntaxError(f"element {sym} declared twice", ln.number, col)
            elements.append(sym)
    return elements, {el: weights[el] for el in elements}


def _parse_species(body, elements, weights):
    species = []
    names = {}
    i = 0
    while i < len(body):
        ln = body[i]
        toks = ln.tokens()
        if toks[0][0].upper() in ("T", "LOW", "HIGH"):
            raise MechanismSyntaxError(f"{toks[0][0]} line outside a species block",
                                       ln.number, toks[0][1])
        if len(toks) < 2:
            raise MechanismSyntaxError("species line needs a name and a weight", ln.number,
                                       toks[0][1])
        name, wtok = toks[0][0], toks[1]
        if name in names:
            raise DuplicateSpeciesError(
                f"duplicate species name {name!r} (first declared on line {names[name]})",
                ln.number, toks[0][1])
        names[name] = ln.number
        comp = {}
        for tok, col in toks[2:]:
            m = re.match(r"^([A-Za-z][A-Za-z]?):(\d+)$", tok)
            if not m:
                raise MechanismSyntaxError(f"bad element count {tok!r} (want EL:n)", ln.number, col)
            el = m.group(1).upper()
            if el not in elements:
                raise InvalidSpeciesError(f"species {name}: element {el} not declared",
                                          ln.number, col)
            if el in comp:
                raise MechanismSyntaxError(f"element {el} listed twice", ln.number, col)
            if int(m.group(2)) > 0:
                comp[el] = int(m.group(2))
        if wtok[0].lower() == "auto":
            weight = molecular_weight_from_elements(comp, weights)
        else:
            weight = _float(wtok[0], ln.number, wtok[1], "molecular weight")
        block = {}
        for key, count in (("T", 3), ("LOW", 7), ("HIGH", 7)):
            i += 1
            if i >= len(body):
                raise MechanismSyntaxError(f"species {name}: missing {key} line", ln.number)
            sub = body[i]
            stoks = sub.tokens()
            if stoks[0][0].upper() != key:
                raise MechanismSyntaxError(f"species {name}: expected {key} line",
                                           sub.number, stoks[0][1])
            if len(stoks) != count + 1:
                raise MechanismSyntaxError(
                    f"species {name}: {key} needs {count} numbers, got {len(stoks) - 1}",
                    sub.number, stoks[0][1])
            block[key] = tuple(_float(t, sub.number, c, key) for t, c in stoks[1:])
        sp = Species(name, weight, comp, block["LOW"], block["HIGH"], *block["T"])
        _check_species(sp, weights, ln.number)
        species.append(sp)
        i += 1
    if not species:
        raise MechanismSyntaxError("SPECIES section is empty")
    return species


def _parse_side(text, line, col0, index):
    terms = {}
    # '+' separates terms only when surrounded by whitespace
    offset = 0
    for piece in re.split(r"(\s\+\s)", text):
        if re.fullmatch(r"\s\+\s", piece):
            offset += len(piece)
            continue
        stripped = piece.strip()
        col = col0 + offset + (len(piece) - len(piece.lstrip()))
        offset += len(piece)
        if not stripped:
            raise MechanismSyntaxError("empty stoichiometric term", line, col)
        parts = stripped.split()
        if len(parts) == 2 and parts[0].isdigit():
            nu, name = int(parts[0]), parts[1]
        elif len(parts) == 1:
            nu, name = 1, parts[0]
        else:
            raise MechanismSyntaxError(f"bad stoichiometric term {stripped!r}", line, col)
        if nu <= 0:
            raise MechanismSyntaxError(f"stoichiometric coefficient must be positive", line, col)
        if name not in index:
            raise UnknownSpeciesError(f"unknown species {name!r}", line, col)
        terms[index[name]] = terms.get(index[name], 0) + nu
    return terms


def _parse_arrhenius(tokens, line, what):
    if len(tokens) != 3:
        col = tokens[0][1] if tokens else None
        raise MechanismSyntaxError(f"{what} needs exactly three numbers (A b Ea)", line, col)
    return Arrhenius(*(_float(t, line, c, what) for t, c in tokens))


def _parse_reactions(body, species):
    index = {sp.name: i for i, sp in enumerate(species)}
    reactions = []
    for number, ln in enumerate(body, start=1):
        text = ln.text
        fields_ = text.split("|")
        if len(fields_) != 3:
            raise MechanismSyntaxError(
                "reaction line must have three '|'-separated fields: "
                "equation | A b Ea | kind [options]", ln.number, 1)
        eq, rate, kindtxt = fields_
        rate_col = len(eq) + 2
        kind_col = rate_col + len(rate) + 1
        m = re.search(r"\s(<=>|=>)\s", eq)
        if not m:
            raise MechanismSyntaxError("equation needs ' => ' or ' <=> '", ln.number, 1)
        reversible = m.group(1) == "<=>"
        lhs, rhs = eq[: m.start()], eq[m.end():]
        reactants = _parse_side(lhs, ln.number, 1, index)
        products = _parse_side(rhs, ln.number, m.end() + 1, index)
        rate_toks = [(t, c + rate_col - 1) for t, c in _Line(ln.number, rate).tokens()]
        arr = _parse_arrhenius(rate_toks, ln.number, "rate parameters")

        ktoks = [(t, c + kind_col - 1) for t, c in _Line(ln.number, kindtxt).tokens()]
        if not ktoks:
            raise MechanismSyntaxError("missing reaction kind", ln.number, kind_col)
        kind = ktoks[0][0].lower()
        if kind in UNSUPPORTED_KINDS or kind not in KINDS:
            raise UnsupportedReactionKindError(
                f"reaction kind {ktoks[0][0]!r} is not supported "
                f"(supported: {', '.join(KINDS)})", ln.number, ktoks[0][1])
        effs = None
        low = None
        k = 1
        while k < len(ktoks):
            opt, col = ktoks[k]
            key = opt.lower()
            if key in UNSUPPORTED_KINDS:
                raise UnsupportedReactionKindError(
                    f"{opt} falloff blending is not supported (Lindemann only)", ln.number, col)
            if key == "low":
                if kind != "falloff":
                    raise MechanismSyntaxError("'low' is only valid for falloff reactions",
                                               ln.number, col)
                low = _parse_arrhenius(ktoks[k + 1:k + 4], ln.number, "low-pressure rate")
                k += 4
            elif key == "eff":
                if kind == "elementary":
                    raise MechanismSyntaxError("'eff' is only valid with a third body",
                                               ln.number, col)
                effs = {}
                k += 1
                while k < len(ktoks) and ":" in ktoks[k][0]:
                    spname, _, val = ktoks[k][0].rpartition(":")
                    if spname not in index:
                        raise UnknownSpeciesError(f"unknown species {spname!r} in efficiencies",
                                                  ln.number, ktoks[k][1])
                    effs[index[spname]] = _float(val, ln.number, ktoks[k][1], "efficiency")
                    k += 1
            else:
                raise MechanismSyntaxError(f"unknown reaction option {opt!r}", ln.number, col)
        if kind == "falloff" and low is None:
            raise MechanismSyntaxError("falloff reaction needs 'low A b Ea'", ln.number,
                                       ktoks[0][1])
        if reversible:
            fwd = Reaction(reactants, products, arr, kind, effs, low, f"fwd of R{number}")
            rev = Reaction(products, reactants, arr, kind, effs, low, f"rev of R{number}",
                           reverse=True)
            pair = [fwd, rev]
        else:
            pair = [Reaction(reactants, products, arr, kind, effs, low, f"R{number}")]
        for rxn in pair:
            _check_reaction(rxn, species, f"reaction R{number}", ln.number)
        reactions.extend(pair)
    return reactions


# ---------------------------------------------------------------------------
# writing


def _fmt(x):
    return repr(float(x))


def format_mechanism(mech):
    """Serialize ``mech`` in the ``.mech`` grammar.

    Forward/reverse pairs produced by reversible expansion are collapsed back
    into a single ``<=>`` line, so ``parse_mechanism(format_mechanism(m))``
    reproduces ``m``.
    """
    names = mech.species_names
    out = []
    if mech.metadata.get("name"):
        out.append(f"MECHANISM {mech.metadata['name']}")
    custom = mech.metadata.get("element_weights", {})
    out.append("ELEMENTS")
    out.append("  " + " ".join(f"{el}={_fmt(custom[el])}" if el in custom else el
                               for el in mech.elements))
    out.append("END")
    out.append("SPECIES")
    for sp in mech.species:
        comp = " ".join(f"{el}:{n}" for el, n in sp.elements.items())
        out.append(f"  {sp.name} {_fmt(sp.molecular_weight)} {comp}".rstrip())
        out.append(f"    T {_fmt(sp.t_low)} {_fmt(sp.t_mid)} {_fmt(sp.t_high)}")
        out.append("    LOW " + " ".join(_fmt(a) for a in sp.nasa7_low))
        out.append("    HIGH " + " ".join(_fmt(a) for a in sp.nasa7_high))
    out.append("END")
    out.append("REACTIONS")
    partners = _reverse_partners(mech)
    for j, rxn in enumerate(mech.reactions):
        if rxn.reverse:
            if j not in partners.values():
                raise ValueError(f"reverse reaction {j} ({rxn.source_tag}) has no forward partner")
            continue
        arrow = "<=>" if j in partners else "=>"
        line = f"  {_side(rxn.reactants, names)} {arrow} {_side(rxn.products, names)}"
        a = rxn.arrhenius
        line += f" | {_fmt(a.A)} {_fmt(a.b)} {_fmt(a.Ea)} | {rxn.kind}"
        if rxn.kind == "falloff":
            lo = rxn.low_pressure_arrhenius
            line += f" low {_fmt(lo.A)} {_fmt(lo.b)} {_fmt(lo.Ea)}"
        if rxn.efficiencies:
            line += " eff " + " ".join(f"{names[i]}:{_fmt(e)}" for i, e in rxn.efficiencies.items())
        out.append(line)
    out.append("END")
    return "\n".join(out) + "\n"


def _reverse_partners(mech):
    """Map forward-reaction index -> index of its equilibrium-reverse partner."""
    rev_by_tag = {}
    for j, rxn in enumerate(mech.reactions):
        if rxn.reverse and rxn.source_tag.startswith("rev of "):
            rev_by_tag[rxn.source_tag[len("rev of "):]] = j
    partners = {}
    for j, rxn in enumerate(mech.reactions):
        if not rxn.reverse and rxn.source_tag.startswith("fwd of "):
            k = rev_by_tag.get(rxn.source_tag[len("fwd of "):])
            if k is not None and _mirrors(rxn, mech.reactions[k]):
                partners[j] = k
    return partners


def _mirrors(fwd, rev):
    return (fwd.reactants == rev.products and fwd.products == rev.reactants
            and fwd.arrhenius == rev.arrhenius and fwd.kind == rev.kind
            and fwd.efficiencies == rev.efficiencies
            and fwd.low_pressure_arrhenius == rev.low_pressure_arrhenius)


def collapse_reversible_count(mech):
    """Number of reaction lines after folding forward/reverse pairs back together."""
    return mech.n_rc - len(_reverse_partners(mech))


def subset_mechanism(mech, species_keep, reaction_keep):
    """Mechanism restricted to the given species/reaction index sets.

    Efficiency entries naming dropped species are removed.  Reactions keep
    their parameters and source tags.
    """
    sp_keep = sorted(species_keep)
    remap = {old: new for new, old in enumerate(sp_keep)}
    reactions = []
    for j in sorted(reaction_keep):
        rxn = mech.reactions[j]
        if not rxn.participants() <= set(remap):
            raise ValueError(f"reaction {j} names a species that is not retained")
        effs = None
        if rxn.efficiencies is not None:
            effs = {remap[i]: e for i, e in rxn.efficiencies.items() if i in remap}
        reactions.append(Reaction(
            {remap[i]: n for i, n in rxn.reactants.items()},
            {remap[i]: n for i, n in rxn.products.items()},
            rxn.arrhenius, rxn.kind, effs, rxn.low_pressure_arrhenius,
            rxn.source_tag, rxn.reverse))
    species = tuple(mech.species[i] for i in sp_keep)
    used = {el for sp in species for el in sp.elements}
    elements = tuple(el for el in mech.elements if el in used) or mech.elements
    return Mechanism(species, tuple(reactions), elements, dict(mech.metadata))
