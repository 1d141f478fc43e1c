"""Case-grid experiments: sensitivities, rankings and skeletal validation.

A campaign integrates every case with the detailed mechanism, computes
full-order and low-rank sensitivities, aggregates reaction importance over
all steps and cases, builds skeletal models for a sweep of kept-species
counts and compares their ignition delays with the detailed ones.

Outputs split into a deterministic part (delays, errors, rankings,
singular-value tracks) and a timing part kept in separate files.
"""

from __future__ import annotations

import csv
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .constants import ONE_ATM
from .fom import StepFailure, TrajectoryTangents, integrate_problem, integrate_state
from .kinetics import DomainError
from .ranking import build_skeletal, rank, reaction_weights
from .reactor import ReactorState, mole_to_mass_fractions
from .snapshots import fmt, write_track_csv
from .tdbcur import DEFAULT_OVERSAMPLING, run_problem

log = logging.getLogger(__name__)

IGNITION_CRITERIA = ("max-rate", "threshold")
DEFAULT_RATE_FLOOR = 1e5  # K/s
DEFAULT_THRESHOLD_RISE = 400.0  # K
DEFAULT_TOLERANCE = 0.1
SV_TRACKED = 3


class NoIgnition(Exception):
    """The trajectory never ignites within its time window."""


# ---------------------------------------------------------------------------
# cases


def _normalized(comp):
    comp = {k: float(v) for k, v in comp.items() if float(v) != 0.0}
    total = sum(comp.values())
    if total <= 0 or any(v < 0 for v in comp.values()):
        raise ValueError(f"invalid composition {comp}")
    return {k: v / total for k, v in comp.items()}


@dataclass(frozen=True)
class CaseSpec:
    case_id: str
    T0: float  # K
    P0: float  # Pa
    phi: float
    fuel: dict  # mole fractions, summing to 1
    oxidizer: dict
    dt: float  # s
    t_end: float  # s

    def check(self):
        for name, comp in (("fuel", self.fuel), ("oxidizer", self.oxidizer)):
            if abs(sum(comp.values()) - 1.0) > 1e-8:
                raise ValueError(f"case {self.case_id}: {name} mole fractions do not sum to 1")
            if any(v < 0 for v in comp.values()):
                raise ValueError(f"case {self.case_id}: negative {name} mole fraction")
        if not self.phi > 0:
            raise ValueError(f"case {self.case_id}: phi must be positive")
        if not (self.T0 > 0 and self.P0 > 0):
            raise ValueError(f"case {self.case_id}: T0 and P0 must be positive")
        if not (self.dt > 0 and self.t_end > 4 * self.dt):
            raise ValueError(f"case {self.case_id}: need dt > 0 and t_end > 4 dt")
        return self

    @classmethod
    def make(cls, case_id, T0, P_atm, phi, fuel, oxidizer, dt, t_end):
        """Case with ``P`` in atm and unnormalized compositions."""
        return cls(str(case_id), float(T0), float(P_atm) * ONE_ATM, float(phi),
                   _normalized(fuel), _normalized(oxidizer), float(dt), float(t_end)).check()

    @property
    def label(self):
        return f"T{self.T0:g} P{self.P0 / ONE_ATM:g} phi{self.phi:g}"

    def mole_fractions(self, mechanism):
        return equivalence_ratio_to_composition(self.phi, self.fuel, self.oxidizer, mechanism)

    def initial_state(self, mechanism):
        comp = self.mole_fractions(mechanism)
        index = mechanism.species_index
        X = np.zeros(mechanism.n_sp)
        for name, x in comp.items():
            if name not in index:
                raise ValueError(f"species {name!r} of case {self.case_id} is not in the mechanism")
            X[index[name]] = x
        return ReactorState(self.T0, mole_to_mass_fractions(mechanism, X), self.P0)


def _oxygen_demand(elements):
    """O2 consumed by complete oxidation of one molecule (negative for oxidizers)."""
    return elements.get("C", 0) + elements.get("H", 0) / 4.0 - elements.get("O", 0) / 2.0


def equivalence_ratio_to_composition(phi, fuel, oxidizer, mechanism):
    """Mixture mole fractions for equivalence ratio ``phi``.

    The stoichiometric fuel amount per unit oxidizer follows from element
    counts (complete oxidation to CO2 and H2O); ``phi`` scales it.
    """
    if not phi > 0:
        raise ValueError("phi must be positive")
    index = mechanism.species_index

    def demand(comp):
        total = 0.0
        for name, x in comp.items():
            if name not in index:
                raise ValueError(f"unknown species {name!r}")
            total += x * _oxygen_demand(mechanism.species[index[name]].elements)
        return total

    fuel, oxidizer = _normalized(fuel), _normalized(oxidizer)
    d_fuel, d_ox = demand(fuel), demand(oxidizer)
    if d_fuel <= 0:
        raise ValueError("fuel has no oxidizable content")
    if d_ox >= 0:
        raise ValueError("oxidizer supplies no oxygen")
    n_fuel = phi * (-d_ox) / d_fuel  # fuel moles per mole of oxidizer
    mix = {}
    for name, x in fuel.items():
        mix[name] = mix.get(name, 0.0) + n_fuel * x
    for name, x in oxidizer.items():
        mix[name] = mix.get(name, 0.0) + x
    total = sum(mix.values())
    return {k: v / total for k, v in mix.items()}


# ---------------------------------------------------------------------------
# ignition delay


def _vertex(x, y):
    """Abscissa of the parabola through three points."""
    (x0, x1, x2), (y0, y1, y2) = x, y
    d = (x0 - x1) * (x0 - x2) * (x1 - x2)
    a = (x2 * (y1 - y0) + x1 * (y0 - y2) + x0 * (y2 - y1)) / d
    b = (x2 * x2 * (y0 - y1) + x1 * x1 * (y2 - y0) + x0 * x0 * (y1 - y2)) / d
    if a >= 0:
        return x1
    return -b / (2 * a)


def ignition_delay(times, T, criterion="max-rate", floor=DEFAULT_RATE_FLOOR,
                   rise=DEFAULT_THRESHOLD_RISE):
    """Ignition delay of a temperature history.

    ``"max-rate"`` takes the time of the largest ``dT/dt`` (finite
    differences at interval midpoints, refined by a parabola through the
    discrete maximum and its neighbours).  ``"threshold"`` takes the first
    time ``T`` exceeds ``T[0] + rise`` (linear interpolation).

    Raises
    ------
    NoIgnition
        If the largest rate stays below ``floor`` (K/s), the rate peaks at the
        end of the window, or the threshold is never reached.
    """
    t = np.asarray(times, dtype=float)
    T = np.asarray(T, dtype=float)
    if t.size < 3:
        raise ValueError("need at least three samples")
    if criterion == "threshold":
        target = T[0] + rise
        above = np.flatnonzero(T >= target)
        if above.size == 0:
            raise NoIgnition(f"temperature never exceeds {target:g} K")
        i = above[0]
        if i == 0:
            return float(t[0])
        return float(t[i - 1] + (target - T[i - 1]) * (t[i] - t[i - 1]) / (T[i] - T[i - 1]))
    if criterion != "max-rate":
        raise ValueError(f"unknown ignition criterion {criterion!r}")
    rate = np.diff(T) / np.diff(t)
    mid = 0.5 * (t[1:] + t[:-1])
    i = int(np.argmax(rate))
    if rate[i] < floor:
        raise NoIgnition(f"max dT/dt {rate[i]:.3g} K/s below floor {floor:g} K/s")
    if i == rate.size - 1:
        raise NoIgnition("temperature rise rate still increasing at the end of the window")
    if i == 0:
        return float(mid[0])
    return float(_vertex(mid[i - 1:i + 2], rate[i - 1:i + 2]))


def relative_error(tau_reduced, tau_detailed):
    """``|tau_reduced - tau_detailed| / tau_detailed``."""
    if not tau_detailed > 0:
        raise ValueError("detailed delay must be positive")
    return abs(tau_reduced - tau_detailed) / tau_detailed


# ---------------------------------------------------------------------------
# cost model


def flop_estimates(n_eq, n_rc, r, oversampling=DEFAULT_OVERSAMPLING):
    """Per-step floating-point operation counts ``(fom, rom)``.

    Counts the sensitivity update only; the Jacobian and rate evaluations,
    shared by both methods, are excluded.  Small dense factorizations are
    charged their leading-order textbook costs.
    """
    n, m, h = n_eq, r + oversampling, 4 * r
    lu = 2.0 * n ** 3 / 3.0
    fom = lu + 2.0 * n * n * n_rc + 10.0 * n * n_rc
    rom = (lu
           + 4.0 * n * n * m  # column solves and transposed row solves
           + 2.0 * n * h * m + 2.0 * m * n * h + 2.0 * m * h * n_rc  # history
           + 2.0 * m * n * n_rc  # forcing applied to the row selector
           + 4.0 * n * m * m + 2.0 * m * m * n_rc + 8.0 * n_rc * r * r  # SVDs
           + 4.0 * (n + n_rc) * r * r)  # sampling
    return fom, rom


# ---------------------------------------------------------------------------
# per-case work


@dataclass
class CaseResult:
    case_id: str
    tau: float  # nan when the detailed case does not ignite
    status: str
    chi: np.ndarray  # per-case maximum reaction weights over every ROM step
    rom_steps: np.ndarray
    rom_times: np.ndarray
    rom_sigma: np.ndarray  # (n_steps + 1, r)
    fom_sigma: np.ndarray | None = None  # (n_steps + 1, k) reference iSVD track
    fom_time: float = math.nan
    rom_time: float = math.nan
    sv_error: np.ndarray | None = None  # max relative error per tracked sigma
    n_steps: int = 0


def _delay(traj, ignition):
    try:
        return ignition_delay(traj.times, traj.temperature, **ignition), "ok"
    except NoIgnition as exc:
        return math.nan, f"no-ignition: {exc}"


def sigma_errors(fom_sigma, rom_sigma, k=SV_TRACKED, start=0):
    """Maximum over steps of ``|sigma_rom - sigma_fom| / sigma_fom`` for the top ``k``."""
    k = min(k, fom_sigma.shape[1], rom_sigma.shape[1])
    ref = fom_sigma[start:, :k]
    got = rom_sigma[start:, :k]
    ok = ref > 0
    err = np.zeros(k)
    for i in range(k):
        m = ok[:, i]
        if m.any():
            err[i] = float(np.max(np.abs(got[m, i] - ref[m, i]) / ref[m, i]))
    return err


def run_case(mechanism, case, r, rom_options=None, ignition=None, compare_fom=True,
             factor_sink=None):
    """Detailed trajectory, ROM sensitivities and (optionally) the FOM reference.

    ``factor_sink(k, factors)`` receives every ROM factor triplet (warmup
    included) for streaming to disk.
    """
    ignition = dict(ignition or {})
    rom_options = dict(rom_options or {})
    traj = integrate_state(mechanism, case.initial_state(mechanism), case.dt, case.t_end)
    tau, status = _delay(traj, ignition)
    problem = TrajectoryTangents(mechanism, traj)
    chi = np.zeros(mechanism.n_rc)

    def on_factors(k, f):
        np.maximum(chi, reaction_weights(f.sigma, f.Y), out=chi)
        if factor_sink is not None:
            factor_sink(k, f)

    rom = run_problem(problem, r, save_every=0, callback=on_factors, **rom_options)
    steps = np.arange(problem.n_steps + 1)
    res = CaseResult(case.case_id, tau, status, chi, steps, problem.times[steps],
                     rom.singular_values, rom_time=rom.wall_time, n_steps=problem.n_steps)
    if compare_fom:
        fom = integrate_problem(problem, save_every=0, isvd_rank=r)
        res.fom_sigma = fom.singular_values
        res.fom_time = fom.wall_time
        res.sv_error = sigma_errors(fom.singular_values, rom.singular_values)
    return res


def validate_model(mechanism, case, ignition=None):
    """Ignition delay of ``case`` under ``mechanism``: ``(tau, status)``."""
    try:
        traj = integrate_state(mechanism, case.initial_state(mechanism), case.dt, case.t_end)
    except (StepFailure, DomainError, ValueError) as exc:
        return math.nan, f"failed: {exc}"
    return _delay(traj, dict(ignition or {}))


def _map(fn, args, jobs):
    if jobs <= 1 or len(args) <= 1:
        return [fn(*a) for a in args]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(fn, *a) for a in args]
        return [f.result() for f in futures]


# ---------------------------------------------------------------------------
# report


@dataclass
class ValidationReport:
    cases: list  # CaseSpec
    models: list  # labels; "detailed" first, then "n_keep=<n>"
    n_keep: dict  # label -> kept species count
    delays: dict  # (case_id, label) -> tau or nan
    errors: dict  # (case_id, label) -> relative error (inf when the model fails)
    status: dict  # (case_id, label) -> "ok" or a failure message
    sv_errors: dict = field(default_factory=dict)  # case_id -> max relative error per sigma
    timing: dict = field(default_factory=dict)  # case_id -> {fom, rom, ratio, flops...}
    ranking: object = None
    tolerance: float = DEFAULT_TOLERANCE

    def check(self):
        ids = {c.case_id for c in self.cases}
        for key, e in self.errors.items():
            if key[0] not in ids or key[1] not in self.models:
                raise ValueError(f"report entry {key} references an unknown case or model")
            if not e >= 0:
                raise ValueError(f"negative or undefined error for {key}")
        expected = {(c.case_id, m) for c in self.cases for m in self.models}
        if set(self.delays) != expected:
            raise ValueError("report does not cover every (case, model) pair exactly once")
        return self

    def max_error(self, label):
        errs = [self.errors[(c.case_id, label)] for c in self.cases
                if (c.case_id, label) in self.errors]
        return max(errs) if errs else math.inf

    def smallest_passing(self, tolerance=None):
        """Smallest kept-species count whose worst error is below ``tolerance``."""
        tol = self.tolerance if tolerance is None else tolerance
        passing = [self.n_keep[m] for m in self.models[1:] if self.max_error(m) < tol]
        return min(passing) if passing else None

    # -- output ------------------------------------------------------------

    def write(self, out_dir, mechanism=None, svg=False):
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "delays.csv"), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["case", "T0", "P_atm", "phi", "model", "n_keep", "tau", "error",
                        "status"])
            for c in self.cases:
                for m in self.models:
                    key = (c.case_id, m)
                    err = self.errors.get(key, math.nan)
                    w.writerow([c.case_id, fmt(c.T0), fmt(c.P0 / ONE_ATM), fmt(c.phi), m,
                                self.n_keep.get(m, ""), fmt(self.delays[key]), fmt(err),
                                self.status[key]])
        if self.sv_errors:
            with open(os.path.join(out_dir, "sigma_errors.csv"), "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                k = max(len(v) for v in self.sv_errors.values())
                w.writerow(["case"] + [f"sigma_{i + 1}" for i in range(k)])
                for cid, errs in self.sv_errors.items():
                    w.writerow([cid] + [fmt(e) for e in errs])
        if self.ranking is not None and mechanism is not None:
            write_ranking(out_dir, mechanism, self.ranking)
        with open(os.path.join(out_dir, "summary.txt"), "w") as fh:
            fh.write(self.summary())
        if self.timing:
            write_timing(os.path.join(out_dir, "timing.csv"), self.timing)
        if svg:
            plot_errors(os.path.join(out_dir, "errors.svg"), self)

    def summary(self):
        lines = [f"cases: {len(self.cases)}", f"models: {len(self.models)}",
                 f"tolerance: {fmt(self.tolerance)}"]
        for m in self.models:
            lines.append(f"{m}: max error {fmt(self.max_error(m))}")
        best = self.smallest_passing()
        lines.append(f"smallest passing n_keep: {best if best is not None else 'none'}")
        failed = sorted(k for k, s in self.status.items() if s != "ok")
        for cid, m in failed:
            lines.append(f"failed {cid} {m}: {self.status[(cid, m)]}")
        return "\n".join(lines) + "\n"


def write_ranking(out_dir, mechanism, ranking):
    with open(os.path.join(out_dir, "chi.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rank", "index", "equation", "chi"])
        for pos, j in enumerate(ranking.reaction_order):
            w.writerow([pos + 1, int(j), mechanism.equation(int(j)), fmt(ranking.chi[j])])
    with open(os.path.join(out_dir, "species_order.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rank", "index", "species"])
        names = mechanism.species_names
        for pos, i in enumerate(ranking.species_order):
            w.writerow([pos + 1, int(i), names[i]])


def write_timing(path, timing):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["case", "fom_s", "rom_s", "ratio", "fom_flops", "rom_flops", "flop_ratio"])
        for cid, d in timing.items():
            w.writerow([cid] + [fmt(d[k]) for k in ("fom", "rom", "ratio", "fom_flops",
                                                     "rom_flops", "flop_ratio")])


def timing_entry(fom_time, rom_time, n_eq, n_rc, r, n_steps, oversampling=DEFAULT_OVERSAMPLING):
    f_fom, f_rom = flop_estimates(n_eq, n_rc, r, oversampling)
    return {"fom": fom_time, "rom": rom_time, "ratio": rom_time / fom_time,
            "fom_flops": f_fom * n_steps, "rom_flops": f_rom * n_steps,
            "flop_ratio": f_rom / f_fom}


def plot_tracks(path, times, fom_sigma, rom_sigma, k=SV_TRACKED):
    """Overlay of the leading singular values (requires matplotlib)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for i in range(min(k, rom_sigma.shape[1])):
        if fom_sigma is not None:
            ax.semilogy(times, fom_sigma[:, i], "k-", lw=1)
        ax.semilogy(times, rom_sigma[:, i], "--", lw=1, label=f"sigma_{i + 1}")
    ax.set_xlabel("t [s]")
    ax.set_ylabel("singular value")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_errors(path, report):
    """Relative delay error against ``1000/T0`` for each reduced model."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    x = np.array([1000.0 / c.T0 for c in report.cases])
    for m in report.models[1:]:
        y = np.array([report.errors[(c.case_id, m)] for c in report.cases])
        ax.plot(x, y, "o", label=m)
    ax.set_xlabel("1000 / T0 [1/K]")
    ax.set_ylabel("relative delay error")
    ax.legend(fontsize=6)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


# ---------------------------------------------------------------------------
# campaign


def default_keep_always(mechanism, cases):
    """Species present in any initial mixture (fuel, oxidizer and diluents)."""
    names = []
    for c in cases:
        for name in c.mole_fractions(mechanism):
            if name not in names:
                names.append(name)
    return tuple(names)


def validate_models(mechanism, models, cases, detailed_tau, ignition=None, jobs=1,
                    tolerance=DEFAULT_TOLERANCE):
    """Delays and errors of reduced ``models`` (a list of ``(label, n_keep, mech)``)."""
    labels = ["detailed"] + [label for label, _, _ in models]
    n_keep = {"detailed": mechanism.n_sp}
    delays, errors, status = {}, {}, {}
    for c in cases:
        key = (c.case_id, "detailed")
        delays[key] = detailed_tau[c.case_id][0]
        status[key] = detailed_tau[c.case_id][1]
        if status[key] == "ok":
            errors[key] = 0.0
    jobs_args = [(mech, c, ignition) for _, _, mech in models for c in cases]
    results = iter(_map(validate_model, jobs_args, jobs))
    for label, nk, _ in models:
        n_keep[label] = nk
        for c in cases:
            tau, st = next(results)
            key = (c.case_id, label)
            delays[key], status[key] = tau, st
            ref = delays[(c.case_id, "detailed")]
            if math.isnan(ref):
                continue  # detailed case did not ignite; nothing to compare
            errors[key] = relative_error(tau, ref) if st == "ok" else math.inf
    return ValidationReport(list(cases), labels, n_keep, delays, errors, status,
                            tolerance=tolerance)


def run_campaign(mechanism, cases, r, n_keep, tolerance=DEFAULT_TOLERANCE, jobs=1,
                 keep_always=None, rom_options=None, ignition=None, compare_fom=True,
                 out_dir=None, svg=False):
    """Full pipeline over ``cases``; returns a :class:`ValidationReport`.

    The sweep always contains the identity reduction ``n_keep = n_sp``.
    Cases whose detailed run does not ignite are recorded and excluded from
    the error statistics.
    """
    for c in cases:
        c.check()
    results = _map(run_case, [(mechanism, c, r, rom_options, ignition, compare_fom)
                              for c in cases], jobs)
    chi = np.max([res.chi for res in results], axis=0)
    ranking = rank(mechanism, chi)
    if keep_always is None:
        keep_always = default_keep_always(mechanism, cases)
    sweep = sorted({int(n) for n in n_keep} | {mechanism.n_sp})
    models = []
    for nk in sweep:
        nk_eff = max(nk, len(keep_always))
        sk = build_skeletal(mechanism, ranking.species_order, nk_eff, keep_always,
                            {"cases": [c.case_id for c in cases], "r": r})
        models.append((f"n_keep={nk_eff}", nk_eff, sk.mechanism))
    models = list({label: (label, nk, m) for label, nk, m in models}.values())
    detailed = {res.case_id: (res.tau, res.status) for res in results}
    report = validate_models(mechanism, models, cases, detailed, ignition, jobs, tolerance)
    report.ranking = ranking
    ropts = rom_options or {}
    for res in results:
        if res.sv_error is not None:
            report.sv_errors[res.case_id] = res.sv_error
            report.timing[res.case_id] = timing_entry(
                res.fom_time, res.rom_time, mechanism.n_eq, mechanism.n_rc, r, res.n_steps,
                ropts.get("oversampling", DEFAULT_OVERSAMPLING))
    report.check()
    if out_dir is not None:
        report.write(out_dir, mechanism, svg)
        for res in results:
            write_track_csv(os.path.join(out_dir, f"sigma_rom_{res.case_id}.csv"),
                            res.rom_steps, res.rom_times, res.rom_sigma)
            if res.fom_sigma is not None:
                write_track_csv(os.path.join(out_dir, f"sigma_fom_{res.case_id}.csv"),
                                res.rom_steps, res.rom_times, res.fom_sigma)
                if svg:
                    plot_tracks(os.path.join(out_dir, f"sigma_{res.case_id}.svg"),
                                res.rom_times, res.fom_sigma, res.rom_sigma)
    return report
