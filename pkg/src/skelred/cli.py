"""Command-line entry point: ``skelred check | sens | reduce | validate``.

Stages communicate through files below ``--out``::

    fom/       <case>_sigma.csv, optional <case>.skmat snapshots, timing.csv
    rom/       <case>.skfac factor snapshots, <case>_sigma.csv, timing.csv
    compare/   sigma_<case>.csv overlays, summary.txt, timing.csv
    reduce/    chi.csv, species_order.csv, skeletal/n_keep_<n>.mech
    validate/  delays.csv, summary.txt

Each stage writes into a temporary directory that replaces the final one
only on success.  Exit codes: 0 success, 2 invalid input, 3 missing
artifact from an earlier stage, 1 internal error.
"""

from __future__ import annotations

import argparse
import csv
import glob
import hashlib
import json
import logging
import os
import shutil
import sys

import numpy as np

from . import __version__
from .config import ConfigError, load_config
from .fom import TrajectoryTangents, integrate_problem, integrate_state
from .harness import (
    SV_TRACKED,
    _map,
    default_keep_always,
    sigma_errors,
    timing_entry,
    validate_model,
    validate_models,
    write_ranking,
    write_timing,
)
from .mechanism import (
    MechanismError,
    collapse_reversible_count,
    format_mechanism,
    load_mechanism,
    parse_mechanism,
)
from .ranking import build_skeletal, chi_aggregate, factor_weights, rank
from .snapshots import (
    FactorWriter,
    MatrixWriter,
    SnapshotError,
    fmt,
    read_factors,
    read_track_csv,
    write_track_csv,
)
from .tdbcur import run_problem

log = logging.getLogger(__name__)

EXIT_OK, EXIT_INTERNAL, EXIT_INPUT, EXIT_MISSING = 0, 1, 2, 3


class MissingArtifact(RuntimeError):
    """An earlier pipeline stage has not produced a required file."""


# ---------------------------------------------------------------------------
# helpers


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out, command, config=None, mechanism=None, seedless=False, inputs=()):
    """Record the command and content hashes of its inputs before any compute."""
    os.makedirs(out, exist_ok=True)
    files = [p for p in (config, mechanism, *inputs) if p]
    manifest = {
        "command": command,
        "config": os.path.abspath(config) if config else None,
        "mechanism": os.path.abspath(mechanism) if mechanism else None,
        "out": os.path.abspath(out),
        "seedless": bool(seedless),
        "version": __version__,
        "hashes": {os.path.abspath(p): _sha256(p) for p in files},
    }
    name = "manifest-" + command.replace(" ", "-") + ".json"
    with open(os.path.join(out, name), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


class _Stage:
    """Write into ``<out>/.<name>.partial`` and move to ``<out>/<name>`` on success."""

    def __init__(self, out, name):
        self.final = os.path.join(out, name)
        self.tmp = os.path.join(out, f".{name}.partial")

    def __enter__(self):
        shutil.rmtree(self.tmp, ignore_errors=True)
        os.makedirs(self.tmp)
        return self.tmp

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            shutil.rmtree(self.tmp, ignore_errors=True)
            return False
        shutil.rmtree(self.final, ignore_errors=True)
        os.replace(self.tmp, self.final)
        return False


def _require(paths, what):
    missing = [p for p in paths if not os.path.exists(p)]
    if missing:
        raise MissingArtifact(f"missing {what}: " + ", ".join(sorted(missing)))


def _load(args):
    cfg = load_config(args.config, args.mech)
    if args.rank is not None:
        cfg.rank = args.rank
    mech = load_mechanism(cfg.mechanism)
    if not 1 <= cfg.rank <= min(mech.n_eq, mech.n_rc):
        raise ConfigError(f"rank {cfg.rank} outside [1, {min(mech.n_eq, mech.n_rc)}]")
    return cfg, mech


# ---------------------------------------------------------------------------
# commands


def cmd_check(args):
    try:
        mech = load_mechanism(args.mechanism)
        mech.validate()
    except MechanismError as exc:
        print(f"{args.mechanism}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    print(f"mechanism: {mech.metadata.get('name', os.path.basename(args.mechanism))}")
    print(f"elements: {' '.join(mech.elements)}")
    print(f"n_sp: {mech.n_sp}")
    print(f"n_rc: {mech.n_rc}")
    print(f"reaction lines: {collapse_reversible_count(mech)}")
    print(f"n_eq: {mech.n_eq}")
    return EXIT_OK


def _fom_case(mech, case, r, every, snap_path):
    traj = integrate_state(mech, case.initial_state(mech), case.dt, case.t_end)
    writer = MatrixWriter(snap_path) if every else None

    def sink(k, t, S):
        if k % every == 0:
            writer.write(t, S)

    try:
        res = integrate_problem(TrajectoryTangents(mech, traj), save_every=0, isvd_rank=r,
                                callback=sink if writer else None)
    finally:
        if writer:
            writer.close()
    return traj.times, res.singular_values, res.wall_time


def _rom_case(mech, case, r, every, snap_path, rom_options):
    traj = integrate_state(mech, case.initial_state(mech), case.dt, case.t_end)
    with FactorWriter(snap_path) as writer:
        def sink(k, f):
            if k % every == 0 or k == traj.step_count:
                writer.write(f)

        res = run_problem(TrajectoryTangents(mech, traj), r, save_every=0, callback=sink,
                          **rom_options)
    return traj.times, res.singular_values, res.wall_time


def cmd_sens(args):
    cfg, mech = _load(args)
    write_manifest(args.out, f"sens {args.mode}", cfg.path, cfg.mechanism, args.seedless)
    if args.mode == "compare":
        return _compare(args, cfg, mech)
    with _Stage(args.out, args.mode) as tmp:
        if args.mode == "fom":
            jobs = [(mech, c, cfg.rank, cfg.fom_snapshot_every,
                     os.path.join(tmp, f"{c.case_id}.skmat")) for c in cfg.cases]
            results = _map(_fom_case, jobs, args.jobs)
        else:
            jobs = [(mech, c, cfg.rank, max(cfg.snapshot_every, 1),
                     os.path.join(tmp, f"{c.case_id}.skfac"), cfg.rom_options)
                    for c in cfg.cases]
            results = _map(_rom_case, jobs, args.jobs)
        with open(os.path.join(tmp, "timing.csv"), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["case", "steps", "wall_s"])
            for c, (times, sigma, wall) in zip(cfg.cases, results):
                steps = np.arange(times.size)
                write_track_csv(os.path.join(tmp, f"{c.case_id}_sigma.csv"), steps, times, sigma)
                w.writerow([c.case_id, times.size - 1, fmt(wall)])
    print(f"wrote {os.path.join(args.out, args.mode)}")
    return EXIT_OK


def _read_timing(path):
    with open(path, newline="") as fh:
        return {row["case"]: (int(row["steps"]), float(row["wall_s"]))
                for row in csv.DictReader(fh)}


def _compare(args, cfg, mech):
    need = [os.path.join(args.out, s, f"{c.case_id}_sigma.csv")
            for s in ("fom", "rom") for c in cfg.cases]
    need += [os.path.join(args.out, s, "timing.csv") for s in ("fom", "rom")]
    _require(need, "sensitivity outputs (run 'sens fom' and 'sens rom' first)")
    fom_t = _read_timing(os.path.join(args.out, "fom", "timing.csv"))
    rom_t = _read_timing(os.path.join(args.out, "rom", "timing.csv"))
    lines = []
    timing = {}
    with _Stage(args.out, "compare") as tmp:
        for c in cfg.cases:
            steps, times, f_sig = read_track_csv(os.path.join(args.out, "fom",
                                                              f"{c.case_id}_sigma.csv"))
            _, _, r_sig = read_track_csv(os.path.join(args.out, "rom", f"{c.case_id}_sigma.csv"))
            k = min(SV_TRACKED, f_sig.shape[1], r_sig.shape[1])
            with open(os.path.join(tmp, f"sigma_{c.case_id}.csv"), "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["step", "t"] + [f"fom_sigma_{i + 1}" for i in range(k)]
                           + [f"rom_sigma_{i + 1}" for i in range(k)])
                for s, t, a, b in zip(steps, times, f_sig, r_sig):
                    w.writerow([s, fmt(t)] + [fmt(v) for v in a[:k]] + [fmt(v) for v in b[:k]])
            err = sigma_errors(f_sig, r_sig, k)
            lines.append(f"{c.case_id}: max relative sigma error "
                         + " ".join(fmt(e) for e in err))
            n_steps = fom_t[c.case_id][0]
            timing[c.case_id] = timing_entry(fom_t[c.case_id][1], rom_t[c.case_id][1],
                                             mech.n_eq, mech.n_rc, cfg.rank, n_steps,
                                             cfg.rom_options["oversampling"])
        with open(os.path.join(tmp, "summary.txt"), "w") as fh:
            fh.write("\n".join(lines) + "\n")
        write_timing(os.path.join(tmp, "timing.csv"), timing)
    for line in lines:
        print(line)
    for cid, d in timing.items():
        print(f"{cid}: wall-time ratio rom/fom {fmt(d['ratio'])}")
    return EXIT_OK


def cmd_reduce(args):
    cfg, mech = _load(args)
    snaps = [os.path.join(args.out, "rom", f"{c.case_id}.skfac") for c in cfg.cases]
    missing = [c.case_id for c, p in zip(cfg.cases, snaps) if not os.path.exists(p)]
    if missing:
        raise MissingArtifact("missing factor snapshots for cases: " + ", ".join(missing))
    write_manifest(args.out, "reduce", cfg.path, cfg.mechanism, args.seedless, snaps)
    chi = chi_aggregate(w for p in snaps for w in factor_weights(read_factors(p)))
    ranking = rank(mech, chi)
    keep_always = cfg.keep_always or default_keep_always(mech, cfg.cases)
    with _Stage(args.out, "reduce") as tmp:
        write_ranking(tmp, mech, ranking)
        skel = os.path.join(tmp, "skeletal")
        os.makedirs(skel)
        for nk in sorted(set(cfg.n_keep) | {mech.n_sp}):
            nk = max(nk, len(keep_always))
            sk = build_skeletal(mech, ranking.species_order, nk, keep_always)
            text = format_mechanism(sk.mechanism)
            parse_mechanism(text).validate()  # emitted files must re-parse
            with open(os.path.join(skel, f"n_keep_{nk:03d}.mech"), "w") as fh:
                fh.write(text)
    names = mech.species_names
    print("species order: " + " ".join(names[i] for i in ranking.species_order))
    return EXIT_OK


def cmd_validate(args):
    cfg, mech = _load(args)
    files = sorted(glob.glob(os.path.join(args.out, "reduce", "skeletal", "n_keep_*.mech")))
    if not files:
        raise MissingArtifact("missing skeletal mechanisms (run 'reduce' first)")
    write_manifest(args.out, "validate", cfg.path, cfg.mechanism, args.seedless, files)
    models = []
    for path in files:
        sk = load_mechanism(path)
        models.append((f"n_keep={sk.n_sp}", sk.n_sp, sk))
    detailed = dict(zip([c.case_id for c in cfg.cases],
                        _map(validate_model, [(mech, c, cfg.ignition) for c in cfg.cases],
                             args.jobs)))
    report = validate_models(mech, models, cfg.cases, detailed, cfg.ignition, args.jobs,
                             cfg.tolerance).check()
    with _Stage(args.out, "validate") as tmp:
        report.write(tmp, svg=cfg.svg)
    sys.stdout.write(report.summary())
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser():
    p = argparse.ArgumentParser(prog="skelred", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("check", help="parse and validate a mechanism file")
    c.add_argument("mechanism")
    c.set_defaults(func=cmd_check)

    def common(sp):
        sp.add_argument("--config", required=True)
        sp.add_argument("--mech", help="mechanism file (overrides the config)")
        sp.add_argument("--out", default="out")
        sp.add_argument("--rank", type=int)
        sp.add_argument("--jobs", type=int, default=1)
        sp.add_argument("--seedless", action="store_true",
                        help="record that the run uses no random seeds (all stages are deterministic)")

    s = sub.add_parser("sens", help="sensitivities: fom | rom | compare")
    s.add_argument("mode", choices=("fom", "rom", "compare"))
    common(s)
    s.set_defaults(func=cmd_sens)
    r = sub.add_parser("reduce", help="rank species and emit skeletal mechanisms")
    common(r)
    r.set_defaults(func=cmd_reduce)
    v = sub.add_parser("validate", help="ignition-delay errors of skeletal mechanisms")
    common(v)
    v.set_defaults(func=cmd_validate)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, MechanismError, SnapshotError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except MissingArtifact as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except Exception as exc:  # noqa: BLE001 - stable exit code for anything unexpected
        log.debug("internal error", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
