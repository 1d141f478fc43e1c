"""Command-line pipeline: exit codes, stage outputs and determinism."""

import csv
import glob
import hashlib
import json
import os
import re
import subprocess
import sys

import numpy as np
import pytest

from skelred import cli
from skelred.mechanism import load_mechanism

from conftest import CORPUS, data_path

# two 1 atm hydrogen cases keep the whole pipeline to a few seconds
CONFIG = """
[campaign]
mechanism = h2o2.mech
fuel = H2:1
oxidizer = O2:0.21, N2:0.79
rank = 7
n_keep = 7, 8
snapshot_every = 5

[case lean]
T0 = 1200
P_atm = 1
phi = 0.5
dt = 1e-7
t_end = 1.5e-4

[case rich]
T0 = 1200
P_atm = 1
phi = 1.0
dt = 1e-7
t_end = 1e-4
"""


def run(*argv):
    return cli.main([str(a) for a in argv])


def _reaction_lines(path):
    """Reversible and irreversible reaction lines, counted from the file text."""
    rev = irr = 0
    inside = False
    for line in open(path):
        word = line.strip()
        if word in ("REACTIONS", "END"):
            inside = word == "REACTIONS"
        elif inside and word and not word.startswith("#"):
            if "<=>" in word.split("|")[0]:
                rev += 1
            else:
                irr += 1
    return rev, irr


@pytest.fixture(scope="module")
def config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "h2.ini"
    path.write_text(CONFIG)
    return path


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory, config):
    out = tmp_path_factory.mktemp("run")
    codes = [run("sens", "fom", "--config", config, "--out", out),
             run("sens", "rom", "--config", config, "--out", out),
             run("sens", "compare", "--config", config, "--out", out),
             run("reduce", "--config", config, "--out", out),
             run("validate", "--config", config, "--out", out)]
    return out, codes


# ---------------------------------------------------------------------------
# check


def test_check_valid(capsys):
    assert run("check", data_path("h2o2.mech")) == 0
    out = capsys.readouterr().out
    assert "n_sp: 9" in out and "n_rc: 56" in out


@pytest.mark.parametrize("name", ["h2o2.mech", "methane.mech", "gri30.mech"])
def test_check_counts_reversible_pairs(capsys, name):
    path = data_path(name)
    assert run("check", path) == 0
    rev, irr = _reaction_lines(path)
    out = capsys.readouterr().out
    assert f"n_rc: {2 * rev + irr}" in out
    assert f"reaction lines: {rev + irr}" in out


def test_check_unbalanced(capsys):
    path = os.path.join(CORPUS, "invalid", "unbalanced.mech")
    assert run("check", path) == 2
    err = capsys.readouterr().err
    assert "line 17" in err and "not balanced" in err


def test_check_missing_file(capsys, tmp_path):
    assert run("check", tmp_path / "nope.mech") == 2


def test_console_script():
    proc = subprocess.run([sys.executable, "-m", "skelred.cli", "check", data_path("h2o2.mech")],
                          capture_output=True, text=True, check=False)
    assert proc.returncode == 0 and "n_sp: 9" in proc.stdout


# ---------------------------------------------------------------------------
# error contract


def test_missing_snapshots_exit_3(tmp_path, config, capsys):
    assert run("reduce", "--config", config, "--out", tmp_path) == 3
    err = capsys.readouterr().err
    assert "lean" in err and "rich" in err


def test_validate_without_reduce_exit_3(tmp_path, config):
    assert run("validate", "--config", config, "--out", tmp_path) == 3


def test_compare_without_sens_exit_3(tmp_path, config):
    assert run("sens", "compare", "--config", config, "--out", tmp_path) == 3


def test_bad_config_exit_2(tmp_path):
    bad = tmp_path / "bad.ini"
    bad.write_text(CONFIG.replace("phi = 0.5", "phi = zero"))
    assert run("sens", "rom", "--config", bad, "--out", tmp_path / "o") == 2
    assert run("sens", "rom", "--config", tmp_path / "missing.ini", "--out", tmp_path) == 2


def test_bad_rank_exit_2(tmp_path, config):
    assert run("sens", "rom", "--config", config, "--out", tmp_path, "--rank", 11) == 2


def test_internal_error_exit_1_leaves_no_partial_output(tmp_path, config, monkeypatch):
    def boom(*args, **kwargs):
        raise RuntimeError("boom")

    monkeypatch.setattr(cli, "run_problem", boom)
    assert run("sens", "rom", "--config", config, "--out", tmp_path) == 1
    assert not os.path.exists(tmp_path / "rom")
    assert not os.path.exists(tmp_path / ".rom.partial")


# ---------------------------------------------------------------------------
# pipeline


def test_pipeline_succeeds(pipeline):
    out, codes = pipeline
    assert codes == [0, 0, 0, 0, 0]
    for sub in ("fom", "rom", "compare", "reduce", "validate"):
        assert os.path.isdir(out / sub)
    assert not glob.glob(str(out / ".*.partial"))


def test_manifest_hashes(pipeline, config):
    out, _ = pipeline
    with open(out / "manifest-reduce.json") as fh:
        man = json.load(fh)
    assert man["command"] == "reduce"
    for path, digest in man["hashes"].items():
        assert hashlib.sha256(open(path, "rb").read()).hexdigest() == digest
    assert str(config) in man["hashes"]
    assert len(man["hashes"]) == 4  # config, mechanism, two snapshot files


def test_compare_outputs(pipeline):
    out, _ = pipeline
    summary = (out / "compare" / "summary.txt").read_text().splitlines()
    assert len(summary) == 2
    for line in summary:
        errs = [float(v) for v in line.split("error")[1].split()]
        assert max(errs) < 0.05
    with open(out / "compare" / "timing.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["case"] for r in rows] == ["lean", "rich"]


def test_factor_snapshot_cadence(pipeline):
    from skelred.snapshots import read_factors

    out, _ = pipeline
    facs = read_factors(out / "rom" / "rich.skfac")
    steps = [round(f.t / 1e-7) for f in facs]
    assert steps == list(range(0, 1001, 5))


def test_reduce_outputs(pipeline):
    out, _ = pipeline
    mech = load_mechanism(data_path("h2o2.mech"))
    with open(out / "reduce" / "species_order.csv") as fh:
        order = [r["species"] for r in csv.DictReader(fh)]
    assert {"H2", "O2"} <= set(order[:5])
    files = sorted(glob.glob(str(out / "reduce" / "skeletal" / "*.mech")))
    assert [os.path.basename(f) for f in files] == ["n_keep_007.mech", "n_keep_008.mech",
                                                    "n_keep_009.mech"]
    full = load_mechanism(files[-1])
    assert full.species_names == mech.species_names
    assert [mech.equation(j) for j in range(mech.n_rc)] == [full.equation(j)
                                                             for j in range(full.n_rc)]
    for f in files:
        assert run("check", f) == 0


def test_validate_outputs(pipeline):
    out, _ = pipeline
    with open(out / "validate" / "delays.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2 * 4  # cases x (detailed + three skeletal models)
    for r in rows:
        if r["model"] in ("detailed", "n_keep=9"):
            assert float(r["error"]) == 0.0
    summary = (out / "validate" / "summary.txt").read_text()
    assert re.search(r"smallest passing n_keep: 8", summary)


def test_full_rank_compare(tmp_path, config):
    # rank = n_eq reproduces the full-order singular values
    for mode in ("fom", "rom", "compare"):
        assert run("sens", mode, "--config", config, "--out", tmp_path, "--rank", 10) == 0
    for line in (tmp_path / "compare" / "summary.txt").read_text().splitlines():
        errs = [float(v) for v in line.split("error")[1].split()]
        assert max(errs) < 1e-6


def test_rerun_is_byte_identical(pipeline, config, tmp_path):
    out, _ = pipeline
    other = tmp_path / "again"
    # same command sequence into a fresh directory; compare every non-timing file
    # (manifests record the output path and sit outside the stage directories)
    for argv in (("sens", "fom"), ("sens", "rom"), ("sens", "compare"), ("reduce",),
                 ("validate",)):
        assert run(*argv, "--config", config, "--out", other) == 0
    for sub in ("fom", "rom", "compare", "reduce", "validate"):
        names = sorted(os.listdir(out / sub))
        assert names == sorted(os.listdir(other / sub))
        for name in names:
            if name == "timing.csv" or os.path.isdir(out / sub / name):
                continue
            assert (out / sub / name).read_bytes() == (other / sub / name).read_bytes(), name
    a = sorted(os.listdir(out / "reduce" / "skeletal"))
    for name in a:
        assert ((out / "reduce" / "skeletal" / name).read_bytes()
                == (other / "reduce" / "skeletal" / name).read_bytes())


def test_jobs_flag_matches_serial(pipeline, config, tmp_path):
    out, _ = pipeline
    assert run("sens", "rom", "--config", config, "--out", tmp_path, "--jobs", 2) == 0
    for name in ("lean.skfac", "rich.skfac", "lean_sigma.csv"):
        assert (out / "rom" / name).read_bytes() == (tmp_path / "rom" / name).read_bytes()


def test_tracks_agree_with_library(pipeline):
    from skelred.snapshots import read_track_csv

    out, _ = pipeline
    _, _, f_sig = read_track_csv(out / "fom" / "lean_sigma.csv")
    _, _, r_sig = read_track_csv(out / "rom" / "lean_sigma.csv")
    assert f_sig.shape == r_sig.shape == (1501, 7)
    assert np.all(f_sig[0] == 0)
