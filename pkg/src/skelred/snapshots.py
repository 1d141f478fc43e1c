"""Snapshot files for sensitivity factors and full sensitivity matrices.

Binary layout (all little-endian)
---------------------------------
A file is an 8-byte magic string followed by records.

* factor files (magic ``b"SKFAC01\\n"``): each record is a header of one
  float64 ``t`` and three int64 ``r, n_eq, n_rc``, then float64 arrays
  ``U`` (``n_eq x r``, row-major), ``sigma`` (``r``) and ``Y``
  (``n_rc x r``, row-major).
* matrix files (magic ``b"SKMAT01\\n"``): each record is a float64 ``t`` and
  int64 ``n_eq, n_rc``, then ``S`` (``n_eq x n_rc``, row-major float64).

CSV layout
----------
``write_factors_csv`` writes one row per matrix entry group with columns
``t, block, i, j, value`` where ``block`` is ``U``, ``sigma`` or ``Y``.
Singular-value tracks are written by ``write_track_csv`` with columns
``step, t, sigma_1, ..., sigma_k``.  Floats use 9 significant digits.
"""

from __future__ import annotations

import csv
import struct

import numpy as np

from .tdbcur import SensitivityFactors

FACTOR_MAGIC = b"SKFAC01\n"
MATRIX_MAGIC = b"SKMAT01\n"
_FACTOR_HEADER = struct.Struct("<dqqq")
_MATRIX_HEADER = struct.Struct("<dqq")
FLOAT_FORMAT = "%.9g"


class SnapshotError(ValueError):
    """Malformed or truncated snapshot file."""


def fmt(x):
    """Float text with 9 significant digits."""
    return FLOAT_FORMAT % x


def _f64(a):
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


class FactorWriter:
    """Append factor records to an open binary file."""

    def __init__(self, path):
        self._fh = open(path, "wb")
        self._fh.write(FACTOR_MAGIC)

    def write(self, factors):
        n_eq, n_rc = factors.shape
        self._fh.write(_FACTOR_HEADER.pack(float(factors.t), factors.r, n_eq, n_rc))
        self._fh.write(_f64(factors.U))
        self._fh.write(_f64(factors.sigma))
        self._fh.write(_f64(factors.Y))

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class MatrixWriter(FactorWriter):
    def __init__(self, path):
        self._fh = open(path, "wb")
        self._fh.write(MATRIX_MAGIC)

    def write(self, t, S):
        S = np.asarray(S)
        self._fh.write(_MATRIX_HEADER.pack(float(t), *S.shape))
        self._fh.write(_f64(S))


def _read(path, magic):
    data = open(path, "rb").read()
    if data[:8] != magic:
        raise SnapshotError(f"{path}: bad magic {data[:8]!r}")
    return data, 8


def _take(data, pos, count, path):
    end = pos + 8 * count
    if end > len(data):
        raise SnapshotError(f"{path}: truncated record")
    return np.frombuffer(data, "<f8", count, pos).astype(float), end


def read_factors(path):
    """All factor records of ``path`` as a list of :class:`SensitivityFactors`."""
    data, pos = _read(path, FACTOR_MAGIC)
    out = []
    while pos < len(data):
        if pos + _FACTOR_HEADER.size > len(data):
            raise SnapshotError(f"{path}: truncated header")
        t, r, n_eq, n_rc = _FACTOR_HEADER.unpack_from(data, pos)
        pos += _FACTOR_HEADER.size
        U, pos = _take(data, pos, n_eq * r, path)
        s, pos = _take(data, pos, r, path)
        Y, pos = _take(data, pos, n_rc * r, path)
        out.append(SensitivityFactors(U.reshape(n_eq, r), s, Y.reshape(n_rc, r), t))
    return out


def read_matrices(path):
    """All matrix records of ``path`` as ``(times, list of arrays)``."""
    data, pos = _read(path, MATRIX_MAGIC)
    times, mats = [], []
    while pos < len(data):
        if pos + _MATRIX_HEADER.size > len(data):
            raise SnapshotError(f"{path}: truncated header")
        t, n_eq, n_rc = _MATRIX_HEADER.unpack_from(data, pos)
        pos += _MATRIX_HEADER.size
        S, pos = _take(data, pos, n_eq * n_rc, path)
        times.append(t)
        mats.append(S.reshape(n_eq, n_rc))
    return np.array(times), mats


def write_factors_csv(path, factors):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "block", "i", "j", "value"])
        for f in factors:
            t = fmt(f.t)
            for name, M in (("U", f.U), ("sigma", f.sigma[None, :]), ("Y", f.Y)):
                for (i, j), v in np.ndenumerate(M):
                    w.writerow([t, name, i, j, fmt(v)])


def write_track_csv(path, steps, times, sigma):
    """Singular-value track: one row per step, ``sigma`` of shape ``(n, k)``."""
    sigma = np.atleast_2d(sigma)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "t"] + [f"sigma_{i + 1}" for i in range(sigma.shape[1])])
        for k, t, row in zip(steps, times, sigma):
            w.writerow([int(k), fmt(t)] + [fmt(v) for v in row])


def read_track_csv(path):
    """Inverse of :func:`write_track_csv`: ``(steps, times, sigma)``."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise SnapshotError(f"{path}: empty track")
    body = np.array([[float(v) for v in r] for r in rows[1:]]).reshape(-1, len(rows[0]))
    return body[:, 0].astype(int), body[:, 1], body[:, 2:]
