"""Rational functions of an SPD pencil applied to a source vector.

For a pencil (K, M) and source f the target is ``exp(-t M^{-1}K) M^{-1} f``.
A shared-pole family needs one shifted factorization ``K - xi M`` per
representative pole; a single-time [m/m] approximant needs one per pole
and per time, ``t K - xi M``.
"""

from __future__ import annotations

import hashlib
import io
import json
import threading
import warnings
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.io
import scipy.sparse as sp
from scipy.linalg import LinAlgWarning, cho_factor, cho_solve, eigh, lu_factor, lu_solve
from scipy.linalg.lapack import get_lapack_funcs

from .ratcore import RationalFamily

ORACLE_MAX_N = 2000


class PencilError(ValueError):
    """Pencil matrices are inconsistent, nonsymmetric or M is not SPD."""


class SingularShiftError(ArithmeticError):
    """A shifted matrix was singular; the shift must lie on the spectrum."""


@dataclass(frozen=True, eq=False)
class Pencil:
    """Stiffness ``K`` (SPSD), mass ``M`` (SPD), source ``f`` and optional rows ``Q``.

    ``f`` may hold several sources as columns. ``bandwidth`` (half
    bandwidth) selects banded factorizations when set.
    """

    K: np.ndarray
    M: np.ndarray
    f: np.ndarray
    Q: np.ndarray | None = None
    bandwidth: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        K = _dense(self.K)
        M = _dense(self.M)
        f = np.asarray(self.f, dtype=float)
        n = K.shape[0]
        if K.shape != (n, n) or M.shape != (n, n):
            raise PencilError("K and M must be square of equal size")
        if f.shape[0] != n or f.ndim > 2:
            raise PencilError("source length does not match the pencil")
        for name, A in (("K", K), ("M", M)):
            scale = max(np.abs(A).max(), np.finfo(float).tiny)
            if np.abs(A - A.T).max() > 1e-12 * scale:
                raise PencilError(f"{name} is not symmetric")
        try:
            np.linalg.cholesky(M)
        except np.linalg.LinAlgError as exc:
            raise PencilError("M is not positive definite") from exc
        Q = None
        if self.Q is not None:
            Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
            if Q.shape[1] != n:
                raise PencilError("Q column count does not match the pencil")
        if self.bandwidth is not None:
            bw = int(self.bandwidth)
            i, j = np.nonzero(K != 0)
            i2, j2 = np.nonzero(M != 0)
            if np.any(np.abs(i - j) > bw) or np.any(np.abs(i2 - j2) > bw):
                raise PencilError("matrix entries outside the declared bandwidth")
            object.__setattr__(self, "bandwidth", bw)
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "M", M)
        object.__setattr__(self, "f", f)
        object.__setattr__(self, "Q", Q)

    @property
    def n(self) -> int:
        return self.K.shape[0]

    @property
    def fingerprint(self) -> str:
        fp = self.__dict__.get("_fingerprint")
        if fp is None:
            h = hashlib.sha1()
            for A in (self.K, self.M):
                h.update(np.ascontiguousarray(A).tobytes())
            fp = h.hexdigest()
            object.__setattr__(self, "_fingerprint", fp)
        return fp

    def with_mass(self, M) -> Pencil:
        return Pencil(self.K, M, self.f, self.Q, self.bandwidth, dict(self.meta))

    # Matrix Market bundle

    def save(self, directory, extra: dict | None = None) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        files = {"K": "K.mtx", "M": "M.mtx", "f": "f.mtx"}
        _mmwrite(d / "K.mtx", self.K)
        _mmwrite(d / "M.mtx", self.M)
        _mmwrite(d / "f.mtx", self.f.reshape(self.n, -1))
        if self.Q is not None:
            _mmwrite(d / "Q.mtx", self.Q)
            files["Q"] = "Q.mtx"
        manifest = dict(files)
        manifest["bandwidth"] = self.bandwidth
        manifest["n"] = self.n
        manifest["meta"] = self.meta
        if extra:
            manifest.update(extra)
        (d / "manifest.json").write_text(json.dumps(manifest, indent=1))
        return d

    @classmethod
    def load(cls, directory) -> Pencil:
        d = Path(directory)
        try:
            manifest = json.loads((d / "manifest.json").read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise PencilError(f"cannot read pencil manifest in {d}") from exc
        K = _mmread(d / manifest["K"])
        M = _mmread(d / manifest["M"])
        f = _mmread(d / manifest["f"])
        if f.shape[1] == 1:
            f = f[:, 0]
        Q = _mmread(d / manifest["Q"]) if manifest.get("Q") else None
        return cls(K, M, f, Q, manifest.get("bandwidth"), manifest.get("meta") or {})


def load_manifest(directory) -> dict:
    return json.loads((Path(directory) / "manifest.json").read_text())


def _dense(A) -> np.ndarray:
    if sp.issparse(A):
        A = A.toarray()
    return np.atleast_2d(np.asarray(A, dtype=float))


def _mmwrite(path, A):
    scipy.io.mmwrite(str(path), sp.coo_matrix(np.atleast_2d(A)), precision=17, symmetry="general")


def _mmread(path) -> np.ndarray:
    A = scipy.io.mmread(str(path))
    return A.toarray() if sp.issparse(A) else np.asarray(A)


class SolveLedger:
    """Thread-safe counters for shifted factorizations and solves.

    ``spd_factorizations`` counts real Cholesky factorizations of M and is
    kept apart from the shifted-system counts.
    """

    FIELDS = ("factorizations", "triangular_solves", "rhs_columns_solved", "spd_factorizations")

    def __init__(self):
        self._lock = threading.Lock()
        self.factorizations = 0
        self.triangular_solves = 0
        self.rhs_columns_solved = 0
        self.spd_factorizations = 0

    def add(self, factorizations=0, triangular_solves=0, rhs_columns_solved=0,
            spd_factorizations=0):
        with self._lock:
            self.factorizations += factorizations
            self.triangular_solves += triangular_solves
            self.rhs_columns_solved += rhs_columns_solved
            self.spd_factorizations += spd_factorizations

    def snapshot(self) -> dict:
        with self._lock:
            return {k: getattr(self, k) for k in self.FIELDS}

    def since(self, before: dict) -> dict:
        now = self.snapshot()
        return {k: now[k] - before[k] for k in self.FIELDS}

    def __repr__(self):
        return f"SolveLedger({self.snapshot()})"


class ShiftFactorization:
    """LU factorization of ``scale*K - shift*M`` (dense or banded).

    Real shifts are factorized in real arithmetic. The shifted matrix is
    complex symmetric, so transposed solves reuse the same factors.
    """

    def __init__(self, K, M, shift: complex, scale: float = 1.0,
                 bandwidth: int | None = None, ledger: SolveLedger | None = None):
        self.shift = complex(shift)
        self.scale = float(scale)
        self.bandwidth = bandwidth
        self.ledger = ledger
        real = self.shift.imag == 0.0
        self.dtype = np.float64 if real else np.complex128
        s = self.shift.real if real else self.shift
        A = self.scale * K - s * M
        self.n = A.shape[0]
        if bandwidth is None:
            with warnings.catch_warnings():
                # exact singularity is reported below as SingularShiftError
                warnings.simplefilter("ignore", LinAlgWarning)
                self._lu = lu_factor(A, check_finite=False)
            singular = np.any(np.diag(self._lu[0]) == 0)
        else:
            kl = ku = int(bandwidth)
            ab = np.zeros((2 * kl + ku + 1, self.n), dtype=self.dtype)
            for d in range(-kl, ku + 1):
                diag = np.diagonal(A, d)
                if d >= 0:
                    ab[kl + ku - d, d:] = diag
                else:
                    ab[kl + ku - d, : self.n + d] = diag
            gbtrf, self._gbtrs = get_lapack_funcs(("gbtrf", "gbtrs"), (ab,))
            lu, piv, info = gbtrf(ab, kl, ku)
            if info < 0:
                raise ValueError(f"gbtrf argument error {info}")
            singular = info > 0
            self._band = (lu, piv, kl, ku)
        if singular:
            raise SingularShiftError(
                f"K - xi M is singular for xi={self.shift}; the pole touches the spectrum")
        if ledger is not None:
            ledger.add(factorizations=1)

    def solve(self, rhs, trans: bool = False) -> np.ndarray:
        b = np.asarray(rhs)
        cols = 1 if b.ndim == 1 else b.shape[1]
        if self.dtype == np.float64 and np.iscomplexobj(b):
            x = self.solve(b.real, trans) + 1j * self.solve(b.imag, trans)
            if self.ledger is not None:
                # one logical solve for the complex right-hand side
                self.ledger.add(triangular_solves=-1, rhs_columns_solved=-cols)
            return x
        b = b.astype(self.dtype, copy=False)
        if self.bandwidth is None:
            x = lu_solve(self._lu, b, trans=1 if trans else 0, check_finite=False)
        else:
            lu, piv, kl, ku = self._band
            x, info = self._gbtrs(lu, kl, ku, b, piv, trans=1 if trans else 0)
            if info != 0:
                raise ValueError(f"gbtrs failed with info {info}")
        if self.ledger is not None:
            self.ledger.add(triangular_solves=1, rhs_columns_solved=cols)
        return x


class FactorizationCache:
    """Reuses factorizations keyed by (shift, scale, matrix token)."""

    def __init__(self, max_size: int = 256):
        self._store: dict = {}
        self._lock = threading.Lock()
        self.max_size = max_size

    def get(self, K, M, shift, scale=1.0, bandwidth=None, ledger=None, token=None):
        key = (complex(shift), float(scale), token)
        with self._lock:
            fac = self._store.get(key)
        if fac is None:
            fac = ShiftFactorization(K, M, shift, scale, bandwidth, ledger)
            with self._lock:
                if len(self._store) >= self.max_size:
                    self._store.pop(next(iter(self._store)))
                self._store[key] = fac
        fac.ledger = ledger
        return fac

    def __len__(self):
        return len(self._store)

    def clear(self):
        with self._lock:
            self._store.clear()


@dataclass(frozen=True, eq=False)
class SnapshotMatrix:
    """One real column per time channel."""

    columns: np.ndarray
    times: np.ndarray

    def __post_init__(self):
        cols = np.asarray(self.columns, dtype=float)
        if cols.ndim == 1:
            cols = cols[:, None]
        times = np.atleast_1d(np.asarray(self.times, dtype=float))
        if cols.shape[1] != times.size:
            raise ValueError("column count must equal the number of times")
        object.__setattr__(self, "columns", cols)
        object.__setattr__(self, "times", times)

    @property
    def n_times(self) -> int:
        return self.times.size

    def observe(self, Q) -> SnapshotMatrix:
        return SnapshotMatrix(np.atleast_2d(Q) @ self.columns, self.times)

    def checksum(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.columns).tobytes()).hexdigest()

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write(",".join(repr(float(t)) for t in self.times) + "\n")
        for row in self.columns:
            out.write(",".join(repr(float(v)) for v in row) + "\n")
        return out.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> SnapshotMatrix:
        lines = [ln for ln in text.strip().splitlines() if ln.strip()]
        times = np.array([float(v) for v in lines[0].split(",")])
        cols = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]])
        return cls(cols.reshape(-1, times.size), times)

    def save(self, path):
        Path(path).write_text(self.to_csv())

    @classmethod
    def load(cls, path) -> SnapshotMatrix:
        return cls.from_csv(Path(path).read_text())


def _source(pencil: Pencil, f):
    f = pencil.f if f is None else np.asarray(f, dtype=float)
    if f.ndim != 1 or f.size != pencil.n:
        raise ValueError("expected a single source vector of pencil length")
    return f


def mass_solve(pencil: Pencil, rhs, ledger: SolveLedger | None = None) -> np.ndarray:
    """``M^{-1} rhs`` through one Cholesky factorization (logged separately)."""
    c = cho_factor(pencil.M)
    if ledger is not None:
        ledger.add(spd_factorizations=1)
    return cho_solve(c, rhs)


def solve_columns(family: RationalFamily, pencil: Pencil, f=None, ledger=None,
                  cache: FactorizationCache | None = None, workers: int = 1) -> np.ndarray:
    """Tall-skinny solve matrix: one column ``(K - xi_i M)^{-1} f`` per representative pole."""
    f = _source(pencil, f)
    shifts = family.shifts()

    def unit(xi):
        if cache is None:
            fac = ShiftFactorization(pencil.K, pencil.M, xi, 1.0, pencil.bandwidth, ledger)
        else:
            fac = cache.get(pencil.K, pencil.M, xi, 1.0, pencil.bandwidth, ledger,
                            token=pencil.fingerprint)
        return fac.solve(f)

    if workers <= 1:
        cols = [unit(xi) for xi in shifts]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            cols = list(pool.map(unit, shifts))
    S = np.empty((pencil.n, shifts.size), dtype=complex)
    for i, c in enumerate(cols):
        S[:, i] = c
    return S


def combine_columns(family: RationalFamily, S: np.ndarray) -> np.ndarray:
    """Real snapshots ``2 Re(S_pairs R_pairs) + S_real R_real``, fixed order."""
    half = family.half_residues()
    is_real = family.pole_set.representative_is_real
    out = 2.0 * (S[:, ~is_real] @ half[~is_real]).real
    if np.any(is_real):
        out += S[:, is_real].real @ half[is_real].real
    return out


def eval_family_on_pencil(family: RationalFamily, pencil: Pencil,
                          ledger: SolveLedger | None = None,
                          cache: FactorizationCache | None = None,
                          f=None) -> SnapshotMatrix:
    """All channels of the family applied to the pencil: ``r_j(M^{-1}K) M^{-1} f``."""
    S = solve_columns(family, pencil, f, ledger, cache)
    cols = combine_columns(family, S)
    if family.absolute_term is not None:
        b = mass_solve(pencil, _source(pencil, f), ledger)
        cols = cols + np.outer(b, family.absolute_term)
    return SnapshotMatrix(cols, family.times)


def eval_single_time_on_pencil(baseline: RationalFamily, pencil: Pencil, times,
                               ledger: SolveLedger | None = None, f=None) -> SnapshotMatrix:
    """Apply a t=1 [m/m] approximant at each time, refactorizing per time."""
    if baseline.absolute_term is None or baseline.n_channels != 1:
        raise ValueError("baseline must be a single-channel family with an absolute term")
    f = _source(pencil, f)
    times = np.atleast_1d(np.asarray(times, dtype=float))
    b = mass_solve(pencil, f, ledger)
    # r(s x) = a0 + sum a_i / (t_scale s x - xi_i) with s = t / t_0
    xi = baseline.pole_set.representatives
    half = baseline.residues[baseline.pole_set.representative_index, 0]
    is_real = baseline.pole_set.representative_is_real
    cols = np.empty((pencil.n, times.size))
    for j, t in enumerate(times):
        scale = baseline.t_scale * t / baseline.times[0]
        acc = baseline.absolute_term[0] * b
        for i in range(xi.size):
            fac = ShiftFactorization(pencil.K, pencil.M, xi[i], scale, pencil.bandwidth, ledger)
            term = (half[i] * fac.solve(f)).real
            acc = acc + (term if is_real[i] else 2.0 * term)
        cols[:, j] = acc
    return SnapshotMatrix(cols, times)


def exact_expm_oracle(pencil: Pencil, times, f=None) -> SnapshotMatrix:
    """Dense generalized eigendecomposition: ``V exp(-t Lambda) V^T f``."""
    if pencil.n > ORACLE_MAX_N:
        raise ValueError(f"oracle limited to N <= {ORACLE_MAX_N}")
    f = _source(pencil, f)
    times = np.atleast_1d(np.asarray(times, dtype=float))
    try:
        lam, V = eigh(pencil.K, pencil.M)
    except np.linalg.LinAlgError as exc:
        raise PencilError("generalized eigensolver failed; is M SPD?") from exc
    lam = np.maximum(lam, 0.0)
    coef = V.T @ f
    return SnapshotMatrix(V @ (np.exp(-np.outer(lam, times)) * coef[:, None]), times)


def generalized_eigenvalues(pencil: Pencil) -> np.ndarray:
    return eigh(pencil.K, pencil.M, eigvals_only=True)


def m_norm(pencil: Pencil, X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    X2 = X[:, None] if X.ndim == 1 else X
    return np.sqrt(np.maximum(np.einsum("ij,ij->j", X2, pencil.M @ X2), 0.0))


def m_norm_error(approx: SnapshotMatrix, exact: SnapshotMatrix, pencil: Pencil) -> np.ndarray:
    """Per-channel ``||approx_j - exact_j||_M``."""
    if approx.columns.shape != exact.columns.shape:
        raise ValueError("snapshot shapes differ")
    return m_norm(pencil, approx.columns - exact.columns)


@dataclass
class ParallelReport:
    workers: int
    wall_time: float
    reference_time: float

    @property
    def speedup(self) -> float:
        return self.reference_time / self.wall_time if self.wall_time > 0 else float("nan")


_T1: dict = {}


def _timed(fn, reps):
    times, out = [], None
    for _ in range(reps):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return out, float(np.median(times))


def parallel_eval(family: RationalFamily, pencil: Pencil, worker_count: int,
                  ledger: SolveLedger | None = None, repeats: int = 1, f=None):
    """Per-pole factorize-and-solve units on a thread pool.

    Columns are placed in pole order and combined by one product after all
    workers finish, so the output does not depend on ``worker_count``.
    Returns the snapshots and a timing report; the speedup is relative to a
    cached single-worker timing of the same inputs.
    """
    if worker_count < 1:
        raise ValueError("worker_count must be at least 1")

    def run(w, led):
        S = solve_columns(family, pencil, f, led, None, workers=w)
        return combine_columns(family, S)

    cols, wall = _timed(lambda: run(worker_count, None), repeats)
    if ledger is not None:
        reps = family.pole_set.representative_index.size
        ledger.add(factorizations=reps, triangular_solves=reps, rhs_columns_solved=reps)
    key = (id(family), pencil.fingerprint, repeats)
    if worker_count == 1:
        _T1[key] = wall
    elif key not in _T1:
        _T1[key] = _timed(lambda: run(1, None), repeats)[1]
    if family.absolute_term is not None:
        cols = cols + np.outer(mass_solve(pencil, _source(pencil, f), ledger),
                               family.absolute_term)
    return SnapshotMatrix(cols, family.times), ParallelReport(worker_count, wall, _T1[key])
