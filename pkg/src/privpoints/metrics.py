"""Chamfer distance, exact earth mover's distance and the sampling protocol.

All distances are Euclidean in the normalized ``[-1, 1]^m`` domain.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numba
import numpy as np
from scipy.spatial import cKDTree

from .ingest import PointSet

DEFAULT_SAMPLES = 60
DEFAULT_SAMPLE_SIZE = 7500

# below this many pairwise distances a dense scan beats building a tree
_BRUTE_LIMIT = 250_000
# largest n for which the assignment solver stores the n x n cost matrix (128 MiB)
_DENSE_LIMIT = 4096


def _coords(ps) -> np.ndarray:
    a = ps.coords if isinstance(ps, PointSet) else np.asarray(ps, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError("point sets must be (n, m) arrays")
    return a


def _check_pair(R, S):
    if len(R) == 0 or len(S) == 0:
        raise ValueError("point sets must be nonempty")
    if R.shape[1] != S.shape[1]:
        raise ValueError(f"dimension mismatch: {R.shape[1]} vs {S.shape[1]}")


def nearest_sq_dist(A: np.ndarray, B: np.ndarray, method: str = "auto") -> np.ndarray:
    """Squared distance from each row of ``A`` to its nearest row of ``B``."""
    if method == "auto":
        method = "brute" if len(A) * len(B) <= _BRUTE_LIMIT else "tree"
    if method == "brute":
        d2 = ((A[:, None, :] - B[None, :, :]) ** 2).sum(axis=2)
        return d2.min(axis=1)
    if method == "tree":
        d, _ = cKDTree(B).query(A, k=1)
        return d ** 2
    raise ValueError(f"unknown method {method!r}")


def chamfer_distance(R, S, method: str = "auto") -> float:
    """Sum of squared nearest-neighbour distances in both directions."""
    R, S = _coords(R), _coords(S)
    _check_pair(R, S)
    return float(nearest_sq_dist(R, S, method).sum() + nearest_sq_dist(S, R, method).sum())


@numba.njit(cache=True)
def _dist(R, S, i, j):
    acc = 0.0
    for k in range(R.shape[1]):
        d = R[i, k] - S[j, k]
        acc += d * d
    return math.sqrt(acc)


@numba.njit(cache=True)
def _cost_matrix(R, S):
    n = R.shape[0]
    C = np.empty((n, n))
    for i in range(n):
        for j in range(n):
            C[i, j] = _dist(R, S, i, j)
    return C


@numba.njit(cache=True)
def _assign(R, S, C, dense):
    # shortest augmenting path (one Dijkstra search per row) with dual
    # potentials; potentials of scanned rows/columns are updated once per
    # augmentation and unscanned columns are kept in a compacted list
    n = R.shape[0]
    u = np.zeros(n)
    v = np.zeros(n)
    shortest = np.empty(n)
    path = np.full(n, -1, dtype=np.int64)
    col4row = np.full(n, -1, dtype=np.int64)
    row4col = np.full(n, -1, dtype=np.int64)
    seen_row = np.zeros(n, dtype=np.bool_)
    seen_col = np.zeros(n, dtype=np.bool_)
    remaining = np.empty(n, dtype=np.int64)
    for cur in range(n):
        for k in range(n):
            remaining[k] = n - k - 1
        n_rem = n
        seen_row[:] = False
        seen_col[:] = False
        shortest[:] = np.inf
        min_val = 0.0
        i = cur
        sink = -1
        while sink == -1:
            seen_row[i] = True
            index = -1
            lowest = np.inf
            for k in range(n_rem):
                j = remaining[k]
                c = C[i, j] if dense else _dist(R, S, i, j)
                r = min_val + c - u[i] - v[j]
                if r < shortest[j]:
                    path[j] = i
                    shortest[j] = r
                # prefer a free column on ties: it ends the search
                if shortest[j] < lowest or (shortest[j] == lowest and row4col[j] == -1):
                    lowest = shortest[j]
                    index = k
            if lowest == np.inf:
                return col4row, u, v, False
            min_val = lowest
            j = remaining[index]
            if row4col[j] == -1:
                sink = j
            else:
                i = row4col[j]
            seen_col[j] = True
            n_rem -= 1
            remaining[index] = remaining[n_rem]
        u[cur] += min_val
        for r in range(n):
            if seen_row[r] and r != cur:
                u[r] += min_val - shortest[col4row[r]]
        for c in range(n):
            if seen_col[c]:
                v[c] -= min_val - shortest[c]
        j = sink
        while True:
            i = path[j]
            row4col[j] = i
            nxt = col4row[i]
            col4row[i] = j
            j = nxt
            if i == cur:
                break
    return col4row, u, v, True


@numba.njit(cache=True)
def _certificate(R, S, col_of, u, v):
    # largest dual-feasibility violation and complementary-slackness gap
    n = R.shape[0]
    worst_neg = 0.0
    worst_gap = 0.0
    for i in range(n):
        for j in range(n):
            red = _dist(R, S, i, j) - u[i] - v[j]
            if -red > worst_neg:
                worst_neg = -red
        gap = abs(_dist(R, S, i, col_of[i]) - u[i] - v[col_of[i]])
        if gap > worst_gap:
            worst_gap = gap
    return worst_neg, worst_gap


@dataclass
class Assignment:
    """Optimal bijection ``i -> col_of[i]`` with dual potentials."""

    col_of: np.ndarray
    cost: float
    row_potential: np.ndarray
    col_potential: np.ndarray
    max_dual_violation: float = 0.0
    max_slackness_gap: float = 0.0


def assignment_cost(R: np.ndarray, S: np.ndarray, col_of) -> float:
    """Total Euclidean length of the matching, correctly rounded."""
    d = np.sqrt(((R - S[np.asarray(col_of)]) ** 2).sum(axis=1))
    return math.fsum(d.tolist())


def solve_assignment(R, S, certify: bool = True, tol: float = 1e-9) -> Assignment:
    """Exact min-cost bijection between equal-size point sets.

    With ``certify`` the dual potentials are checked: every reduced cost must
    be nonnegative and every matched pair must have zero reduced cost, up to
    ``tol`` times the largest matched distance.
    """
    R, S = np.ascontiguousarray(_coords(R)), np.ascontiguousarray(_coords(S))
    _check_pair(R, S)
    if len(R) != len(S):
        raise ValueError(f"EMD needs equal sizes, got {len(R)} and {len(S)}")
    dense = len(R) <= _DENSE_LIMIT
    C = _cost_matrix(R, S) if dense else np.empty((0, 0))
    col_of, u, v, ok = _assign(R, S, C, dense)
    if not ok:
        raise ArithmeticError("assignment solver did not converge")
    result = Assignment(col_of, assignment_cost(R, S, col_of), u, v)
    if certify:
        neg, gap = _certificate(R, S, col_of, result.row_potential, result.col_potential)
        result.max_dual_violation, result.max_slackness_gap = float(neg), float(gap)
        scale = tol * max(1.0, float(np.abs(u).max()), float(np.abs(v).max()))
        if neg > scale or gap > scale:
            raise ArithmeticError(
                f"assignment failed optimality certificate (violation {neg:.3g}, gap {gap:.3g})")
    return result


def emd_exact(R, S, certify: bool = True) -> float:
    """Minimum over bijections of the summed Euclidean distances."""
    return solve_assignment(R, S, certify=certify).cost


@dataclass
class MetricReport:
    sample_size: int
    cd: list = field(default_factory=list)
    emd: list = field(default_factory=list)

    @property
    def samples(self) -> int:
        return len(self.cd)

    @property
    def cd_mean(self) -> float:
        return float(np.mean(self.cd))

    @property
    def cd_std(self) -> float:
        return float(np.std(self.cd))

    @property
    def emd_mean(self) -> float:
        return float(np.mean(self.emd)) if self.emd else math.nan

    @property
    def emd_std(self) -> float:
        return float(np.std(self.emd)) if self.emd else math.nan

    def summary(self) -> dict:
        return {"samples": self.samples, "sample_size": self.sample_size,
                "cd_mean": self.cd_mean, "cd_std": self.cd_std,
                "emd_mean": self.emd_mean, "emd_std": self.emd_std}

    def to_csv(self, path, header_lines=()):
        emd = self.emd or [math.nan] * self.samples
        with open(path, "w", newline="") as fh:
            for line in header_lines:
                fh.write(f"# {line}\n")
            w = csv.writer(fh)
            w.writerow(["sample_id", "cd", "emd"])
            for k, (c, e) in enumerate(zip(self.cd, emd)):
                w.writerow([k, repr(c), repr(e)])
            w.writerow(["mean", repr(self.cd_mean), repr(self.emd_mean)])
            w.writerow(["std", repr(self.cd_std), repr(self.emd_std)])


def evaluate_generator(generator, real, samples: int = DEFAULT_SAMPLES,
                       sample_size: int = DEFAULT_SAMPLE_SIZE, rng=None,
                       with_emd: bool = True) -> MetricReport:
    """Compare ``samples`` generator draws with equally many real subsamples.

    ``generator`` is a :class:`~privpoints.model.ModelState` or any callable
    ``f(n, rng) -> (n, m) array`` of normalized points. Generator draws and
    real subsamples use separate child streams of ``rng``.
    """
    real = _coords(real)
    if len(real) < sample_size:
        raise ValueError(f"real set has {len(real)} points, sample size is {sample_size}")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    gen_rng, real_rng = rng.spawn(2)
    if callable(generator):
        draw = generator
    else:
        from .model import generate_points

        def draw(n, r):
            return generate_points(generator, n, r).coords

    report = MetricReport(sample_size)
    for _ in range(samples):
        fake = _coords(draw(sample_size, gen_rng))
        ref = real[real_rng.choice(len(real), size=sample_size, replace=False)]
        report.cd.append(chamfer_distance(ref, fake))
        if with_emd:
            report.emd.append(emd_exact(ref, fake))
    return report
