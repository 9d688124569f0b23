"""Polytopes in halfspace representation, with the small-dimension operations
the tube and estimation machinery rely on: vertex enumeration, redundancy
removal, support functions, intersection and containment tests.

All sets are {x : A x <= b}. Vertex enumeration is exact hyperplane-combination
search and is only supported for dim <= 3, which covers the parameter and
disturbance spaces used here.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from .errors import UnboundedPolytope, UnsupportedDimension

_VERTEX_TOL = 1e-9
_FEAS_TOL = 1e-9


def _lp_max(c, A, b):
    """Maximize c @ x over {A x <= b}. Returns (value, x) or raises on unbounded."""
    res = linprog(-np.asarray(c, float), A_ub=A, b_ub=b,
                  bounds=[(None, None)] * A.shape[1], method="highs")
    if res.status == 3:
        raise UnboundedPolytope("LP unbounded")
    if res.status == 2:
        return None, None
    return -res.fun, res.x


@dataclass(frozen=True)
class Polytope:
    """Bounded convex polytope {x : A x <= b} with an optional vertex cache."""

    A: np.ndarray
    b: np.ndarray
    _vertices: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, float))
        b = np.atleast_1d(np.asarray(self.b, float))
        if A.shape[0] != b.shape[0]:
            raise ValueError(f"row mismatch: A has {A.shape[0]} rows, b has {b.shape[0]}")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)

    @property
    def dim(self) -> int:
        return self.A.shape[1]

    @staticmethod
    def from_box(lo, hi) -> "Polytope":
        """Axis-aligned box {lo <= x <= hi} as stacked one-sided rows.

        Vertices are enumerated here (over non-degenerate axes only), which
        keeps them available in any dimension.
        """
        lo = np.atleast_1d(np.asarray(lo, float))
        hi = np.atleast_1d(np.asarray(hi, float))
        if np.any(hi < lo):
            raise ValueError("box has hi < lo")
        d = lo.size
        A = np.vstack([np.eye(d), -np.eye(d)])
        b = np.concatenate([hi, -lo])
        active = [i for i in range(d) if hi[i] > lo[i]]
        verts = None
        if len(active) <= 12:
            verts = np.tile(lo, (2 ** len(active), 1))
            for j, i in enumerate(active):
                period = 2 ** j
                col = np.where((np.arange(2 ** len(active)) // period) % 2 == 1,
                               hi[i], lo[i])
                verts[:, i] = col
        return Polytope(A, b, verts)

    @staticmethod
    def from_interval(lo: float, hi: float) -> "Polytope":
        return Polytope.from_box([lo], [hi])

    @staticmethod
    def singleton(x) -> "Polytope":
        x = np.atleast_1d(np.asarray(x, float))
        return Polytope.from_box(x, x)

    def contains(self, x, tol: float = 1e-9) -> bool:
        return bool(np.all(self.A @ np.asarray(x, float) <= self.b + tol))

    def is_empty(self, tol: float = _FEAS_TOL) -> bool:
        val, _ = _lp_max(np.zeros(self.dim), self.A, self.b + tol)
        return val is None

    def is_bounded(self) -> bool:
        try:
            for i in range(self.dim):
                e = np.zeros(self.dim)
                e[i] = 1.0
                for sgn in (1.0, -1.0):
                    if _lp_max(sgn * e, self.A, self.b)[0] is None:
                        return True  # empty counts as bounded
        except UnboundedPolytope:
            return False
        return True

    def support(self, direction) -> float:
        """Support function max{d @ x : x in P}."""
        val, _ = _lp_max(direction, self.A, self.b)
        if val is None:
            raise ValueError("support of empty polytope")
        return val

    def interval_hull(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-coordinate (lo, hi) bounds via LPs."""
        lo = np.empty(self.dim)
        hi = np.empty(self.dim)
        for i in range(self.dim):
            e = np.zeros(self.dim)
            e[i] = 1.0
            hi[i] = self.support(e)
            lo[i] = -self.support(-e)
        return lo, hi

    def intersect(self, *others: "Polytope") -> "Polytope":
        A = np.vstack([self.A] + [o.A for o in others])
        b = np.concatenate([self.b] + [o.b for o in others])
        return Polytope(A, b)

    def contains_polytope(self, other: "Polytope", tol: float = 1e-7) -> bool:
        """True iff other is a subset of self, via support functions."""
        for i in range(self.A.shape[0]):
            if other.support(self.A[i]) > self.b[i] + tol:
                return False
        return True

    def vertices(self, tol: float = _VERTEX_TOL) -> np.ndarray:
        """Exact vertex enumeration for dim <= 3.

        Every vertex is the intersection of dim active hyperplanes; candidates
        are filtered by feasibility and deduplicated.
        """
        if self._vertices is not None:
            return self._vertices
        d = self.A.shape[1]
        if d > 3:
            raise UnsupportedDimension(f"vertex enumeration needs dim <= 3, got {d}")
        if not self.is_bounded():
            raise UnboundedPolytope("cannot enumerate vertices of unbounded set")
        verts: list[np.ndarray] = []
        rows = range(self.A.shape[0])
        for comb in itertools.combinations(rows, d):
            Asub = self.A[list(comb)]
            if abs(np.linalg.det(Asub)) < 1e-12:
                continue
            v = np.linalg.solve(Asub, self.b[list(comb)])
            if np.all(self.A @ v <= self.b + tol):
                if not any(np.linalg.norm(v - w) <= tol for w in verts):
                    verts.append(v)
        out = np.array(verts) if verts else np.zeros((0, d))
        object.__setattr__(self, "_vertices", out)
        return out

    def remove_redundant(self, tol: float = 1e-9) -> "Polytope":
        """Minimal H-rep: drop each row whose relaxation does not change the set."""
        A, b = self.A.copy(), self.b.copy()
        # normalize and drop duplicate rows first
        norms = np.linalg.norm(A, axis=1)
        keep_rows = norms > 1e-14
        A, b = A[keep_rows], b[keep_rows]
        norms = norms[keep_rows]
        A = A / norms[:, None]
        b = b / norms
        uniq: list[int] = []
        for i in range(A.shape[0]):
            dup = False
            for j in uniq:
                if np.linalg.norm(A[i] - A[j]) < 1e-12:
                    if b[i] < b[j] - 1e-14:
                        uniq.remove(j)
                    else:
                        dup = True
                    break
            if not dup:
                uniq.append(i)
        A, b = A[uniq], b[uniq]
        keep = list(range(A.shape[0]))
        i = 0
        while i < len(keep):
            idx = keep[:i] + keep[i + 1:]
            if not idx:
                break
            row = keep[i]
            Arel = np.vstack([A[idx], A[row:row + 1]])
            brel = np.concatenate([b[idx], [b[row] + 1.0]])
            val, _ = _lp_max(A[row], Arel, brel)
            if val is not None and val <= b[row] + tol:
                keep.pop(i)
            else:
                i += 1
        return Polytope(A[keep], b[keep])

    def to_dict(self) -> dict:
        return {"A": self.A.tolist(), "b": self.b.tolist()}

    @staticmethod
    def from_dict(d: dict) -> "Polytope":
        return Polytope(np.asarray(d["A"], float), np.asarray(d["b"], float))


def hrep_from_points(points, tol: float = 1e-9) -> Polytope:
    """H-representation of the convex hull of a finite point set.

    Handles dimension collapse: the affine span of the points is detected by
    SVD and facets are built in span coordinates; directions orthogonal to the
    span become paired equality rows. Needed for Minkowski sums of degenerate
    summands (e.g. a segment embedded in state space).
    """
    P = np.atleast_2d(np.asarray(points, float))
    npts, d = P.shape
    if npts == 0:
        raise ValueError("empty point set")
    x0 = P[0]
    Q = P - x0
    U, s, Vt = np.linalg.svd(Q, full_matrices=True) if npts > 1 else (None, np.zeros(0), np.eye(d))
    scale = max(1.0, float(np.max(np.abs(Q))) if Q.size else 1.0)
    rank = int(np.sum(s > tol * scale))
    basis = Vt[:rank] if rank > 0 else np.zeros((0, d))
    comp = Vt[rank:]
    rows_A: list[np.ndarray] = []
    rows_b: list[float] = []
    # equality pairs for the orthogonal complement
    for n_c in comp:
        rows_A.append(n_c)
        rows_b.append(float(n_c @ x0))
        rows_A.append(-n_c)
        rows_b.append(float(-n_c @ x0))
    if rank == 0:
        pass
    elif rank == 1:
        t = Q @ basis[0]
        rows_A.append(basis[0])
        rows_b.append(float(basis[0] @ x0 + t.max()))
        rows_A.append(-basis[0])
        rows_b.append(float(-(basis[0] @ x0 + t.min())))
    else:
        from scipy.spatial import ConvexHull

        Y = Q @ basis.T
        hull = ConvexHull(Y)
        for eq in hull.equations:
            a_span, off = eq[:-1], eq[-1]
            a_full = a_span @ basis
            rows_A.append(a_full)
            rows_b.append(float(-off + a_full @ x0))
    return Polytope(np.array(rows_A), np.array(rows_b))


def minkowski_sum_points(pts_a, pts_b) -> np.ndarray:
    """All pairwise sums of two vertex sets (hull of the Minkowski sum)."""
    A = np.atleast_2d(np.asarray(pts_a, float))
    B = np.atleast_2d(np.asarray(pts_b, float))
    return (A[:, None, :] + B[None, :, :]).reshape(-1, A.shape[1])
