"""Univariate B-spline spaces on [0, 1] with open knot vectors.

A space is described by a degree ``p``, an interior regularity ``r`` and a
sorted list of interior breakpoints.  Each interior breakpoint appears
``p - r`` times in the knot vector, the end points ``p + 1`` times.

Spaces whose breakpoints are equally spaced are stored implicitly (only the
number of elements is kept).  Knot values, spans and supports are then
computed arithmetically, so very fine dyadic levels never materialize their
knot vectors.  This keeps deep hierarchical refinements cheap.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .errors import DomainError, ValidationError

BREAK_TOL = 1e-12


def _basis_ders(p, x, local_knots, nd):
    """Vectorized Cox-de Boor recursion with derivatives.

    Args:
        p: polynomial degree
        x: evaluation points, shape (m,)
        local_knots: knots ``U[span-p+1 .. span+p]`` per point, shape (m, 2p)
        nd: highest derivative order

    Returns:
        array of shape (m, nd + 1, p + 1)
    """
    m = x.shape[0]
    ndu = np.zeros((p + 1, p + 1, m))
    ndu[0, 0] = 1.0
    left = np.zeros((p + 1, m))
    right = np.zeros((p + 1, m))
    for j in range(1, p + 1):
        left[j] = x - local_knots[:, p - j]
        right[j] = local_knots[:, p - 1 + j] - x
        saved = np.zeros(m)
        for r in range(j):
            ndu[j, r] = right[r + 1] + left[j - r]
            temp = ndu[r, j - 1] / ndu[j, r]
            ndu[r, j] = saved + right[r + 1] * temp
            saved = left[j - r] * temp
        ndu[j, j] = saved

    ders = np.zeros((nd + 1, p + 1, m))
    ders[0] = ndu[:, p]
    nn = min(nd, p)
    if nn > 0:
        a = np.zeros((2, p + 1, m))
        for r in range(p + 1):
            s1, s2 = 0, 1
            a[:] = 0.0
            a[0, 0] = 1.0
            for k in range(1, nn + 1):
                d = np.zeros(m)
                rk, pk = r - k, p - k
                if r >= k:
                    a[s2, 0] = a[s1, 0] / ndu[pk + 1, rk]
                    d = a[s2, 0] * ndu[rk, pk]
                j1 = 1 if rk >= -1 else -rk
                j2 = k - 1 if r - 1 <= pk else p - r
                for j in range(j1, j2 + 1):
                    a[s2, j] = (a[s1, j] - a[s1, j - 1]) / ndu[pk + 1, rk + j]
                    d = d + a[s2, j] * ndu[rk + j, pk]
                if r <= pk:
                    a[s2, k] = -a[s1, k - 1] / ndu[pk + 1, r]
                    d = d + a[s2, k] * ndu[r, pk]
                ders[k, r] = d
                s1, s2 = s2, s1
        fac = p
        for k in range(1, nn + 1):
            ders[k] *= fac
            fac *= p - k
    return ders.transpose(2, 0, 1)


class SplineSpace:
    """Spline space S_p^r on [0, 1] with open knot vector.

    Instances are immutable.  Use :func:`make_space` to build one from a
    list of breakpoints.
    """

    def __init__(self, degree: int, regularity: int, breaks=None, num_elements=None):
        self.degree = int(degree)
        self.regularity = int(regularity)
        self.mult = self.degree - self.regularity
        if breaks is None:
            self._breaks = None
            self.num_elements = int(num_elements)
        else:
            self._breaks = np.asarray(breaks, dtype=float)
            self.num_elements = len(self._breaks) - 1

    # -- sizes -----------------------------------------------------------
    @property
    def num_breakpoints(self) -> int:
        """Number ``k`` of interior breakpoints."""
        return self.num_elements - 1

    @property
    def dim(self) -> int:
        return self.degree + 1 + self.num_breakpoints * self.mult

    @property
    def is_uniform(self) -> bool:
        return self._breaks is None

    @property
    def breakpoints(self) -> np.ndarray:
        """Interior breakpoints as an array (materialized)."""
        return self.breakpoint_at(np.arange(1, self.num_elements))

    @property
    def knots(self) -> np.ndarray:
        """Full open knot vector (materialized)."""
        return self.knot_values(np.arange(self.dim + self.degree + 1))

    @property
    def first_breakpoint(self) -> float:
        """Position of the first interior breakpoint (1 if there is none)."""
        return float(self.breakpoint_at(np.array([1]))[0])

    def __repr__(self):
        return (f"SplineSpace(p={self.degree}, r={self.regularity}, "
                f"elements={self.num_elements})")

    def same_breaks(self, other: "SplineSpace") -> bool:
        if self.num_elements != other.num_elements:
            return False
        if self.is_uniform and other.is_uniform:
            return True
        return bool(np.allclose(self.breakpoint_at(np.arange(self.num_elements + 1)),
                                other.breakpoint_at(np.arange(other.num_elements + 1)),
                                rtol=0, atol=BREAK_TOL))

    def __eq__(self, other):
        return (isinstance(other, SplineSpace) and self.degree == other.degree
                and self.regularity == other.regularity and self.same_breaks(other))

    def __hash__(self):
        return hash((self.degree, self.regularity, self.num_elements))

    # -- knot arithmetic -------------------------------------------------
    def breakpoint_at(self, q) -> np.ndarray:
        """Position of breakpoint ``q`` where 0 and ``num_elements`` are the ends."""
        q = np.asarray(q)
        if self._breaks is None:
            return q / float(self.num_elements)
        return self._breaks[q]

    def knot_position(self, t) -> np.ndarray:
        """Breakpoint index (0..num_elements) of knot number ``t``."""
        t = np.asarray(t, dtype=np.int64)
        p, mu = self.degree, self.mult
        inner = 1 + (t - p - 1) // mu
        pos = np.where(t <= p, 0, inner)
        return np.minimum(pos, self.num_elements)

    def knot_values(self, t) -> np.ndarray:
        return self.breakpoint_at(self.knot_position(t))

    def element_bounds(self, e):
        e = np.asarray(e)
        return self.breakpoint_at(e), self.breakpoint_at(e + 1)

    def find_element(self, x) -> np.ndarray:
        """Index of the element containing each point (right-open, last closed)."""
        x = np.asarray(x, dtype=float)
        if np.any(x < -1e-14) or np.any(x > 1 + 1e-14) or np.any(~np.isfinite(x)):
            raise DomainError("evaluation point outside [0, 1]")
        if self._breaks is None:
            e = np.floor(x * self.num_elements).astype(np.int64)
        else:
            e = np.searchsorted(self._breaks, x, side="right").astype(np.int64) - 1
        return np.clip(e, 0, self.num_elements - 1)

    def first_function(self, e) -> np.ndarray:
        """Index of the first basis function that is nonzero on element ``e``."""
        return np.asarray(e, dtype=np.int64) * self.mult

    def support(self, i):
        """Element range ``[start, stop)`` of the support of basis function ``i``."""
        i = np.asarray(i, dtype=np.int64)
        return self.knot_position(i), self.knot_position(i + self.degree + 1)

    # -- evaluation ------------------------------------------------------
    def ders(self, x, nd: int = 0, elements=None):
        """Evaluate all basis functions nonzero at each point, with derivatives.

        Args:
            x: points in [0, 1]
            nd: highest derivative order
            elements: optional precomputed element indices

        Returns:
            ``(first, values)``: index of the first nonzero function per point
            and an array of shape (m, nd + 1, p + 1).
        """
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if elements is None:
            elements = self.find_element(x)
        x = np.clip(x, 0.0, 1.0)
        p = self.degree
        span = p + np.asarray(elements, dtype=np.int64) * self.mult
        if p == 0:
            vals = np.ones((x.shape[0], nd + 1, 1))
            vals[:, 1:, :] = 0.0
            return self.first_function(elements), vals
        idx = span[:, None] + np.arange(-p + 1, p + 1)[None, :]
        local = self.knot_values(idx)
        return self.first_function(elements), _basis_ders(p, x, local, nd)

    def eval_basis(self, x: float, max_deriv: int = 0):
        """Single-point evaluation; returns ``(first_index, (max_deriv+1) x (p+1) matrix)``."""
        first, vals = self.ders(np.array([x], dtype=float), max_deriv)
        return int(first[0]), vals[0]

    def eval_function(self, i: int, x, nd: int = 0) -> np.ndarray:
        """Values and derivatives of the single basis function ``i``; shape (m, nd+1)."""
        first, vals = self.ders(x, nd)
        loc = i - first
        out = np.zeros((vals.shape[0], nd + 1))
        ok = (loc >= 0) & (loc <= self.degree)
        out[ok] = vals[np.nonzero(ok)[0], :, loc[ok]]
        return out

    def collocation_matrix(self, x, nd: int = 0) -> sp.csr_matrix:
        """Sparse matrix of ``d^nd N_j(x_m)``, shape (len(x), dim)."""
        first, vals = self.ders(x, nd)
        m = vals.shape[0]
        rows = np.repeat(np.arange(m), self.degree + 1)
        cols = (first[:, None] + np.arange(self.degree + 1)).ravel()
        return sp.csr_matrix((vals[:, nd, :].ravel(), (rows, cols)), shape=(m, self.dim))

    def greville(self, indices=None) -> np.ndarray:
        """Greville abscissae (averages of ``p`` consecutive knots)."""
        if indices is None:
            indices = np.arange(self.dim)
        indices = np.asarray(indices, dtype=np.int64)
        p = self.degree
        if p == 0:
            return self.knot_values(indices)
        t = indices[:, None] + np.arange(1, p + 1)[None, :]
        return self.knot_values(t).mean(axis=1)

    # -- derived spaces --------------------------------------------------
    def sibling(self, degree: int, regularity: int) -> "SplineSpace":
        """Space with the same breakpoints and another degree/regularity."""
        _check_degree(degree, regularity)
        if self._breaks is None:
            return SplineSpace(degree, regularity, num_elements=self.num_elements)
        return SplineSpace(degree, regularity, breaks=self._breaks)

    def refine(self) -> "SplineSpace":
        """Dyadic refinement: every element is split at its midpoint."""
        if self._breaks is None:
            return SplineSpace(self.degree, self.regularity, num_elements=2 * self.num_elements)
        b = self._breaks
        fine = np.empty(2 * len(b) - 1)
        fine[0::2] = b
        fine[1::2] = 0.5 * (b[:-1] + b[1:])
        return SplineSpace(self.degree, self.regularity, breaks=fine)


def _check_degree(p, r):
    if int(p) != p or int(r) != r:
        raise ValidationError("degree and regularity must be integers")
    if p < 1:
        raise ValidationError(f"degree must be >= 1, got {p}")
    if r < 0 or r >= p:
        raise ValidationError(f"regularity must satisfy 0 <= r <= p-1, got p={p}, r={r}")


def make_space(p: int, r: int, breakpoints=()) -> SplineSpace:
    """Build S_p^r over the given interior breakpoints.

    Equally spaced breakpoints are detected and stored implicitly.

    Args:
        p: degree (>= 1)
        r: regularity, 0 <= r <= p - 1
        breakpoints: strictly increasing values in (0, 1)
    """
    _check_degree(p, r)
    t = np.asarray(list(breakpoints), dtype=float).ravel()
    if t.size:
        if not np.all(np.isfinite(t)):
            raise ValidationError("breakpoints must be finite")
        if t[0] <= BREAK_TOL or t[-1] >= 1 - BREAK_TOL:
            raise ValidationError("breakpoints must lie strictly inside (0, 1)")
        if np.any(np.diff(t) <= BREAK_TOL):
            raise ValidationError("breakpoints must be strictly increasing")
    nel = t.size + 1
    if np.allclose(t, np.arange(1, nel) / nel, rtol=0, atol=1e-14):
        return SplineSpace(p, r, num_elements=nel)
    return SplineSpace(p, r, breaks=np.concatenate(([0.0], t, [1.0])))


def uniform_space(p: int, r: int, num_elements: int) -> SplineSpace:
    """S_p^r on a uniform partition of [0, 1] into ``num_elements`` elements."""
    _check_degree(p, r)
    if num_elements < 1:
        raise ValidationError("need at least one element")
    return SplineSpace(p, r, num_elements=num_elements)


def derived_spaces(space: SplineSpace):
    """Return ``(S_p^{r+1}, S_{p-1}^r)`` on the same breakpoints."""
    p, r = space.degree, space.regularity
    if r + 1 > p - 1:
        raise ValidationError(f"S_p^(r+1) needs r + 1 <= p - 1 (p={p}, r={r})")
    return space.sibling(p, r + 1), space.sibling(p - 1, r)


def _insert_knot(knots, p, u):
    """Boehm insertion of one knot; returns new knots and the (n, n+1) matrix."""
    n = len(knots) - p - 1
    k = int(np.searchsorted(knots, u, side="right")) - 1
    a = np.zeros(n + 1)
    for i in range(n + 1):
        if i <= k - p:
            a[i] = 1.0
        elif i >= k + 1:
            a[i] = 0.0
        else:
            a[i] = (u - knots[i]) / (knots[i + p] - knots[i])
    mat = np.zeros((n, n + 1))
    idx = np.arange(n)
    mat[idx, idx] = a[:n]
    mat[idx, idx + 1] = 1.0 - a[1:]
    return np.insert(knots, k + 1, u), mat


def _knot_difference(coarse, fine, tol=1e-13):
    extra = []
    i = 0
    for u in fine:
        if i < len(coarse) and abs(coarse[i] - u) <= tol:
            i += 1
        else:
            extra.append(u)
    if i != len(coarse):
        raise ValidationError("fine knot vector does not contain the coarse one")
    return extra


def knot_insertion_matrix(coarse: SplineSpace, fine: SplineSpace) -> sp.csr_matrix:
    """Matrix Λ with ``N_i^coarse = sum_j Λ[i, j] N_j^fine``.

    Both spaces must have the same degree and the fine knot vector must
    contain the coarse one.  Built by composing single-knot insertions.
    """
    if coarse.degree != fine.degree:
        raise ValidationError("knot insertion needs equal degrees")
    p = coarse.degree
    knots = coarse.knots
    mat = np.eye(coarse.dim)
    for u in _knot_difference(knots, fine.knots):
        knots, step = _insert_knot(knots, p, u)
        mat = mat @ step
    mat[np.abs(mat) < 1e-15] = 0.0
    return sp.csr_matrix(mat)


def refine_dyadic(space: SplineSpace):
    """Dyadically refined space and its refinement matrix Λ (coarse x fine)."""
    fine = space.refine()
    return fine, knot_insertion_matrix(space, fine)
