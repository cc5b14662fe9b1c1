"""One-level C1 isogeometric space on an analysis-suitable two-patch domain.

Functions are numbered in four blocks:

* trace functions, one per basis function of S_p^{r+1} (``gamma0``),
* transversal-derivative functions, one per basis function of
  S_{p-1}^r (``gamma1``),
* interior functions of the left patch, ``N_a(xi1) N_b(xi2)`` with a >= 2,
* interior functions of the right patch.

On patch ``S`` every function is a tensor-product spline
``sum c[a, b] N_a(xi1) N_b(xi2)``; tensor coefficients are addressed by the
key ``a * n + b``.  Interface functions only touch the columns a = 0 and
a = 1.  Their coefficients are obtained by local Greville collocation.

:class:`C0Space` has the same layout with a single interface block of
trace-matched functions ``N_0(xi1) N_j(xi2)`` and no derivative block.  It
serves as the comparison space with only C0 continuity across the interface.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .bspline import SplineSpace, derived_spaces
from .errors import ConstructionError, ValidationError
from .geometry import GluingData, TwoPatchGeometry, patch_index

DERIVS = {0: [(0, 0)], 1: [(0, 0), (1, 0), (0, 1)],
          2: [(0, 0), (1, 0), (0, 1), (2, 0), (1, 1), (0, 2)]}


def _scale_rows(c, mat):
    if sp.issparse(mat):
        return sp.diags(c) @ mat
    return c.reshape((-1,) + (1,) * (mat.ndim - 1)) * mat


def physical_derivatives(geometry: TwoPatchGeometry, patch, xi1, xi2, param: dict, nd: int) -> dict:
    """Map parametric derivatives to physical ones with the chain rule.

    ``param`` maps ``(k1, k2)`` to arrays or sparse matrices whose rows
    correspond to the points.  The result uses the keys ``v``, ``dx``,
    ``dy`` and, for ``nd == 2``, ``dxx``, ``dxy``, ``dyy``.  The Jacobian
    determinant is returned under ``det``.
    """
    geo = geometry.patch(patch).eval(xi1, xi2, max(nd, 1))
    x1, y1 = geo["d1"][:, 0], geo["d1"][:, 1]
    x2, y2 = geo["d2"][:, 0], geo["d2"][:, 1]
    det = x1 * y2 - x2 * y1
    g00, g01, g10, g11 = y2 / det, -y1 / det, -x2 / det, x1 / det
    out = {"v": param[(0, 0)], "det": det}
    if nd == 0:
        return out
    d1, d2 = param[(1, 0)], param[(0, 1)]
    out["dx"] = _scale_rows(g00, d1) + _scale_rows(g01, d2)
    out["dy"] = _scale_rows(g10, d1) + _scale_rows(g11, d2)
    if nd == 1:
        return out
    r11 = param[(2, 0)] - _scale_rows(geo["d11"][:, 0], out["dx"]) - _scale_rows(geo["d11"][:, 1], out["dy"])
    r12 = param[(1, 1)] - _scale_rows(geo["d12"][:, 0], out["dx"]) - _scale_rows(geo["d12"][:, 1], out["dy"])
    r22 = param[(0, 2)] - _scale_rows(geo["d22"][:, 0], out["dx"]) - _scale_rows(geo["d22"][:, 1], out["dy"])
    out["dxx"] = _scale_rows(g00 * g00, r11) + _scale_rows(2 * g00 * g01, r12) + _scale_rows(g01 * g01, r22)
    out["dxy"] = (_scale_rows(g00 * g10, r11) + _scale_rows(g00 * g11 + g01 * g10, r12)
                  + _scale_rows(g01 * g11, r22))
    out["dyy"] = _scale_rows(g10 * g10, r11) + _scale_rows(2 * g10 * g11, r12) + _scale_rows(g11 * g11, r22)
    return out


class TwoPatchSpace:
    """Layout and evaluation shared by :class:`C1Space` and :class:`C0Space`."""

    smoothness = ""
    interior_start = 2

    def __init__(self, geometry: TwoPatchGeometry, gluing: GluingData, space: SplineSpace):
        self.geometry = geometry
        self.gluing = gluing
        self.space = space
        self.degree = space.degree
        self.regularity = space.regularity
        self.n = space.dim
        self._rows = {}

    # -- layout ------------------------------------------------------------
    def _setup_blocks(self, sizes):
        n, a0 = self.n, self.interior_start
        self.block_sizes = tuple(sizes) + (n * (n - a0), n * (n - a0))
        self.offsets = np.concatenate(([0], np.cumsum(self.block_sizes)))
        self.dim = int(self.offsets[-1])

    def block_of(self, idx):
        return np.searchsorted(self.offsets, np.asarray(idx), side="right") - 1

    def interior_index(self, patch, a, b):
        s = patch_index(patch)
        return self.offsets[2 + s] + (np.asarray(a) - self.interior_start) * self.n + np.asarray(b)

    def interior_ab(self, idx):
        """Tensor indices ``(patch, a, b)`` of interior functions."""
        idx = np.asarray(idx)
        blk = self.block_of(idx)
        loc = idx - self.offsets[blk]
        return blk - 2, self.interior_start + loc // self.n, loc % self.n

    def describe(self, idx: int) -> tuple:
        """``('gamma0', i)``, ``('gamma1', i)`` or ``('interior', patch, a, b)``."""
        blk = int(self.block_of(idx))
        if blk < 2:
            return ("gamma0" if blk == 0 else "gamma1", int(idx - self.offsets[blk]))
        s, a, b = self.interior_ab(idx)
        return ("interior", int(s), int(a), int(b))

    # -- to be provided by subclasses ------------------------------------
    def _interface_cells(self, e2):
        raise NotImplementedError

    def interface_support(self, idx):
        raise NotImplementedError

    def _compute_rows(self, idx, patch):
        raise NotImplementedError

    def refine(self):
        raise NotImplementedError

    # -- supports ----------------------------------------------------------
    def interface_rows(self, idx: int, patch) -> tuple:
        """Tensor keys and coefficients of interface function ``idx`` on ``patch``."""
        key = (int(idx), patch_index(patch))
        if key not in self._rows:
            self._rows[key] = self._compute_rows(*key)
        return self._rows[key]

    def functions_on_cells(self, patch, e1, e2) -> np.ndarray:
        """Sorted indices of all functions nonzero on the given elements of ``patch``."""
        s = patch_index(patch)
        e1 = np.atleast_1d(np.asarray(e1, dtype=np.int64))
        e2 = np.atleast_1d(np.asarray(e2, dtype=np.int64))
        p, mu, n = self.degree, self.space.mult, self.n
        rng = np.arange(p + 1)
        a = (e1 * mu)[:, None] + rng
        b = (e2 * mu)[:, None] + rng
        aa = np.broadcast_to(a[:, :, None], (len(e1), p + 1, p + 1))
        bb = np.broadcast_to(b[:, None, :], (len(e1), p + 1, p + 1))
        keep = aa >= self.interior_start
        parts = [self.offsets[2 + s] + (aa[keep] - self.interior_start) * n + bb[keep]]
        on_edge = e1 == 0
        if np.any(on_edge):
            parts.append(self._interface_cells(np.unique(e2[on_edge])))
        return np.unique(np.concatenate(parts))

    def support_cells(self, idx: int) -> list:
        """Support as a list of ``(patch, (e1_start, e1_stop), (e2_start, e2_stop))`` boxes."""
        blk = int(self.block_of(idx))
        if blk < 2:
            s0, s1 = self.interface_support(idx)
            return [(0, (0, 1), (s0, s1)), (1, (0, 1), (s0, s1))]
        s, a, b = self.interior_ab(idx)
        a0, a1 = self.space.support(a)
        b0, b1 = self.space.support(b)
        return [(int(s), (int(a0), int(a1)), (int(b0), int(b1)))]

    # -- tensor coefficients -------------------------------------------------
    def coefficient_matrix(self, patch, fns):
        """Tensor coefficients of the functions ``fns`` on ``patch``.

        Returns ``(keys, C)`` where ``keys`` is the sorted array of tensor keys
        that occur and ``C`` is a sparse (len(keys), len(fns)) matrix.
        """
        s = patch_index(patch)
        fns = np.asarray(fns, dtype=np.int64)
        blk = self.block_of(fns)
        cols_i = np.nonzero(blk == 2 + s)[0]
        _, a, b = self.interior_ab(fns[cols_i])
        keys = [a * self.n + b]
        cols = [cols_i]
        vals = [np.ones(len(cols_i))]
        for c in np.nonzero(blk < 2)[0]:
            k, v = self.interface_rows(fns[c], s)
            keys.append(k)
            cols.append(np.full(len(k), c))
            vals.append(v)
        keys = np.concatenate(keys).astype(np.int64)
        cols = np.concatenate(cols)
        vals = np.concatenate(vals)
        ukeys, inv = np.unique(keys, return_inverse=True)
        mat = sp.csr_matrix((vals, (inv, cols)), shape=(len(ukeys), len(fns)))
        return ukeys, mat

    def extraction_matrix(self, patch) -> sp.csr_matrix:
        """Matrix (dim x n^2) whose row k holds the tensor coefficients of function k on ``patch``."""
        keys, mat = self.coefficient_matrix(patch, np.arange(self.dim))
        full = sp.csr_matrix((np.ones(len(keys)), (keys, np.arange(len(keys)))),
                             shape=(self.n * self.n, len(keys)))
        return (full @ mat).T.tocsr()

    # -- evaluation ------------------------------------------------------------
    def tensor_values(self, patch, xi1, xi2, nd, keys):
        """Point-by-key matrices of tensor-product B-spline derivatives.

        Only the tensor functions listed in ``keys`` (sorted) are kept.
        """
        S = self.space
        p, mu, n = self.degree, S.mult, self.n
        xi1 = np.atleast_1d(np.asarray(xi1, dtype=float))
        xi2 = np.atleast_1d(np.asarray(xi2, dtype=float))
        e1 = S.find_element(xi1)
        e2 = S.find_element(xi2)
        _, b1 = S.ders(xi1, nd, e1)
        _, b2 = S.ders(xi2, nd, e2)
        m = len(xi1)
        rng = np.arange(p + 1)
        a = (e1 * mu)[:, None] + rng
        b = (e2 * mu)[:, None] + rng
        tk = (a[:, :, None] * n + b[:, None, :]).ravel()
        pos = np.searchsorted(keys, tk)
        pos_c = np.minimum(pos, max(len(keys) - 1, 0))
        valid = (pos < len(keys)) & (keys[pos_c] == tk) if len(keys) else np.zeros(tk.shape, bool)
        rows = np.repeat(np.arange(m), (p + 1) ** 2)[valid]
        cols = pos[valid]
        out = {}
        for k1, k2 in DERIVS[nd]:
            data = (b1[:, k1, :, None] * b2[:, k2, None, :]).ravel()[valid]
            out[(k1, k2)] = sp.csr_matrix((data, (rows, cols)), shape=(m, len(keys)))
        return out

    def eval_param(self, patch, xi1, xi2, nd: int = 1, fns=None):
        """Parametric derivatives of functions at points of ``patch``.

        Returns ``(fns, mats)`` with ``mats[(k1, k2)]`` a sparse
        (points x len(fns)) matrix of ``d^k1/dxi1 d^k2/dxi2`` values.  By
        default ``fns`` are all functions nonzero on the elements hit.
        """
        s = patch_index(patch)
        xi1 = np.atleast_1d(np.asarray(xi1, dtype=float))
        xi2 = np.atleast_1d(np.asarray(xi2, dtype=float))
        if fns is None:
            fns = self.functions_on_cells(s, self.space.find_element(xi1), self.space.find_element(xi2))
        keys, cmat = self.coefficient_matrix(s, fns)
        tv = self.tensor_values(s, xi1, xi2, nd, keys)
        return np.asarray(fns), {k: (v @ cmat).tocsr() for k, v in tv.items()}

    def eval_physical(self, patch, xi1, xi2, nd: int = 1, fns=None):
        """Like :meth:`eval_param` with physical derivatives (keys v, dx, dy, dxx, dxy, dyy)."""
        fns, mats = self.eval_param(patch, xi1, xi2, nd, fns)
        return fns, physical_derivatives(self.geometry, patch, xi1, xi2, mats, nd)


class C1Space(TwoPatchSpace):
    """The C1 space with trace, transversal-derivative and interior blocks."""

    smoothness = "c1"
    interior_start = 2

    def __init__(self, geometry, gluing, space):
        super().__init__(geometry, gluing, space)
        p, r = space.degree, space.regularity
        if p < 3 or not 1 <= r <= p - 2:
            raise ValidationError(f"the C1 construction needs p >= 3 and 1 <= r <= p-2 (p={p}, r={r})")
        self.trace_space, self.derivative_space = derived_spaces(space)
        self.n0 = self.trace_space.dim
        self.n1 = self.derivative_space.dim
        self.tau1 = space.first_breakpoint
        self._setup_blocks((self.n0, self.n1))

    def _interface_cells(self, e2):
        parts = []
        for block, S in ((0, self.trace_space), (1, self.derivative_space)):
            i = (e2 * S.mult)[:, None] + np.arange(S.degree + 1)
            parts.append(self.offsets[block] + i.ravel())
        return np.concatenate(parts)

    def interface_support(self, idx):
        blk = int(self.block_of(idx))
        S = self.trace_space if blk == 0 else self.derivative_space
        s0, s1 = S.support(int(idx - self.offsets[blk]))
        return int(s0), int(s1)

    def band(self, idx) -> np.ndarray:
        """Index set J(i): functions of S_p^r whose supports overlap the univariate factor."""
        s0, s1 = self.interface_support(idx)
        mu, p = self.space.mult, self.degree
        return np.arange(s0 * mu, (s1 - 1) * mu + p + 1)

    def _collocate(self, band, rhs):
        z = self.space.greville(band)
        first, vals = self.space.ders(z, 0)
        loc = band[None, :] - first[:, None]
        ok = (loc >= 0) & (loc <= self.degree)
        mat = np.zeros((len(band), len(band)))
        mat[ok] = vals[:, 0, :][np.nonzero(ok)[0], loc[ok]]
        try:
            return np.linalg.solve(mat, rhs)
        except np.linalg.LinAlgError as exc:
            raise ConstructionError(f"singular collocation system for band {band[0]}..{band[-1]}") from exc

    def _compute_rows(self, idx, s):
        blk = int(self.block_of(idx))
        i = int(idx - self.offsets[blk])
        band = self.band(idx)
        z = self.space.greville(band)
        n, p = self.n, self.degree
        if blk == 0:
            nv = self.trace_space.eval_function(i, z, 1)
            hat = self._collocate(band, nv[:, 0])
            tilde = self._collocate(band, nv[:, 0] + self.tau1 / p * self.gluing.beta_side(s, z) * nv[:, 1])
            return np.concatenate([band, n + band]), np.concatenate([hat, tilde])
        nv = self.derivative_space.eval_function(i, z, 0)
        bar = self._collocate(band, self.gluing.alpha(s, z) * nv[:, 0])
        return n + band, bar

    def _block_matrix(self, block, patch, column):
        rows, cols, vals = [], [], []
        size = self.block_sizes[block]
        for i in range(size):
            k, v = self.interface_rows(self.offsets[block] + i, patch)
            sel = (k // self.n) == column
            rows.append(np.full(sel.sum(), i))
            cols.append(k[sel] % self.n)
            vals.append(v[sel])
        return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                             shape=(size, self.n))

    @property
    def B_hat(self) -> sp.csr_matrix:
        """Coefficients of the trace functions on the column a = 0 (n0 x n)."""
        return self._block_matrix(0, 0, 0)

    def B_tilde(self, patch) -> sp.csr_matrix:
        """Coefficients of the trace functions on the column a = 1 of ``patch``."""
        return self._block_matrix(0, patch, 1)

    def B_bar(self, patch) -> sp.csr_matrix:
        """Coefficients of the derivative functions on the column a = 1 of ``patch``."""
        return self._block_matrix(1, patch, 1)

    def refine(self) -> "C1Space":
        return C1Space(self.geometry, self.gluing, self.space.refine())


class C0Space(TwoPatchSpace):
    """Two-patch space that is only C0 across the interface."""

    smoothness = "c0"
    interior_start = 1

    def __init__(self, geometry, gluing, space):
        super().__init__(geometry, gluing, space)
        self._setup_blocks((self.n, 0))

    def _interface_cells(self, e2):
        S = self.space
        return ((e2 * S.mult)[:, None] + np.arange(S.degree + 1)).ravel()

    def interface_support(self, idx):
        s0, s1 = self.space.support(int(idx))
        return int(s0), int(s1)

    def _compute_rows(self, idx, s):
        return np.array([idx], dtype=np.int64), np.array([1.0])

    def refine(self) -> "C0Space":
        return C0Space(self.geometry, self.gluing, self.space.refine())


def build_c1_space(geometry, gluing, space, smoothness: str = "c1") -> TwoPatchSpace:
    """Build the one-level space on ``geometry`` with univariate space ``space``."""
    if smoothness == "c1":
        return C1Space(geometry, gluing, space)
    if smoothness == "c0":
        return C0Space(geometry, gluing, space)
    raise ValidationError(f"unknown smoothness {smoothness!r}")


@dataclass
class BasisEvalResult:
    """Nonzero basis functions at one point with their derivatives."""

    indices: np.ndarray
    values: np.ndarray
    gradients: np.ndarray
    hessians: np.ndarray
    physical: bool

    def __len__(self):
        return len(self.indices)

    def as_list(self):
        return [(int(i), float(v), g, h) for i, v, g, h in
                zip(self.indices, self.values, self.gradients, self.hessians)]


def eval_c1_basis(space: TwoPatchSpace, patch, xi1: float, xi2: float, max_deriv: int = 1,
                  physical: bool = False) -> BasisEvalResult:
    """All functions not vanishing at ``(xi1, xi2)`` of ``patch`` with derivatives.

    Gradients and Hessians are parametric unless ``physical`` is set.
    Entries of orders above ``max_deriv`` are returned as NaN.
    """
    if max_deriv > 2:
        raise ValidationError("derivatives are available up to order 2")
    nd = max(max_deriv, 1) if physical else max_deriv
    fns, mats = space.eval_param(patch, [xi1], [xi2], max(nd, max_deriv))
    dense = {k: np.asarray(v.todense()).ravel() for k, v in mats.items()}
    m = len(fns)
    grad = np.full((m, 2), np.nan)
    hess = np.full((m, 2, 2), np.nan)
    if physical:
        ph = physical_derivatives(space.geometry, patch, [xi1], [xi2], {k: v[None, :] for k, v in dense.items()},
                                  max_deriv)
        val = np.asarray(ph["v"]).ravel()
        ph = {k: np.asarray(v).ravel() for k, v in ph.items()}
        if max_deriv >= 1:
            grad = np.stack([ph["dx"], ph["dy"]], axis=1)
        if max_deriv >= 2:
            hess = np.stack([np.stack([ph["dxx"], ph["dxy"]], 1),
                             np.stack([ph["dxy"], ph["dyy"]], 1)], 1)
    else:
        val = dense[(0, 0)]
        if max_deriv >= 1:
            grad = np.stack([dense[(1, 0)], dense[(0, 1)]], axis=1)
        if max_deriv >= 2:
            hess = np.stack([np.stack([dense[(2, 0)], dense[(1, 1)]], 1),
                             np.stack([dense[(1, 1)], dense[(0, 2)]], 1)], 1)
    nz = (np.abs(val) > 0) | np.any(np.abs(np.nan_to_num(grad)) > 0, axis=1) | \
        np.any(np.abs(np.nan_to_num(hess)).reshape(m, -1) > 0, axis=1)
    return BasisEvalResult(fns[nz], val[nz], grad[nz], hess[nz], physical)


def directional_interface_derivative(space: TwoPatchSpace, idx: int, xi2, patch=None) -> np.ndarray:
    """Derivative of function ``idx`` along the transversal vector at ``F0(xi2)``.

    Evaluated from ``patch`` (left by default); equals
    ``(d1 f - beta_S d2 f) / alpha_S`` for the patch-wise spline ``f``.
    """
    s = 0 if patch is None else patch_index(patch)
    xi2 = np.atleast_1d(np.asarray(xi2, dtype=float))
    _, mats = space.eval_param(s, np.zeros_like(xi2), xi2, 1, fns=[idx])
    d1 = mats[(1, 0)].toarray().ravel()
    d2 = mats[(0, 1)].toarray().ravel()
    g = space.gluing
    return (d1 - g.beta_side(s, xi2) * d2) / g.alpha(s, xi2)


def to_tensor_coeffs(space: TwoPatchSpace, coeffs, patch) -> np.ndarray:
    """Tensor-product coefficients (length n^2, key a*n+b) of ``sum coeffs[k] phi_k`` on ``patch``."""
    coeffs = np.asarray(coeffs, dtype=float)
    if coeffs.shape != (space.dim,):
        raise ValidationError(f"expected {space.dim} coefficients, got {coeffs.shape}")
    return space.extraction_matrix(patch).T @ coeffs
