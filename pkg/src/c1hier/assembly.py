"""Galerkin assembly, linear solves and error norms on hierarchical spaces.

Integrals are evaluated element by element over the leaves of the
hierarchical mesh.  Every active function is evaluated on its own level at
the quadrature points of the leaf elements; element contributions are
summed in a fixed order so results are reproducible.

Boundary conditions are imposed weakly on the whole boundary, i.e. on the
patch edges xi1 = 1, xi2 = 0 and xi2 = 1 (xi1 = 0 is the interface).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .c1space import physical_derivatives
from .errors import SolverError, ValidationError
from .hierarchy import HierarchicalC1Space, split_keys

BOUNDARY_EDGES = ("xi1=1", "xi2=0", "xi2=1")
CHUNK = 256


@dataclass
class QuadratureRule:
    """Gauss-Legendre rule with ``order`` points on [0, 1]."""

    order: int
    points: np.ndarray
    weights: np.ndarray

    def element_points(self, e1, e2, nel):
        """Tensor points of elements ``(e1, e2)`` of a uniform ``nel`` x ``nel`` grid.

        Returns ``(xi1, xi2, w, owner)`` flattened per point, with ``w`` the
        parametric weights and ``owner`` the position of the element.
        """
        q = self.order
        e1 = np.asarray(e1)
        e2 = np.asarray(e2)
        xi1 = (e1[:, None, None] + self.points[None, :, None]) / nel
        xi2 = (e2[:, None, None] + self.points[None, None, :]) / nel
        shape = (e1.size, q, q)
        w = np.broadcast_to(np.outer(self.weights, self.weights)[None] / nel ** 2, shape)
        owner = np.broadcast_to(np.arange(e1.size)[:, None, None], shape)
        return (np.broadcast_to(xi1, shape).ravel(), np.broadcast_to(xi2, shape).ravel(),
                w.ravel(), owner.ravel())


def gauss_rule(order: int) -> QuadratureRule:
    """Gauss rule exact for polynomials of degree <= 2 * order - 1 on [0, 1]."""
    if order < 1:
        raise ValidationError("quadrature order must be positive")
    x, w = np.polynomial.legendre.leggauss(order)
    return QuadratureRule(order, 0.5 * (x + 1), 0.5 * w)


@dataclass
class AssembledSystem:
    """Sparse matrix and load vector over the active hierarchical functions."""

    matrix: sp.csr_matrix
    rhs: np.ndarray
    space: HierarchicalC1Space
    penalty: dict = field(default_factory=dict)
    boundary_h: np.ndarray = field(default_factory=lambda: np.empty(0))

    @property
    def ndof(self) -> int:
        return self.matrix.shape[0]

    def symmetry_defect(self) -> float:
        """``max|A - A^T| / max|A|``."""
        a = self.matrix
        big = abs(a).max()
        return float(abs(a - a.T).max() / big) if big > 0 else 0.0


class DiscreteSolution:
    """Coefficient vector over the active functions of a hierarchical space."""

    def __init__(self, space: HierarchicalC1Space, coeffs):
        self.space = space
        self.coeffs = np.asarray(coeffs, dtype=float)
        if self.coeffs.shape != (space.ndof,):
            raise ValidationError(f"expected {space.ndof} coefficients, got {self.coeffs.shape}")

    def derivatives(self, patch, xi1, xi2, nd: int = 1) -> dict:
        """Physical derivatives (keys v, dx, dy, ...) at parametric points of ``patch``."""
        xi1 = np.atleast_1d(np.asarray(xi1, dtype=float))
        xi2 = np.atleast_1d(np.asarray(xi2, dtype=float))
        vals = self.space.eval_dofs(patch, xi1, xi2, nd, self.coeffs)
        return physical_derivatives(self.space.geometry, patch, xi1, xi2,
                                    {k: v[:, None] for k, v in vals.items()}, nd)

    def __call__(self, patch, xi1, xi2):
        return np.asarray(self.derivatives(patch, xi1, xi2, 0)["v"]).ravel()

    def field(self, expr: str = "v") -> "SolutionField":
        """Data field evaluated from this solution: ``v``, ``-lap``, ``lap`` or a derivative key."""
        return SolutionField(self, expr)


class SolutionField:
    """Parametric-point field derived from a discrete solution, usable as assembly data."""

    def __init__(self, sol: DiscreteSolution, expr: str = "v"):
        self.sol = sol
        self.expr = expr

    def eval_param(self, patch, xi1, xi2):
        nd = 2 if "lap" in self.expr or self.expr in ("dxx", "dxy", "dyy") else 1
        d = self.sol.derivatives(patch, xi1, xi2, nd)
        if self.expr == "-lap":
            return -(d["dxx"] + d["dyy"])
        if self.expr == "lap":
            return d["dxx"] + d["dyy"]
        return d[self.expr]


# -- helpers ------------------------------------------------------------------------
def leaf_batches(space: HierarchicalC1Space, chunk: int = CHUNK):
    """Yield ``(level, patch, keys)`` for groups of leaf elements in a fixed order."""
    for level, keys in space.leaf_elements():
        if keys.size == 0:
            continue
        s = split_keys(keys, space.nel(level))[0]
        for patch in (0, 1):
            sel = keys[s == patch]
            for start in range(0, sel.size, chunk):
                yield level, patch, sel[start:start + chunk]


def field_values(fn, x, y, patch=None, xi1=None, xi2=None) -> np.ndarray:
    """Evaluate a data field given as a callable of ``(x, y)``, a constant, or None.

    Objects with an ``eval_param(patch, xi1, xi2)`` method are evaluated at
    the parametric points instead.
    """
    if fn is None:
        return np.zeros_like(x)
    if hasattr(fn, "eval_param"):
        return np.asarray(fn.eval_param(patch, xi1, xi2), dtype=float).ravel()
    if np.isscalar(fn):
        return np.full_like(x, float(fn))
    return np.broadcast_to(np.asarray(fn(x, y), dtype=float), x.shape).astype(float)


def normal_values(fn, x, n, patch=None, xi1=None, xi2=None) -> np.ndarray:
    """Evaluate normal-derivative data ``fn(x, y, normal)`` (or a field with ``eval_param``)."""
    if fn is None or hasattr(fn, "eval_param") or np.isscalar(fn):
        return field_values(fn, x[:, 0], x[:, 1], patch, xi1, xi2)
    return np.broadcast_to(np.asarray(fn(x[:, 0], x[:, 1], n), dtype=float), x[:, 0].shape).astype(float)


def normal_derivative(exact):
    """``(x, y, normal) -> grad(exact) . normal`` for a solution with ``derivatives``."""
    def fn(x, y, n):
        d = exact.derivatives(x, y)
        return d["dx"] * n[:, 0] + d["dy"] * n[:, 1]
    return fn


def _scatter(local, dofs, ndof):
    coo = local.tocoo()
    return sp.coo_matrix((coo.data, (dofs[coo.row], dofs[coo.col])), shape=(ndof, ndof))


def _add_vector(vec, local, dofs):
    np.add.at(vec, dofs, local)


def leaf_values(space, level, patch, keys, xi1, xi2, nd):
    dofs, mats = space.eval_on_leaves(level, patch, keys, xi1, xi2, nd)
    ph = physical_derivatives(space.geometry, patch, xi1, xi2, mats, nd)
    return dofs, ph


def element_diameter(geometry, patch, e1, e2, nel) -> np.ndarray:
    """Largest distance between the four physical corners of each element."""
    e1 = np.asarray(e1)
    e2 = np.asarray(e2)
    c1 = np.concatenate([e1, e1 + 1, e1, e1 + 1]) / nel
    c2 = np.concatenate([e2, e2, e2 + 1, e2 + 1]) / nel
    x = geometry.patch(patch).eval(c1, c2, 0)["x"].reshape(4, e1.size, 2)
    d = np.zeros(e1.size)
    for i in range(4):
        for j in range(i + 1, 4):
            d = np.maximum(d, np.linalg.norm(x[i] - x[j], axis=1))
    return d


def edge_points(edge: str, e1, e2, nel, rule: QuadratureRule):
    """Quadrature points on one boundary edge of each element.

    Returns ``(xi1, xi2, w, owner)`` with parametric line weights.
    """
    e1 = np.asarray(e1)
    e2 = np.asarray(e2)
    q = rule.order
    t = rule.points[None, :]
    w = np.broadcast_to(rule.weights[None, :] / nel, (e1.size, q)).ravel()
    owner = np.repeat(np.arange(e1.size), q)
    if edge == "xi1=1":
        xi1 = np.ones((e1.size, q))
        xi2 = (e2[:, None] + t) / nel
    elif edge in ("xi2=0", "xi2=1"):
        xi1 = (e1[:, None] + t) / nel
        xi2 = np.full((e1.size, q), 0.0 if edge == "xi2=0" else 1.0)
    elif edge == "xi1=0":
        xi1 = np.zeros((e1.size, q))
        xi2 = (e2[:, None] + t) / nel
    else:
        raise ValidationError(f"unknown edge {edge!r}")
    return xi1.ravel(), xi2.ravel(), w, owner


def edge_elements(edge: str, e1, e2, nel) -> np.ndarray:
    """Mask of elements touching ``edge``."""
    if edge == "xi1=1":
        return e1 == nel - 1
    if edge == "xi2=0":
        return e2 == 0
    if edge == "xi2=1":
        return e2 == nel - 1
    if edge == "xi1=0":
        return e1 == 0
    raise ValidationError(f"unknown edge {edge!r}")


def edge_normal(geometry, patch, edge, xi1, xi2):
    """Outward unit normal and line element ``|dF/dt|`` on a boundary edge."""
    geo = geometry.patch(patch).eval(xi1, xi2, 1)
    if edge in ("xi1=1", "xi1=0"):
        tan, inward = geo["d2"], (-geo["d1"] if edge == "xi1=1" else geo["d1"])
    else:
        tan, inward = geo["d1"], (geo["d2"] if edge == "xi2=0" else -geo["d2"])
    length = np.linalg.norm(tan, axis=1)
    n = np.stack([tan[:, 1], -tan[:, 0]], axis=1) / length[:, None]
    flip = np.sum(n * inward, axis=1) > 0
    n[flip] *= -1
    return n, length, geo["x"]


def boundary_batches(space, rule, chunk=CHUNK):
    """Yield boundary edge pieces of leaf elements with points, weights and normals."""
    geom = space.geometry
    for level, patch, keys in leaf_batches(space, chunk):
        nel = space.nel(level)
        _, e1, e2 = split_keys(keys, nel)
        for edge in BOUNDARY_EDGES:
            on = edge_elements(edge, e1, e2, nel)
            if not np.any(on):
                continue
            k = keys[on]
            xi1, xi2, w, owner = edge_points(edge, e1[on], e2[on], nel, rule)
            n, length, x = edge_normal(geom, patch, edge, xi1, xi2)
            h = element_diameter(geom, patch, e1[on], e2[on], nel)
            yield level, patch, k, xi1, xi2, w * length, n, x, h[owner]


def _default_order(space, quad_order):
    return space.degree + 3 if quad_order is None else int(quad_order)


def _finish(space, blocks, rhs, penalty, hs):
    ndof = space.ndof
    mat = sp.coo_matrix((ndof, ndof))
    if blocks:
        mat = sp.coo_matrix((np.concatenate([b.data for b in blocks]),
                             (np.concatenate([b.row for b in blocks]), np.concatenate([b.col for b in blocks]))),
                            shape=(ndof, ndof))
    mat = mat.tocsr()
    mat.sum_duplicates()
    return AssembledSystem(mat, rhs, space, penalty, np.concatenate(hs) if hs else np.empty(0))


# -- Poisson ------------------------------------------------------------------------
def assemble_poisson(space: HierarchicalC1Space, f=None, g=None, penalty: float | None = None,
                     quad_order: int | None = None) -> AssembledSystem:
    """Symmetric Nitsche system for ``-Δu = f`` in the domain, ``u = g`` on its boundary.

    Args:
        space: hierarchical space
        f: source, callable of physical ``(x, y)`` (or None for zero)
        g: Dirichlet data, callable of ``(x, y)`` (or None for zero)
        penalty: Nitsche parameter gamma (default ``10 (p + 1)``)
        quad_order: Gauss points per direction (default ``p + 3``)
    """
    p = space.degree
    gamma = 10.0 * (p + 1) if penalty is None else float(penalty)
    rule = gauss_rule(_default_order(space, quad_order))
    geom = space.geometry
    ndof = space.ndof
    blocks, rhs, hs = [], np.zeros(ndof), []
    for level, patch, keys in leaf_batches(space):
        nel = space.nel(level)
        _, e1, e2 = split_keys(keys, nel)
        xi1, xi2, w, _ = rule.element_points(e1, e2, nel)
        dofs, ph = leaf_values(space, level, patch, keys, xi1, xi2, 1)
        W = sp.diags(w * np.abs(ph["det"]))
        x = geom.patch(patch).eval(xi1, xi2, 0)["x"]
        loc = ph["dx"].T @ W @ ph["dx"] + ph["dy"].T @ W @ ph["dy"]
        blocks.append(_scatter(loc, dofs, ndof))
        _add_vector(rhs, ph["v"].T @ (W @ field_values(f, x[:, 0], x[:, 1], patch, xi1, xi2)), dofs)
    for level, patch, keys, xi1, xi2, ws, n, x, h in boundary_batches(space, rule):
        dofs, ph = leaf_values(space, level, patch, keys, xi1, xi2, 1)
        dn = sp.diags(n[:, 0]) @ ph["dx"] + sp.diags(n[:, 1]) @ ph["dy"]
        V = ph["v"]
        W = sp.diags(ws)
        Wp = sp.diags(ws * gamma / h)
        loc = -(dn.T @ W @ V) - (V.T @ W @ dn) + V.T @ Wp @ V
        blocks.append(_scatter(loc, dofs, ndof))
        gv = field_values(g, x[:, 0], x[:, 1], patch, xi1, xi2)
        _add_vector(rhs, -(dn.T @ (ws * gv)) + V.T @ (ws * gamma / h * gv), dofs)
        hs.append(h)
    return _finish(space, blocks, rhs, {"gamma": gamma}, hs)


# -- bilaplacian --------------------------------------------------------------------
def assemble_bilaplacian(space: HierarchicalC1Space, f=None, g1=None, g2=None, penalty: float | None = None,
                         quad_order: int | None = None) -> AssembledSystem:
    """Symmetric system for ``Δ²u = f`` with ``u = g1`` and ``du/dn = g2`` on the boundary.

    The bilinear form is ``∫ Δu Δv`` plus the boundary terms
    ``-∫ Δu dv/dn - ∫ du/dn Δv + σ/h ∫ du/dn dv/dn + σ/h^3 ∫ u v`` with
    ``σ = 10 (p + 1)^2``; the condition on ``u`` is imposed by the penalty
    term only.

    Args:
        space: hierarchical C1 space (p >= 3)
        f: source, callable of ``(x, y)``
        g1: boundary values
        g2: outward normal derivative on the boundary, callable of
            ``(x, y, normal)`` with ``normal`` of shape (m, 2)
        penalty: σ (default ``10 (p + 1)^2``)
        quad_order: Gauss points per direction (default ``p + 3``)
    """
    p = space.degree
    if p < 3 or space.spaces[0].smoothness != "c1":
        raise ValidationError("the bilaplacian needs the C1 space with p >= 3")
    sigma = 10.0 * (p + 1) ** 2 if penalty is None else float(penalty)
    rule = gauss_rule(_default_order(space, quad_order))
    geom = space.geometry
    ndof = space.ndof
    blocks, rhs, hs = [], np.zeros(ndof), []
    for level, patch, keys in leaf_batches(space):
        nel = space.nel(level)
        _, e1, e2 = split_keys(keys, nel)
        xi1, xi2, w, _ = rule.element_points(e1, e2, nel)
        dofs, ph = leaf_values(space, level, patch, keys, xi1, xi2, 2)
        W = sp.diags(w * np.abs(ph["det"]))
        lap = ph["dxx"] + ph["dyy"]
        x = geom.patch(patch).eval(xi1, xi2, 0)["x"]
        blocks.append(_scatter(lap.T @ W @ lap, dofs, ndof))
        _add_vector(rhs, ph["v"].T @ (W @ field_values(f, x[:, 0], x[:, 1], patch, xi1, xi2)), dofs)
    for level, patch, keys, xi1, xi2, ws, n, x, h in boundary_batches(space, rule):
        dofs, ph = leaf_values(space, level, patch, keys, xi1, xi2, 2)
        dn = sp.diags(n[:, 0]) @ ph["dx"] + sp.diags(n[:, 1]) @ ph["dy"]
        lap = ph["dxx"] + ph["dyy"]
        V = ph["v"]
        W = sp.diags(ws)
        W2 = sp.diags(ws * sigma / h)
        W1 = sp.diags(ws * sigma / h ** 3)
        loc = -(lap.T @ W @ dn) - (dn.T @ W @ lap) + dn.T @ W2 @ dn + V.T @ W1 @ V
        blocks.append(_scatter(loc, dofs, ndof))
        a = field_values(g1, x[:, 0], x[:, 1], patch, xi1, xi2)
        b = normal_values(g2, x, n, patch, xi1, xi2)
        _add_vector(rhs, -(lap.T @ (ws * b)) + dn.T @ (ws * sigma / h * b) + V.T @ (ws * sigma / h ** 3 * a), dofs)
        hs.append(h)
    return _finish(space, blocks, rhs, {"sigma1": sigma, "sigma2": sigma}, hs)


# -- solver ----------------------------------------------------------------------------
def solve_sparse(matrix, rhs, tol: float = 1e-10, refinement_steps: int = 3) -> np.ndarray:
    """Direct sparse solve with Jacobi scaling and iterative refinement.

    Raises:
        SolverError: singular or non-finite system, or residual above ``tol``.
    """
    a = sp.csr_matrix(matrix, dtype=float)
    b = np.asarray(rhs, dtype=float)
    if a.shape[0] != a.shape[1] or a.shape[0] != b.size:
        raise ValidationError(f"incompatible system shapes {a.shape} and {b.shape}")
    if a.shape[0] == 0:
        return np.zeros(0)
    nb = np.linalg.norm(b)
    if nb == 0:
        return np.zeros_like(b)
    d = np.abs(a.diagonal())
    if np.any(d == 0) or not np.all(np.isfinite(d)):
        raise SolverError(f"matrix has {int(np.sum(d == 0))} zero diagonal entries")
    s = 1.0 / np.sqrt(d)
    S = sp.diags(s)
    scaled = (S @ a @ S).tocsc()
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            lu = spla.splu(scaled)
    except (RuntimeError, Warning) as exc:
        raise SolverError(f"factorization failed: {exc}") from exc
    x = s * lu.solve(s * b)
    for _ in range(refinement_steps):
        r = b - a @ x
        if not np.all(np.isfinite(r)):
            break
        if np.linalg.norm(r) <= 0.01 * tol * nb:
            break
        x = x + s * lu.solve(s * r)
    res = np.linalg.norm(b - a @ x) / nb
    if not np.isfinite(res) or res > tol:
        raise SolverError(f"relative residual {res:.3e} exceeds {tol:.1e} (n={a.shape[0]})")
    return x


def solve(system: AssembledSystem, tol: float = 1e-10) -> DiscreteSolution:
    """Solve an assembled system; see :func:`solve_sparse`."""
    return DiscreteSolution(system.space, solve_sparse(system.matrix, system.rhs, tol))


# -- error norms -----------------------------------------------------------------------
@dataclass
class ErrorNorms:
    l2: float
    h1: float
    h2: float
    exact_l2: float
    exact_h1: float
    exact_h2: float

    def relative(self, name: str) -> float:
        ref = getattr(self, "exact_" + name)
        return getattr(self, name) / ref if ref > 0 else float("nan")


def error_norms(sol: DiscreteSolution, exact, quad_order: int | None = None, nd: int = 2) -> ErrorNorms:
    """L2 norm and H1/H2 seminorms of ``exact - sol`` over all leaf elements.

    Args:
        sol: discrete solution
        exact: object with ``derivatives(x, y)`` returning keys v, dx, dy,
            dxx, dxy, dyy (see :mod:`c1hier.problems`)
        quad_order: Gauss points per direction (default ``p + 3``)
        nd: highest derivative order to compare (H2 is NaN for nd < 2)
    """
    space = sol.space
    rule = gauss_rule(space.degree + 3 if quad_order is None else quad_order)
    geom = space.geometry
    acc = np.zeros(6)
    for level, patch, keys in leaf_batches(space):
        nel = space.nel(level)
        _, e1, e2 = split_keys(keys, nel)
        xi1, xi2, w, _ = rule.element_points(e1, e2, nel)
        dofs, ph = leaf_values(space, level, patch, keys, xi1, xi2, nd)
        c = sol.coeffs[dofs]
        x = geom.patch(patch).eval(xi1, xi2, 0)["x"]
        ex = exact.derivatives(x[:, 0], x[:, 1])
        W = w * np.abs(ph["det"])
        e0 = ex["v"] - ph["v"] @ c
        acc[0] += W @ e0 ** 2
        acc[3] += W @ ex["v"] ** 2
        if nd >= 1:
            ed = [ex[k] - ph[k] @ c for k in ("dx", "dy")]
            acc[1] += W @ (ed[0] ** 2 + ed[1] ** 2)
            acc[4] += W @ (ex["dx"] ** 2 + ex["dy"] ** 2)
        if nd >= 2:
            eh = {k: ex[k] - ph[k] @ c for k in ("dxx", "dxy", "dyy")}
            acc[2] += W @ (eh["dxx"] ** 2 + 2 * eh["dxy"] ** 2 + eh["dyy"] ** 2)
            acc[5] += W @ (ex["dxx"] ** 2 + 2 * ex["dxy"] ** 2 + ex["dyy"] ** 2)
    r = np.sqrt(acc)
    if nd < 2:
        r[[2, 5]] = np.nan
    if nd < 1:
        r[[1, 4]] = np.nan
    return ErrorNorms(*r)
