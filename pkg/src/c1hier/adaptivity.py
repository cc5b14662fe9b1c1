"""Residual error indicators, Doerfler marking and the adaptive loop.

Indicators for ``-Δu = f`` with Nitsche boundary conditions:

    eta_e^2 = h_e^2 ||f + Δu_h||_e^2
              + 1/2 sum over interface edges of e of h ||[du_h/dn]||^2
              + gamma / h ||u_h - g||^2 on boundary edges of e

Normal-derivative jumps between elements of the same patch vanish
identically because the patch-wise splines have regularity r >= 1, so only
edges on the interface are integrated.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .assembly import (DiscreteSolution, assemble_bilaplacian, assemble_poisson, edge_elements, edge_normal,
                       edge_points, element_diameter, error_norms, field_values, gauss_rule, leaf_batches,
                       leaf_values, boundary_batches, normal_derivative, solve)
from .bspline import uniform_space
from .c1space import build_c1_space
from .errors import ValidationError
from .geometry import bundled_geometry, compute_gluing
from .hierarchy import HierarchicalC1Space, cell_keys, init_hierarchy, split_keys
from .problems import ProblemSetup, example_problem

log = logging.getLogger(__name__)


@dataclass
class ElementIndicators:
    """Per-leaf-element indicators with their parts.

    ``level``, ``patch``, ``e1``, ``e2`` identify the elements; ``keys`` are
    the element keys of their level.
    """

    level: np.ndarray
    keys: np.ndarray
    patch: np.ndarray
    e1: np.ndarray
    e2: np.ndarray
    residual: np.ndarray
    jump: np.ndarray
    boundary: np.ndarray

    @property
    def eta(self) -> np.ndarray:
        return np.sqrt(self.residual + self.jump + self.boundary)

    @property
    def total(self) -> float:
        return float(np.sqrt(np.sum(self.residual + self.jump + self.boundary)))

    def __len__(self):
        return self.keys.size

    def order_keys(self):
        """Tie-break keys ``(level, patch, e1, e2)``."""
        return np.stack([self.level, self.patch, self.e1, self.e2], axis=1)


def _element_index(space):
    """Map ``(level, key)`` of every leaf to a position, in leaf order."""
    lev, keys = [], []
    for level, k in space.leaf_elements():
        lev.append(np.full(k.size, level))
        keys.append(k)
    lev = np.concatenate(lev)
    keys = np.concatenate(keys)
    return lev, keys


def estimate_residual(sol: DiscreteSolution, f=None, g=None, penalty: float | None = None,
                      quad_order: int | None = None) -> ElementIndicators:
    """Residual indicators of a Poisson solution on every leaf element.

    Args:
        sol: discrete solution
        f: source, callable of ``(x, y)``
        g: Dirichlet data (the boundary term is omitted when None)
        penalty: Nitsche parameter (default ``10 (p + 1)``)
        quad_order: Gauss points per direction (default ``p + 3``)
    """
    space = sol.space
    p = space.degree
    gamma = 10.0 * (p + 1) if penalty is None else float(penalty)
    rule = gauss_rule(p + 3 if quad_order is None else quad_order)
    geom = space.geometry
    lev, keys = _element_index(space)
    pos = {}
    for i, (l, k) in enumerate(zip(lev, keys)):
        pos[(int(l), int(k))] = i
    m = keys.size
    res, jump, bnd = np.zeros(m), np.zeros(m), np.zeros(m)
    patch = np.zeros(m, dtype=np.int64)
    e1a = np.zeros(m, dtype=np.int64)
    e2a = np.zeros(m, dtype=np.int64)

    def index(level, ks):
        return np.array([pos[(level, int(k))] for k in ks], dtype=np.int64)

    for level, s, ks in leaf_batches(space):
        nel = space.nel(level)
        _, e1, e2 = split_keys(ks, nel)
        idx = index(level, ks)
        patch[idx], e1a[idx], e2a[idx] = s, e1, e2
        xi1, xi2, w, owner = rule.element_points(e1, e2, nel)
        dofs, ph = leaf_values(space, level, s, ks, xi1, xi2, 2)
        c = sol.coeffs[dofs]
        x = geom.patch(s).eval(xi1, xi2, 0)["x"]
        r = field_values(f, x[:, 0], x[:, 1], s, xi1, xi2) + (ph["dxx"] + ph["dyy"]) @ c
        h = element_diameter(geom, s, e1, e2, nel)
        res[idx] = h ** 2 * np.bincount(owner, weights=w * np.abs(ph["det"]) * r ** 2, minlength=ks.size)
        on = edge_elements("xi1=0", e1, e2, nel)
        if np.any(on):
            t1, t2, tw, town = edge_points("xi1=0", e1[on], e2[on], nel, rule)
            n, length, _ = edge_normal(geom, s, "xi1=0", t1, t2)
            d0, ph0 = leaf_values(space, level, s, ks[on], t1, t2, 1)
            c0 = sol.coeffs[d0]
            d1 = sol.derivatives(1 - s, t1, t2, 1)
            gx = ph0["dx"] @ c0 - np.asarray(d1["dx"]).ravel()
            gy = ph0["dy"] @ c0 - np.asarray(d1["dy"]).ravel()
            jn = gx * n[:, 0] + gy * n[:, 1]
            hv = h[on]
            jump[idx[on]] += 0.5 * hv * np.bincount(town, weights=tw * length * jn ** 2, minlength=hv.size)
    if g is not None:
        for level, s, ks, t1, t2, ws, n, x, h in boundary_batches(space, rule):
            dofs, ph = leaf_values(space, level, s, ks, t1, t2, 0)
            diff = ph["v"] @ sol.coeffs[dofs] - field_values(g, x[:, 0], x[:, 1], s, t1, t2)
            npt = rule.order
            owner = np.repeat(np.arange(ks.size), npt)
            vals = np.bincount(owner, weights=ws * gamma / h * diff ** 2, minlength=ks.size)
            np.add.at(bnd, index(level, ks), vals)
    return ElementIndicators(lev, keys, patch, e1a, e2a, res, jump, bnd)


def interface_jump_norm(sol: DiscreteSolution, samples: int = 500) -> float:
    """Largest normal-derivative jump across the interface at sample points."""
    t = (np.arange(samples) + 0.5) / samples
    z = np.zeros(samples)
    a = sol.derivatives(0, z, t, 1)
    b = sol.derivatives(1, z, t, 1)
    n, _, _ = edge_normal(sol.space.geometry, 0, "xi1=0", z, t)
    ja = np.asarray(a["dx"]).ravel() - np.asarray(b["dx"]).ravel()
    jb = np.asarray(a["dy"]).ravel() - np.asarray(b["dy"]).ravel()
    return float(np.max(np.abs(ja * n[:, 0] + jb * n[:, 1])))


# -- marking -------------------------------------------------------------------------
def mark_doerfler(ind, theta: float, order=None) -> np.ndarray:
    """Positions of a minimal set of elements carrying a ``theta^2`` share of ``sum eta^2``.

    Elements are taken by decreasing indicator; ties are broken by
    ascending ``(level, patch, e1, e2)`` (or by the rows of ``order``).

    Args:
        ind: :class:`ElementIndicators` or an array of indicators
        theta: marking parameter in (0, 1]
        order: optional tie-break keys (one row per element)
    """
    if not (0 < theta <= 1):
        raise ValidationError(f"marking parameter must lie in (0, 1], got {theta}")
    if isinstance(ind, ElementIndicators):
        eta = ind.eta
        order = ind.order_keys() if order is None else order
    else:
        eta = np.asarray(ind, dtype=float)
    if np.any(eta < 0) or not np.all(np.isfinite(eta)):
        raise ValidationError("indicators must be finite and non-negative")
    n = eta.size
    if order is None:
        order = np.arange(n)[:, None]
    order = np.asarray(order).reshape(n, -1)
    perm = np.lexsort(tuple(order[:, k] for k in range(order.shape[1] - 1, -1, -1)) + (-eta,))
    sq = eta[perm] ** 2
    total = sq.sum()
    if total == 0:
        return np.empty(0, dtype=np.int64)
    if theta == 1:
        return np.sort(perm[sq > 0])
    target = theta ** 2 * total - n * np.finfo(float).eps * total
    cum = np.cumsum(sq)
    count = int(np.searchsorted(cum, target, side="left")) + 1
    return np.sort(perm[:min(count, n)])


def refine_marked(space: HierarchicalC1Space, marked) -> HierarchicalC1Space:
    """Dyadically refine marked leaf elements, given as ``(level, key)`` pairs."""
    groups = {}
    for level, key in marked:
        groups.setdefault(int(level), []).append(int(key))
    for level in sorted(groups):
        keys = np.array(groups[level], dtype=np.int64)
        if not np.all(np.isin(keys, space.domain.active_cells(level))):
            raise ValidationError(f"marked elements of level {level} are not leaf elements")
        space.refine_elements(level, keys)
    return space


def refine_all(space: HierarchicalC1Space) -> HierarchicalC1Space:
    """Refine every leaf element."""
    return refine_marked(space, [(l, k) for l, ks in space.leaf_elements() for k in ks])


def corner_block(space: HierarchicalC1Space, size: int = 4):
    """The ``size`` x ``size`` block of finest elements at the parametric corner (0, 0) of each patch."""
    level = space.num_levels - 1
    nel = space.nel(level)
    b = min(size, nel)
    e1, e2 = np.meshgrid(np.arange(b), np.arange(b), indexing="ij")
    out = []
    for s in (0, 1):
        for k in cell_keys(s, e1.ravel(), e2.ravel(), nel):
            if space.is_leaf(level, k):
                out.append((level, int(k)))
    return out


# -- loop ------------------------------------------------------------------------------
@dataclass
class AdaptiveRecord:
    iteration: int
    ndof: int
    error: float
    estimator: float
    marked: int
    elements: int
    levels: int
    seconds: float
    norms: dict = field(default_factory=dict)


@dataclass
class RunConfig:
    """Settings of one convergence run."""

    example: int = 1
    degree: int = 3
    smoothness: str = "c1"
    mode: str = "adaptive"
    theta: float | None = None
    initial_elements: int | None = None
    budget: int = 2000
    max_iter: int = 60
    geometry: str | None = None

    def validate(self):
        if self.degree not in (3, 4):
            raise ValidationError("degree must be 3 or 4")
        if self.smoothness not in ("c1", "c0"):
            raise ValidationError("smoothness must be c1 or c0")
        if self.mode not in ("adaptive", "uniform", "corner"):
            raise ValidationError("mode must be adaptive, uniform or corner")
        if self.theta is not None and not (0 < self.theta <= 1):
            raise ValidationError("theta must lie in (0, 1]")
        if self.budget < 1 or self.max_iter < 0:
            raise ValidationError("budget must be positive and max_iter non-negative")
        prob = example_problem(self.example)
        if prob.equation == "bilaplacian" and self.smoothness != "c1":
            raise ValidationError("the bilaplacian needs C1 smoothness")
        if prob.equation == "bilaplacian" and self.mode == "adaptive":
            raise ValidationError("example 4 uses the corner or uniform refinement mode")
        return prob


def build_space(geometry: str, degree: int, num_elements: int, smoothness: str = "c1") -> HierarchicalC1Space:
    """Single-level hierarchy on a bundled geometry with r = p - 2."""
    geom = bundled_geometry(geometry)
    gluing = compute_gluing(geom)
    return init_hierarchy(build_c1_space(geom, gluing, uniform_space(degree, degree - 2, num_elements), smoothness))


def _solve_problem(space, prob: ProblemSetup):
    u = prob.exact
    if prob.equation == "poisson":
        sysm = assemble_poisson(space, prob.source, u)
    else:
        sysm = assemble_bilaplacian(space, prob.source, u, normal_derivative(u))
    return solve(sysm)


def adaptive_loop(config: RunConfig, callback=None) -> list:
    """SOLVE, ESTIMATE, MARK, REFINE until the NDOF budget or iteration cap is reached.

    A run stops after the first solve whose NDOF reaches ``budget``, or after
    ``max_iter`` refinements.  ``callback(record, space)`` is called after
    every iteration.
    """
    prob = config.validate()
    theta = prob.theta if config.theta is None else config.theta
    nel0 = prob.initial_elements if config.initial_elements is None else config.initial_elements
    space = build_space(config.geometry or prob.geometry, config.degree, nel0, config.smoothness)
    records = []
    it = 0
    while True:
        t0 = time.perf_counter()
        sol = _solve_problem(space, prob)
        if prob.equation == "poisson":
            ind = estimate_residual(sol, prob.source, prob.exact)
            est = ind.total
        else:
            ind, est = None, float("nan")
        norms = error_norms(sol, prob.exact, nd=2 if prob.error_norm == "h2" else 1)
        err = norms.relative(prob.error_norm) if prob.relative_error else getattr(norms, prob.error_norm)
        if prob.relative_error:
            est = est / norms.exact_h1
        done = space.ndof >= config.budget or it >= config.max_iter
        marked = []
        if not done:
            if config.mode == "adaptive":
                sel = mark_doerfler(ind, theta)
                marked = list(zip(ind.level[sel], ind.keys[sel]))
            elif config.mode == "uniform":
                marked = [(l, k) for l, ks in space.leaf_elements() for k in ks]
            else:
                marked = corner_block(space)
        rec = AdaptiveRecord(it, space.ndof, float(err), float(est), len(marked), space.num_elements(),
                             space.num_levels, time.perf_counter() - t0,
                             {"l2": norms.l2, "h1": norms.h1, "h2": norms.h2})
        records.append(rec)
        log.info("iter %d ndof %d error %.3e estimator %.3e", it, rec.ndof, rec.error, rec.estimator)
        if callback is not None:
            callback(rec, space)
        if done:
            break
        refine_marked(space, marked)
        it += 1
    return records
