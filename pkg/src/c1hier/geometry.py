"""Two-patch planar geometries and their gluing data.

Both patches are tensor-product spline maps from the unit square.  The
interface is the edge ``xi1 = 0`` of both patches, parameterized by ``xi2``
in the same direction, so ``F_L(0, t) == F_R(0, t)``.

The gluing data are four linear functions ``alpha_L, alpha_R, beta_L,
beta_R`` on [0, 1] such that along the interface

    alpha_R * d1F_L - alpha_L * d1F_R + beta * d2F_L = 0,
    beta = alpha_L * beta_R - alpha_R * beta_L,

with ``alpha_L * alpha_R < 0``.  A geometry admitting such linear functions
is called analysis-suitable; only those support the C1 construction.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .bspline import SplineSpace, make_space
from .errors import DomainError, GeometryError, NotAnalysisSuitable, ValidationError

PATCHES = ("L", "R")
INTERFACE_TOL = 1e-10
AS_G1_TOL = 1e-9


def patch_index(patch) -> int:
    """Accept 0/1 or 'L'/'R' and return 0 or 1."""
    if patch in (0, "L", "l"):
        return 0
    if patch in (1, "R", "r"):
        return 1
    raise ValidationError(f"unknown patch {patch!r}")


class PatchMapping:
    """Tensor-product spline map ``F(xi1, xi2) = sum c[i, j] N_i(xi1) N_j(xi2)``."""

    def __init__(self, space: SplineSpace, control_points):
        cp = np.asarray(control_points, dtype=float)
        n = space.dim
        if cp.shape != (n, n, 2):
            raise GeometryError(f"control net must have shape ({n}, {n}, 2), got {cp.shape}")
        self.space = space
        self.control_points = cp

    def eval(self, xi1, xi2, nd: int = 1) -> dict:
        """Point and parametric derivatives up to order ``nd`` (<= 2).

        Returns a dict with keys ``x``, ``d1``, ``d2`` and, for ``nd >= 2``,
        ``d11``, ``d12``, ``d22``; every entry has shape (m, 2).
        """
        xi1 = np.atleast_1d(np.asarray(xi1, dtype=float))
        xi2 = np.atleast_1d(np.asarray(xi2, dtype=float))
        p = self.space.degree
        f1, b1 = self.space.ders(xi1, nd)
        f2, b2 = self.space.ders(xi2, nd)
        r = np.arange(p + 1)
        block = self.control_points[(f1[:, None] + r)[:, :, None], (f2[:, None] + r)[:, None, :]]
        out = {}
        names = {(0, 0): "x", (1, 0): "d1", (0, 1): "d2", (2, 0): "d11", (1, 1): "d12", (0, 2): "d22"}
        for (k1, k2), name in names.items():
            if k1 + k2 <= nd:
                out[name] = np.einsum("ma,mb,mabk->mk", b1[:, k1], b2[:, k2], block)
        return out


class TwoPatchGeometry:
    """Pair of patch maps sharing the interface ``xi1 = 0``."""

    def __init__(self, left: PatchMapping, right: PatchMapping, name: str = ""):
        self.patches = (left, right)
        self.name = name
        self._check()

    @property
    def degree(self) -> int:
        return self.patches[0].space.degree

    def patch(self, s) -> PatchMapping:
        return self.patches[patch_index(s)]

    def _check(self):
        t = np.linspace(0.0, 1.0, 1001)
        zero = np.zeros_like(t)
        a = self.patches[0].eval(zero, t, 0)["x"]
        b = self.patches[1].eval(zero, t, 0)["x"]
        scale = max(1.0, np.abs(self.patches[0].control_points).max())
        dev = np.abs(a - b).max()
        if dev > INTERFACE_TOL * scale:
            raise GeometryError(f"patches do not share the interface (deviation {dev:.3e})")
        g = np.linspace(0.0, 1.0, 21)
        u, v = [w.ravel() for w in np.meshgrid(g, g, indexing="ij")]
        for s, patch in enumerate(self.patches):
            ev = patch.eval(u, v, 1)
            det = ev["d1"][:, 0] * ev["d2"][:, 1] - ev["d1"][:, 1] * ev["d2"][:, 0]
            if not (np.all(det > 0) or np.all(det < 0)):
                raise GeometryError(f"patch {PATCHES[s]} has a singular or folded Jacobian")

    def to_dict(self) -> dict:
        sp0 = self.patches[0].space
        return {
            "degree": sp0.degree,
            "regularity": sp0.regularity,
            "breakpoints": [float(b) for b in sp0.breakpoints],
            "patches": [
                {"id": PATCHES[s], "control_points": self.patches[s].control_points.tolist()}
                for s in range(2)
            ],
        }


def eval_patch(geom: TwoPatchGeometry, patch, xi1, xi2, max_deriv: int = 1) -> dict:
    """Evaluate patch ``patch`` of ``geom``; see :meth:`PatchMapping.eval`."""
    if max_deriv > 2:
        raise ValidationError("geometry derivatives are available up to order 2")
    xi1 = np.atleast_1d(np.asarray(xi1, dtype=float))
    xi2 = np.atleast_1d(np.asarray(xi2, dtype=float))
    for x in (xi1, xi2):
        if np.any(x < 0) or np.any(x > 1):
            raise DomainError("parameter outside [0, 1]")
    return geom.patch(patch).eval(xi1, xi2, max_deriv)


def geometry_from_dict(data: dict, name: str = "") -> TwoPatchGeometry:
    try:
        p = int(data["degree"])
        r = int(data.get("regularity", p - 1))
        breaks = data.get("breakpoints", [])
        patches = {pd["id"]: pd["control_points"] for pd in data["patches"]}
    except (KeyError, TypeError, ValueError) as exc:
        raise GeometryError(f"malformed geometry description: {exc}") from exc
    if set(patches) != set(PATCHES):
        raise GeometryError("geometry needs exactly the patches 'L' and 'R'")
    try:
        space = make_space(p, r, breaks)
    except ValidationError as exc:
        raise GeometryError(str(exc)) from exc
    return TwoPatchGeometry(PatchMapping(space, patches["L"]), PatchMapping(space, patches["R"]), name)


def load_geometry(path) -> TwoPatchGeometry:
    """Load a geometry JSON file (see README for the format)."""
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise GeometryError(f"cannot read geometry file {path}: {exc}") from exc
    return geometry_from_dict(data, name=path.stem)


def bundled_geometry(name: str) -> TwoPatchGeometry:
    """One of the shipped domains: ``lshape``, ``curved``, ``curved_initial``, ``two_squares``."""
    ref = resources.files("c1hier") / "data" / f"{name}.json"
    if not ref.is_file():
        raise ValidationError(f"no bundled geometry named {name!r}")
    return geometry_from_dict(json.loads(ref.read_text()), name=name)


def save_geometry(geom: TwoPatchGeometry, path, description: str = "") -> None:
    """Write a geometry file with every number printed to 17 significant digits."""
    data = geom.to_dict()
    if description:
        data = {"description": description, **data}
    text = json.dumps(data, indent=1)
    text = re.sub(r"-?\d+\.\d+(?:e[-+]?\d+)?", lambda m: format(float(m.group()), ".17g"), text)
    Path(path).write_text(text + "\n")


# ---------------------------------------------------------------------------
# gluing data

def _linear(coef, t):
    t = np.asarray(t, dtype=float)
    return coef[0] * (1.0 - t) + coef[1] * t


@dataclass(frozen=True)
class GluingData:
    """Linear gluing functions stored by their values at ``t = 0`` and ``t = 1``."""

    alpha_L: tuple
    alpha_R: tuple
    beta_L: tuple
    beta_R: tuple

    def alpha(self, patch, t):
        return _linear(self.alpha_L if patch_index(patch) == 0 else self.alpha_R, t)

    def beta_side(self, patch, t):
        return _linear(self.beta_L if patch_index(patch) == 0 else self.beta_R, t)

    def beta(self, t):
        """The (at most quadratic) function ``alpha_L beta_R - alpha_R beta_L``."""
        return self.alpha(0, t) * self.beta_side(1, t) - self.alpha(1, t) * self.beta_side(0, t)


def _gauss01(n):
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


def _linear_gram():
    """Gram matrix and moments of the basis (1 - t, t) by two-point Gauss quadrature."""
    t, w = _gauss01(2)
    phi = np.stack([1.0 - t, t])
    return (phi * w) @ phi.T, phi @ w


def _interface_samples(geom, per_element=None):
    space = geom.patches[0].space
    q = per_element or 2 * space.degree + 2
    t, _ = _gauss01(q)
    a, b = space.element_bounds(np.arange(space.num_elements))
    return (a[:, None] + (b - a)[:, None] * t[None, :]).ravel()


def _interface_derivatives(geom, t):
    zero = np.zeros_like(t)
    ev = [geom.patches[s].eval(zero, t, 1) for s in range(2)]
    return ev[0]["d1"], ev[1]["d1"], ev[0]["d2"]


def _cross(a, b):
    return a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]


def _null_space(mat, rtol):
    _, s, vt = np.linalg.svd(mat)
    smax = s[0] if s.size else 0.0
    s_full = np.zeros(vt.shape[0])
    s_full[: s.size] = s
    null = s_full <= rtol * smax
    return vt[null].T, s_full, vt


def gluing_residual(geom: TwoPatchGeometry, gluing: GluingData, t=None) -> float:
    """Sup over samples of the interface identity residual, relative to the derivative scale."""
    if t is None:
        t = np.linspace(0.0, 1.0, 101)
    d1L, d1R, d2 = _interface_derivatives(geom, np.asarray(t, dtype=float))
    res = (gluing.alpha(1, t)[:, None] * d1L - gluing.alpha(0, t)[:, None] * d1R
           + gluing.beta(t)[:, None] * d2)
    scale = max(np.abs(d1L).max(), np.abs(d1R).max(), np.abs(d2).max())
    return float(np.abs(res).max() / scale)


def compute_gluing(geom: TwoPatchGeometry, tol: float = AS_G1_TOL) -> GluingData:
    """Compute the normalized linear gluing data of an analysis-suitable geometry.

    ``alpha_L, alpha_R`` minimize ``||alpha_L + 1||^2 + ||alpha_R - 1||^2`` among
    linear functions compatible with the geometry; then ``beta_L, beta_R``
    minimize ``||beta_L||^2 + ||beta_R||^2`` subject to reproducing ``beta``.

    Raises:
        NotAnalysisSuitable: no linear gluing data reproduce the interface
            identity within ``tol``.
    """
    t = _interface_samples(geom)
    d1L, d1R, d2 = _interface_derivatives(geom, t)
    det_L = _cross(d1L, d2)
    det_R = _cross(d1R, d2)
    gram, moments = _linear_gram()
    lin = np.stack([1.0 - t, t], axis=1)

    # alpha_L * det_R - alpha_R * det_L = 0 along the interface
    amat = np.hstack([lin * det_R[:, None], -lin * det_L[:, None]])
    amat /= np.abs(amat).max()
    null, svals, vt = _null_space(amat, 1e-8)
    if null.shape[1] == 0:
        null = vt[-1:].T
    g2 = np.kron(np.eye(2), gram)
    h = np.concatenate([moments, -moments])
    c = np.linalg.solve(null.T @ g2 @ null, -null.T @ h)
    alpha = null @ c
    aL, aR = alpha[:2], alpha[2:]
    aLt, aRt = lin @ aL, lin @ aR

    # beta from the tangential component of the identity
    w = aLt[:, None] * d1R - aRt[:, None] * d1L
    beta = np.einsum("mk,mk->m", w, d2) / np.einsum("mk,mk->m", d2, d2)

    # beta = alpha_L beta_R - alpha_R beta_L with minimal norm
    bmat = np.hstack([-lin * aRt[:, None], lin * aLt[:, None]])
    u, s, vt = np.linalg.svd(bmat, full_matrices=True)
    rank = int(np.sum(s > 1e-10 * s[0]))
    y = vt[:rank].T @ ((u[:, :rank].T @ beta) / s[:rank])
    nullb = vt[rank:].T
    if nullb.shape[1]:
        z = np.linalg.solve(nullb.T @ g2 @ nullb, -nullb.T @ g2 @ y)
        y = y + nullb @ z
    gluing = GluingData(tuple(aL), tuple(aR), tuple(y[:2]), tuple(y[2:]))

    residual = max(gluing_residual(geom, gluing), gluing_residual(geom, gluing, t))
    if residual > tol:
        raise NotAnalysisSuitable("geometry is not analysis-suitable G1", residual)
    ts = np.linspace(0.0, 1.0, 101)
    if not np.all(gluing.alpha(0, ts) * gluing.alpha(1, ts) < 0):
        raise GeometryError("gluing functions violate the sign condition alpha_L * alpha_R < 0")
    return gluing


def transversal_direction(geom: TwoPatchGeometry, gluing: GluingData, t, patch=None):
    """Transversal vector ``d`` along the interface at parameters ``t``.

    Computed from ``patch`` (0/1/'L'/'R'); by default from the left patch.
    Both patches give the same vector for valid gluing data.
    """
    s = 0 if patch is None else patch_index(patch)
    t = np.atleast_1d(np.asarray(t, dtype=float))
    ev = geom.patches[s].eval(np.zeros_like(t), t, 1)
    a = gluing.alpha(s, t)
    if np.any(a == 0):
        raise GeometryError("alpha vanishes on the interface")
    return (ev["d1"] - gluing.beta_side(s, t)[:, None] * ev["d2"]) / a[:, None]


def verify_geometry(geom: TwoPatchGeometry) -> dict:
    """Report used by the command line: gluing data or the failure residual."""
    try:
        g = compute_gluing(geom)
    except NotAnalysisSuitable as exc:
        return {"analysis_suitable": False, "residual": exc.residual}
    return {
        "analysis_suitable": True,
        "residual": gluing_residual(geom, g),
        "alpha_L": list(g.alpha_L), "alpha_R": list(g.alpha_R),
        "beta_L": list(g.beta_L), "beta_R": list(g.beta_R),
    }
