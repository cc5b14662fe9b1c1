"""Regenerate the geometry files shipped in ``src/c1hier/data``.

``curved_table.json`` is a direct transcription of the published bicubic
control net.  Six of its coordinates are given as decimal quotients and are
rounded, so the net misses the linear gluing identity by about 3e-5.
``curved.json`` moves only those six coordinates, by a minimum-norm
Gauss-Newton correction, onto a net that satisfies the identity to
round-off.
"""

from fractions import Fraction
from pathlib import Path

import numpy as np

from c1hier.bspline import make_space
from c1hier.geometry import (PatchMapping, TwoPatchGeometry, _interface_derivatives,
                             compute_gluing, save_geometry)

DATA = Path(__file__).resolve().parents[1] / "src" / "c1hier" / "data"


def q(s):
    return float(Fraction(s))


def grid(rows):
    """Table rows run along xi2 and columns along xi1; return cp[i][j]."""
    pts = [[(q(a) if isinstance(a, str) else a, q(b) if isinstance(b, str) else b) for a, b in r]
           for r in rows]
    n = len(pts)
    return np.array([[pts[j][i] for j in range(n)] for i in range(n)], dtype=float)


D = 991700.0
C = [333939 / D, 47387036 / (22.5 * D), -15800567 / (5 * D),
     242128576 / (67.5 * D), 57452423 / (45 * D), 81952942 / (22.5 * D)]

LEFT = [[("0", "0"), ("-2", "2/9"), ("-4", "-4/9"), ("-6", "-2")],
        [("-4/3", "5/3"), ("-127/50", "44/25"), ("-98/25", "37/25"), ("-16/3", "2/3")],
        [("-4/3", "11/3"), (C[2], C[3]), ("-89/25", "189/50"), ("-17/3", "4")],
        [("0", "6"), ("-2", "52/9"), ("-13/3", "58/9"), ("-7", "8")]]
RIGHT = [[("0", "0"), ("26/15", "2/3"), ("56/15", "1/3"), ("6", "-1")],
         [("-4/3", "5/3"), (C[0], C[1]), ("87/25", "113/50"), ("14/3", "19/9")],
         [("-4/3", "11/3"), (C[4], C[5]), ("29/10", "4"), ("9/2", "83/18")],
         [("0", "6"), ("2", "16/3"), ("23/6", "11/2"), ("11/2", "13/2")]]
LEFT_INITIAL = [[("0", "0"), ("-3", "1/3"), ("-6", "-2")],
                [("-2", "5/2"), ("-13/4", "53/20"), ("-5", "2")],
                [("0", "6"), ("-3", "17/3"), ("-7", "8")]]
RIGHT_INITIAL = [[("0", "0"), ("13/5", "1"), ("6", "-1")],
                 [("-2", "5/2"), ("39/20", "3"), ("4", "11/3")],
                 [("0", "6"), ("3", "5"), ("11/2", "13/2")]]


def geometry(left, right, degree):
    space = make_space(degree, degree - 1, [])
    return TwoPatchGeometry(PatchMapping(space, left), PatchMapping(space, right))


def with_coefficients(left, right, c):
    left, right = left.copy(), right.copy()
    right[1, 1] = c[0:2]
    left[1, 2] = c[2:4]
    right[1, 2] = c[4:6]
    return left, right


def identity_residual(left, right, c):
    geom = geometry(*with_coefficients(left, right, c), 3)
    glu = compute_gluing(geom, tol=np.inf)
    t = np.linspace(0.0, 1.0, 40)
    d1L, d1R, d2 = _interface_derivatives(geom, t)
    res = glu.alpha(1, t)[:, None] * d1L - glu.alpha(0, t)[:, None] * d1R + glu.beta(t)[:, None] * d2
    return res.ravel()


def project(left, right, c, iters=30, h=1e-7):
    c = np.array(c, dtype=float)
    for _ in range(iters):
        r = identity_residual(left, right, c)
        if np.abs(r).max() < 1e-15:
            break
        jac = np.stack([(identity_residual(left, right, c + h * e) - identity_residual(left, right, c - h * e)) / (2 * h)
                        for e in np.eye(len(c))], axis=1)
        c = c - np.linalg.lstsq(jac, r, rcond=1e-10)[0]
    return c


def main():
    left, right = grid(LEFT), grid(RIGHT)
    table = "Bicubic two-patch domain, control net as published (rows: index along xi1; xi1 = 0 is the interface)."
    save_geometry(geometry(left, right, 3), DATA / "curved_table.json", table)
    c = project(left, right, C)
    fixed = geometry(*with_coefficients(left, right, c), 3)
    save_geometry(fixed, DATA / "curved.json",
                  "Bicubic two-patch domain with linear gluing data; six interior coordinates of the "
                  "published net corrected by a minimum-norm projection (rows: index along xi1).")
    save_geometry(geometry(grid(LEFT_INITIAL), grid(RIGHT_INITIAL), 2), DATA / "curved_initial.json",
                  "Biquadratic two-patch domain with the same boundary; it admits no linear gluing data.")
    lshape = geometry(np.array([[[0, 0], [-1, 1]], [[0, -1], [-1, -1]]], float),
                      np.array([[[0, 0], [-1, 1]], [[1, 0], [1, 1]]], float), 1)
    save_geometry(lshape, DATA / "lshape.json",
                  "L-shaped domain [-1,1]^2 minus (0,1)x(-1,0) split along the segment from (0,0) to (-1,1).")
    squares = geometry(np.array([[[0, 0], [0, 1]], [[-1, 0], [-1, 1]]], float),
                       np.array([[[0, 0], [0, 1]], [[1, 0], [1, 1]]], float), 1)
    save_geometry(squares, DATA / "two_squares.json", "Two unit squares [-1,0]x[0,1] and [0,1]x[0,1].")
    print("coefficient correction:", np.array(c) - np.array(C))


if __name__ == "__main__":
    main()
