"""Model problems with closed-form solutions.

Every solution provides values, gradients and Hessians at physical points;
Hessians are returned as ``(uxx, uxy, uyy)`` columns.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

EX4_Z = 0.544483736782464


class ExactSolution:
    """Base class; subclasses implement :meth:`derivatives`."""

    name = ""

    def derivatives(self, x, y) -> dict:
        """Dict with keys v, dx, dy, dxx, dxy, dyy."""
        raise NotImplementedError

    def __call__(self, x, y):
        return self.derivatives(x, y)["v"]

    def gradient(self, x, y) -> np.ndarray:
        d = self.derivatives(x, y)
        return np.stack([d["dx"], d["dy"]], axis=-1)

    def hessian(self, x, y) -> np.ndarray:
        d = self.derivatives(x, y)
        return np.stack([d["dxx"], d["dxy"], d["dyy"]], axis=-1)

    def laplacian(self, x, y):
        d = self.derivatives(x, y)
        return d["dxx"] + d["dyy"]

    def minus_laplacian(self, x, y):
        return -self.laplacian(x, y)


def _polar(x, y):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    rho = np.hypot(x, y)
    theta = np.arctan2(y, x)
    theta = np.where(theta < 0, theta + 2 * np.pi, theta)
    return rho, theta


def _polar_derivatives(rho, theta, R, T) -> dict:
    """Cartesian derivatives of ``R(rho) T(theta)``.

    ``R`` and ``T`` are tuples of the function and its first two derivatives.
    """
    r0, r1, r2 = R
    t0, t1, t2 = T
    with np.errstate(divide="ignore", invalid="ignore"):
        c, s = np.cos(theta), np.sin(theta)
        ur, ut = r1 * t0, r0 * t1
        urr, urt, utt = r2 * t0, r1 * t1, r0 * t2
        inv = 1.0 / rho
        dx = c * ur - s * inv * ut
        dy = s * ur + c * inv * ut
        dxx = (c * c * urr - 2 * s * c * inv * urt + s * s * inv * inv * utt
               + s * s * inv * ur + 2 * s * c * inv * inv * ut)
        dyy = (s * s * urr + 2 * s * c * inv * urt + c * c * inv * inv * utt
               + c * c * inv * ur - 2 * s * c * inv * inv * ut)
        dxy = (s * c * urr + (c * c - s * s) * inv * urt - s * c * inv * inv * utt
               - s * c * inv * ur - (c * c - s * s) * inv * inv * ut)
    return {"v": r0 * t0, "dx": dx, "dy": dy, "dxx": dxx, "dxy": dxy, "dyy": dyy}


class CornerSingularity(ExactSolution):
    """``rho^(4/3) sin(4 theta / 3)`` with theta in [0, 2 pi)."""

    name = "corner"

    def __init__(self, exponent: float = 4.0 / 3.0):
        self.a = exponent

    def derivatives(self, x, y) -> dict:
        rho, th = _polar(x, y)
        a = self.a
        with np.errstate(divide="ignore", invalid="ignore"):
            R = (rho ** a, a * rho ** (a - 1), a * (a - 1) * rho ** (a - 2))
        T = (np.sin(a * th), a * np.cos(a * th), -a * a * np.sin(a * th))
        out = _polar_derivatives(rho, th, R, T)
        return {k: np.where(rho > 0, v, 0.0 if k == "v" else np.nan) for k, v in out.items()}


class PowerTimesCosine(ExactSolution):
    """``|q(x, y)|^e * cos(c_x x + c_y y)`` for a quadratic ``q``.

    ``q = q0 + qx x + qy y + qxx x^2 + qxy x y + qyy y^2``.
    """

    def __init__(self, q, exponent, cx, cy, name=""):
        self.q = tuple(float(v) for v in q)
        self.e = float(exponent)
        self.cx, self.cy = float(cx), float(cy)
        self.name = name

    def derivatives(self, x, y) -> dict:
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        q0, qx, qy, qxx, qxy, qyy = self.q
        q = q0 + qx * x + qy * y + qxx * x * x + qxy * x * y + qyy * y * y
        q1 = qx + 2 * qxx * x + qxy * y
        q2 = qy + qxy * x + 2 * qyy * y
        e = self.e
        a = np.abs(q)
        sg = np.sign(q)
        # P = |q|^e, P' = e sign(q) |q|^(e-1), P'' = e (e-1) |q|^(e-2)
        P = a ** e
        P1 = e * sg * a ** (e - 1)
        with np.errstate(divide="ignore"):
            P2 = np.where(a > 0, e * (e - 1) * a ** (e - 2), 0.0)
        ph = self.cx * x + self.cy * y
        C, S = np.cos(ph), np.sin(ph)
        v = P * C
        px, py = P1 * q1, P1 * q2
        pxx = P2 * q1 * q1 + P1 * 2 * qxx
        pxy = P2 * q1 * q2 + P1 * qxy
        pyy = P2 * q2 * q2 + P1 * 2 * qyy
        cx, cy = self.cx, self.cy
        return {"v": v,
                "dx": px * C - P * cx * S,
                "dy": py * C - P * cy * S,
                "dxx": pxx * C - 2 * px * cx * S - P * cx * cx * C,
                "dxy": pxy * C - (px * cy + py * cx) * S - P * cx * cy * C,
                "dyy": pyy * C - 2 * py * cy * S - P * cy * cy * C}


def interface_parabola_solution() -> PowerTimesCosine:
    """``(-120x + x^2 - 96y - 8xy + 16y^2)^(12/5) cos(pi y / 20)``, real fifth root."""
    return PowerTimesCosine((0, -120, -96, 1, -8, 16), 12 / 5, 0.0, np.pi / 20, name="parabola")


def line_singularity_solution() -> PowerTimesCosine:
    """``(y - 1.7)^(12/5) cos(x / 4)``, real fifth root."""
    return PowerTimesCosine((-1.7, 0, 1, 0, 0, 0), 12 / 5, 0.25, 0.0, name="line")


class BiharmonicCorner(ExactSolution):
    """Biharmonic corner singularity of the L-shaped domain (clamped edges)."""

    name = "biharmonic_corner"

    def __init__(self, z: float = EX4_Z):
        self.z = z
        zm, zp = z - 1, z + 1
        self.C1 = (np.sin(1.5 * zm * np.pi) - np.sin(1.5 * zp * np.pi)) / zm
        self.C2 = np.cos(1.5 * zm * np.pi) - np.cos(1.5 * zp * np.pi)

    def angular(self, th):
        """Angular factor ``C1 F1 - C2 F2`` and its first three derivatives."""
        zm, zp = self.z - 1, self.z + 1
        C1, C2 = self.C1, self.C2
        out = []
        for k in range(4):
            # d^k/dth^k of cos(a th) and sin(a th)
            def dcos(a):
                return a ** k * np.cos(a * th + k * np.pi / 2)

            def dsin(a):
                return a ** k * np.sin(a * th + k * np.pi / 2)
            F1 = dcos(zm) - dcos(zp)
            F2 = dsin(zm) / zm - dsin(zp) / zp
            out.append(C1 * F1 - C2 * F2)
        return out

    def derivatives(self, x, y) -> dict:
        rho, th = _polar(x, y)
        a = self.z + 1
        with np.errstate(divide="ignore", invalid="ignore"):
            R = (rho ** a, a * rho ** (a - 1), a * (a - 1) * rho ** (a - 2))
        T = self.angular(th)[:3]
        out = _polar_derivatives(rho, th, R, T)
        return {k: np.where(rho > 0, v, 0.0 if k in ("v", "dx", "dy") else np.nan) for k, v in out.items()}

    def eigen_residual(self, omega: float = 1.5 * np.pi) -> float:
        return float(np.sin(self.z * omega) + self.z * np.sin(omega))


class Polynomial(ExactSolution):
    """Polynomial ``sum c[i, j] x^i y^j`` (used for consistency checks)."""

    name = "polynomial"

    def __init__(self, coeffs):
        self.c = np.asarray(coeffs, dtype=float)

    def _eval(self, c, x, y):
        return np.polynomial.polynomial.polyval2d(x, y, c) if c.size else np.zeros_like(x)

    def derivatives(self, x, y) -> dict:
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        P = np.polynomial.polynomial
        c = self.c
        cx, cy = P.polyder(c, axis=0), P.polyder(c, axis=1)
        return {"v": self._eval(c, x, y), "dx": self._eval(cx, x, y), "dy": self._eval(cy, x, y),
                "dxx": self._eval(P.polyder(cx, axis=0), x, y), "dxy": self._eval(P.polyder(cx, axis=1), x, y),
                "dyy": self._eval(P.polyder(cy, axis=1), x, y)}


@dataclass
class ProblemSetup:
    """Geometry name, equation and data of a numbered example."""

    example: int
    geometry: str
    equation: str
    exact: ExactSolution
    initial_elements: int
    relative_error: bool = False
    theta: float = 0.75
    error_norm: str = "h1"
    extra: dict = field(default_factory=dict)

    def source(self, x, y):
        if self.equation == "poisson":
            return self.exact.minus_laplacian(x, y)
        return np.zeros_like(np.asarray(x, dtype=float))


def example_problem(example: int) -> ProblemSetup:
    """Setup of the numbered examples 1 to 4."""
    if example == 1:
        return ProblemSetup(1, "lshape", "poisson", CornerSingularity(), 4, theta=0.90)
    if example == 2:
        return ProblemSetup(2, "curved", "poisson", interface_parabola_solution(), 8, relative_error=True)
    if example == 3:
        return ProblemSetup(3, "curved", "poisson", line_singularity_solution(), 8)
    if example == 4:
        return ProblemSetup(4, "lshape", "bilaplacian", BiharmonicCorner(), 8, error_norm="h2")
    raise ValidationError(f"unknown example {example}; expected 1, 2, 3 or 4")
