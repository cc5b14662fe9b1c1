"""Hierarchical C1 spaces on a nested sequence of two-patch subdomains.

Level-l elements are addressed by integer keys ``(patch * nel + e1) * nel + e2``
with ``nel`` the number of elements per direction at that level.  The
subdomain of level l is stored as the sorted array of its level-l element
keys.  A level-(l+1) subdomain always consists of complete groups of four
children, so a level-l element belongs to it exactly when its first child
does.
"""

from __future__ import annotations

import json

import numpy as np
import scipy.sparse as sp

from .bspline import knot_insertion_matrix
from .c1space import C0Space, C1Space, TwoPatchSpace
from .errors import ValidationError

MAX_LEVELS = 26


def cell_keys(patch, e1, e2, nel) -> np.ndarray:
    return (np.asarray(patch, dtype=np.int64) * nel + np.asarray(e1, dtype=np.int64)) * nel + np.asarray(e2, dtype=np.int64)


def split_keys(keys, nel):
    """Inverse of :func:`cell_keys`: ``(patch, e1, e2)`` arrays."""
    keys = np.asarray(keys, dtype=np.int64)
    return keys // (nel * nel), (keys // nel) % nel, keys % nel


def child_keys(keys, nel) -> np.ndarray:
    """Keys (at the next level) of the four children of each element."""
    s, e1, e2 = split_keys(keys, nel)
    c1 = (2 * e1)[:, None] + np.array([0, 0, 1, 1])
    c2 = (2 * e2)[:, None] + np.array([0, 1, 0, 1])
    return np.sort(cell_keys(s[:, None], c1, c2, 2 * nel).ravel())


def parent_keys(keys, nel) -> np.ndarray:
    """Unique parent keys of level elements (``nel`` is the fine count)."""
    s, e1, e2 = split_keys(keys, nel)
    return np.unique(cell_keys(s, e1 // 2, e2 // 2, nel // 2))


class DomainHierarchy:
    """Nested subdomains, each stored as a sorted array of element keys."""

    def __init__(self, num_elements: int):
        self.nel0 = int(num_elements)
        n = self.nel0
        self.cells = [np.arange(2 * n * n, dtype=np.int64)]

    @property
    def num_levels(self) -> int:
        return len(self.cells)

    def nel(self, level: int) -> int:
        return self.nel0 * 2 ** level

    def refined_cells(self, level: int) -> np.ndarray:
        """Level-l elements covered by the subdomain of level l+1."""
        if level + 1 >= self.num_levels:
            return np.empty(0, dtype=np.int64)
        return parent_keys(self.cells[level + 1], self.nel(level + 1))

    def active_cells(self, level: int) -> np.ndarray:
        """Elements of level l that are leaves of the hierarchical mesh."""
        return np.setdiff1d(self.cells[level], self.refined_cells(level), assume_unique=True)

    def contains(self, level: int, keys) -> np.ndarray:
        if level >= self.num_levels:
            return np.zeros(np.shape(keys), dtype=bool)
        return np.isin(keys, self.cells[level])

    def refine_cells(self, level: int, keys) -> int:
        """Add the children of level-l elements ``keys`` to level l+1.

        Returns the number of elements that were not refined before.
        """
        keys = np.unique(np.asarray(keys, dtype=np.int64))
        if keys.size == 0:
            return 0
        if level >= self.num_levels or not np.all(np.isin(keys, self.cells[level])):
            raise ValidationError(f"elements to refine are not part of the level-{level} subdomain")
        if level + 1 >= MAX_LEVELS:
            raise ValidationError(f"at most {MAX_LEVELS} levels are supported")
        kids = child_keys(keys, self.nel(level))
        if level + 1 == self.num_levels:
            self.cells.append(np.empty(0, dtype=np.int64))
        before = self.cells[level + 1].size
        self.cells[level + 1] = np.union1d(self.cells[level + 1], kids)
        return (self.cells[level + 1].size - before) // 4

    def leaves(self):
        """``[(level, keys)]`` of all leaf elements, coarse levels first."""
        return [(l, self.active_cells(l)) for l in range(self.num_levels)]

    def check_nested(self) -> bool:
        for l in range(1, self.num_levels):
            par = parent_keys(self.cells[l], self.nel(l))
            if not np.all(np.isin(par, self.cells[l - 1])):
                return False
            if not np.array_equal(child_keys(par, self.nel(l - 1)), self.cells[l]):
                return False
        return True


def support_keys(space: TwoPatchSpace, fns, nel: int):
    """Every element of the support of each function.

    Returns ``(owner, keys)``: ``keys[k]`` is an element of the support of
    ``fns[owner[k]]``.
    """
    fns = np.asarray(fns, dtype=np.int64)
    p = space.degree
    owners, keys = [], []
    blk = space.block_of(fns)
    pos = np.nonzero(blk >= 2)[0]
    if pos.size:
        s, a, b = space.interior_ab(fns[pos])
        a0, a1 = space.space.support(a)
        b0, b1 = space.space.support(b)
        off = np.arange(p + 1)
        i = np.broadcast_to(off[None, :, None], (pos.size, p + 1, p + 1))
        j = np.broadcast_to(off[None, None, :], (pos.size, p + 1, p + 1))
        mask = (i < (a1 - a0)[:, None, None]) & (j < (b1 - b0)[:, None, None])
        k = cell_keys(s[:, None, None], a0[:, None, None] + i, b0[:, None, None] + j, nel)
        owners.append(np.broadcast_to(pos[:, None, None], mask.shape)[mask])
        keys.append(k[mask])
    for c in np.nonzero(blk < 2)[0]:
        s0, s1 = space.interface_support(fns[c])
        e2 = np.arange(s0, s1)
        k = np.concatenate([cell_keys(0, 0, e2, nel), cell_keys(1, 0, e2, nel)])
        owners.append(np.full(k.size, c))
        keys.append(k)
    if not owners:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
    return np.concatenate(owners), np.concatenate(keys)


def support_inside(space: TwoPatchSpace, fns, nel: int, region) -> np.ndarray:
    """Boolean per function: is its closed support a subset of ``region`` (element keys)?"""
    fns = np.asarray(fns, dtype=np.int64)
    owner, keys = support_keys(space, fns, nel)
    outside = ~np.isin(keys, region)
    return np.bincount(owner, weights=outside, minlength=fns.size) == 0


def functions_on_keys(space: TwoPatchSpace, keys, nel: int) -> np.ndarray:
    """All functions of ``space`` nonzero on the given elements."""
    s, e1, e2 = split_keys(keys, nel)
    parts = [np.empty(0, dtype=np.int64)]
    for patch in (0, 1):
        sel = s == patch
        if np.any(sel):
            parts.append(space.functions_on_cells(patch, e1[sel], e2[sel]))
    return np.unique(np.concatenate(parts))


def theta_blocks(coarse: TwoPatchSpace, fine: TwoPatchSpace) -> dict:
    """Blocks ``(i, j)`` of the tensor refinement matrix between the column groups a = 0, a = 1, a >= 2."""
    lam = knot_insertion_matrix(coarse.space, fine.space).tocsr()
    groups = [slice(0, 1), slice(1, 2), slice(2, None)]
    return {(i, j): sp.kron(lam[gi, gj], lam, format="csr")
            for i, gi in enumerate(groups) for j, gj in enumerate(groups)}


def _same_kind(coarse: TwoPatchSpace, fine: TwoPatchSpace) -> bool:
    return (type(coarse) is type(fine) and coarse.geometry is fine.geometry
            and coarse.space.refine() == fine.space)


def two_level_matrix(coarse: TwoPatchSpace, fine: TwoPatchSpace, gluing=None) -> sp.csr_matrix:
    """Matrix C with ``phi_coarse = C @ phi_fine`` (coarse dim x fine dim).

    For the C1 space the block form is::

        [ L0   0      Bh T02 + Bt_L T12   Bh T02 + Bt_R T12 ]
        [ 0    L1/2   Bb_L T12            Bb_R T12          ]
        [ 0    0      T22                 0                 ]
        [ 0    0      0                   T22               ]

    with the univariate refinement matrices L0 (trace space), L1
    (derivative space) and the blocks T02, T12, T22 of the tensor-product
    refinement matrix.  T02 couples the column a = 0 to the columns
    a >= 2; it vanishes only for maximal smoothness r = p - 1, which the
    C1 construction excludes, so it is kept.

    Args:
        coarse: one-level space of level l
        fine: its dyadic refinement
        gluing: optional gluing data; must match the data of the spaces
    """
    if not _same_kind(coarse, fine):
        raise ValidationError("fine space is not the dyadic refinement of the coarse space")
    if gluing is not None and gluing != coarse.gluing:
        raise ValidationError("gluing data differ from the data the spaces were built with")
    lam = knot_insertion_matrix(coarse.space, fine.space).tocsr()
    a0 = coarse.interior_start
    t_int = sp.kron(lam[a0:, a0:], lam, format="csr")
    if isinstance(coarse, C1Space):
        lam0 = knot_insertion_matrix(coarse.trace_space, fine.trace_space)
        lam1 = knot_insertion_matrix(coarse.derivative_space, fine.derivative_space)
        t02 = sp.kron(lam[0:1, 2:], lam, format="csr")
        t12 = sp.kron(lam[1:2, 2:], lam, format="csr")
        hat = coarse.B_hat @ t02
        blocks = [[lam0, None, hat + coarse.B_tilde(0) @ t12, hat + coarse.B_tilde(1) @ t12],
                  [None, 0.5 * lam1, coarse.B_bar(0) @ t12, coarse.B_bar(1) @ t12],
                  [None, None, t_int, None],
                  [None, None, None, t_int]]
    elif isinstance(coarse, C0Space):
        t01 = sp.kron(lam[0:1, 1:], lam, format="csr")
        blocks = [[lam, None, t01, t01],
                  [None, None, None, None],
                  [None, None, t_int, None],
                  [None, None, None, t_int]]
    else:
        raise ValidationError(f"unsupported space type {type(coarse).__name__}")
    sizes_c = list(coarse.block_sizes)
    sizes_f = list(fine.block_sizes)
    rows = []
    for i in range(4):
        row = []
        for j in range(4):
            b = blocks[i][j]
            row.append(sp.csr_matrix((sizes_c[i], sizes_f[j])) if b is None else sp.csr_matrix(b))
        rows.append(row)
    mat = sp.bmat(rows, format="csr")
    mat.eliminate_zeros()
    return mat


class HierarchicalC1Space:
    """Hierarchical basis selected level by level from one-level spaces.

    A level-l function is active when its support lies in the level-l
    subdomain but not in the level-(l+1) subdomain.  Global degrees of
    freedom are numbered by level, then by the one-level index.
    """

    def __init__(self, base: TwoPatchSpace):
        if not base.space.is_uniform:
            raise ValidationError("hierarchies are built on uniform univariate spaces")
        self.spaces = [base]
        self.domain = DomainHierarchy(base.space.num_elements)
        self.active = [np.arange(base.dim, dtype=np.int64)]
        self.deactivated = [np.empty(0, dtype=np.int64)]
        self._matrices = {}
        self._update_offsets()

    # -- levels -------------------------------------------------------------
    @property
    def num_levels(self) -> int:
        return self.domain.num_levels

    @property
    def degree(self) -> int:
        return self.spaces[0].degree

    @property
    def geometry(self):
        return self.spaces[0].geometry

    def space(self, level: int) -> TwoPatchSpace:
        while len(self.spaces) <= level:
            self.spaces.append(self.spaces[-1].refine())
        return self.spaces[level]

    def nel(self, level: int) -> int:
        return self.domain.nel(level)

    def _update_offsets(self):
        self.offsets = np.concatenate(([0], np.cumsum([a.size for a in self.active]))).astype(np.int64)

    @property
    def ndof(self) -> int:
        return int(self.offsets[-1])

    def global_index(self, level: int, fns) -> np.ndarray:
        """Global numbers of active level-l functions (-1 where inactive)."""
        act = self.active[level]
        fns = np.asarray(fns, dtype=np.int64)
        pos = np.searchsorted(act, fns)
        ok = (pos < act.size) & (act[np.minimum(pos, max(act.size - 1, 0))] == fns) if act.size else \
            np.zeros(fns.shape, bool)
        return np.where(ok, self.offsets[level] + pos, -1)

    def level_of(self, dofs):
        """``(level, one-level index)`` arrays of global dofs."""
        dofs = np.asarray(dofs, dtype=np.int64)
        lev = np.searchsorted(self.offsets, dofs, side="right") - 1
        idx = np.array([self.active[l][d - self.offsets[l]] for l, d in zip(lev, dofs)], dtype=np.int64)
        return lev, idx

    # -- active sets -------------------------------------------------------------
    def _active_at(self, level: int) -> np.ndarray:
        space = self.space(level)
        nel = self.nel(level)
        leaves = self.domain.active_cells(level)
        if leaves.size == 0:
            return np.empty(0, dtype=np.int64)
        cand = functions_on_keys(space, leaves, nel)
        return cand[support_inside(space, cand, nel, self.domain.cells[level])]

    def _update_active(self):
        old = self.active
        self.active = [self._active_at(l) for l in range(self.num_levels)]
        self.deactivated = [np.setdiff1d(old[l], self.active[l]) if l < len(old) else np.empty(0, np.int64)
                            for l in range(len(self.active))]
        self._update_offsets()

    def refine_subdomains(self, new_elements) -> "HierarchicalC1Space":
        """Enlarge the subdomains by refining elements and update the active sets.

        Args:
            new_elements: mapping ``level -> iterable of (patch, e1, e2)`` of
                level-l elements whose four children join the level-(l+1)
                subdomain.  Processed from coarse to fine, so the children
                of elements refined at level l may be refined further.
        """
        items = sorted(dict(new_elements).items())
        changed = False
        for level, cells in items:
            cells = np.asarray(list(cells), dtype=np.int64).reshape(-1, 3)
            if cells.size == 0:
                continue
            nel = self.nel(level)
            if np.any(cells < 0) or np.any(cells[:, 0] > 1) or np.any(cells[:, 1:] >= nel):
                raise ValidationError(f"element index out of range at level {level}")
            keys = cell_keys(cells[:, 0], cells[:, 1], cells[:, 2], nel)
            changed |= self.domain.refine_cells(level, keys) > 0
        if changed:
            self._update_active()
        return self

    def refine_elements(self, level: int, keys) -> "HierarchicalC1Space":
        """Refine level-l elements given by key."""
        if self.domain.refine_cells(level, keys) > 0:
            self._update_active()
        return self

    # -- element queries ---------------------------------------------------------
    def leaf_elements(self):
        return self.domain.leaves()

    def num_elements(self) -> int:
        return int(sum(k.size for _, k in self.leaf_elements()))

    def is_leaf(self, level: int, key) -> bool:
        return level < self.num_levels and bool(np.isin(key, self.domain.active_cells(level)))

    def active_on_element(self, level: int, patch, e1: int, e2: int) -> list:
        """All active ``(level, index)`` pairs whose support overlaps a leaf element."""
        key = int(cell_keys(patch, e1, e2, self.nel(level)))
        if not self.is_leaf(level, key):
            raise ValidationError(f"({level}, {patch}, {e1}, {e2}) is not a leaf element")
        out = []
        for k, fns in self._element_functions(level, np.array([key])):
            out.extend((k, int(i)) for i in fns)
        return out

    def _element_functions(self, level, keys):
        """Per coarser level k: active level-k functions nonzero on the ancestors of ``keys``."""
        s, e1, e2 = split_keys(keys, self.nel(level))
        out = []
        for k in range(level + 1):
            if self.active[k].size == 0:
                continue
            sh = level - k
            anc = np.unique(cell_keys(s, e1 >> sh, e2 >> sh, self.nel(k)))
            fns = functions_on_keys(self.space(k), anc, self.nel(k))
            fns = fns[np.isin(fns, self.active[k])]
            if fns.size:
                out.append((k, fns))
        return out

    def eval_on_leaves(self, level: int, patch, keys, xi1, xi2, nd: int = 1):
        """Parametric derivatives of all active functions at points of leaf elements.

        Points ``(xi1, xi2)`` lie in the level-l leaf elements ``keys`` of
        ``patch``.  Every active function is evaluated on its own level.

        Returns:
            ``(dofs, mats)`` with ``mats[(k1, k2)]`` sparse (points x len(dofs)).
        """
        dofs, mats = [], {}
        for k, fns in self._element_functions(level, keys):
            _, m = self.space(k).eval_param(patch, xi1, xi2, nd, fns)
            dofs.append(self.global_index(k, fns))
            for key, v in m.items():
                mats.setdefault(key, []).append(v)
        if not dofs:
            return np.empty(0, dtype=np.int64), {}
        return np.concatenate(dofs), {k: sp.hstack(v, format="csr") for k, v in mats.items()}

    def eval_dofs(self, patch, xi1, xi2, nd: int = 1, coeffs=None):
        """Evaluate the whole basis (or ``sum coeffs * basis``) at arbitrary points of ``patch``.

        Returns a dict of sparse (points x ndof) matrices, or of value
        arrays when ``coeffs`` is given.
        """
        xi1 = np.atleast_1d(np.asarray(xi1, dtype=float))
        xi2 = np.atleast_1d(np.asarray(xi2, dtype=float))
        mats = None
        for k in range(self.num_levels):
            fns = self.active[k]
            if fns.size == 0:
                continue
            _, m = self.space(k).eval_param(patch, xi1, xi2, nd, fns)
            cols = self.offsets[k] + np.arange(fns.size)
            expand = sp.csr_matrix((np.ones(fns.size), (np.arange(fns.size), cols)), shape=(fns.size, self.ndof))
            m = {key: v @ expand for key, v in m.items()}
            mats = m if mats is None else {key: mats[key] + m[key] for key in m}
        if coeffs is not None:
            return {key: v @ np.asarray(coeffs, dtype=float) for key, v in mats.items()}
        return mats

    # -- refinement matrices ------------------------------------------------------
    def two_level_matrix(self, level: int) -> sp.csr_matrix:
        """Matrix expressing the level-l basis in the level-(l+1) basis."""
        if level not in self._matrices:
            self._matrices[level] = two_level_matrix(self.space(level), self.space(level + 1))
        return self._matrices[level]

    def coefficients_on_level(self, coeffs, level: int) -> np.ndarray:
        """Express ``sum coeffs * active basis`` in the full one-level basis of ``level``.

        Uses the two-level matrices; ``level`` must be at least the finest
        level with active functions.
        """
        coeffs = np.asarray(coeffs, dtype=float)
        out = np.zeros(self.space(0).dim)
        for k in range(level + 1):
            if k > 0:
                out = self.two_level_matrix(k - 1).T @ out
            if k < len(self.active):
                out[self.active[k]] += coeffs[self.offsets[k]:self.offsets[k + 1]]
        if np.any(np.abs(coeffs[self.offsets[min(level + 1, len(self.active))]:]) > 0):
            raise ValidationError(f"active functions above level {level}")
        return out

    # -- reporting --------------------------------------------------------------
    def to_dict(self) -> dict:
        levels = []
        for l in range(self.num_levels):
            nel = self.nel(l)
            s, e1, e2 = split_keys(self.domain.cells[l], nel)
            levels.append({
                "level": l,
                "elements_per_direction": nel,
                "subdomain": [[int(a), int(b), int(c)] for a, b, c in zip(s, e1, e2)],
                "active": [int(i) for i in (self.active[l] if l < len(self.active) else [])],
            })
        return {"degree": self.degree, "regularity": self.spaces[0].regularity,
                "smoothness": self.spaces[0].smoothness, "ndof": self.ndof, "levels": levels}

    def dump_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=1, sort_keys=True)
        if path is not None:
            with open(path, "w", encoding="utf-8", newline="\n") as fh:
                fh.write(text + "\n")
        return text


def init_hierarchy(level0: TwoPatchSpace) -> HierarchicalC1Space:
    """Single-level hierarchy with every level-0 function active."""
    return HierarchicalC1Space(level0)


def refine_subdomains(hier: HierarchicalC1Space, new_elements) -> HierarchicalC1Space:
    return hier.refine_subdomains(new_elements)


def active_on_element(hier: HierarchicalC1Space, element) -> list:
    """``element = (level, patch, e1, e2)``."""
    level, patch, e1, e2 = element
    return hier.active_on_element(level, patch, e1, e2)
