import json

import numpy as np
import pytest

from c1hier.bspline import knot_insertion_matrix
from c1hier.errors import ValidationError
from c1hier.hierarchy import (DomainHierarchy, HierarchicalC1Space, active_on_element, cell_keys, child_keys,
                              init_hierarchy, parent_keys, refine_subdomains, split_keys, theta_blocks,
                              two_level_matrix)
from conftest import make_c1


def painted(hier, level, finest):
    """Boolean (2, m, m) picture of the level-l subdomain on the finest grid."""
    m = hier.nel(finest)
    out = np.zeros((2, m, m), bool)
    f = 2 ** (finest - level)
    s, e1, e2 = split_keys(hier.domain.cells[level], hier.nel(level))
    for a, b, c in zip(s, e1, e2):
        out[a, b * f:(b + 1) * f, c * f:(c + 1) * f] = True
    return out


def painted_support(space, idx, level, finest, m):
    out = np.zeros((2, m, m), bool)
    f = 2 ** (finest - level)
    for s, (a0, a1), (b0, b1) in space.support_cells(idx):
        out[s, a0 * f:a1 * f, b0 * f:b1 * f] = True
    return out


def iterative_active_sets(hier):
    """Level-by-level construction: keep H_A (supports leaving the next subdomain), add H_B."""
    L = hier.num_levels
    finest = L - 1
    m = hier.nel(finest)
    regions = [painted(hier, l, finest) for l in range(L)]
    H = [set(range(hier.space(0).dim))]
    for l in range(L - 1):
        nxt = regions[l + 1]
        keep = []
        for k, fns in enumerate(H):
            kept = set()
            for i in fns:
                sup = painted_support(hier.space(k), i, k, finest, m)
                if not np.all(nxt[sup]):
                    kept.add(i)
            keep.append(kept)
        sp1 = hier.space(l + 1)
        new = set()
        for i in range(sp1.dim):
            sup = painted_support(sp1, i, l + 1, finest, m)
            if np.all(nxt[sup]):
                new.add(i)
        H = keep + [new]
    return [sorted(h) for h in H]


def random_refinement(hier, rng, rounds=3, frac=0.15):
    for _ in range(rounds):
        leaves = hier.leaf_elements()
        level, keys = leaves[int(rng.integers(0, len(leaves)))]
        if keys.size == 0:
            continue
        pick = rng.choice(keys, size=max(1, int(frac * keys.size)), replace=False)
        hier.refine_elements(level, pick)
    return hier


def basis_matrix(hier, rng, m=400):
    """Random sample of the hierarchical basis on both patches (points x ndof)."""
    blocks = []
    for patch in (0, 1):
        x1, x2 = rng.uniform(0, 1, (2, m))
        blocks.append(hier.eval_dofs(patch, x1, x2, 0)[(0, 0)].toarray())
    return np.vstack(blocks)


def leaf_gram(hier, q=5):
    x, w = np.polynomial.legendre.leggauss(q)
    x, w = (x + 1) / 2, w / 2
    G = np.zeros((hier.ndof, hier.ndof))
    for level, keys in hier.leaf_elements():
        nel = hier.nel(level)
        s, e1, e2 = split_keys(keys, nel)
        for patch in (0, 1):
            sel = s == patch
            if not np.any(sel):
                continue
            X1 = ((e1[sel][:, None, None] + x[None, :, None]) / nel + 0 * x[None, None, :]).ravel()
            X2 = ((e2[sel][:, None, None] + 0 * x[None, :, None] + x[None, None, :]) / nel).ravel()
            W = np.tile(np.outer(w, w).ravel(), sel.sum()) / nel ** 2
            V = hier.eval_dofs(patch, X1, X2, 0)[(0, 0)].toarray()
            G += V.T @ (V * W[:, None])
    return G


class TestDomainHierarchy:
    def test_keys_roundtrip(self):
        k = cell_keys([0, 1, 1], [0, 3, 2], [1, 0, 3], 4)
        np.testing.assert_array_equal(np.stack(split_keys(k, 4)), [[0, 1, 1], [0, 3, 2], [1, 0, 3]])

    def test_children_and_parents(self):
        k = cell_keys(1, 2, 3, 4)
        ch = child_keys(np.array([k]), 4)
        assert ch.size == 4
        np.testing.assert_array_equal(parent_keys(ch, 8), k)

    def test_refine_and_nesting(self):
        d = DomainHierarchy(2)
        assert d.num_levels == 1 and d.cells[0].size == 8
        assert d.refine_cells(0, cell_keys(0, 0, 0, 2)) == 1
        assert d.num_levels == 2 and d.cells[1].size == 4
        assert d.check_nested()
        assert d.refine_cells(0, cell_keys(0, 0, 0, 2)) == 0

    def test_non_nested_rejected(self):
        d = DomainHierarchy(2)
        with pytest.raises(ValidationError):
            d.refine_cells(1, cell_keys(0, 0, 0, 4))


class TestInit:
    def test_all_active(self):
        h = init_hierarchy(make_c1("lshape", 3, 2))
        assert h.ndof == 57 and h.num_levels == 1

    def test_empty_refinement(self):
        h = init_hierarchy(make_c1("lshape", 3, 2))
        refine_subdomains(h, {0: []})
        assert h.ndof == 57 and h.num_levels == 1

    def test_requires_uniform(self, lshape):
        from c1hier.bspline import make_space
        from c1hier.c1space import build_c1_space
        from c1hier.geometry import compute_gluing
        with pytest.raises(ValidationError):
            HierarchicalC1Space(build_c1_space(lshape, compute_gluing(lshape), make_space(3, 1, [0.3])))


class TestTwoLevelMatrix:
    @pytest.mark.parametrize("geometry,p", [("lshape", 3), ("curved", 3), ("curved", 4)])
    def test_block_structure(self, geometry, p):
        c = make_c1(geometry, p, 3)
        f = c.refine()
        C = two_level_matrix(c, f).toarray()
        oc, of = c.offsets, f.offsets
        blk = lambda i, j: C[oc[i]:oc[i + 1], of[j]:of[j + 1]]
        lam1 = knot_insertion_matrix(c.derivative_space, f.derivative_space).toarray()
        lam0 = knot_insertion_matrix(c.trace_space, f.trace_space).toarray()
        np.testing.assert_allclose(blk(1, 1), 0.5 * lam1, atol=1e-14)
        np.testing.assert_allclose(blk(0, 0), lam0, atol=1e-14)
        assert np.abs(blk(0, 1)).max() == 0 and np.abs(blk(1, 0)).max() == 0
        for i in (2, 3):
            for j in range(i):
                assert np.abs(blk(i, j)).max() == 0
        assert np.abs(blk(2, 3)).max() == 0 and np.abs(blk(3, 2)).max() == 0

    def test_interior_block_is_theta22(self):
        c = make_c1("curved", 3, 3)
        f = c.refine()
        th = theta_blocks(c, f)
        C = two_level_matrix(c, f).toarray()
        np.testing.assert_allclose(C[c.offsets[2]:c.offsets[3], f.offsets[2]:f.offsets[3]],
                                   th[(2, 2)].toarray(), atol=1e-14)

    def test_theta02_nonzero(self):
        # the trace column a = 0 feeds interior columns a >= 2 with weight 1/4 for r <= p - 2
        for p in (3, 4):
            c = make_c1("lshape", p, 2)
            th = theta_blocks(c, c.refine())
            assert th[(0, 2)].toarray().max() == pytest.approx(0.25, abs=1e-15)

    def test_trace_to_interior_block(self):
        c = make_c1("curved", 3, 3)
        f = c.refine()
        th = theta_blocks(c, f)
        C = two_level_matrix(c, f).toarray()
        for s in (0, 1):
            blk = C[:c.n0, f.offsets[2 + s]:f.offsets[3 + s]]
            full = (c.B_hat @ th[(0, 2)] + c.B_tilde(s) @ th[(1, 2)]).toarray()
            np.testing.assert_allclose(blk, full, atol=1e-14)
            assert np.abs(blk - (c.B_tilde(s) @ th[(1, 2)]).toarray()).max() > 0.1

    @pytest.mark.parametrize("geometry,p", [("lshape", 3), ("curved", 4)])
    def test_pointwise_identity(self, geometry, p, rng):
        c = make_c1(geometry, p, 2)
        f = c.refine()
        C = two_level_matrix(c, f)
        for patch in (0, 1):
            x1, x2 = rng.uniform(0, 1, (2, 200))
            _, mc = c.eval_param(patch, x1, x2, 1, np.arange(c.dim))
            _, mf = f.eval_param(patch, x1, x2, 1, np.arange(f.dim))
            for key in mc:
                err = np.abs(mc[key].toarray() - (mf[key] @ C.T).toarray()).max()
                assert err < 1e-11

    def test_brute_force(self, rng):
        c = make_c1("curved", 3, 2)
        f = c.refine()
        A, B = [], []
        for patch in (0, 1):
            x1, x2 = rng.uniform(0, 1, (2, 600))
            A.append(f.eval_param(patch, x1, x2, 0, np.arange(f.dim))[1][(0, 0)].toarray())
            B.append(c.eval_param(patch, x1, x2, 0, np.arange(c.dim))[1][(0, 0)].toarray())
        X, *_ = np.linalg.lstsq(np.vstack(A), np.vstack(B), rcond=None)
        assert np.abs(X.T - two_level_matrix(c, f).toarray()).max() < 1e-10

    def test_mismatch(self):
        c = make_c1("lshape", 3, 2)
        with pytest.raises(ValidationError):
            two_level_matrix(c, c)
        with pytest.raises(ValidationError):
            two_level_matrix(c, make_c1("lshape", 3, 4, "c0"))

    def test_c0_pointwise(self, rng):
        c = make_c1("curved", 3, 2, "c0")
        f = c.refine()
        C = two_level_matrix(c, f)
        x1, x2 = rng.uniform(0, 1, (2, 100))
        _, mc = c.eval_param(1, x1, x2, 0, np.arange(c.dim))
        _, mf = f.eval_param(1, x1, x2, 0, np.arange(f.dim))
        assert np.abs(mc[(0, 0)].toarray() - (mf[(0, 0)] @ C.T).toarray()).max() < 1e-12


class TestRefineSubdomains:
    def test_full_refinement_gives_level_one(self):
        h = init_hierarchy(make_c1("lshape", 3, 2))
        refine_subdomains(h, {0: [(s, a, b) for s in (0, 1) for a in range(2) for b in range(2)]})
        assert h.active[0].size == 0
        assert h.ndof == h.space(1).dim == 173

    def test_region_away_from_interface(self):
        h = init_hierarchy(make_c1("lshape", 3, 4))
        gamma = h.active[0][h.active[0] < h.space(0).offsets[2]].copy()
        refine_subdomains(h, {0: [(1, 3, 3), (1, 3, 2), (1, 2, 3)]})
        np.testing.assert_array_equal(h.active[0][h.active[0] < h.space(0).offsets[2]], gamma)
        assert h.deactivated[0].size > 0

    def test_out_of_range(self):
        h = init_hierarchy(make_c1("lshape", 3, 2))
        with pytest.raises(ValidationError):
            refine_subdomains(h, {0: [(0, 2, 0)]})
        with pytest.raises(ValidationError):
            refine_subdomains(h, {1: [(0, 0, 0)]})

    @pytest.mark.parametrize("seed", range(4))
    def test_matches_iterative_construction(self, seed):
        rng = np.random.default_rng(seed)
        h = random_refinement(init_hierarchy(make_c1("curved", 3, 4)), rng, rounds=4)
        ref = iterative_active_sets(h)
        assert len(ref) == h.num_levels
        for l in range(h.num_levels):
            assert list(h.active[l]) == ref[l]

    def test_span_monotone(self, rng):
        h = init_hierarchy(make_c1("curved", 3, 4))
        for _ in range(3):
            old = basis_matrix(h, np.random.default_rng(7))
            c = rng.standard_normal(h.ndof)
            random_refinement(h, rng, rounds=1, frac=0.3)
            new = basis_matrix(h, np.random.default_rng(7))
            y = old @ c
            x, *_ = np.linalg.lstsq(new, y, rcond=None)
            assert np.abs(new @ x - y).max() < 1e-10 * np.abs(y).max()

    def test_coefficients_on_level(self, rng):
        h = random_refinement(init_hierarchy(make_c1("lshape", 3, 4)), rng)
        c = rng.standard_normal(h.ndof)
        top = h.num_levels - 1
        fine = h.coefficients_on_level(c, top)
        x1, x2 = rng.uniform(0, 1, (2, 300))
        direct = h.eval_dofs(1, x1, x2, 0, c)[(0, 0)]
        _, m = h.space(top).eval_param(1, x1, x2, 0, np.arange(h.space(top).dim))
        np.testing.assert_allclose(m[(0, 0)] @ fine, direct, atol=1e-11)

    def test_gram_nonsingular(self, rng):
        h = init_hierarchy(make_c1("lshape", 3, 2))
        refine_subdomains(h, {0: [(0, 0, 0), (1, 0, 0), (0, 1, 0)]})
        assert h.num_levels == 2
        G = leaf_gram(h)
        d = 1 / np.sqrt(np.diag(G))
        assert np.linalg.eigvalsh(G * np.outer(d, d)).min() > 1e-12


class TestActiveOnElement:
    def test_interior_element(self):
        h = init_hierarchy(make_c1("lshape", 3, 4))
        fns = active_on_element(h, (0, 1, 2, 2))
        assert len(fns) == 16 and all(l == 0 for l, _ in fns)

    def test_interface_element(self):
        h = init_hierarchy(make_c1("lshape", 3, 4))
        s = h.space(0)
        fns = [i for _, i in active_on_element(h, (0, 0, 0, 1))]
        blocks = s.block_of(fns)
        assert np.sum(blocks == 0) == 4 and np.sum(blocks == 1) == 3
        assert np.sum(blocks == 2) == 8

    def test_refined_element_not_leaf(self):
        h = init_hierarchy(make_c1("lshape", 3, 2))
        refine_subdomains(h, {0: [(0, 1, 1)]})
        with pytest.raises(ValidationError):
            active_on_element(h, (0, 0, 1, 1))
        assert len(active_on_element(h, (1, 0, 2, 2))) > 0

    def test_covering(self, rng):
        h = random_refinement(init_hierarchy(make_c1("curved", 3, 4)), rng)
        seen = set()
        for level, keys in h.leaf_elements():
            s, e1, e2 = split_keys(keys, h.nel(level))
            for a, b, c in zip(s, e1, e2):
                seen.update((l, i) for l, i in active_on_element(h, (level, int(a), int(b), int(c))))
        assert len(seen) == h.ndof

    def test_no_function_inside_finer_subdomain(self, rng):
        h = random_refinement(init_hierarchy(make_c1("lshape", 3, 4)), rng)
        finest = h.num_levels - 1
        m = h.nel(finest)
        for l in range(h.num_levels - 1):
            nxt = painted(h, l + 1, finest)
            for i in h.active[l]:
                assert not np.all(nxt[painted_support(h.space(l), i, l, finest, m)])


class TestDump:
    def test_json(self, tmp_path):
        h = init_hierarchy(make_c1("lshape", 3, 2))
        refine_subdomains(h, {0: [(0, 0, 0)]})
        text = h.dump_json(tmp_path / "h.json")
        d = json.loads(text)
        assert d["ndof"] == h.ndof and len(d["levels"]) == 2
        assert d["levels"][1]["subdomain"] == [[0, 0, 0], [0, 0, 1], [0, 1, 0], [0, 1, 1]]
        assert json.loads((tmp_path / "h.json").read_text()) == d
