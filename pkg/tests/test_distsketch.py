"""Sign projections, range sketches, and the distance extension payloads."""

from __future__ import annotations

import math

import numpy as np
import pytest

from nnsketch.distsketch import (
    DistParams,
    JLPreproc,
    RangeVerdict,
    ScaleSketch,
    SignProjection,
    VerdictKind,
    attach_distances,
    jl_preprocess,
    range_seed,
    sign_matrix,
    target_dim,
)
from nnsketch.geometry import DomainError, Params, PointSet
from nnsketch.hierarchy import build_tree


class TestSignMatrix:
    def test_entries_are_signs(self):
        m = sign_matrix(7, 12, 9)
        assert m.shape == (12, 9)
        assert set(np.unique(m)) <= {-1, 1}

    def test_entry_is_pure_function_of_seed_row_col(self):
        small = sign_matrix(42, 8, 5)
        large = sign_matrix(42, 16, 11)
        assert np.array_equal(large[:8, :5], small)

    def test_seed_sensitivity(self):
        assert not np.array_equal(sign_matrix(1, 20, 20), sign_matrix(2, 20, 20))

    def test_roughly_balanced(self):
        m = sign_matrix(3, 100, 100)
        assert abs(int(m.sum())) < 600  # 6 sigma for 10^4 fair signs


class TestSignProjection:
    def test_zero_maps_to_zero(self):
        proj = SignProjection(seed=5, d_prime=16, d=8)
        assert np.all(proj.apply(np.zeros(8)) == 0.0)

    def test_linearity(self):
        rng = np.random.default_rng(11)
        proj = SignProjection(seed=5, d_prime=64, d=24)
        x, y = rng.normal(size=(2, 24))
        lhs = proj.apply(x + y)
        rhs = proj.apply(x) + proj.apply(y)
        assert np.allclose(lhs, rhs, rtol=1e-9, atol=1e-9)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            SignProjection(seed=5, d_prime=16, d=8).apply(np.zeros(9))

    def test_distortion_monte_carlo(self):
        # the contract the distance extension leans on: (1 +- eps) pairwise
        eps, delta_prime, d = 0.25, 0.05, 64
        d_prime = target_dim(eps, delta_prime)
        assert d_prime == 384
        rng = np.random.default_rng(17)
        bad = 0
        trials = 300
        for trial in range(trials):
            proj = SignProjection(seed=1000 + trial, d_prime=d_prime, d=d)
            x, y = rng.uniform(-100, 100, size=(2, d))
            truth = float(np.linalg.norm(x - y))
            est = float(np.linalg.norm(proj.apply(x) - proj.apply(y)))
            if abs(est - truth) > eps * truth:
                bad += 1
        assert bad / trials <= delta_prime + 0.03


class TestScaleSketch:
    def sketch(self, eps=0.5, d_prime=4, level=0, d=4, seed=9):
        return ScaleSketch(level=level, eps=eps, d_prime=d_prime, d=d, seed=seed)

    def test_frozen_geometry(self):
        sk = self.sketch()
        assert sk.cells == 32  # ceil(8*2/0.5)
        assert sk.cell_width == 6  # ceil(log2 33)
        assert sk.step == 0.25
        assert sk.radius == 1.0

    def test_frozen_wrap(self):
        sk = self.sketch()
        got = sk.wrap(np.array([0.3, -0.1, 3.9, -4.0]))
        # shifted to [4.3, 3.9, 7.9, 0.0], /0.25 -> [17.2, 15.6, 31.6, 0]
        assert got.tolist() == [17, 16, 0, 0]

    def test_identical_vectors_give_identical_payloads(self):
        sk = self.sketch(d_prime=32, d=10)
        x = np.arange(10.0) * 3.5 - 12.0
        assert np.array_equal(sk.sketch_vector(x), sk.sketch_vector(x.copy()))
        verdict = sk.compare(sk.sketch_vector(x), sk.sketch_vector(x))
        assert verdict.kind is VerdictKind.SMALL and verdict.value == 0.0

    def test_frozen_compare_large(self):
        sk = self.sketch()
        pa = np.array([17, 16, 0, 0])
        pb = np.zeros(4, dtype=np.int64)
        verdict = sk.compare(pa, pb)
        # torus differences [15, 16, 0, 0] scaled by 0.25
        assert verdict.kind is VerdictKind.LARGE
        assert verdict.value == pytest.approx(0.25 * math.sqrt(481))

    @pytest.mark.parametrize(
        "cells_apart,kind",
        [
            (2, VerdictKind.SMALL),  # e = 0.5 < 0.75
            (3, VerdictKind.ESTIMATE),  # e = 0.75, boundary is strict
            (10, VerdictKind.ESTIMATE),  # e = 2.5 = upper boundary
            (11, VerdictKind.LARGE),  # e = 2.75 > 2.5
        ],
    )
    def test_verdict_boundaries_exact(self, cells_apart, kind):
        sk = self.sketch()
        pa = np.array([cells_apart, 0, 0, 0])
        pb = np.zeros(4, dtype=np.int64)
        assert sk.compare(pa, pb).kind is kind

    def test_small_shift_moves_cells_at_most_one(self):
        rng = np.random.default_rng(23)
        sk = self.sketch(eps=0.25, d_prime=64, d=16, level=2)
        x = rng.uniform(-30, 30, 16)
        shift = rng.normal(size=16)
        shift *= (sk.step / 2.001) / np.linalg.norm(shift)
        ca, cb = sk.sketch_vector(x), sk.sketch_vector(x + shift)
        dw = (ca - cb) % sk.cells
        dw = np.minimum(dw, sk.cells - dw)
        assert dw.max() <= 1

    def test_payload_width_monotone_in_inverse_eps(self):
        widths = [self.sketch(eps=e, d_prime=64).cell_width for e in (0.5, 0.25, 0.125)]
        assert widths == sorted(widths)

    def test_mismatched_payload_shape_rejected(self):
        sk = self.sketch()
        with pytest.raises(ValueError):
            sk.compare(np.zeros(4, dtype=np.int64), np.zeros(5, dtype=np.int64))

    def test_verdict_regimes_monte_carlo(self):
        # decision contract at scale R=4: Small below (1-eps)R, an accurate
        # Estimate inside [R, 2R], Large beyond 2.5R
        eps, delta_prime, d = 0.25, 0.05, 32
        d_prime = target_dim(eps, delta_prime)
        level = 2
        r = 4.0
        rng = np.random.default_rng(31)
        regimes = {
            "small": lambda: rng.uniform(1e-6, (1 - eps) * r),
            "estimate": lambda: rng.uniform(r, 2 * r),
            "large": lambda: rng.uniform(2.5 * r, 10 * r),
        }
        trials = 150
        for name, draw in regimes.items():
            bad = 0
            for trial in range(trials):
                sk = ScaleSketch(level, eps, d_prime, d, seed=7000 + trial)
                x = rng.uniform(-50, 50, d)
                u = rng.normal(size=d)
                truth = draw()
                y = x + truth * u / np.linalg.norm(u)
                verdict = sk.compare(sk.sketch_vector(x), sk.sketch_vector(y))
                if name == "small":
                    ok = verdict.kind is VerdictKind.SMALL
                elif name == "large":
                    ok = verdict.kind is VerdictKind.LARGE
                else:
                    ok = (
                        verdict.kind is VerdictKind.ESTIMATE
                        and abs(verdict.value - truth) <= eps * truth
                    )
                bad += not ok
            assert bad / trials <= delta_prime + 0.05, name


class TestRangeVerdictExceeds:
    def test_large_always_exceeds(self):
        assert RangeVerdict(VerdictKind.LARGE, 0.0).exceeds(1e9)

    def test_estimate_strictly_compared(self):
        assert RangeVerdict(VerdictKind.ESTIMATE, 4.0).exceeds(3.9)
        assert not RangeVerdict(VerdictKind.ESTIMATE, 4.0).exceeds(4.0)

    def test_small_never_exceeds(self):
        assert not RangeVerdict(VerdictKind.SMALL, 0.1).exceeds(0.0)


class TestDistParams:
    def test_frozen_dimensions(self):
        dp = DistParams(eps=0.25, delta=0.1, q=8, num_levels=14)
        assert dp.proj_dim == 561  # ceil(128 ln 80)
        assert dp.range_dim == 899  # ceil(128 ln 1120)

    def test_center_step_scales_with_level(self):
        dp = DistParams(eps=0.25, delta=0.1, q=8, num_levels=14)
        assert dp.center_step(3) == 8 * dp.center_step(0)

    def test_range_seed_per_level(self):
        seeds = [range_seed(99, lvl, 14) for lvl in range(14)]
        assert len(set(seeds)) == 14
        with pytest.raises(ValueError):
            range_seed(99, 14, 14)


class TestAttachDistances:
    def build(self, seed=0):
        rng = np.random.default_rng(41)
        x = np.unique(rng.integers(-64, 65, size=(20, 3)), axis=0)
        ps = PointSet(x, phi=64)
        tree = build_tree(ps, Params(eps=0.25, delta=0.1, q=4, phi=64), seed=seed)
        return tree

    def test_payload_per_root(self):
        tree = self.build()
        section = attach_distances(tree)
        roots = tree.subtree_roots
        assert len(section.qproj) == len(roots)
        assert len(section.range_cells) == len(roots)
        for cells, root in zip(section.range_cells, roots):
            sk = ScaleSketch(
                root.level, 0.25, section.params.range_dim, tree.d,
                range_seed(section.seed, root.level, section.params.num_levels),
            )
            assert cells.shape == (section.params.range_dim,)
            assert 0 <= cells.min() and cells.max() < sk.cells

    def test_quantization_error_bounded(self):
        tree = self.build()
        section = attach_distances(tree)
        proj = SignProjection(section.seed, section.params.proj_dim, tree.d)
        for i, root in enumerate(tree.subtree_roots):
            truth = proj.apply(tree.points.x[root.center].astype(np.float64))
            err = np.abs(section.dequantized(i, root.level) - truth)
            assert err.max() <= section.params.center_step(root.level) / 2 + 1e-12

    def test_deterministic_given_build_seed(self):
        a = attach_distances(self.build(seed=5))
        b = attach_distances(self.build(seed=5))
        assert a.seed == b.seed
        assert all(np.array_equal(p, q) for p, q in zip(a.qproj, b.qproj))
        assert all(np.array_equal(p, q) for p, q in zip(a.range_cells, b.range_cells))


class TestJLPreprocess:
    def setup_method(self):
        rng = np.random.default_rng(53)
        self.x = np.unique(rng.integers(-64, 65, size=(60, 40)), axis=0)
        self.ps = PointSet(self.x, phi=64)
        self.params = Params(eps=0.5, delta=0.1, q=4, phi=64)

    def test_shapes_and_bounds(self):
        projected, new_params, pre = jl_preprocess(self.ps, self.params, seed=3)
        assert pre.target_d == target_dim(0.5, 0.1 / (4 * self.ps.n))
        assert pre.scale == math.ceil(math.sqrt(pre.target_d) / 0.5)
        assert projected.d == pre.target_d
        assert projected.phi == pre.new_phi == new_params.phi
        assert np.abs(projected.x).max() <= pre.new_phi

    def test_queries_stay_in_new_domain(self):
        _, _, pre = jl_preprocess(self.ps, self.params, seed=3)
        rng = np.random.default_rng(59)
        ys = rng.integers(-64, 65, size=(50, 40))
        out = pre.transform(ys)
        assert np.abs(out).max() <= pre.new_phi

    def test_distances_preserved_up_to_scale(self):
        projected, _, pre = jl_preprocess(self.ps, self.params, seed=3)
        rng = np.random.default_rng(61)
        for _ in range(40):
            i, j = rng.choice(self.ps.n, size=2, replace=False)
            truth = float(np.linalg.norm(self.x[i] - self.x[j]))
            if truth < 4:
                continue
            got = float(np.linalg.norm(projected.x[i] - projected.x[j])) / pre.scale
            assert abs(got - truth) <= 0.3 * truth

    def test_rejects_out_of_domain_query(self):
        _, _, pre = jl_preprocess(self.ps, self.params, seed=3)
        with pytest.raises(DomainError):
            pre.transform(np.full(40, 65))

    def test_transform_deterministic(self):
        _, _, pre = jl_preprocess(self.ps, self.params, seed=3)
        again = JLPreproc(3, pre.orig_d, pre.orig_phi, pre.target_d, pre.scale)
        assert np.array_equal(pre.transform(self.x), again.transform(self.x))
