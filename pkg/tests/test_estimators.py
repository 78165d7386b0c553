"""The estimator facade has to honor two contracts at once: scikit-learn's
parameter plumbing (clone, get_params, set_params) and the sketch engines'
capability rules. Accuracy itself is covered by the engine tests; here we
check the wiring."""

from __future__ import annotations

import numpy as np
import pytest
from sklearn.base import clone

from nnsketch.estimators import SketchNeighbors
from nnsketch.oracle import exact_all_distances, gen_random
from nnsketch.query import CapabilityError


@pytest.fixture(scope="module")
def pts():
    return gen_random(48, 4, 256, dist="clusters", seed=6)


class TestSklearnProtocol:
    def test_get_set_params_round_trip(self):
        est = SketchNeighbors(eps=0.5, q=4, engine="quadtree")
        params = est.get_params()
        assert params["eps"] == 0.5
        assert params["engine"] == "quadtree"
        twin = SketchNeighbors().set_params(**params)
        assert twin.get_params() == params

    def test_clone_is_unfitted(self, pts):
        est = SketchNeighbors(q=2).fit(pts.x)
        fresh = clone(est)
        assert fresh.get_params() == est.get_params()
        assert not hasattr(fresh, "sketch_")

    def test_unfitted_query_rejected(self):
        with pytest.raises(ValueError, match="not fitted"):
            SketchNeighbors().predict(np.zeros((1, 3)))


class TestFitAndQuery:
    def test_members_are_their_own_neighbors(self, pts):
        est = SketchNeighbors(eps=0.25, delta=0.1, q=4, seed=1).fit(pts.x)
        got = est.predict(pts.x[[0, 13, 47]])
        assert got.tolist() == [0, 13, 47]
        assert est.bits_ > 0
        assert est.n_samples_in_ == 48 and est.n_features_in_ == 4

    def test_phi_inference_rounds_up_to_power_of_two(self):
        x = np.array([[100, -3], [7, 90]])
        est = SketchNeighbors(q=1).fit(x)
        assert est.sketch_.params.phi == 128

    def test_kneighbors_without_payload_has_nan_distances(self, pts):
        est = SketchNeighbors(q=2, seed=2).fit(pts.x)
        dist, idx = est.kneighbors(pts.x[:2])
        assert idx.shape == (2, 1) and dist.shape == (2, 1)
        assert idx[:, 0].tolist() == [0, 1]
        assert np.all(np.isnan(dist))

    def test_kneighbors_with_payload_estimates_distances(self, pts):
        est = SketchNeighbors(eps=0.25, q=2, distances=True, seed=3).fit(pts.x)
        rng = np.random.default_rng(8)
        ys = rng.integers(-256, 257, size=(2, 4))
        dist, idx = est.kneighbors(ys)
        truth = exact_all_distances(pts, ys)
        for j in range(2):
            t = truth[j, idx[j, 0]]
            assert abs(dist[j, 0] - t) <= 16 * 0.25 * t + 1e-9

    def test_transform_matches_truth_loosely(self, pts):
        est = SketchNeighbors(eps=0.25, q=2, distances=True, seed=4).fit(pts.x)
        rng = np.random.default_rng(9)
        ys = rng.integers(-256, 257, size=(2, 4))
        mat = est.transform(ys)
        truth = exact_all_distances(pts, ys)
        assert mat.shape == (2, 48)
        assert np.all(np.abs(mat - truth) <= 16 * 0.25 * truth + 1e-9)

    def test_quadtree_engine_answers_members(self, pts):
        est = SketchNeighbors(q=4, engine="quadtree", seed=5).fit(pts.x)
        assert est.predict(pts.x[[3, 31]]).tolist() == [3, 31]

    def test_jl_quadtree_pipeline(self):
        pts = gen_random(32, 40, 64, seed=7)
        est = SketchNeighbors(
            eps=0.5, delta=0.2, q=2, engine="quadtree", jl=True, seed=6
        ).fit(pts.x)
        assert est.sketch_.jl is not None
        idx = est.predict(pts.x[[5, 20]])
        assert idx.shape == (2,)
        assert np.all((0 <= idx) & (idx < 32))


class TestCapabilityRules:
    def test_quadtree_distances_rejected(self, pts):
        with pytest.raises(CapabilityError, match="distance"):
            SketchNeighbors(engine="quadtree", distances=True).fit(pts.x)

    def test_exact_jl_rejected(self, pts):
        with pytest.raises(CapabilityError, match="quadtree"):
            SketchNeighbors(jl=True).fit(pts.x)

    def test_unknown_engine_rejected(self, pts):
        with pytest.raises(ValueError, match="engine"):
            SketchNeighbors(engine="ball-tree").fit(pts.x)

    def test_transform_without_payload_rejected(self, pts):
        est = SketchNeighbors(q=2).fit(pts.x)
        with pytest.raises(CapabilityError):
            est.transform(pts.x[:1])
