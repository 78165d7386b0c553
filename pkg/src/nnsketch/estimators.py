"""Scikit-learn style facade over the sketch engines.

``SketchNeighbors`` wraps the full Alice/Bob round trip behind the familiar
fit/predict surface: ``fit`` builds the one-way sketch from the data side,
and the query methods consult only that sketch, never the original points.

The estimator inherits ``get_params``/``set_params`` from ``BaseEstimator``,
so it composes with pipelines, grid search, and ``clone``. Attributes ending
in an underscore are set by ``fit``.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from nnsketch.codec import encode
from nnsketch.distsketch import attach_distances, jl_preprocess
from nnsketch.geometry import Params, PointSet
from nnsketch.hierarchy import build_tree
from nnsketch.quadtree import build_quadtree
from nnsketch.query import CapabilityError, query_all_distances, query_ann, query_distance

_ENGINES = ("exact", "quadtree")


class SketchNeighbors(BaseEstimator):
    """Approximate nearest neighbors answered from a compressed sketch.

    Parameters
    ----------
    eps : float
        Accuracy target. Returned neighbors are within a (1 + O(eps))
        factor of optimal; distance estimates carry (1 +- O(eps)) error.
    delta : float
        Failure probability budget covering a whole batch of ``q`` queries.
    q : int
        Number of queries the guarantee must hold for simultaneously.
    engine : {"exact", "quadtree"}
        "exact" builds the threshold hierarchy with hashed surrogate
        recovery and supports distance estimation; "quadtree" builds the
        randomly shifted quadtree, answers nearest neighbors only, and
        tolerates high dimensions.
    distances : bool
        Attach the distance-estimation payload (exact engine only).
    jl : bool
        Project the input to a lower dimension before sketching. Only the
        quadtree engine can answer queries on projected sketches; the
        exact engine's recovery enumerates a candidate ball whose size is
        exponential in the dimension, which the projection makes
        impractical rather than easier.
    phi : int or None
        Coordinate bound; inferred from the data when ``None``.
    seed : int
        Root seed for every random choice inside the sketch.
    proj_c : int
        Constant scaling the internal projection dimensions.
    """

    def __init__(
        self,
        eps: float = 0.25,
        delta: float = 0.1,
        q: int = 16,
        engine: str = "exact",
        distances: bool = False,
        jl: bool = False,
        phi: int | None = None,
        seed: int = 0,
        proj_c: int = 8,
    ) -> None:
        self.eps = eps
        self.delta = delta
        self.q = q
        self.engine = engine
        self.distances = distances
        self.jl = jl
        self.phi = phi
        self.seed = seed
        self.proj_c = proj_c

    def _check_fitted(self):
        if not hasattr(self, "sketch_"):
            raise ValueError("this SketchNeighbors instance is not fitted yet; call fit first")

    def fit(self, X, y=None) -> "SketchNeighbors":
        """Sketch the rows of ``X`` (integer coordinates, one point per row)."""
        if self.engine not in _ENGINES:
            raise ValueError(f"unknown engine {self.engine!r}; expected one of {_ENGINES}")
        if self.distances and self.engine == "quadtree":
            raise CapabilityError("the quadtree engine does not carry distance payloads")
        if self.jl and self.engine == "exact":
            raise CapabilityError(
                "projected sketches are answerable only by the quadtree engine; "
                "exact-engine recovery is exponential in the projected dimension"
            )
        arr = np.asarray(X)
        phi = self.phi
        if phi is None:
            top = int(np.abs(arr).max()) if arr.size else 1
            phi = 1
            while phi < top:
                phi *= 2
        points = PointSet(arr, phi)
        params = Params(eps=self.eps, delta=self.delta, q=self.q, phi=phi)
        if not self.jl:
            # The projection path exists for d > n, so the dimension bound
            # applies only to direct builds.
            params.validate_for(points.n, points.d)
        self.n_features_in_ = points.d
        self.n_samples_in_ = points.n

        jl_info = None
        if self.jl:
            points, params, jl_info = jl_preprocess(
                points, params, self.seed, c=self.proj_c
            )
        if self.engine == "exact":
            sketch = build_tree(points, params, self.seed, validate=not self.jl)
            if self.distances:
                attach_distances(sketch, c=self.proj_c)
        else:
            sketch = build_quadtree(points, params, self.seed, validate=not self.jl)
        if jl_info is not None:
            sketch.jl = jl_info
        self.sketch_ = sketch
        self.bits_ = encode(sketch).bits_total
        return self

    def predict(self, Y) -> np.ndarray:
        """Approximate nearest-neighbor index for each query row."""
        self._check_fitted()
        ys = np.atleast_2d(np.asarray(Y))
        out = np.empty(ys.shape[0], dtype=np.int64)
        for j, y in enumerate(ys):
            out[j], _ = query_ann(self.sketch_, y)
        return out

    def kneighbors(self, Y) -> tuple[np.ndarray, np.ndarray]:
        """Indices plus estimated distances, shaped like sklearn's (q, 1).

        Distance estimates require the payload from ``distances=True``;
        without it the distance column is NaN, because the sketch holds no
        coordinates to measure against.
        """
        self._check_fitted()
        ys = np.atleast_2d(np.asarray(Y))
        idx = np.empty((ys.shape[0], 1), dtype=np.int64)
        dist = np.full((ys.shape[0], 1), np.nan)
        for j, y in enumerate(ys):
            idx[j, 0], _ = query_ann(self.sketch_, y)
            if self.distances:
                dist[j, 0] = query_distance(self.sketch_, int(idx[j, 0]), y)
        return dist, idx

    def transform(self, Y) -> np.ndarray:
        """Estimated distances from each query row to every sketched point."""
        self._check_fitted()
        ys = np.atleast_2d(np.asarray(Y))
        return np.stack([query_all_distances(self.sketch_, y) for y in ys])
