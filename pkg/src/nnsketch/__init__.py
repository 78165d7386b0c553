"""One-way communication sketches for integer point sets.

Alice holds n integer points in [-phi, phi]^d and sends Bob a single short
message; Bob then answers approximate nearest-neighbor queries and
all-points distance estimates for q query points, all simultaneously correct
with probability 1 - delta. Two engines are provided: an exact-geometry
hierarchy with hashed surrogate recovery, and a randomly shifted quadtree
whose recovery is deterministic.
"""

from nnsketch.codec import DecodeError, SketchBlob, decode, encode, load_sketch, save_sketch
from nnsketch.distsketch import attach_distances, jl_preprocess, target_dim
from nnsketch.geometry import (
    DomainError,
    GridNet,
    GridResolutionError,
    Params,
    PointSet,
    grid_for,
    load_npts,
    load_npts_array,
    load_points_text,
    save_npts,
    save_npts_array,
    save_points_text,
)
from nnsketch.hierarchy import SketchTree, build_tree
from nnsketch.oracle import (
    HardInstance,
    exact_all_distances,
    exact_nn,
    gen_hard_instance,
    gen_random,
    load_key,
    save_key,
)
from nnsketch.quadtree import QuadTree, build_quadtree
from nnsketch.query import (
    CapabilityError,
    query_all_distances,
    query_ann,
    query_distance,
)

__all__ = [
    "CapabilityError",
    "DecodeError",
    "DomainError",
    "GridNet",
    "GridResolutionError",
    "HardInstance",
    "Params",
    "PointSet",
    "QuadTree",
    "SketchBlob",
    "SketchTree",
    "attach_distances",
    "build_quadtree",
    "build_tree",
    "decode",
    "encode",
    "exact_all_distances",
    "exact_nn",
    "gen_hard_instance",
    "gen_random",
    "grid_for",
    "jl_preprocess",
    "load_key",
    "load_npts",
    "load_npts_array",
    "load_points_text",
    "load_sketch",
    "query_all_distances",
    "query_ann",
    "query_distance",
    "save_key",
    "save_npts",
    "save_npts_array",
    "save_points_text",
    "save_sketch",
    "target_dim",
]

__version__ = "0.1.0"
