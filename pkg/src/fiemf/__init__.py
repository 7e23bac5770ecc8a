"""FIEMF: fuzzy-information-entropy neighbors and region-biased matrix factorization
for web service QoS prediction, with baselines and a benchmark harness."""

from .dataset import QosMatrix, Split, UserRegionTable, load_rt_matrix, load_user_regions, split
from .metrics import mae, rmse
from .model import FactorModel, FiemfHyperparams, FiemfParams, load_checkpoint, train
from .region import BiasVectors, RegionModel, build_region_model
from .similarity import NeighborSet, NeighborTable, SimilarityConfig, compute_neighbors, fie_similarity

__version__ = "0.1.0"

__all__ = [
    "QosMatrix", "Split", "UserRegionTable", "load_rt_matrix", "load_user_regions", "split",
    "mae", "rmse",
    "FactorModel", "FiemfHyperparams", "FiemfParams", "load_checkpoint", "train",
    "BiasVectors", "RegionModel", "build_region_model",
    "NeighborSet", "NeighborTable", "SimilarityConfig", "compute_neighbors", "fie_similarity",
]
