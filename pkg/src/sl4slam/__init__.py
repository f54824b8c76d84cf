"""Submap-based SLAM backend on the SL(4) manifold.

The public surface mirrors the processing stages: dataset loading
(DiskSubmapSource, SimulatorSource), incremental alignment (SlamPipeline,
SlamConfig, run_slam), retrieval verification (TokenSet, verify_pair) and
evaluation (ate_rmse, parse_tum).
"""

from .dataset import DiskSubmapSource, write_dataset
from .evaluation import Trajectory, ate_rmse, parse_tum, umeyama_alignment, write_tum
from .pipeline import (
    GlobalReconstruction,
    SlamConfig,
    SlamPipeline,
    reconstruction_trajectory,
    recover_reconstruction,
    run_slam,
)
from .retrieval import DescriptorDB, TokenSet, match_score, query_place, verify_pair
from .simulator import (
    NOISE_PROFILES,
    NoiseSpec,
    Simulation,
    SimulatorSource,
    generate_dataset,
)
from .submap import Keyframe, Submap, back_project, confidence_mask
from .vgsb import read_blob, write_blob

__version__ = "0.1.0"

__all__ = [
    "DescriptorDB",
    "DiskSubmapSource",
    "GlobalReconstruction",
    "Keyframe",
    "NOISE_PROFILES",
    "NoiseSpec",
    "Simulation",
    "SimulatorSource",
    "SlamConfig",
    "SlamPipeline",
    "Submap",
    "TokenSet",
    "Trajectory",
    "ate_rmse",
    "back_project",
    "confidence_mask",
    "generate_dataset",
    "match_score",
    "parse_tum",
    "query_place",
    "reconstruction_trajectory",
    "recover_reconstruction",
    "read_blob",
    "run_slam",
    "umeyama_alignment",
    "verify_pair",
    "write_blob",
    "write_dataset",
    "write_tum",
    "__version__",
]
