"""Joint displacement/pressure state estimation for Biot poroelasticity with PBDW."""

from .fem import MaterialParameters, TimeConfig, simulate
from .mesh import Mesh, PhantomConfig, build_phantom, load_mesh
from .observation import ObservationSpace, VoxelGrid, build_observation_space, make_box_voxels, make_slice_voxels
from .pbdw import Reconstruction, Reconstructor, ReconstructionError, solve_saddle
from .pipeline import ExperimentConfig, preset, run_training
from .rom import ParameterRanges, ReducedBasis, compute_pod, generate_manifold

__version__ = "0.1.0"

__all__ = [
    "ExperimentConfig", "MaterialParameters", "Mesh", "ObservationSpace", "ParameterRanges", "PhantomConfig",
    "Reconstruction", "ReconstructionError", "Reconstructor", "ReducedBasis", "TimeConfig", "VoxelGrid",
    "build_observation_space", "build_phantom", "compute_pod", "generate_manifold", "load_mesh",
    "make_box_voxels", "make_slice_voxels", "preset", "run_training", "simulate", "solve_saddle",
]
