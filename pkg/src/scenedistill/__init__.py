"""Compositional score-distillation scene optimizer.

Two voxel radiance fields (human, object) are jointly optimized under
pluggable diffusion guidance, anchored to a voxelized body-occupancy prior
retrieved from an embedding codebook.
"""

__version__ = "0.1.0"
