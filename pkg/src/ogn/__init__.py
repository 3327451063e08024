"""Octree generating networks on numpy.

Submodules: ``octree`` (cells, Morton keys, voxel conversion), ``nn`` (dense
ops and gradients), ``layers`` (sparse octree layers), ``model`` and
``training`` (networks, checkpoints), ``datasets``, ``evaluation`` and ``cli``.
"""

__version__ = "0.1.0"
