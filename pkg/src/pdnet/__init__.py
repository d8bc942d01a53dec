"""Point cloud networks with deformable global reference points and normal embeddings.

Submodules: ``geometry`` (sampling, grouping, interpolation, normals),
``numerics`` (autodiff tensors, layers, optimizer, checkpoints), ``blocks``,
``pdam``, ``network``, ``data``, ``train``, ``metrics`` and ``cli``.
"""

__version__ = "0.1.0"
