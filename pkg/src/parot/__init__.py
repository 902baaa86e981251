"""Rotation-invariant point-cloud classification and part segmentation from disentangled patch poses.

Modules: ``numkernel`` (tensor engine), ``geom`` (rotations, sampling, frames,
relations), ``disentangle`` (siamese patch encoder and its losses),
``hierarchy`` (intra/inter-scale aggregation), ``seghead`` (propagation and
part head), ``data``, ``train`` and ``cli``.
"""

from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
