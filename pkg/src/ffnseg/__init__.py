"""
Flood-filling network segmentation of 3D image volumes.

Submodules: ``volume`` (arrays and file format), ``convnet`` (the residual
network), ``training``, ``inference``, ``metrics``, ``synth`` (synthetic
worlds) and ``cli``.
"""

__version__ = "0.1.0"
