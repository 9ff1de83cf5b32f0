"""Sparse-coded ensemble history matching of a synthetic reservoir.

The package wires together a two-phase incompressible flow simulator, a
rock-physics (petro-elastic) forward model, 2D DCT compression of acoustic
impedance maps, K-SVD dictionary learning with OMP sparse coding of the
permeability field, and an ES-MDA assimilation engine, plus a CLI that runs
the full twin experiment.
"""

__version__ = "0.1.0"
