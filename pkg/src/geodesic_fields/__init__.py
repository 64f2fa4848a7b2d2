"""Geodesic distance fields on robot configuration manifolds.

Grid (fast marching) and neural eikonal solvers for kinetic-energy and Jacobi
metrics of a planar two-link arm, geodesic backtracking, an inverse-kinematics
variant, a Riemannian MALA sampler and evaluation utilities.
"""
__version__ = "0.1.0"
