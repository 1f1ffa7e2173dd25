"""Accelerated Distributed Augmented Lagrangian (ADAL) for linearly coupled convex programs."""

from .problem import (Ball, Box, ConvexObjective, CouplingBlock, PartitionedProblem, ProductSet, max_degree,
                      objective_value, prepare, residual, validate)
from .engine import AdalConfig, AdalState, IterateTrace, merit, run, step
from .certification import CertificationReport, certify
from .oracle import SaddlePoint, solve_centralized

__version__ = "0.1.0"
