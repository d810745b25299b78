"""Numerical laboratory for a singular harmonic-map heat flow on the flat 3-torus.

The model is a coupled parabolic system for a map (phi1, Phi2) = (phi1, h^alpha
e^{phi2}) from the periodic cube [0,L)^3 into the hyperbolic upper half-plane,
with a prescribed blow-up profile h ~ dist(., Gamma) along a closed curve Gamma:

    dphi1/dt = h^{2a} e^{2 phi2} div(h^{-2a} e^{-2 phi2} grad phi1)
    dphi2/dt = Lap phi2 + h^{-2a} e^{-2 phi2} |grad phi1|^2
    phi1 = 0 on Gamma

The package provides the discretized geometry, the weight field h, discrete
operators with their linearization, a spectral Galerkin solver for the
linearized system, an IMEX time stepper for the nonlinear flow, weighted norms
and diagnostics, and a verification battery for the quantitative estimates the
flow is expected to satisfy (boundedness, Bochner monotonicity, exponential
decay, vanishing-order exponents).
"""

from singflow.geometry import CurveGamma, DistanceField, TorusGrid, distance_to_curve
from singflow.weight import WeightField, build_weight

__all__ = [
    "TorusGrid",
    "CurveGamma",
    "DistanceField",
    "distance_to_curve",
    "WeightField",
    "build_weight",
]

__version__ = "0.1.0"
