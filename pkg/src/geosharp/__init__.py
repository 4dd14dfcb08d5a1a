"""Quotient-manifold geometry, geodesic sharpness and Hessian trace estimation
for parameter spaces with GL(h) rescale symmetry."""

__version__ = "0.1.0"
