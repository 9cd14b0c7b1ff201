"""Differentiable LiDAR range-image simulation on ray-traced planar
Gaussian scenes: scene graphs of background and rigid objects, BVH ray
tracing of disk proxies, analytic-gradient optimization, and sensor
re-simulation tooling."""

__version__ = "0.1.0"
