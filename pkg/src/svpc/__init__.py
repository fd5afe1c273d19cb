"""Spherical visual predictive control toolkit.

Bearing-feature NMPC for an underactuated quadrotor with a rigidly
mounted front camera: manifold feature parametrization, coupled
image/range/rigid-body prediction, a Gauss-Newton SQP receding-horizon
solver with actual-image-plane visibility and time-to-collision
constraints, and a deterministic closed-loop simulator.
"""

__version__ = "0.1.0"
