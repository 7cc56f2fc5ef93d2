"""Simulation and control stack for a 5-DoF cable-driven series-elastic upper-limb exoskeleton.

Subpackages cover rigid-body/SEA dynamics, the variable impedance controller,
a minimal neural substrate with diffusion models for intention prediction and
anomaly detection, QP-based online trajectory refinement, ProMP assistance
individualization, and a CLI harness tying them together.
"""

__version__ = "0.1.0"
