"""Physics-informed neural networks and reference solvers for neutron diffusion."""

__version__ = "0.1.0"
