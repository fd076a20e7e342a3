"""Grid-free electron plasma simulation with H2-accelerated Coulomb sums and
Galerkin boundary elements."""

__version__ = "0.1.0"
