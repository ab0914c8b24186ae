"""n-1 reliability assessment of medium-voltage grids with an exact load-flow
oracle and a graph isomorphism network with edge features."""

__version__ = "0.1.0"
