"""neuda: differentiable implicit-surface reconstruction on deformable anchor grids."""

__version__ = "0.1.0"
