"""Birth-death-mutation process on the torus, its log rescaling, and the limiting Hamilton-Jacobi solver."""

__version__ = "0.1.0"
