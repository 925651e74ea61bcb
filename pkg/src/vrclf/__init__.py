"""Vector relaxed control Lyapunov functions: gain calculus, feasibility, synthesis and simulation."""

__version__ = "0.1.0"
