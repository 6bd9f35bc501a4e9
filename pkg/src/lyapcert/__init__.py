"""Meta-learned neural Lyapunov functions with grid-certified regions of attraction."""

__version__ = "0.1.0"
