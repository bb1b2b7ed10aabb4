"""Set-oriented Conley index computations for random maps sampled along noise paths."""

__version__ = "0.1.0"
