"""Kinetic-to-hydrodynamic toolkit for steady flow past an obstacle at small Knudsen number."""

from .velocity import (DriftContext, MaxwellianParams, VelocityGrid, WeightFunction, build_grid,
                       gaussian_moment, maxwellian, wall_maxwellian)

__all__ = ["DriftContext", "MaxwellianParams", "VelocityGrid", "WeightFunction", "build_grid",
           "gaussian_moment", "maxwellian", "wall_maxwellian"]
__version__ = "0.1.0"
