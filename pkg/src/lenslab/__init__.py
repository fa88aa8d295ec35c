"""lenslab: a numerical laboratory for geodesic tomography and lens-data
rigidity experiments at desk scale."""

__version__ = "0.1.0"
