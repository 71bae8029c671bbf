"""Guided flow matching for channel knowledge map construction.

Task A reconstructs channel gain maps from sparse noisy grids; task B
reconstructs spatial covariance matrices from their ring of neighbours.
"""

__version__ = "0.1.0"
