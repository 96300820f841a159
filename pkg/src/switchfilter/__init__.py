"""Filtering a scalar signal with a randomly switching damping rate.

The package couples an exact treatment of the switching truth model with
reduced Gaussian and Gaussian-mixture filters and their calibration.
"""

__version__ = "0.1.0"
