"""
rvae: robust variational autoencoders
Training with the robust evidence lower bound on noise-contaminated image data
"""

__version__ = "1.0.0"
__author__ = "MavenSource"
