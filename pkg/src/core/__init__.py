"""
Core package: numerics, model, objectives, training and evaluation

Submodules are imported directly (src.core.trainer, ...); the data package
depends on src.core.numerics, so nothing is re-exported here.
"""
