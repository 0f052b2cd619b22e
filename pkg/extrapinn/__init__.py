"""
extrapinn

Physics-informed neural networks for time extrapolation, with adaptive
activation functions and a transfer-learning phase on high-residual points.
"""

__version__ = "1.0.0"
__author__ = "extrapinn developers"
