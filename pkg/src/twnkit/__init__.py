"""Ternary weight network toolkit.

Quantize full-precision weights to {-1, 0, +1} with an optimal or heuristic
scale/threshold, store them 2 bits per weight, run them through
multiplication-free kernels, and train small ternary networks with
straight-through SGD.
"""

__version__ = "0.1.0"
