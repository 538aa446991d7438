"""Decoupled forward/backward training of reversible networks on CPU.

Stages exchange activations forward and (reconstructed input, gradient)
pairs backward. Reversible stages rebuild their input from their output
instead of storing it, and every stage keeps a single parameter version.
"""

__version__ = "0.1.0"
