"""Temporal predictive coding with real-time recurrent learning for small RNNs.

Submodules are imported on demand so that the command line can pin BLAS
threading before numpy loads.
"""

__version__ = "0.1.0"
