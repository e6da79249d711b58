"""Multi-hypothesis 3D pose lifting with prior-weighted quantization.

Submodules are imported on demand so ``multipose.cli`` can set thread limits
before numpy loads.
"""

__version__ = "0.1.0"
