"""EMA-driven articulatory model compiler and evaluation harness."""

__version__ = "0.1.0"

from vtanim.kernels import BACKEND  # noqa: E402

__all__ = ["BACKEND", "__version__"]
