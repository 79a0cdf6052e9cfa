"""Automatic SPMD, pipeline and schedule planning for tensor programs."""

__version__ = "0.1.0"

from .ir import TensorProgram, parse_program  # noqa: E402
from .sharding import DeviceMesh  # noqa: E402

__all__ = ["__version__", "TensorProgram", "DeviceMesh", "parse_program"]
