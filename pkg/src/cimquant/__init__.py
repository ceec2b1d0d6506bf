"""Mixed-precision strip quantization for ReRAM compute-in-memory."""

__version__ = "0.1.0"
