"""Exception types shared across the toolchain."""

from __future__ import annotations


class DimensionError(ValueError):
    """Raised when tensor shapes do not compose."""


class NumericError(ArithmeticError):
    """A non-finite value appeared during a forward pass.

    ``layer`` names the first layer whose output was non-finite (``"loss"`` if
    every activation was finite and only the loss overflowed).
    """

    def __init__(self, message: str, layer: str | None = None):
        super().__init__(message if layer is None else f"{message} (layer {layer!r})")
        self.layer = layer


class FormatError(ValueError):
    """Malformed tensor file or model manifest. ``offset`` is the byte where parsing failed."""

    def __init__(self, message: str, offset: int, path: str | None = None):
        where = f"{path}: " if path else ""
        super().__init__(f"{where}{message} at byte offset {offset}")
        self.offset = offset
        self.path = path


class AccumulationOverflowError(OverflowError):
    """An integer partial sum left the signed 32-bit accumulator range."""

    def __init__(self, message: str, layer_id: int | None = None, tile_id: int | None = None):
        parts = [message]
        if layer_id is not None:
            parts.append(f"layer {layer_id}")
        if tile_id is not None:
            parts.append(f"tile {tile_id}")
        super().__init__(", ".join(parts))
        self.layer_id = layer_id
        self.tile_id = tile_id
