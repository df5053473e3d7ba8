"""Some tools."""

import math
from typing import Iterable, List, NamedTuple


class PulselineError(Exception):
    """Base class of every error raised by the pipeline."""


class Box(NamedTuple):
    """Axis-aligned rectangle: top-left corner, width and height (pixels)."""

    x: int
    y: int
    w: int
    h: int

    @property
    def area(self) -> int:
        return self.w * self.h

    def is_valid(self) -> bool:
        return self.x >= 0 and self.y >= 0 and self.w > 0 and self.h > 0

    def fits_in(self, width: int, height: int) -> bool:
        """Tell if the box lies inside a width x height area."""
        return self.x + self.w <= width and self.y + self.h <= height

    def clip(self, width: int, height: int) -> "Box":
        """Intersect with [0, width) x [0, height); may return a zero-area box."""
        x0 = min(max(self.x, 0), width)
        y0 = min(max(self.y, 0), height)
        x1 = min(max(self.x + self.w, 0), width)
        y1 = min(max(self.y + self.h, 0), height)
        return Box(x0, y0, x1 - x0, y1 - y0)


def to_box(values: Iterable) -> Box:
    """Convert a 4-item sequence (list from JSON, CLI string parts...) to a Box."""
    items = list(values)
    if len(items) != 4:
        raise ValueError(f"a box needs 4 values, got {len(items)}")
    converted = []
    for item in items:
        number = float(item)
        if not number.is_integer():
            raise ValueError(f"box values must be integers, got {item}")
        converted.append(int(number))
    return Box(*converted)


def parse_box_list(text: str) -> List[Box]:
    """Parse ``"x,y,w,h;x,y,w,h"`` into boxes."""
    return [to_box(part.split(",")) for part in text.split(";") if part.strip()]


def round_half_up(value: float) -> int:
    return int(math.floor(value + 0.5))


def format_float(value: float) -> str:
    """Shortest round-trip representation, with 'inf'/'-inf'/'nan' spelled out."""
    value = float(value)
    if math.isnan(value):
        return "nan"
    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return repr(value)


def json_float(value: float):
    """JSON-safe float: non-finite values become their string spelling."""
    value = float(value)
    if math.isfinite(value):
        return value
    return format_float(value)
