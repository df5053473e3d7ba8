"""Fixed-length overlapping windows (30 s long, one every 10 s by default)."""

import logging
from dataclasses import dataclass
from typing import List, Tuple

from .tools import round_half_up

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class WindowSpec:
    length_s: float = 30.0
    step_s: float = 10.0

    def __post_init__(self):
        if not 0 < self.step_s <= self.length_s:
            raise ValueError(
                f"window step must lie in (0, length], got step={self.step_s} "
                f"length={self.length_s}"
            )

    def lengths(self, fps: float) -> Tuple[int, int]:
        """Window length and step in items at ``fps``."""
        return round_half_up(self.length_s * fps), round_half_up(self.step_s * fps)


def segment(item_count: int, fps: float, spec: WindowSpec) -> List[Tuple[int, int]]:
    """Return the (start, end) index ranges of every complete window.

    :param item_count: number of items (frames, samples) to cover
    :param fps: item rate
    :param spec: window geometry
    """
    if item_count < 0:
        raise ValueError(f"negative item count {item_count}")
    if not fps > 0:
        raise ValueError(f"fps must be positive, got {fps}")
    length, step = spec.lengths(fps)
    if length < 1 or step < 1:
        raise ValueError(f"window too short for {fps} items per second")
    windows = [
        (start, start + length) for start in range(0, item_count - length + 1, step)
    ]
    log.debug("%d items -> %d windows of %d (step %d)", item_count, len(windows), length, step)
    return windows
