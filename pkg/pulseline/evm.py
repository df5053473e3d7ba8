"""
Eulerian Video Magnification (color amplification).

Every frame is reduced with a Gaussian pyramid down to its coarsest
level, each coarse pixel is band-passed in time with an ideal FFT filter,
the result is amplified, upsampled back to full size and added to the
original frames. Everything stays in floating point: clamping only
happens when a video is exported.
"""

import logging
from dataclasses import dataclass
from typing import Tuple

import cv2
import numpy as np
import scipy.fft

from .roi import OUTPUT_SIZE, RoiVideo
from .tools import PulselineError

log = logging.getLogger(__name__)

MIN_COARSE_SIZE = 4


class EvmError(PulselineError):
    """Video magnification error"""

    def __init__(self, msg: str):
        self.msg = msg

    def __str__(self):
        return f"magnification error: {self.msg}"


@dataclass(frozen=True)
class EvmConfig:
    alpha: float = 20.0
    f_low: float = 0.4
    f_high: float = 3.0
    pyramid_steps: int = 3

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if not 0 < self.f_low < self.f_high:
            raise ValueError(
                f"expected 0 < f_low < f_high, got {self.f_low}, {self.f_high}"
            )
        if self.pyramid_steps < 1:
            raise ValueError(f"pyramid_steps must be >= 1, got {self.pyramid_steps}")
        if OUTPUT_SIZE / 2**self.pyramid_steps < MIN_COARSE_SIZE:
            raise ValueError(
                f"{self.pyramid_steps} pyramid steps leave less than "
                f"{MIN_COARSE_SIZE} pixels of a {OUTPUT_SIZE} pixel frame"
            )

    def check_rate(self, fps: float):
        if not self.f_high < fps / 2:
            raise EvmError(f"f_high={self.f_high} Hz is not below Nyquist ({fps / 2} Hz)")


def pyramid_down(image: np.ndarray, steps: int) -> np.ndarray:
    """Blur with the 5x5 binomial kernel and decimate by 2, ``steps`` times."""
    height, width = image.shape[:2]
    if steps < 0:
        raise EvmError(f"negative pyramid depth {steps}")
    if min(height, width) < 2**steps * MIN_COARSE_SIZE:
        raise EvmError(f"{width}x{height} image too small for {steps} pyramid steps")
    for _ in range(steps):
        image = cv2.pyrDown(image)
    return image


def pyramid_up_to(image: np.ndarray, shape: Tuple[int, int]) -> np.ndarray:
    """Bilinear upsampling to (height, width)."""
    return cv2.resize(image, (shape[1], shape[0]), interpolation=cv2.INTER_LINEAR)


def temporal_ideal_bandpass(
    series: np.ndarray, fs: float, f_low: float, f_high: float, workers: int = 1
) -> np.ndarray:
    """Zero every DFT bin outside [f_low, f_high] along axis 0.

    The time mean is removed first, the DC bin being always rejected.

    :param series: samples along the first axis, any trailing shape
    :param fs: sample rate (Hz)
    """
    series = np.asarray(series, dtype=np.float64)
    count = series.shape[0]
    if count < 2:
        raise EvmError("at least two samples are needed")
    centered = series - series.mean(axis=0)
    spectrum = scipy.fft.rfft(centered, axis=0, workers=workers)
    freqs = scipy.fft.rfftfreq(count, d=1.0 / fs)
    stop = (freqs < f_low) | (freqs > f_high)
    spectrum[stop] = 0
    return scipy.fft.irfft(spectrum, n=count, axis=0, workers=workers)


def magnify(window: RoiVideo, cfg: EvmConfig, workers: int = 1) -> RoiVideo:
    """Amplify the in-band color variations of a window.

    :param window: masked face video (one analysis window)
    :param cfg: magnification parameters
    :return: a new video with the same boxes, frame count and fps
    """
    if len(window) < 2:
        raise EvmError("at least two frames are needed")
    cfg.check_rate(window.fps)
    frames = np.asarray(window.images, dtype=np.float64)
    coarse = np.stack([pyramid_down(frame, cfg.pyramid_steps) for frame in frames])
    log.debug(
        "magnifying %d frames, coarse level %dx%d",
        len(frames),
        coarse.shape[2],
        coarse.shape[1],
    )
    band = temporal_ideal_bandpass(coarse, window.fps, cfg.f_low, cfg.f_high, workers)
    band *= cfg.alpha
    shape = frames.shape[1:3]
    boosted = frames + np.stack([pyramid_up_to(level, shape) for level in band])
    return window.with_images(boosted)
