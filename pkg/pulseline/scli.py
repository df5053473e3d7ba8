"""
Signal of Change in Light Intensity (SCLI) extraction.

A window of masked face frames is reduced to one sample per frame:

 * B.EVM: channel means, zero-phase Butterworth band-pass per channel,
   first principal component, outlier adjustment,
 * A.EVM: magnification first, then channel means (centered), first
   principal component, outlier adjustment. The EVM temporal filter
   already restricts the band, there is no Butterworth stage.
"""

import csv
import enum
import logging
from dataclasses import dataclass
from typing import List, Optional, TextIO, Tuple

import numpy as np
from scipy import signal

from .evm import EvmConfig, magnify
from .ingest import ParseError
from .roi import RoiVideo
from .tools import PulselineError, format_float

log = logging.getLogger(__name__)

IQR_FACTOR = 3.0


class ScliError(PulselineError):
    """SCLI extraction error"""

    def __init__(self, msg: str):
        self.msg = msg

    def __str__(self):
        return f"scli error: {self.msg}"


class SeriesTooShort(ScliError):
    def __init__(self, length: int, needed: int):
        self.length = length
        self.needed = needed
        self.msg = f"series of {length} samples, more than {needed} needed"


class DegenerateWindow(ScliError):
    def __str__(self):
        return f"degenerate window: {self.msg}"


class Variant(str, enum.Enum):
    """Where the SCLI comes from: before or after magnification."""

    B_EVM = "b_evm"
    A_EVM = "a_evm"

    @property
    def label(self) -> str:
        return "B.EVM" if self is Variant.B_EVM else "A.EVM"


@dataclass(frozen=True)
class FilterConfig:
    order: int = 3
    f_low: float = 0.4
    f_high: float = 3.0
    upper_only_outliers: bool = False

    def __post_init__(self):
        if self.order < 1:
            raise ValueError(f"filter order must be >= 1, got {self.order}")
        if not 0 < self.f_low < self.f_high:
            raise ValueError(
                f"expected 0 < f_low < f_high, got {self.f_low}, {self.f_high}"
            )

    @property
    def padlen(self) -> int:
        """Edge padding added on both sides before filtering."""
        return 3 * (2 * self.order + 1)

    def sos(self, fs: float) -> np.ndarray:
        """Second-order sections of the band-pass, bilinear transform with
        pre-warped band edges."""
        if not self.f_high < fs / 2:
            raise ScliError(f"f_high={self.f_high} Hz is not below Nyquist ({fs / 2} Hz)")
        return signal.butter(
            self.order, [self.f_low, self.f_high], btype="bandpass", output="sos", fs=fs
        )


@dataclass(frozen=True)
class RgbSeries:
    r: np.ndarray
    g: np.ndarray
    b: np.ndarray
    fs: float

    def __post_init__(self):
        if not len(self.r) == len(self.g) == len(self.b):
            raise ValueError("r, g and b must have the same length")
        if len(self.r) < 2:
            raise ValueError("at least two samples are needed")
        if not self.fs > 0:
            raise ValueError(f"fs must be positive, got {self.fs}")

    def __len__(self):
        return len(self.r)

    @classmethod
    def from_matrix(cls, matrix: np.ndarray, fs: float) -> "RgbSeries":
        return cls(matrix[0], matrix[1], matrix[2], fs)

    def matrix(self) -> np.ndarray:
        """(3, T) array, rows r, g, b."""
        return np.vstack([self.r, self.g, self.b])


@dataclass(frozen=True)
class Scli:
    window_id: int
    variant: Variant
    fs: float
    values: np.ndarray

    def __len__(self):
        return len(self.values)


def channel_means(window: RoiVideo) -> RgbSeries:
    """Per-frame mean of every channel, masked eye pixels included."""
    if not len(window):
        raise ScliError("empty window")
    means = np.asarray(window.images, dtype=np.float64).mean(axis=(1, 2))
    return RgbSeries.from_matrix(means.T, window.fps)


def butter_bandpass_zerophase(
    series: np.ndarray, fs: float, cfg: FilterConfig
) -> np.ndarray:
    """Forward-backward Butterworth band-pass (magnitude response |H|^2).

    Odd reflections of ``cfg.padlen`` samples are added to both ends, then
    stripped.
    """
    series = np.asarray(series, dtype=np.float64)
    if series.shape[-1] <= cfg.padlen:
        raise SeriesTooShort(series.shape[-1], cfg.padlen)
    return signal.sosfiltfilt(
        cfg.sos(fs), series, axis=-1, padtype="odd", padlen=cfg.padlen
    )


def principal_direction(centered: np.ndarray) -> Tuple[np.ndarray, float]:
    """Largest-variance direction of a centered (3, T) matrix and the
    total variance."""
    covariance = np.cov(centered)
    eigenvalues, eigenvectors = np.linalg.eigh(covariance)
    total = float(np.trace(covariance))
    if not total > np.finfo(np.float64).tiny:
        raise DegenerateWindow("zero total variance")
    return eigenvectors[:, np.argmax(eigenvalues)], total


def pca_first_component(rgb: RgbSeries) -> np.ndarray:
    """Projection of the centered channels on their first principal
    direction, signed so that it correlates positively with green."""
    if len(rgb) < 3:
        raise SeriesTooShort(len(rgb), 2)
    matrix = rgb.matrix()
    centered = matrix - matrix.mean(axis=1, keepdims=True)
    direction, _ = principal_direction(centered)
    component = direction @ centered
    if component @ centered[1] < 0:
        component = -component
    return component


def adjust_outliers(series: np.ndarray, upper_only: bool = False) -> np.ndarray:
    """Clamp values further than 3 IQR beyond the quartiles.

    :param upper_only: only clamp the upper tail
    """
    series = np.asarray(series, dtype=np.float64)
    if len(series) < 4:
        raise SeriesTooShort(len(series), 3)
    q1, q3 = np.quantile(series, [0.25, 0.75])
    iqr = q3 - q1
    upper = q3 + IQR_FACTOR * iqr
    lower = -np.inf if upper_only else q1 - IQR_FACTOR * iqr
    adjusted = np.clip(series, lower, upper)
    count = int(np.count_nonzero(adjusted != series))
    if count:
        log.debug("%d outliers adjusted", count)
    return adjusted


def _check_not_constant(rgb: RgbSeries):
    matrix = rgb.matrix()
    spread = np.ptp(matrix, axis=1)
    scale = np.maximum(np.abs(matrix).max(axis=1), 1.0)
    if np.all(spread <= 1e-9 * scale):
        raise DegenerateWindow("channel means do not change over time")


def filtered_rgb(
    window: RoiVideo,
    variant: Variant,
    evm_cfg: Optional[EvmConfig] = None,
    filt_cfg: Optional[FilterConfig] = None,
) -> RgbSeries:
    """The three channel signals handed to PCA for ``variant``."""
    evm_cfg = evm_cfg or EvmConfig()
    filt_cfg = filt_cfg or FilterConfig()
    if variant is Variant.A_EVM:
        window = magnify(window, evm_cfg)
    rgb = channel_means(window)
    _check_not_constant(rgb)
    matrix = rgb.matrix()
    if variant is Variant.A_EVM:
        matrix = matrix - matrix.mean(axis=1, keepdims=True)
    else:
        matrix = butter_bandpass_zerophase(matrix, rgb.fs, filt_cfg)
    return RgbSeries.from_matrix(matrix, rgb.fs)


def extract_scli(
    window: RoiVideo,
    variant: Variant,
    evm_cfg: Optional[EvmConfig] = None,
    filt_cfg: Optional[FilterConfig] = None,
    window_id: int = 0,
) -> Scli:
    """Reduce one window to its SCLI.

    :param window: masked face video covering one analysis window
    :param variant: B.EVM or A.EVM
    :param window_id: identifier carried to the result
    """
    filt_cfg = filt_cfg or FilterConfig()
    rgb = filtered_rgb(window, variant, evm_cfg, filt_cfg)
    return scli_from_rgb(rgb, variant, window_id, filt_cfg)


def scli_from_rgb(
    rgb: RgbSeries,
    variant: Variant,
    window_id: int = 0,
    filt_cfg: Optional[FilterConfig] = None,
) -> Scli:
    """Last two stages of the extraction, on already filtered channels."""
    filt_cfg = filt_cfg or FilterConfig()
    values = adjust_outliers(pca_first_component(rgb), filt_cfg.upper_only_outliers)
    log.debug("window %d (%s): %d samples", window_id, variant.label, len(values))
    return Scli(window_id, variant, rgb.fs, values)


def write_scli(scli: Scli, target: TextIO):
    """Write an SCLI as CSV: a ``window_id,variant,fs`` header row, its
    values, then one sample per line."""
    writer = csv.writer(target, lineterminator="\n")
    writer.writerow(["window_id", "variant", "fs"])
    writer.writerow([scli.window_id, scli.variant.value, format_float(scli.fs)])
    for value in scli.values:
        writer.writerow([format_float(value)])


def read_scli(path: str) -> Scli:
    """Read back a file written by :func:`write_scli`."""
    with open(path, "r", encoding="utf-8", newline="") as fp:
        rows: List[List[str]] = [row for row in csv.reader(fp) if row]
    if len(rows) < 2 or rows[0] != ["window_id", "variant", "fs"]:
        raise ParseError("'window_id,variant,fs' header expected", path, 1)
    try:
        window_id = int(rows[1][0])
        variant = Variant(rows[1][1])
        fs = float(rows[1][2])
    except (IndexError, ValueError):
        raise ParseError(f"bad header values {','.join(rows[1])}", path, 2)
    values = []
    for lineno, row in enumerate(rows[2:], start=3):
        try:
            values.append(float(row[0]))
        except ValueError:
            raise ParseError(f"non-numeric sample '{row[0]}'", path, lineno)
    return Scli(window_id, variant, fs, np.array(values))
