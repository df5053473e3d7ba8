"""
Heartbeat detection on an SCLI.

Modified Pan-Tompkins chain: first difference, centered moving average,
min-max normalization to [0, 1], then local maxima filtered by
prominence and by a minimum spacing (the higher peak survives). The
pulse rate is 60 / mean inter-beat interval.
"""

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence, TextIO, Tuple, TypedDict

import numpy as np
from scipy import ndimage, signal

from .ingest import ParseError
from .scli import Scli, Variant
from .tools import PulselineError, format_float, round_half_up

log = logging.getLogger(__name__)

MAX_PR_BPM = 240.0
MAX_SMOOTH_WIDTH_S = 1.0
PULSE_CSV_HEADER = ["window_id", "variant", "pr_bpm", "n_peaks", "mean_ibi_s"]


class PulseError(PulselineError):
    """Pulse estimation error"""

    def __init__(self, msg: str):
        self.msg = msg

    def __str__(self):
        return f"pulse error: {self.msg}"


class InsufficientBeats(PulseError):
    def __init__(self, count: int):
        self.count = count
        self.msg = f"insufficient beats: {count} peak(s) found, 2 needed"

    def __str__(self):
        return self.msg


class CalibrationFailed(PulseError):
    pass


@dataclass(frozen=True)
class PeakConfig:
    smooth_width_s: float = 0.400
    prominence: float = 0.15
    min_distance_s: float = 0.33

    def __post_init__(self):
        if not 0 < self.smooth_width_s <= MAX_SMOOTH_WIDTH_S:
            raise ValueError(
                f"smooth_width_s must lie in (0, {MAX_SMOOTH_WIDTH_S}], "
                f"got {self.smooth_width_s}"
            )
        if not self.prominence > 0:
            raise ValueError(f"prominence must be positive, got {self.prominence}")
        if not self.min_distance_s > 0:
            raise ValueError(
                f"min_distance_s must be positive, got {self.min_distance_s}"
            )

    @classmethod
    def for_variant(cls, variant: Variant, **kwargs) -> "PeakConfig":
        """Default smoothing: 12 samples at 30 fps for B.EVM, 13 for A.EVM."""
        width = 0.400 if variant is Variant.B_EVM else 0.433
        return cls(smooth_width_s=kwargs.pop("smooth_width_s", None) or width, **kwargs)

    def smooth_samples(self, fs: float) -> int:
        return max(round_half_up(self.smooth_width_s * fs), 1)

    def distance_samples(self, fs: float) -> int:
        return max(round_half_up(self.min_distance_s * fs), 1)

    def check_rate(self, fs: float):
        """Raise ValueError when the smoothing width is below one sample."""
        if self.smooth_width_s < 1 / fs - 1e-9:
            raise ValueError(
                f"smoothing width {self.smooth_width_s} s is below one sample at {fs} Hz"
            )


@dataclass(frozen=True)
class PulseEstimate:
    window_id: int
    variant: Variant
    peak_times: np.ndarray
    ibis: np.ndarray
    pr_bpm: float

    @property
    def n_peaks(self) -> int:
        return len(self.peak_times)

    @property
    def mean_ibi_s(self) -> float:
        return float(np.mean(self.ibis)) if len(self.ibis) else float("nan")

    @property
    def usable(self) -> bool:
        return bool(np.isfinite(self.pr_bpm))


class PulseRow(TypedDict):
    """One line of a pulse CSV."""

    window_id: int
    variant: Variant
    pr_bpm: float
    n_peaks: int
    mean_ibi_s: float


def detection_signal(values: np.ndarray, smooth: int) -> Optional[np.ndarray]:
    """Differentiated, smoothed and [0, 1] normalized signal, None when flat."""
    derivative = np.diff(np.asarray(values, dtype=np.float64))
    smoothed = ndimage.uniform_filter1d(derivative, size=smooth, mode="reflect")
    low, high = smoothed.min(), smoothed.max()
    span = high - low
    if not span > 1e-12 * max(abs(high), abs(low), np.finfo(np.float64).tiny):
        return None
    return (smoothed - low) / span


def _suppress_close_peaks(
    candidates: np.ndarray, heights: np.ndarray, distance: int
) -> np.ndarray:
    """Keep peaks at least ``distance`` apart, highest first, earlier index
    first on equal heights."""
    kept: List[int] = []
    for i in np.lexsort((candidates, -heights)):
        position = candidates[i]
        if all(abs(position - other) >= distance for other in kept):
            kept.append(position)
    return np.array(sorted(kept), dtype=np.intp)


def detect_peaks(scli: Scli, cfg: PeakConfig) -> np.ndarray:
    """Return the beat indices of an SCLI (indices of the detection
    signal, whose sample i sits between SCLI samples i and i + 1).

    :param scli: the signal to analyse
    :param cfg: detection parameters
    """
    distance = cfg.distance_samples(scli.fs)
    if len(scli) < 2 * distance:
        raise PulseError(
            f"{len(scli)} samples, at least {2 * distance} needed for peak detection"
        )
    cfg.check_rate(scli.fs)
    detection = detection_signal(scli.values, cfg.smooth_samples(scli.fs))
    if detection is None:
        log.warning("window %d: flat detection signal, no peak", scli.window_id)
        return np.empty(0, dtype=np.intp)
    candidates, _ = signal.find_peaks(detection)
    if not len(candidates):
        return candidates
    prominences = signal.peak_prominences(detection, candidates)[0]
    candidates = candidates[prominences >= cfg.prominence]
    return _suppress_close_peaks(candidates, detection[candidates], distance)


def pulse_rate(peaks: Sequence[int], fs: float) -> Tuple[np.ndarray, float]:
    """Inter-beat intervals (s) and pulse rate (bpm) of a peak train."""
    if len(peaks) < 2:
        raise InsufficientBeats(len(peaks))
    ibis = np.diff(np.asarray(peaks, dtype=np.float64)) / fs
    return ibis, 60.0 / float(np.mean(ibis))


def estimate_pulse(scli: Scli, cfg: PeakConfig) -> PulseEstimate:
    """Peaks and pulse rate of one window.

    Windows with less than two peaks are returned with a NaN pulse rate
    (unusable) instead of raising.
    """
    peaks = detect_peaks(scli, cfg)
    try:
        ibis, pr = pulse_rate(peaks, scli.fs)
    except InsufficientBeats as e:
        log.warning("window %d: %s", scli.window_id, e)
        ibis, pr = np.empty(0), float("nan")
    else:
        if not 0 < pr < MAX_PR_BPM:
            raise PulseError(f"window {scli.window_id}: implausible rate {pr} bpm")
    log.debug(
        "window %d (%s): %d peaks, %s bpm",
        scli.window_id,
        scli.variant.label,
        len(peaks),
        format_float(pr),
    )
    return PulseEstimate(scli.window_id, scli.variant, peaks / scli.fs, ibis, pr)


def search_widths(fs: float) -> List[int]:
    """Moving-average widths (samples) explored by the calibration: one
    sample up to one second."""
    return list(range(1, round_half_up(MAX_SMOOTH_WIDTH_S * fs) + 1))


def best_smoothing(
    scli: Scli, reference_pr: float, cfg: Optional[PeakConfig] = None
) -> Optional[int]:
    """Width (samples) giving the pulse rate closest to ``reference_pr``,
    the smaller one on ties. None when no width yields two peaks."""
    cfg = cfg or PeakConfig()
    best: Optional[int] = None
    best_error = np.inf
    for width in search_widths(scli.fs):
        trial = replace(cfg, smooth_width_s=min(width / scli.fs, MAX_SMOOTH_WIDTH_S))
        try:
            _, pr = pulse_rate(detect_peaks(scli, trial), scli.fs)
        except InsufficientBeats:
            continue
        error = abs(pr - reference_pr)
        if error < best_error:
            best, best_error = width, error
    return best


def calibrate_smoothing(
    dataset: Sequence[Tuple[Scli, float]],
    cfg: Optional[PeakConfig] = None,
    jobs: int = 1,
) -> float:
    """Average of the per-item optimal moving-average widths.

    :param dataset: (SCLI, reference pulse rate) pairs sharing one rate
    :param cfg: prominence and spacing used during the search
    :return: the width in seconds, rounded to a whole number of samples
    """
    if not dataset:
        raise CalibrationFailed("empty calibration dataset")
    rates = {scli.fs for scli, _ in dataset}
    if len(rates) != 1:
        raise CalibrationFailed(f"mixed sample rates {sorted(rates)}")
    fs = rates.pop()
    with ThreadPoolExecutor(max_workers=max(jobs, 1)) as executor:
        widths = list(
            executor.map(lambda item: best_smoothing(item[0], item[1], cfg), dataset)
        )
    usable = []
    for (scli, _), width in zip(dataset, widths):
        if width is None:
            log.warning("window %d: no peaks at any width, skipped", scli.window_id)
            continue
        usable.append(width)
    if not usable:
        raise CalibrationFailed("every calibration item was skipped")
    samples = round_half_up(float(np.mean(usable)))
    log.info(
        "calibrated smoothing: %d samples (%d items, %d skipped)",
        samples,
        len(usable),
        len(dataset) - len(usable),
    )
    return samples / fs


def write_pulse_csv(estimates: Sequence[PulseEstimate], target: TextIO):
    """One row per window, ordered by window id."""
    writer = csv.writer(target, lineterminator="\n")
    writer.writerow(PULSE_CSV_HEADER)
    for estimate in sorted(estimates, key=lambda e: (e.window_id, e.variant.value)):
        writer.writerow(
            [
                estimate.window_id,
                estimate.variant.value,
                format_float(estimate.pr_bpm),
                estimate.n_peaks,
                format_float(estimate.mean_ibi_s),
            ]
        )


def read_pulse_csv(path: str) -> List[PulseRow]:
    with open(path, "r", encoding="utf-8", newline="") as fp:
        rows = list(csv.reader(fp))
    if not rows or rows[0] != PULSE_CSV_HEADER:
        raise ParseError(f"'{','.join(PULSE_CSV_HEADER)}' header expected", path, 1)
    result: List[PulseRow] = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        try:
            result.append(
                {
                    "window_id": int(row[0]),
                    "variant": Variant(row[1]),
                    "pr_bpm": float(row[2]),
                    "n_peaks": int(row[3]),
                    "mean_ibi_s": float(row[4]),
                }
            )
        except (IndexError, ValueError):
            raise ParseError(f"bad row '{','.join(row)}'", path, lineno)
    return result
