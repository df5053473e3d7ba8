"""
Evaluation of extracted pulse rates against a reference recording.

Error metrics (AE, AAE, SAE, ARE, MAE, RMSE), waveform correlations,
signal-to-noise ratios of the reference and video signals, and the
linear-fit bias correction. :class:`EvaluationReport` gathers all of it
for one variant and writes the JSON/CSV outputs.
"""

import csv
import enum
import io
import json
import logging
import math
import sys
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, TypedDict, Union

import numpy as np
from scipy import interpolate, stats
from typing_extensions import NotRequired

from .ingest import ReferenceRecord
from .scli import (
    FilterConfig,
    RgbSeries,
    Scli,
    ScliError,
    Variant,
    butter_bandpass_zerophase,
    principal_direction,
)
from .tools import PulselineError, json_float, format_float, round_half_up
from .window import WindowSpec

log = logging.getLogger(__name__)


class EvaluationError(PulselineError):
    """Evaluation error"""

    def __init__(self, msg: str):
        self.msg = msg

    def __str__(self):
        return f"evaluation error: {self.msg}"


class DiffSign(str, enum.Enum):
    """Sign convention of the pulse-rate difference."""

    EXTRACTED_MINUS_REFERENCE = "extracted-minus-reference"
    REFERENCE_MINUS_EXTRACTED = "reference-minus-extracted"

    def diff(self, reference, extracted):
        if self is DiffSign.EXTRACTED_MINUS_REFERENCE:
            return extracted - reference
        return reference - extracted


@dataclass(frozen=True)
class LinearCorrection:
    """Bias model ``diff = a * reference + b``."""

    a: float
    b: float

    def __post_init__(self):
        if not (math.isfinite(self.a) and math.isfinite(self.b)):
            raise ValueError(f"non-finite correction ({self.a}, {self.b})")

    def __call__(self, reference):
        return self.a * reference + self.b


CORRECTION_PRESETS: Dict[str, Dict[Variant, LinearCorrection]] = {
    "preset-paper": {
        Variant.B_EVM: LinearCorrection(0.94, -69.41),
        Variant.A_EVM: LinearCorrection(0.96, -74.01),
    },
    "preset-faros": {
        Variant.B_EVM: LinearCorrection(0.32, -30.42),
        Variant.A_EVM: LinearCorrection(0.32, -30.42),
    },
}


def preset_correction(name: str, variant: Variant) -> LinearCorrection:
    try:
        return CORRECTION_PRESETS[name][variant]
    except KeyError:
        raise EvaluationError(f"unknown correction preset '{name}'")


@dataclass(frozen=True)
class ErrorMetrics:
    ae: np.ndarray
    aae: float
    sae: float
    are: float
    mae: float
    rmse: float

    def todict(self) -> Dict[str, float]:
        return {
            "aae": json_float(self.aae),
            "sae": json_float(self.sae),
            "are": json_float(self.are),
            "mae": json_float(self.mae),
            "rmse": json_float(self.rmse),
        }


def error_metrics(pairs: Sequence[Tuple[float, float]]) -> ErrorMetrics:
    """Compute the error metrics of (reference, extracted) pulse-rate pairs.

    SAE is the population standard deviation of the absolute errors and
    ARE the mean of AE / reference.
    """
    if not len(pairs):
        raise EvaluationError("no pair to evaluate")
    data = np.asarray(pairs, dtype=np.float64).reshape(-1, 2)
    reference, extracted = data[:, 0], data[:, 1]
    if np.any(reference <= 0):
        raise EvaluationError("reference pulse rates must be positive")
    ae = np.abs(reference - extracted)
    aae = float(np.mean(ae))
    return ErrorMetrics(
        ae=ae,
        aae=aae,
        sae=float(np.sqrt(np.mean((ae - aae) ** 2))),
        are=float(np.mean(ae / reference)),
        mae=aae,
        rmse=float(np.sqrt(np.mean(ae**2))),
    )


def resample_cubic(series: np.ndarray, fs_in: float, fs_out: float) -> np.ndarray:
    """Natural cubic spline through the samples, evaluated every 1/fs_out
    seconds over the same time span."""
    series = np.asarray(series, dtype=np.float64)
    if len(series) < 4:
        raise EvaluationError(f"{len(series)} samples, at least 4 needed to resample")
    if not (fs_in > 0 and fs_out > 0):
        raise EvaluationError("sample rates must be positive")
    knots = np.arange(len(series)) / fs_in
    count = int(math.floor((len(series) - 1) * fs_out / fs_in + 1e-9)) + 1
    spline = interpolate.CubicSpline(knots, series, bc_type="natural")
    return spline(np.arange(count) / fs_out)


def correlations(a: np.ndarray, b: np.ndarray) -> Tuple[float, float]:
    """Pearson and Spearman (mid-ranks) correlation coefficients."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) != len(b):
        raise EvaluationError(f"length mismatch ({len(a)} vs {len(b)})")
    if len(a) < 3:
        raise EvaluationError("at least 3 samples are needed")
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        raise EvaluationError("correlation undefined for a constant input")
    pearson = stats.pearsonr(a, b)[0]
    spearman = stats.spearmanr(a, b)[0]
    return float(pearson), float(spearman)


def _db(signal_power: float, noise_power: float) -> float:
    if noise_power <= 0:
        return math.inf
    return 10.0 * math.log10(signal_power / noise_power)


def snr_reference(
    raw_bvp: np.ndarray,
    fs: float,
    cfg: Optional[FilterConfig] = None,
    trim_s: float = 0.0,
) -> float:
    """SNR (dB) of a BVP segment: the band-passed signal against what the
    filter removed.

    :param trim_s: seconds discarded at both ends before measuring power
    """
    cfg = cfg or FilterConfig()
    raw = np.asarray(raw_bvp, dtype=np.float64)
    try:
        filtered = butter_bandpass_zerophase(raw, fs, cfg)
    except ScliError as e:
        raise EvaluationError(str(e))
    noise = raw - filtered
    trim = round_half_up(trim_s * fs)
    if trim:
        if 2 * trim >= len(raw):
            raise EvaluationError(f"trimming {trim_s} s leaves no sample")
        filtered, noise = filtered[trim:-trim], noise[trim:-trim]
    return _db(float(np.mean(filtered**2)), float(np.mean(noise**2)))


def snr_video(filtered_rgb: Union[RgbSeries, np.ndarray]) -> float:
    """SNR (dB) of the filtered color channels: rank-1 reconstruction from
    the first principal direction against the residual."""
    if isinstance(filtered_rgb, RgbSeries):
        matrix = filtered_rgb.matrix()
    else:
        matrix = np.asarray(filtered_rgb, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[0] != 3 or matrix.shape[1] < 3:
        raise EvaluationError("a (3, T) matrix with T >= 3 is expected")
    centered = matrix - matrix.mean(axis=1, keepdims=True)
    direction, _ = principal_direction(centered)
    reconstruction = np.outer(direction, direction @ centered)
    noise = centered - reconstruction
    return _db(float(np.mean(reconstruction**2)), float(np.mean(noise**2)))


def fit_linear_correction(pairs: Sequence[Tuple[float, float]]) -> LinearCorrection:
    """Least-squares line through (reference, diff) points."""
    data = np.asarray(pairs, dtype=np.float64).reshape(-1, 2)
    if len(np.unique(data[:, 0])) < 2:
        raise EvaluationError("at least two distinct reference values are needed")
    a, b = np.polyfit(data[:, 0], data[:, 1], 1)
    return LinearCorrection(float(a), float(b))


def apply_linear_correction(
    pr_extracted: float,
    pr_reference: float,
    c: LinearCorrection,
    diff_sign: DiffSign = DiffSign.EXTRACTED_MINUS_REFERENCE,
) -> float:
    """Extracted pulse rate whose difference to the reference has the
    fitted bias removed."""
    if diff_sign is DiffSign.EXTRACTED_MINUS_REFERENCE:
        return pr_extracted - c(pr_reference)
    return pr_extracted + c(pr_reference)


def reference_pr(record: ReferenceRecord, t0: float, t1: float) -> Optional[float]:
    """Reference pulse rate over [t0, t1).

    Mean of the HR samples in the window; 60 / mean IBI when HR.csv has
    nothing there; None without any coverage.
    """
    if record.hr is not None:
        hr = record.hr.segment(t0, t1)
        if len(hr):
            return float(np.mean(hr))
    ibis = record.ibi_segment(t0, t1)
    if len(ibis):
        log.warning("no HR sample in [%g, %g), using %d IBIs", t0, t1, len(ibis))
        return 60.0 / float(np.mean(ibis))
    return None


class Pair(TypedDict):
    window_id: int
    reference: float
    extracted: float
    corrected: NotRequired[float]


class WindowCorrelation(TypedDict):
    window_id: int
    pearson: float
    spearman: float


def _mean_sd(values: Sequence[float]) -> Dict[str, object]:
    if not values:
        return {"mean": None, "sd": None, "n": 0}
    data = np.asarray(values, dtype=np.float64)
    return {
        "mean": json_float(np.mean(data)),
        "sd": json_float(np.std(data)) if np.all(np.isfinite(data)) else "nan",
        "n": len(data),
    }


class EvaluationReport:
    """Paired pulse rates of one variant and everything derived from them."""

    def __init__(
        self,
        variant: Variant,
        diff_sign: DiffSign = DiffSign.EXTRACTED_MINUS_REFERENCE,
    ):
        """
        :param variant: the SCLI variant the extracted rates come from
        :param diff_sign: sign convention of the differences
        """
        self.variant = variant
        self.diff_sign = diff_sign
        self.pairs: List[Pair] = []
        self.waveforms: List[WindowCorrelation] = []
        self.snr_reference_db: List[float] = []
        self.snr_video_db: List[float] = []
        self.excluded: List[int] = []
        self.metrics: Optional[ErrorMetrics] = None
        self.self_fit: Optional[LinearCorrection] = None
        self.correction: Optional[LinearCorrection] = None
        self.correction_name: Optional[str] = None
        self.corrected_metrics: Optional[ErrorMetrics] = None

    def __str__(self):
        target = io.StringIO()
        self.tojson(target)
        return target.getvalue()

    def add_pair(self, window_id: int, reference: float, extracted: float):
        self.pairs.append(
            {"window_id": window_id, "reference": reference, "extracted": extracted}
        )

    def add_waveform(self, window_id: int, pearson: float, spearman: float):
        self.waveforms.append(
            {"window_id": window_id, "pearson": pearson, "spearman": spearman}
        )

    def exclude(self, window_id: int):
        self.excluded.append(window_id)

    def references(self) -> np.ndarray:
        return np.array([p["reference"] for p in self.pairs])

    def extracted(self) -> np.ndarray:
        return np.array([p["extracted"] for p in self.pairs])

    def diffs(self) -> np.ndarray:
        return self.diff_sign.diff(self.references(), self.extracted())

    def compute(self):
        """Compute the error metrics and the self-fitted correction."""
        self.pairs.sort(key=lambda p: p["window_id"])
        self.waveforms.sort(key=lambda w: w["window_id"])
        self.metrics = error_metrics(
            [(p["reference"], p["extracted"]) for p in self.pairs]
        )
        if len(np.unique(self.references())) >= 2:
            self.self_fit = fit_linear_correction(
                list(zip(self.references(), self.diffs()))
            )
        else:
            log.warning("a single reference value, no self-fitted correction")
        log.info(
            "%s: %d pairs, MAE %s bpm, RMSE %s bpm",
            self.variant.label,
            len(self.pairs),
            format_float(self.metrics.mae),
            format_float(self.metrics.rmse),
        )

    def apply_correction(self, correction: LinearCorrection, name: str):
        """Correct every extracted rate and compute the corrected metrics."""
        self.correction = correction
        self.correction_name = name
        for pair in self.pairs:
            pair["corrected"] = apply_linear_correction(
                pair["extracted"], pair["reference"], correction, self.diff_sign
            )
        self.corrected_metrics = error_metrics(
            [(p["reference"], p["corrected"]) for p in self.pairs]
        )

    def corrected_diffs(self) -> np.ndarray:
        corrected = np.array([p.get("corrected", np.nan) for p in self.pairs])
        return self.diff_sign.diff(self.references(), corrected)

    def todict(self) -> dict:
        if self.metrics is None:
            self.compute()
        content = {
            "variant": self.variant.value,
            "diff_sign": self.diff_sign.value,
            "n_pairs": len(self.pairs),
            "excluded_windows": sorted(self.excluded),
            "pairs": [
                {
                    "window_id": p["window_id"],
                    "reference_bpm": json_float(p["reference"]),
                    "extracted_bpm": json_float(p["extracted"]),
                    "ae": json_float(ae),
                }
                for p, ae in zip(self.pairs, self.metrics.ae)
            ],
            "metrics": self.metrics.todict(),
            "pearson": _mean_sd([w["pearson"] for w in self.waveforms])["mean"],
            "spearman": _mean_sd([w["spearman"] for w in self.waveforms])["mean"],
            "waveform_correlations": [
                {
                    "window_id": w["window_id"],
                    "pearson": json_float(w["pearson"]),
                    "spearman": json_float(w["spearman"]),
                }
                for w in self.waveforms
            ],
            "snr_reference_db": _mean_sd(self.snr_reference_db),
            "snr_video_db": _mean_sd(self.snr_video_db),
            "self_fit": None,
            "correction": None,
        }
        if self.self_fit is not None:
            content["self_fit"] = {"a": self.self_fit.a, "b": self.self_fit.b}
        if self.correction is not None and self.corrected_metrics is not None:
            content["correction"] = {
                "name": self.correction_name,
                "a": self.correction.a,
                "b": self.correction.b,
                "metrics": self.corrected_metrics.todict(),
            }
            for row, pair, ae in zip(
                content["pairs"], self.pairs, self.corrected_metrics.ae
            ):
                row["corrected_bpm"] = json_float(pair["corrected"])
                row["corrected_ae"] = json_float(ae)
        return content

    def tojson(self, target=sys.stdout):
        """Write the full report.

        :param target: opened file pointer where the report will be written
        """
        json.dump(self.todict(), target, sort_keys=True, indent=2)
        target.write("\n")

    def tocsv(self, target=sys.stdout):
        """Per-window pairs and absolute errors."""
        if self.metrics is None:
            self.compute()
        writer = csv.writer(target, lineterminator="\n")
        header = ["window_id", "reference_bpm", "extracted_bpm", "ae"]
        corrected = self.corrected_metrics is not None
        if corrected:
            header += ["corrected_bpm", "corrected_ae"]
        writer.writerow(header)
        for index, pair in enumerate(self.pairs):
            row = [
                pair["window_id"],
                format_float(pair["reference"]),
                format_float(pair["extracted"]),
                format_float(self.metrics.ae[index]),
            ]
            if corrected:
                row += [
                    format_float(pair["corrected"]),
                    format_float(self.corrected_metrics.ae[index]),
                ]
            writer.writerow(row)

    def toplotcsv(self, target=sys.stdout):
        """(reference, diff, corrected diff) rows, ready for a scatter plot."""
        writer = csv.writer(target, lineterminator="\n")
        writer.writerow(["reference_bpm", "diff_bpm", "corrected_diff_bpm"])
        corrected = self.corrected_diffs()
        for pair, diff, fixed in zip(self.pairs, self.diffs(), corrected):
            writer.writerow(
                [format_float(pair["reference"]), format_float(diff), format_float(fixed)]
            )


def window_bounds(
    window_id: int, video_start: float, spec: WindowSpec
) -> Tuple[float, float]:
    """Reference-clock span [t0, t1) of a window."""
    t0 = video_start + window_id * spec.step_s
    return t0, t0 + spec.length_s


def build_report(
    estimates: Sequence[Tuple[int, float]],
    reference: ReferenceRecord,
    variant: Variant,
    video_start: Optional[float] = None,
    spec: Optional[WindowSpec] = None,
    sclis: Optional[Dict[int, Scli]] = None,
    snr_video_db: Optional[Dict[int, float]] = None,
    filt_cfg: Optional[FilterConfig] = None,
    diff_sign: DiffSign = DiffSign.EXTRACTED_MINUS_REFERENCE,
) -> EvaluationReport:
    """Pair extracted rates with the reference and fill a report.

    :param estimates: (window_id, extracted pulse rate) items; NaN rates
                      (unusable windows) are excluded
    :param reference: the wearable recording
    :param video_start: reference-clock time of the first frame, the BVP
                        start by default
    :param sclis: SCLIs by window id, for waveform correlations
    :param snr_video_db: video SNR by window id
    """
    spec = spec or WindowSpec()
    filt_cfg = filt_cfg or FilterConfig()
    if video_start is None:
        video_start = reference.bvp.start
    report = EvaluationReport(variant, diff_sign)
    for window_id, extracted in sorted(estimates):
        t0, t1 = window_bounds(window_id, video_start, spec)
        expected = reference_pr(reference, t0, t1)
        if expected is None:
            log.warning("window %d: no reference coverage, excluded", window_id)
            report.exclude(window_id)
            continue
        if not math.isfinite(extracted):
            log.warning("window %d: unusable estimate, excluded", window_id)
            report.exclude(window_id)
            continue
        report.add_pair(window_id, expected, extracted)
        bvp = reference.bvp_segment(t0, t1)
        if len(bvp) > filt_cfg.padlen:
            report.snr_reference_db.append(snr_reference(bvp, reference.fs_bvp, filt_cfg))
        if snr_video_db and window_id in snr_video_db:
            report.snr_video_db.append(snr_video_db[window_id])
        scli = (sclis or {}).get(window_id)
        if scli is not None and len(bvp) >= 3:
            upsampled = resample_cubic(scli.values, scli.fs, reference.fs_bvp)
            length = min(len(upsampled), len(bvp))
            try:
                report.add_waveform(
                    window_id, *correlations(upsampled[:length], bvp[:length])
                )
            except EvaluationError as e:
                log.warning("window %d: %s", window_id, e)
    if not report.pairs:
        raise EvaluationError("no window could be paired with the reference")
    report.compute()
    return report
