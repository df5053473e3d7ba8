"""
Pipeline stage commands.

Every stage of the command line front end is represented by a class
inheriting from :class:`Command`. A command declares its flags in
``args_definition`` and implements :meth:`Command.execute`, which reads
the files produced by the previous stage, writes its own under ``--out``
and returns a JSON-serializable summary.

Known commands:
 * synth : synthetic corpus with a known pulse
 * roi : masked 104x104 face video
 * extract : SCLI of every window (B.EVM and/or A.EVM)
 * estimate : pulse rate of every SCLI
 * calibrate : moving-average width search
 * evaluate : comparison with a reference recording
 * stats : group comparison battery
 * magnify : magnified video export
 * pipeline : roi, extract, calibrate, estimate and evaluate chained

"""

import argparse
import csv
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, TypedDict

import numpy as np
from typing_extensions import NotRequired

from . import evaluation, stats, synth
from .evm import EvmConfig, magnify
from .ingest import (
    AnnotationTrack,
    ParseError,
    load_annotations,
    load_e4_reference,
    load_frame_sequence,
)
from .pulse import (
    CalibrationFailed,
    PeakConfig,
    calibrate_smoothing,
    estimate_pulse,
    read_pulse_csv,
    write_pulse_csv,
)
from .roi import EyePair, RoiVideo, build_roi_video, load_roi_video, resolve_eyes, save_roi_video
from .scli import (
    FilterConfig,
    Scli,
    Variant,
    filtered_rgb,
    read_scli,
    scli_from_rgb,
    write_scli,
)
from .tools import Box, PulselineError, json_float, parse_box_list, round_half_up, to_box
from .window import WindowSpec, segment

log = logging.getLogger(__name__)

VARIANT_CHOICES = ["b_evm", "a_evm", "both"]
CORRECTION_CHOICES = ["none", "self-fit", "preset-paper", "preset-faros"]
EXTRACT_SUMMARY = "extract.json"


class CommandError(PulselineError):
    """Base command exception class."""


class UnknownCommand(CommandError):
    """Specific exception raised when an unknown command is encountered"""

    def __init__(self, name: str):
        self.name = name

    def __str__(self):
        return "unknown command '%s'" % self.name


class BadValue(CommandError):
    """Specific exception raised when a bad argument value is encountered"""

    def __init__(self, argument, value):
        self.argument = argument
        self.value = value

    def __str__(self):
        return "bad value %s for argument %s" % (self.value, self.argument)


class CommandArg(TypedDict):
    """Type definition for command argument."""

    name: str
    help: str
    type: NotRequired[Callable]
    default: NotRequired[Any]
    required: NotRequired[bool]
    action: NotRequired[str]
    choices: NotRequired[List[str]]
    nargs: NotRequired[str]


# Arguments shared by several commands
out: CommandArg = {"name": "--out", "help": "output directory", "required": True}
jobs: CommandArg = {
    "name": "--jobs",
    "type": int,
    "help": "worker threads (default: number of processors)",
}
fps: CommandArg = {
    "name": "--fps",
    "type": float,
    "help": "frame rate used when the video sidecar gives none",
}
variant: CommandArg = {
    "name": "--variant",
    "choices": VARIANT_CHOICES,
    "default": "both",
    "help": "SCLI variant(s) to process",
}
frames: CommandArg = {"name": "--frames", "help": "frame directory or .rgbv file"}
annotations: CommandArg = {"name": "--annotations", "help": "JSON Lines annotations"}
manifest: CommandArg = {
    "name": "--manifest",
    "help": "synthetic corpus manifest (file or directory)",
}
initial_face: CommandArg = {
    "name": "--initial-face",
    "help": "face box of the first frame: x,y,w,h",
}
initial_eyes: CommandArg = {
    "name": "--initial-eyes",
    "help": "eye boxes of the first frame, face-local: x,y,w,h;x,y,w,h",
}
roi: CommandArg = {"name": "--roi", "help": "roi video written by the roi command"}
scli: CommandArg = {"name": "--scli", "nargs": "+", "help": "SCLI files or directories"}
required_scli: CommandArg = {**scli, "required": True}  # type: ignore[misc]
reference: CommandArg = {"name": "--reference", "help": "E4 recording directory"}
video_start: CommandArg = {
    "name": "--video-start",
    "type": float,
    "help": "reference-clock time of the first frame (UTC seconds)",
}
window_args: List[CommandArg] = [
    {"name": "--window-s", "type": float, "help": "window length (s), 30 by default"},
    {"name": "--step-s", "type": float, "help": "window step (s), 10 by default"},
]
band_args: List[CommandArg] = [
    {"name": "--f-low", "type": float, "default": 0.4, "help": "low cutoff (Hz)"},
    {"name": "--f-high", "type": float, "default": 3.0, "help": "high cutoff (Hz)"},
]
evm_args: List[CommandArg] = [
    {"name": "--alpha", "type": float, "default": 20.0, "help": "amplification"},
    {"name": "--pyramid-steps", "type": int, "default": 3, "help": "pyramid depth"},
]
outlier_args: List[CommandArg] = [
    {
        "name": "--upper-only-outliers",
        "action": "store_true",
        "help": "only clamp upper outliers",
    },
]
peak_shape_args: List[CommandArg] = [
    {"name": "--prominence", "type": float, "default": 0.15, "help": "peak prominence"},
    {
        "name": "--min-distance-ms",
        "type": float,
        "default": 330.0,
        "help": "minimum peak spacing (ms)",
    },
]
smooth: CommandArg = {
    "name": "--smooth-ms",
    "type": float,
    "help": "moving-average width (ms), 400 for B.EVM and 433 for A.EVM by default",
}
correction: CommandArg = {
    "name": "--correction",
    "choices": CORRECTION_CHOICES,
    "default": "none",
    "help": "linear-fit correction applied to the extracted rates",
}
diff_sign: CommandArg = {
    "name": "--diff-sign",
    "choices": [s.value for s in evaluation.DiffSign],
    "default": evaluation.DiffSign.EXTRACTED_MINUS_REFERENCE.value,
    "help": "sign convention of the differences",
}


@dataclass(frozen=True)
class RunConfig:
    """Stage parameters, defaults overridden by command line flags."""

    variant: str = "both"
    evm: EvmConfig = field(default_factory=EvmConfig)
    filter: FilterConfig = field(default_factory=FilterConfig)
    window: WindowSpec = field(default_factory=WindowSpec)
    smooth_ms: Optional[float] = None
    prominence: float = 0.15
    min_distance_ms: float = 330.0
    correction: str = "none"
    diff_sign: evaluation.DiffSign = evaluation.DiffSign.EXTRACTED_MINUS_REFERENCE
    out: str = "."
    jobs: int = 1

    def __post_init__(self):
        if self.variant not in VARIANT_CHOICES:
            raise ValueError(f"unknown variant {self.variant}")
        if self.correction not in CORRECTION_CHOICES:
            raise ValueError(f"unknown correction {self.correction}")
        if self.jobs < 1:
            raise ValueError(f"jobs must be >= 1, got {self.jobs}")
        # Raises ValueError on out of range values
        self.peak_config(Variant.B_EVM)

    @classmethod
    def from_args(cls, args: argparse.Namespace) -> "RunConfig":
        def get(name: str, default):
            value = getattr(args, name, None)
            return default if value is None else value

        try:
            f_low, f_high = get("f_low", 0.4), get("f_high", 3.0)
            return cls(
                variant=get("variant", "both"),
                evm=EvmConfig(
                    alpha=get("alpha", 20.0),
                    f_low=f_low,
                    f_high=f_high,
                    pyramid_steps=get("pyramid_steps", 3),
                ),
                filter=FilterConfig(
                    f_low=f_low,
                    f_high=f_high,
                    upper_only_outliers=get("upper_only_outliers", False),
                ),
                window=WindowSpec(get("window_s", 30.0), get("step_s", 10.0)),
                smooth_ms=getattr(args, "smooth_ms", None),
                prominence=get("prominence", 0.15),
                min_distance_ms=get("min_distance_ms", 330.0),
                correction=get("correction", "none"),
                diff_sign=evaluation.DiffSign(
                    get("diff_sign", evaluation.DiffSign.EXTRACTED_MINUS_REFERENCE)
                ),
                out=get("out", "."),
                jobs=get("jobs", os.cpu_count() or 1),
            )
        except ValueError as e:
            raise BadValue("configuration", e)

    def variants(self) -> List[Variant]:
        if self.variant == "both":
            return [Variant.B_EVM, Variant.A_EVM]
        return [Variant(self.variant)]

    def peak_config(self, variant: Variant, smooth_ms: Optional[float] = None) -> PeakConfig:
        """Peak detection parameters of ``variant``.

        :param smooth_ms: calibrated width, used unless --smooth-ms is given
        """
        if self.smooth_ms is not None:
            smooth_ms = self.smooth_ms
        smooth_width = smooth_ms / 1000.0 if smooth_ms is not None else None
        return PeakConfig.for_variant(
            variant,
            smooth_width_s=smooth_width,
            prominence=self.prominence,
            min_distance_s=self.min_distance_ms / 1000.0,
        )

    def path(self, name: str) -> str:
        return os.path.join(self.out, name)


def _write_json(path: str, content: dict):
    with open(path, "w", encoding="utf-8") as fp:
        json.dump(content, fp, sort_keys=True, indent=2)
        fp.write("\n")


def _read_json(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fp:
            return json.load(fp)
    except (OSError, json.JSONDecodeError) as e:
        raise CommandError(f"unreadable file {path}: {e}")


def _scli_paths(paths: Sequence[str]) -> List[str]:
    """Expand directories into the SCLI files they contain."""
    result = []
    for path in paths or []:
        if os.path.isdir(path):
            result += sorted(
                os.path.join(path, name)
                for name in os.listdir(path)
                if name.startswith("scli_") and name.endswith(".csv")
            )
        else:
            result.append(path)
    if not result:
        raise CommandError("no SCLI file found")
    return result


def _extract_summaries(paths: Optional[Sequence[str]]) -> List[dict]:
    """extract.json files found next to the given SCLI files."""
    dirs = []
    for path in paths or []:
        dirname = path if os.path.isdir(path) else os.path.dirname(path)
        if dirname not in dirs:
            dirs.append(dirname)
    summaries = []
    for dirname in dirs:
        candidate = os.path.join(dirname, EXTRACT_SUMMARY)
        if os.path.exists(candidate):
            summaries.append(_read_json(candidate))
    return summaries


def extract_window(
    args: argparse.Namespace, summaries: List[dict], default: WindowSpec
) -> WindowSpec:
    """Window geometry used by the extract stage.

    Explicit --window-s/--step-s flags must agree with it; ``default``
    applies when no extract.json was found.
    """
    geometries = {
        (float(content["window_s"]), float(content["step_s"]))
        for content in summaries
        if "window_s" in content and "step_s" in content
    }
    if not geometries:
        return default
    if len(geometries) > 1:
        raise CommandError(f"SCLI files extracted with different windows: {sorted(geometries)}")
    window_s, step_s = geometries.pop()
    for flag, given, used in (
        ("--window-s", getattr(args, "window_s", None), window_s),
        ("--step-s", getattr(args, "step_s", None), step_s),
    ):
        if given is not None and given != used:
            raise CommandError(f"{flag} {given} conflicts with the {used} s used by extract")
    return WindowSpec(window_s, step_s)


def _calibrated_widths(path: Optional[str]) -> Dict[Variant, float]:
    """Moving-average widths (ms) of a calibration.json, by variant."""
    if not path:
        return {}
    content = _read_json(path)
    try:
        return {Variant(name): float(entry["smooth_ms"]) for name, entry in content.items()}
    except (AttributeError, KeyError, TypeError, ValueError):
        raise CommandError(f"{path}: not a calibration file")


class Command:
    """Generic pipeline stage.

    The command name is the class name without the ``Command`` suffix,
    lowercased.
    """

    args_definition: List[CommandArg] = []

    def __init__(self):
        self.name: str = self.__class__.__name__.replace("Command", "").lower()
        self.config = RunConfig()

    def __repr__(self):
        return "%s (command)" % self.name

    @property
    def summary_line(self) -> str:
        return (self.__doc__ or self.name).strip().splitlines()[0]

    def add_arguments(self, parser: argparse.ArgumentParser):
        """Declare ``args_definition`` on an argparse parser."""
        for arg in self.args_definition:
            options = {key: value for key, value in arg.items() if key != "name"}
            parser.add_argument(arg["name"], **options)

    def __call__(self, args: argparse.Namespace) -> dict:
        self.config = RunConfig.from_args(args)
        os.makedirs(self.config.out, exist_ok=True)
        return self.execute(args)

    def execute(self, args: argparse.Namespace) -> dict:
        raise NotImplementedError

    def run_stage(self, name: str, args: argparse.Namespace, **overrides) -> dict:
        """Run another command with some arguments replaced."""
        content = dict(vars(args))
        content.update(overrides)
        return get_command_instance(name)(argparse.Namespace(**content))


def initial_boxes(
    args: argparse.Namespace, track: AnnotationTrack
) -> Tuple[Box, EyePair]:
    """First-frame boxes: command line, then manifest, then the frame 0
    annotation."""
    face: Optional[Box] = None
    eyes: Optional[List[Box]] = None
    try:
        if getattr(args, "initial_face", None):
            face = parse_box_list(args.initial_face)[0]
        if getattr(args, "initial_eyes", None):
            eyes = parse_box_list(args.initial_eyes)
    except (IndexError, ValueError) as e:
        raise BadValue("--initial-face/--initial-eyes", e)
    if getattr(args, "manifest", None) and (face is None or eyes is None):
        content = synth.load_manifest(args.manifest)
        face = face or to_box(content["initial_face"])
        eyes = eyes or [to_box(b) for b in content["initial_eyes"]]
    record = track.get(0)
    if face is None and record is not None and record["faces"]:
        face = max(record["faces"], key=lambda b: b.area)
    if face is None:
        raise CommandError("no initial face box (use --initial-face)")
    if eyes is None and record is not None and record["eyes"]:
        eyes = list(resolve_eyes(record["eyes"], (face, face), face.w))
    if eyes is None or len(eyes) != 2:
        raise CommandError("two initial eye boxes are needed (use --initial-eyes)")
    return face, (eyes[0], eyes[1])


def _corpus_defaults(args: argparse.Namespace) -> Dict[str, str]:
    """Input paths of a synthetic corpus named by --manifest."""
    if not getattr(args, "manifest", None):
        return {}
    dirname = args.manifest if os.path.isdir(args.manifest) else os.path.dirname(args.manifest)
    content = synth.load_manifest(args.manifest)
    return {
        "frames": os.path.join(dirname, content["frames"]),
        "annotations": os.path.join(dirname, content["annotations"]),
        "reference": os.path.join(dirname, content["reference"]),
    }


def load_or_build_roi(args: argparse.Namespace, config: RunConfig) -> RoiVideo:
    if getattr(args, "roi", None):
        return load_roi_video(args.roi)
    defaults = _corpus_defaults(args)
    frames_path = getattr(args, "frames", None) or defaults.get("frames")
    annotations_path = getattr(args, "annotations", None) or defaults.get("annotations")
    if not frames_path or not annotations_path:
        raise CommandError("--roi or --frames and --annotations are required")
    seq = load_frame_sequence(frames_path, getattr(args, "fps", None))
    track = load_annotations(annotations_path, (seq.width, seq.height))
    face, eyes = initial_boxes(args, track)
    return build_roi_video(seq, track, face, eyes, config.jobs)


class SynthCommand(Command):
    """Generate a synthetic corpus with a known pulse."""

    args_definition = [
        out,
        {"name": "--seed", "type": int, "default": 0, "help": "random seed"},
        {"name": "--f0", "type": float, "default": 1.2, "help": "pulse frequency (Hz)"},
        {"name": "--duration", "type": float, "default": 40.0, "help": "seconds"},
        {"name": "--fps", "type": float, "default": 30.0, "help": "frame rate"},
        {"name": "--noise", "type": float, "default": 0.0, "help": "pixel noise SD"},
        {"name": "--drift", "type": float, "default": 0.0, "help": "drift amplitude"},
        {
            "name": "--drift-freq",
            "type": float,
            "default": 0.05,
            "help": "drift frequency (Hz)",
        },
        {"name": "--jitter", "type": int, "default": 0, "help": "box jitter (px)"},
        {
            "name": "--dropout",
            "type": float,
            "default": 0.0,
            "help": "probability of a frame without detection",
        },
    ]

    def execute(self, args):
        try:
            spec = synth.SynthSpec(
                fps=args.fps,
                duration_s=args.duration,
                f0=args.f0,
                drift_amplitude=args.drift,
                drift_freq=args.drift_freq,
                pixel_noise_sd=args.noise,
                jitter_px=args.jitter,
                dropout=args.dropout,
                seed=args.seed,
            )
        except ValueError as e:
            raise BadValue("synth", e)
        return dict(synth.generate(spec, self.config.out))


class RoiCommand(Command):
    """Build the masked 104x104 face video."""

    args_definition = [
        frames,
        annotations,
        manifest,
        initial_face,
        initial_eyes,
        fps,
        out,
        jobs,
    ]

    def execute(self, args):
        video = load_or_build_roi(args, self.config)
        path = save_roi_video(video, self.config.path("roi.rgbv"))
        return {"roi": path, "frames": len(video), "fps": video.fps}


class ExtractCommand(Command):
    """Extract the SCLI of every window."""

    args_definition = (
        [roi, frames, annotations, manifest, initial_face, initial_eyes, fps, variant]
        + window_args
        + band_args
        + evm_args
        + outlier_args
        + [out, jobs]
    )

    def execute(self, args):
        video = load_or_build_roi(args, self.config)
        windows = segment(len(video), video.fps, self.config.window)
        if not windows:
            raise CommandError(
                f"{len(video)} frames, shorter than one {self.config.window.length_s} s window"
            )
        tasks = [
            (window_id, start, end, v)
            for v in self.config.variants()
            for window_id, (start, end) in enumerate(windows)
        ]

        def process(task) -> Tuple[Scli, float]:
            window_id, start, end, v = task
            rgb = filtered_rgb(
                video.window(start, end), v, self.config.evm, self.config.filter
            )
            return (
                scli_from_rgb(rgb, v, window_id, self.config.filter),
                evaluation.snr_video(rgb),
            )

        with ThreadPoolExecutor(max_workers=self.config.jobs) as executor:
            results = list(executor.map(process, tasks))

        entries = []
        for signal, snr in results:
            name = "scli_%s_%04d.csv" % (signal.variant.value, signal.window_id)
            with open(self.config.path(name), "w", encoding="utf-8", newline="") as fp:
                write_scli(signal, fp)
            entries.append(
                {
                    "window_id": signal.window_id,
                    "variant": signal.variant.value,
                    "file": name,
                    "snr_video_db": json_float(snr),
                }
            )
        content = {
            "fps": video.fps,
            "start_time": video.start_time,
            "window_s": self.config.window.length_s,
            "step_s": self.config.window.step_s,
            "windows": entries,
        }
        _write_json(self.config.path(EXTRACT_SUMMARY), content)
        log.info("extracted %d SCLI(s) from %d windows", len(entries), len(windows))
        return {
            "summary": self.config.path(EXTRACT_SUMMARY),
            "windows": len(windows),
            "variants": [v.value for v in self.config.variants()],
        }


class EstimateCommand(Command):
    """Estimate the pulse rate of every SCLI."""

    args_definition = (
        [
            required_scli,
            variant,
            smooth,
            {
                "name": "--calibration",
                "help": "calibration.json written by calibrate (ignored with --smooth-ms)",
            },
        ]
        + peak_shape_args
        + [out, jobs]
    )

    def execute(self, args):
        wanted = self.config.variants()
        signals = [read_scli(path) for path in _scli_paths(args.scli)]
        signals = [s for s in signals if s.variant in wanted]
        if not signals:
            raise CommandError("no SCLI of the requested variant")
        widths = _calibrated_widths(getattr(args, "calibration", None))
        try:
            configs = {v: self.config.peak_config(v, widths.get(v)) for v in wanted}
        except ValueError as e:
            raise CommandError(f"{args.calibration}: {e}")
        for fs in sorted({s.fs for s in signals}):
            for cfg in configs.values():
                try:
                    cfg.check_rate(fs)
                except ValueError as e:
                    raise BadValue("--smooth-ms", e)
        with ThreadPoolExecutor(max_workers=self.config.jobs) as executor:
            estimates = list(
                executor.map(lambda s: estimate_pulse(s, configs[s.variant]), signals)
            )
        path = self.config.path("pulse.csv")
        with open(path, "w", encoding="utf-8", newline="") as fp:
            write_pulse_csv(estimates, fp)
        return {
            "pulse": path,
            "windows": len(estimates),
            "usable": sum(1 for e in estimates if e.usable),
            "smooth_ms": {
                v.value: json_float(cfg.smooth_width_s * 1000.0) for v, cfg in configs.items()
            },
        }


def _video_start(args: argparse.Namespace, summaries: List[dict]) -> Optional[float]:
    if getattr(args, "video_start", None) is not None:
        return args.video_start
    for content in summaries:
        if content.get("start_time") is not None:
            return float(content["start_time"])
    return None


class CalibrateCommand(Command):
    """Search the moving-average width matching the reference best."""

    args_definition = (
        [required_scli, reference, video_start, variant]
        + window_args
        + peak_shape_args
        + [out, jobs]
    )

    def execute(self, args):
        if not args.reference:
            raise CommandError("--reference is required")
        record = load_e4_reference(args.reference)
        summaries = _extract_summaries(args.scli)
        window = extract_window(args, summaries, self.config.window)
        start = _video_start(args, summaries)
        if start is None:
            start = record.bvp.start
        signals = [read_scli(path) for path in _scli_paths(args.scli)]
        shape = PeakConfig(
            prominence=self.config.prominence,
            min_distance_s=self.config.min_distance_ms / 1000.0,
        )
        results = {}
        for v in self.config.variants():
            dataset = []
            for signal in (s for s in signals if s.variant is v):
                t0, t1 = evaluation.window_bounds(signal.window_id, start, window)
                expected = evaluation.reference_pr(record, t0, t1)
                if expected is not None:
                    dataset.append((signal, expected))
            if not dataset:
                continue
            width = calibrate_smoothing(dataset, shape, self.config.jobs)
            results[v.value] = {
                "smooth_ms": json_float(width * 1000.0),
                "samples": round_half_up(width * dataset[0][0].fs),
                "items": len(dataset),
            }
        if not results:
            raise CommandError("no SCLI could be paired with the reference")
        _write_json(self.config.path("calibration.json"), results)
        return results


class EvaluateCommand(Command):
    """Compare the extracted pulse rates with a reference recording."""

    args_definition = (
        [
            {"name": "--pulse", "required": True, "help": "pulse CSV"},
            reference,
            scli,
            video_start,
            variant,
            correction,
            diff_sign,
        ]
        + window_args
        + band_args
        + [out]
    )

    def resolve_correction(
        self, report: evaluation.EvaluationReport
    ) -> Optional[evaluation.LinearCorrection]:
        name = self.config.correction
        if name == "none":
            return None
        if name == "self-fit":
            if report.self_fit is None:
                raise CommandError("self-fit correction needs two distinct reference rates")
            return report.self_fit
        return evaluation.preset_correction(name, report.variant)

    def execute(self, args):
        if not args.reference:
            raise CommandError("--reference is required")
        rows = read_pulse_csv(args.pulse)
        record = load_e4_reference(args.reference)
        summaries = _extract_summaries(getattr(args, "scli", None))
        window = extract_window(args, summaries, self.config.window)
        start = _video_start(args, summaries)
        signals: Dict[Tuple[Variant, int], Scli] = {}
        if getattr(args, "scli", None):
            for path in _scli_paths(args.scli):
                signal = read_scli(path)
                signals[(signal.variant, signal.window_id)] = signal
        snrs: Dict[Tuple[Variant, int], float] = {}
        for content in summaries:
            for entry in content.get("windows", []):
                snrs[(Variant(entry["variant"]), entry["window_id"])] = float(
                    entry["snr_video_db"]
                )

        result = {}
        for v in self.config.variants():
            estimates = [(r["window_id"], r["pr_bpm"]) for r in rows if r["variant"] is v]
            if not estimates:
                continue
            report = evaluation.build_report(
                estimates,
                record,
                v,
                video_start=start,
                spec=window,
                sclis={wid: s for (sv, wid), s in signals.items() if sv is v},
                snr_video_db={wid: s for (sv, wid), s in snrs.items() if sv is v},
                filt_cfg=self.config.filter,
                diff_sign=self.config.diff_sign,
            )
            fix = self.resolve_correction(report)
            if fix is not None:
                report.apply_correction(fix, self.config.correction)
            with open(self.config.path(f"report_{v.value}.json"), "w", encoding="utf-8") as fp:
                report.tojson(fp)
            with open(
                self.config.path(f"pairs_{v.value}.csv"), "w", encoding="utf-8", newline=""
            ) as fp:
                report.tocsv(fp)
            with open(
                self.config.path(f"plot_{v.value}.csv"), "w", encoding="utf-8", newline=""
            ) as fp:
                report.toplotcsv(fp)
            content = report.todict()
            result[v.value] = {
                "report": self.config.path(f"report_{v.value}.json"),
                "n_pairs": content["n_pairs"],
                "metrics": content["metrics"],
                "correction": content["correction"],
            }
        if not result:
            raise CommandError("no pulse estimate of the requested variant")
        return result


@dataclass
class Recording:
    """Window rates of one recording, read from a pulse CSV, a pairs CSV
    or an evaluation report."""

    path: str
    extracted: List[float]
    reference: Optional[List[float]] = None
    variant: Optional[Variant] = None
    diff_sign: Optional[evaluation.DiffSign] = None

    @property
    def is_report(self) -> bool:
        return self.diff_sign is not None

    def corrected(self, fix: evaluation.LinearCorrection) -> List[float]:
        return [
            evaluation.apply_linear_correction(e, r, fix, self.diff_sign)
            for r, e in zip(self.reference, self.extracted)
        ]


def _read_rate_csv(path: str) -> Recording:
    """Pulse CSV (pr_bpm) or pairs CSV (extracted_bpm, reference_bpm)."""
    with open(path, "r", encoding="utf-8", newline="") as fp:
        reader = csv.DictReader(fp)
        fields = reader.fieldnames or []
        column = next((c for c in ("pr_bpm", "extracted_bpm") if c in fields), None)
        if column is None:
            raise CommandError(f"{path}: no pr_bpm or extracted_bpm column")
        with_reference = "reference_bpm" in fields
        extracted, reference = [], []
        for row in reader:
            try:
                extracted.append(float(row[column]))
                if with_reference:
                    reference.append(float(row["reference_bpm"]))
            except (TypeError, ValueError):
                raise ParseError(f"bad rate in row {row}", path, reader.line_num)
    return Recording(path, extracted, reference if with_reference else None)


def _read_report(path: str) -> Recording:
    content = _read_json(path)
    try:
        pairs = [(float(p["reference_bpm"]), float(p["extracted_bpm"])) for p in content["pairs"]]
        return Recording(
            path,
            [e for _, e in pairs],
            [r for r, _ in pairs],
            Variant(content["variant"]),
            evaluation.DiffSign(content["diff_sign"]),
        )
    except (KeyError, TypeError, ValueError):
        raise CommandError(f"{path}: not an evaluation report")


def read_recording(path: str) -> Recording:
    if path.endswith(".json"):
        return _read_report(path)
    return _read_rate_csv(path)


class StatsCommand(Command):
    """Compare two groups of pulse rates.

    Every input file is one recording, summarized by its mean pulse rate
    unless --pool-windows is given. When every input is an evaluation
    report, the comparison is repeated on rates corrected by the pooled
    self-fit (p.f.) and by the Faros preset (p.f.f.). Reference rates are
    compared too when the inputs carry them.
    """

    args_definition = [
        {
            "name": "--group-a",
            "nargs": "+",
            "required": True,
            "help": "pulse/pairs CSV files or evaluation reports, one per recording",
        },
        {
            "name": "--group-b",
            "nargs": "+",
            "required": True,
            "help": "pulse/pairs CSV files or evaluation reports, one per recording",
        },
        {"name": "--welch", "action": "store_true", "help": "Welch's t-test"},
        {
            "name": "--pool-windows",
            "action": "store_true",
            "help": "compare every window rate instead of one mean per recording",
        },
        out,
    ]

    def summarize(self, recordings: Sequence[Sequence[float]]) -> List[float]:
        if self.pool_windows:
            return [v for values in recordings for v in values if np.isfinite(v)]
        return stats.recording_means(recordings)

    def execute(self, args):
        self.pool_windows = args.pool_windows
        group_a = [read_recording(path) for path in args.group_a]
        group_b = [read_recording(path) for path in args.group_b]
        if all(r.is_report for r in group_a + group_b):
            content = self.table(group_a, group_b, args.welch)
        else:
            content = {
                "p": stats.compare_groups(
                    self.summarize([r.extracted for r in group_a]),
                    self.summarize([r.extracted for r in group_b]),
                    args.welch,
                ).todict()
            }
        content["reference"] = self.compare_references(group_a, group_b, args.welch)
        content["n_a"] = len(self.summarize([r.extracted for r in group_a]))
        content["n_b"] = len(self.summarize([r.extracted for r in group_b]))
        content["unit"] = "window" if self.pool_windows else "recording"
        _write_json(self.config.path("stats.json"), content)
        return content

    def table(self, group_a: List[Recording], group_b: List[Recording], welch: bool) -> dict:
        """p, p.f. and p.f.f. columns from evaluation reports."""
        recordings = group_a + group_b
        self_fit = evaluation.fit_linear_correction(
            [
                (ref, r.diff_sign.diff(ref, ext))
                for r in recordings
                for ref, ext in zip(r.reference, r.extracted)
            ]
        )

        def versions(group: List[Recording]) -> List[List[float]]:
            return [
                self.summarize([r.extracted for r in group]),
                self.summarize([r.corrected(self_fit) for r in group]),
                self.summarize(
                    [
                        r.corrected(evaluation.preset_correction("preset-faros", r.variant))
                        for r in group
                    ]
                ),
            ]

        row = stats.table_row(versions(group_a), versions(group_b), welch)
        content = {column: comparison.todict() for column, comparison in row.items()}
        content["self_fit"] = {"a": self_fit.a, "b": self_fit.b}
        return content

    def compare_references(
        self, group_a: List[Recording], group_b: List[Recording], welch: bool
    ) -> Optional[dict]:
        """Same comparison on the reference pulse rates, None without them."""
        if any(r.reference is None for r in group_a + group_b):
            return None
        try:
            return stats.compare_groups(
                self.summarize([r.reference for r in group_a]),
                self.summarize([r.reference for r in group_b]),
                welch,
            ).todict()
        except stats.StatsError as e:
            log.warning("reference rates not compared: %s", e)
            return None


class MagnifyCommand(Command):
    """Export a magnified roi video (clamped to 8 bits)."""

    args_definition = (
        [
            roi,
            {
                "name": "--window-id",
                "type": int,
                "help": "only magnify this window (whole video by default)",
            },
        ]
        + window_args
        + band_args
        + evm_args
        + [out, jobs]
    )

    def execute(self, args):
        if not args.roi:
            raise CommandError("--roi is required")
        video = load_roi_video(args.roi)
        if args.window_id is not None:
            windows = segment(len(video), video.fps, self.config.window)
            if not 0 <= args.window_id < len(windows):
                raise BadValue("--window-id", args.window_id)
            video = video.window(*windows[args.window_id])
        boosted = magnify(video, self.config.evm, workers=self.config.jobs)
        path = save_roi_video(boosted, self.config.path("magnified.rgbv"))
        return {"magnified": path, "frames": len(boosted)}


class PipelineCommand(Command):
    """Chain roi, extract, calibrate, estimate and evaluate.

    The moving-average width is calibrated against the reference before
    estimation unless --smooth-ms or --no-calibration is given; the
    per-variant defaults apply when calibration is skipped or fails.
    """

    args_definition = (
        [frames, annotations, manifest, reference, initial_face, initial_eyes, fps]
        + [variant, video_start, correction, diff_sign, smooth]
        + [
            {
                "name": "--no-calibration",
                "action": "store_true",
                "help": "estimate with the default moving-average widths",
            }
        ]
        + window_args
        + band_args
        + evm_args
        + outlier_args
        + peak_shape_args
        + [out, jobs]
    )

    def calibrate(self, args, reference_path: str) -> Optional[dict]:
        if args.smooth_ms is not None or args.no_calibration:
            return None
        try:
            return self.run_stage(
                "calibrate",
                args,
                scli=[self.config.path("extract")],
                reference=reference_path,
                out=self.config.path("calibrate"),
            )
        except (CalibrationFailed, CommandError) as e:
            log.warning("calibration skipped, default widths used: %s", e)
            return None

    def execute(self, args):
        defaults = _corpus_defaults(args)
        reference_path = args.reference or defaults.get("reference")
        if not reference_path:
            raise CommandError("--reference or --manifest is required")
        summary = {}
        summary["roi"] = self.run_stage(
            "roi",
            args,
            frames=args.frames or defaults.get("frames"),
            annotations=args.annotations or defaults.get("annotations"),
            out=self.config.path("roi"),
        )
        summary["extract"] = self.run_stage(
            "extract",
            args,
            roi=summary["roi"]["roi"],
            out=self.config.path("extract"),
        )
        summary["calibrate"] = self.calibrate(args, reference_path)
        summary["estimate"] = self.run_stage(
            "estimate",
            args,
            scli=[self.config.path("extract")],
            calibration=(
                self.config.path("calibrate/calibration.json")
                if summary["calibrate"]
                else None
            ),
            out=self.config.path("estimate"),
        )
        summary["evaluate"] = self.run_stage(
            "evaluate",
            args,
            pulse=summary["estimate"]["pulse"],
            reference=reference_path,
            scli=[self.config.path("extract")],
            out=self.config.path("evaluate"),
        )
        return summary


COMMANDS = [
    "synth",
    "roi",
    "extract",
    "estimate",
    "calibrate",
    "evaluate",
    "stats",
    "magnify",
    "pipeline",
]


def add_commands(cmds):
    """Register one or more extra subcommands.

    Class names must end in "Command"; the subcommand name is the lowered
    prefix, e.g. ``ExportCommand`` becomes ``export``.

    :param cmds: a single Command class or a list of them
    """
    if isinstance(cmds, type):
        cmds = [cmds]
    for command in cmds:
        if not command.__name__.endswith("Command") or not issubclass(command, Command):
            raise CommandError("%s is not a Command subclass" % command.__name__)
        globals()[command.__name__] = command
        name = command.__name__[: -len("Command")].lower()
        if name not in COMMANDS:
            COMMANDS.append(name)


def get_command_instance(name: str) -> Command:
    """Try to guess and create the appropriate command instance

    Given a command name, construct the associated class name and, if
    known, return a new instance.

    :param name: the command's name
    :return: a new class instance
    """
    cname = "%sCommand" % name.lower().capitalize()
    gl = globals()
    if cname not in gl or not isinstance(gl[cname], type) or not issubclass(gl[cname], Command):
        raise UnknownCommand(name)
    return gl[cname]()
