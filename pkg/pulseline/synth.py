"""
Synthetic recordings with a known pulse.

A flat-colored face (static zero-mean texture, dark eyes) on a plain
background is modulated by ``base + amplitude * sin(2 pi f0 t)``. Slow
lighting drift, pixel noise, box jitter and missing detections can be
added. The generated corpus uses the same formats as real inputs: a
``.rgbv`` video, a JSON Lines annotation track, an E4-style reference
directory and a manifest holding the ground truth.
"""

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterator, List, Tuple, TypedDict

import numpy as np

from .ingest import AnnotationTrack, dump_annotations, write_rgbv
from .tools import Box, PulselineError, format_float

log = logging.getLogger(__name__)

BVP_RATE = 64.0
HR_RATE = 1.0
MAX_DRIFT_FREQ = 0.2
BACKGROUND = (60.0, 60.0, 60.0)
EYE_COLOR = (20.0, 15.0, 15.0)


class SynthError(PulselineError):
    """Synthetic corpus generation error"""

    def __init__(self, msg: str):
        self.msg = msg

    def __str__(self):
        return f"synth error: {self.msg}"


@dataclass(frozen=True)
class SynthSpec:
    width: int = 96
    height: int = 80
    fps: float = 30.0
    duration_s: float = 40.0
    f0: float = 1.2
    modulation_amplitude: Tuple[float, float, float] = (1.0, 2.0, 1.2)
    base_color: Tuple[float, float, float] = (150.0, 110.0, 90.0)
    face_box: Box = Box(24, 12, 48, 56)
    eye_boxes: Tuple[Box, Box] = (Box(8, 14, 12, 6), Box(28, 14, 12, 6))
    drift_amplitude: float = 0.0
    drift_freq: float = 0.05
    pixel_noise_sd: float = 0.0
    texture_sd: float = 3.0
    jitter_px: int = 0
    dropout: float = 0.0
    seed: int = 0
    start_time: float = 1600000000.0

    def __post_init__(self):
        if self.width < 4 or self.height < 4:
            raise ValueError("frames must be at least 4x4 pixels")
        if not self.fps > 0 or not self.duration_s > 0:
            raise ValueError("fps and duration must be positive")
        if not 0.4 <= self.f0 <= 3.0:
            raise ValueError(f"f0 must lie in [0.4, 3.0] Hz, got {self.f0}")
        if not 0 <= self.drift_freq < MAX_DRIFT_FREQ:
            raise ValueError(
                f"drift frequency must lie in [0, {MAX_DRIFT_FREQ}) Hz, got {self.drift_freq}"
            )
        if self.pixel_noise_sd < 0 or self.texture_sd < 0 or self.jitter_px < 0:
            raise ValueError("noise, texture and jitter must be non-negative")
        if not 0 <= self.dropout < 1:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")
        face = self.face_box
        if face.w < 2 or face.h < 2 or not face.is_valid():
            raise ValueError(f"invalid face box {list(face)}")
        margin = self.jitter_px
        if (
            face.x < margin
            or face.y < margin
            or not Box(face.x, face.y, face.w + margin, face.h + margin).fits_in(
                self.width, self.height
            )
        ):
            raise ValueError("face box (plus jitter) does not fit in the frame")
        for eye in self.eye_boxes:
            if not eye.is_valid() or not eye.fits_in(face.w, face.h):
                raise ValueError(f"eye box {list(eye)} outside the face box")

    @property
    def frame_count(self) -> int:
        return int(round(self.duration_s * self.fps))

    @property
    def pr_bpm(self) -> float:
        return 60.0 * self.f0

    def pulse(self, t: np.ndarray) -> np.ndarray:
        return np.sin(2 * np.pi * self.f0 * t)

    def drift(self, t: np.ndarray) -> np.ndarray:
        return self.drift_amplitude * np.sin(2 * np.pi * self.drift_freq * t)

    def echo(self) -> dict:
        content = asdict(self)
        content["face_box"] = list(self.face_box)
        content["eye_boxes"] = [list(b) for b in self.eye_boxes]
        content["modulation_amplitude"] = list(self.modulation_amplitude)
        content["base_color"] = list(self.base_color)
        return content


class Manifest(TypedDict):
    pr_bpm: float
    f0: float
    spec: dict
    frames: str
    annotations: str
    reference: str
    start_time: float
    initial_face: List[int]
    initial_eyes: List[List[int]]


@dataclass
class _Layout:
    """Random draws of a spec, in a fixed order."""

    texture: np.ndarray
    offsets: np.ndarray
    detected: np.ndarray
    rng: np.random.Generator = field(repr=False)


def face_mask(spec: SynthSpec) -> np.ndarray:
    """Boolean (h, w) mask of the face pixels outside the eyes."""
    face = spec.face_box
    mask = np.ones((face.h, face.w), dtype=bool)
    for eye in spec.eye_boxes:
        mask[eye.y : eye.y + eye.h, eye.x : eye.x + eye.w] = False
    return mask


def _layout(spec: SynthSpec) -> _Layout:
    rng = np.random.default_rng(spec.seed)
    face = spec.face_box
    mask = face_mask(spec)
    texture = rng.normal(0.0, 1.0, size=(face.h, face.w, 3)) * spec.texture_sd
    texture[~mask] = 0
    # zero mean over the skin pixels, per channel
    texture[mask] -= texture[mask].mean(axis=0)
    count = spec.frame_count
    if spec.jitter_px:
        offsets = rng.integers(-spec.jitter_px, spec.jitter_px + 1, size=(count, 2))
    else:
        offsets = np.zeros((count, 2), dtype=int)
    detected = rng.random(count) >= spec.dropout
    detected[0] = True
    return _Layout(texture, offsets, detected, rng)


def frame_boxes(spec: SynthSpec, offsets: np.ndarray) -> List[Box]:
    face = spec.face_box
    return [Box(face.x + int(dx), face.y + int(dy), face.w, face.h) for dx, dy in offsets]


def _iter_frames(spec: SynthSpec, layout: _Layout) -> Iterator[np.ndarray]:
    mask = face_mask(spec)
    base = np.asarray(spec.base_color, dtype=np.float64)
    amplitude = np.asarray(spec.modulation_amplitude, dtype=np.float64)
    eye_color = np.asarray(EYE_COLOR, dtype=np.float64)
    boxes = frame_boxes(spec, layout.offsets)
    face = spec.face_box
    for index in range(spec.frame_count):
        t = index / spec.fps
        frame = np.empty((spec.height, spec.width, 3), dtype=np.float64)
        frame[:] = BACKGROUND
        patch = np.empty((face.h, face.w, 3), dtype=np.float64)
        patch[mask] = base + amplitude * spec.pulse(t)
        patch[~mask] = eye_color
        patch += layout.texture
        box = boxes[index]
        frame[box.y : box.y + box.h, box.x : box.x + box.w] = patch
        frame += spec.drift(t)
        if spec.pixel_noise_sd:
            frame += layout.rng.normal(0.0, spec.pixel_noise_sd, size=frame.shape)
        yield frame


def render_frames(spec: SynthSpec) -> np.ndarray:
    """Unquantized (count, height, width, 3) frames."""
    return np.stack(list(_iter_frames(spec, _layout(spec))))


def _write_series(path: str, start: float, rate: float, values: np.ndarray):
    with open(path, "w", encoding="utf-8") as fp:
        fp.write("%.6f\n%.6f\n" % (start, rate))
        for value in values:
            fp.write(format_float(value) + "\n")


def write_reference(spec: SynthSpec, dirname: str):
    """E4-style BVP.csv, HR.csv and IBI.csv of the embedded pulse."""
    os.makedirs(dirname, exist_ok=True)
    bvp_count = int(np.floor(spec.duration_s * BVP_RATE))
    _write_series(
        os.path.join(dirname, "BVP.csv"),
        spec.start_time,
        BVP_RATE,
        spec.pulse(np.arange(bvp_count) / BVP_RATE),
    )
    hr_count = int(np.floor(spec.duration_s * HR_RATE))
    _write_series(
        os.path.join(dirname, "HR.csv"),
        spec.start_time,
        HR_RATE,
        np.full(hr_count, spec.pr_bpm),
    )
    interval = 1.0 / spec.f0
    with open(os.path.join(dirname, "IBI.csv"), "w", encoding="utf-8") as fp:
        fp.write("%.6f, IBI\n" % spec.start_time)
        for beat in range(1, int(np.floor(spec.duration_s * spec.f0)) + 1):
            fp.write("%.6f,%.6f\n" % (beat * interval, interval))


def generate(spec: SynthSpec, out_dir: str) -> Manifest:
    """Write a complete synthetic corpus under ``out_dir``.

    :return: the manifest, also written to ``manifest.json``
    """
    try:
        os.makedirs(out_dir, exist_ok=True)
        layout = _layout(spec)
        frames = np.empty((spec.frame_count, spec.height, spec.width, 3), dtype=np.uint8)
        for index, frame in enumerate(_iter_frames(spec, layout)):
            frames[index] = np.rint(np.clip(frame, 0, 255))
        frames_path = write_rgbv(
            os.path.join(out_dir, "frames.rgbv"), frames, spec.fps, spec.start_time
        )

        boxes = frame_boxes(spec, layout.offsets)
        records = tuple(
            {"frame": index, "faces": [box], "eyes": list(spec.eye_boxes)}
            for index, box in enumerate(boxes)
            if layout.detected[index]
        )
        annotations_path = os.path.join(out_dir, "annotations.jsonl")
        with open(annotations_path, "w", encoding="utf-8") as fp:
            dump_annotations(AnnotationTrack(records), fp)

        reference_path = os.path.join(out_dir, "e4")
        write_reference(spec, reference_path)

        manifest: Manifest = {
            "pr_bpm": spec.pr_bpm,
            "f0": spec.f0,
            "spec": spec.echo(),
            "frames": os.path.basename(frames_path),
            "annotations": os.path.basename(annotations_path),
            "reference": os.path.basename(reference_path),
            "start_time": spec.start_time,
            "initial_face": list(boxes[0]),
            "initial_eyes": [list(b) for b in spec.eye_boxes],
        }
        with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fp:
            json.dump(manifest, fp, sort_keys=True, indent=2)
            fp.write("\n")
    except OSError as e:
        raise SynthError(f"cannot write corpus in {out_dir}: {e}")
    log.info(
        "synthetic corpus in %s: %d frames, %s bpm",
        out_dir,
        spec.frame_count,
        format_float(spec.pr_bpm),
    )
    return manifest


def load_manifest(path: str) -> Dict:
    """Read ``manifest.json`` (path to the file or to its directory)."""
    if os.path.isdir(path):
        path = os.path.join(path, "manifest.json")
    try:
        with open(path, "r", encoding="utf-8") as fp:
            return json.load(fp)
    except (OSError, json.JSONDecodeError) as e:
        raise SynthError(f"unreadable manifest {path}: {e}")
