"""
Loaders for the pipeline inputs.

Three kinds of artifacts are read from disk and turned into validated,
immutable in-memory structures:

 * frame sequences: a directory of PPM/PNG images, or a raw ``.rgbv``
   container described by a JSON sidecar,
 * per-frame face and eye annotations (JSON Lines), standing in for the
   face/eye detectors,
 * Empatica-E4-style reference recordings (BVP.csv, HR.csv, IBI.csv).

Parsing errors carry the file name and the line number, example::

  annotations.jsonl: line 3: parsing error: duplicate frame index 12

"""

import json
import logging
import os
import sys
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Tuple, TypedDict

import cv2
import numpy as np
from typing_extensions import NotRequired

from .tools import Box, PulselineError, to_box

log = logging.getLogger(__name__)

DEFAULT_FPS = 30.0
IMAGE_SUFFIXES = (".ppm", ".png")
RGBV_SUFFIX = ".rgbv"


class IngestError(PulselineError):
    """Generic loading error"""


class ParseError(IngestError):
    """Malformed content in one of the input files"""

    def __init__(
        self, msg: str, filename: Optional[str] = None, lineno: Optional[int] = None
    ):
        self.msg = msg
        self.filename = filename
        self.lineno = lineno

    def __str__(self):
        prefix = ""
        if self.filename is not None:
            prefix += f"{os.path.basename(self.filename)}: "
        if self.lineno is not None:
            prefix += f"line {self.lineno}: "
        return f"{prefix}parsing error: {self.msg}"


class ReferenceUnavailable(IngestError):
    """Raised when a recording has no usable reference data."""

    def __init__(self, path: str):
        self.path = path

    def __str__(self):
        return f"reference unavailable: no BVP.csv in {self.path}"


class RgbvHeader(TypedDict):
    """Content of a ``.rgbv`` sidecar."""

    width: int
    height: int
    fps: NotRequired[float]
    frame_count: NotRequired[int]
    start_time: NotRequired[float]


class AnnotationRecord(TypedDict):
    """Detections for one frame."""

    frame: int
    faces: List[Box]
    eyes: List[Box]


@dataclass(frozen=True)
class FrameSequence:
    """Decoded RGB frames, stacked as a (count, height, width, 3) float array."""

    frames: np.ndarray
    fps: float = DEFAULT_FPS
    start_time: Optional[float] = None

    def __post_init__(self):
        if self.frames.ndim != 4 or self.frames.shape[3] != 3:
            raise ValueError("frames must be a (count, height, width, 3) array")
        if self.frames.shape[0] < 1:
            raise ValueError("a frame sequence needs at least one frame")
        if not self.fps > 0:
            raise ValueError(f"fps must be positive, got {self.fps}")
        self.frames.flags.writeable = False

    @property
    def count(self) -> int:
        return self.frames.shape[0]

    @property
    def height(self) -> int:
        return self.frames.shape[1]

    @property
    def width(self) -> int:
        return self.frames.shape[2]

    @property
    def duration(self) -> float:
        return self.count / self.fps


@dataclass(frozen=True)
class AnnotationTrack:
    """Annotated frames, ordered by frame index. Missing frames mean
    "nothing detected"."""

    records: Tuple[AnnotationRecord, ...] = ()
    _index: Dict[int, AnnotationRecord] = field(
        init=False, repr=False, compare=False, default_factory=dict
    )

    def __post_init__(self):
        for record in self.records:
            self._index[record["frame"]] = record

    def __len__(self):
        return len(self.records)

    def get(self, frame: int) -> Optional[AnnotationRecord]:
        return self._index.get(frame)


@dataclass(frozen=True)
class TimeSeries:
    """Regularly sampled series anchored to a UTC timestamp."""

    start: float
    rate: float
    values: np.ndarray

    def __post_init__(self):
        if not self.rate > 0:
            raise ValueError(f"sample rate must be positive, got {self.rate}")
        self.values.flags.writeable = False

    def __len__(self):
        return self.values.shape[0]

    def times(self) -> np.ndarray:
        return self.start + np.arange(len(self)) / self.rate

    def segment(self, t0: float, t1: float) -> np.ndarray:
        """Samples whose timestamp lies in [t0, t1)."""
        times = self.times()
        return self.values[(times >= t0) & (times < t1)]


@dataclass(frozen=True)
class ReferenceRecord:
    """Wearable reference: BVP waveform, device PR series and IBIs."""

    bvp: TimeSeries
    hr: Optional[TimeSeries] = None
    ibi_start: Optional[float] = None
    ibi: np.ndarray = field(default_factory=lambda: np.empty((0, 2)))

    @property
    def fs_bvp(self) -> float:
        return self.bvp.rate

    def bvp_times(self) -> np.ndarray:
        return self.bvp.times()

    def hr_times(self) -> np.ndarray:
        if self.hr is None:
            return np.empty(0)
        return self.hr.times()

    def bvp_segment(self, t0: float, t1: float) -> np.ndarray:
        return self.bvp.segment(t0, t1)

    def ibi_segment(self, t0: float, t1: float) -> np.ndarray:
        """Intervals (seconds) whose beat timestamp lies in [t0, t1)."""
        if self.ibi_start is None or not len(self.ibi):
            return np.empty(0)
        times = self.ibi_start + self.ibi[:, 0]
        return self.ibi[(times >= t0) & (times < t1), 1]


def _decode_image(path: str) -> np.ndarray:
    image = cv2.imread(path, cv2.IMREAD_UNCHANGED)
    if image is None:
        raise IngestError(f"unreadable image file {path}")
    if image.dtype != np.uint8 or image.ndim != 3 or image.shape[2] != 3:
        raise IngestError(f"{path} is not an 8-bit RGB image")
    return cv2.cvtColor(image, cv2.COLOR_BGR2RGB)


def _read_sidecar(path: str) -> RgbvHeader:
    try:
        with open(path, "r", encoding="utf-8") as fp:
            header = json.load(fp)
    except OSError as e:
        raise IngestError(f"unreadable sidecar {path}: {e}")
    except json.JSONDecodeError as e:
        raise ParseError(e.msg, path, e.lineno)
    for name in ("width", "height"):
        if not isinstance(header.get(name), int) or header[name] <= 0:
            raise ParseError(f"'{name}' must be a positive integer", path)
    return header


def _sidecar_path(path: str) -> str:
    base = path.rstrip(os.sep)
    if base.endswith(RGBV_SUFFIX):
        base = base[: -len(RGBV_SUFFIX)]
    return base + ".json"


def _load_image_directory(path: str) -> np.ndarray:
    names = sorted(
        name for name in os.listdir(path) if name.lower().endswith(IMAGE_SUFFIXES)
    )
    if not names:
        raise IngestError(f"no frames found in {path}")
    frames = []
    for name in names:
        image = _decode_image(os.path.join(path, name))
        if frames and image.shape != frames[0].shape:
            raise IngestError(
                "inconsistent frame dimensions: %s is %dx%d, expected %dx%d"
                % (
                    name,
                    image.shape[1],
                    image.shape[0],
                    frames[0].shape[1],
                    frames[0].shape[0],
                )
            )
        frames.append(image)
    return np.stack(frames)


def _load_rgbv(path: str, header: RgbvHeader) -> np.ndarray:
    try:
        raw = np.fromfile(path, dtype=np.uint8)
    except OSError as e:
        raise IngestError(f"unreadable file {path}: {e}")
    frame_bytes = header["width"] * header["height"] * 3
    if raw.size % frame_bytes:
        raise IngestError(
            "%s: %d bytes is not a multiple of width*height*3 (%d)"
            % (path, raw.size, frame_bytes)
        )
    count = raw.size // frame_bytes
    if count == 0:
        raise IngestError(f"no frames found in {path}")
    if "frame_count" in header and header["frame_count"] != count:
        raise IngestError(
            "%s: sidecar announces %d frames, %d found"
            % (path, header["frame_count"], count)
        )
    return raw.reshape(count, header["height"], header["width"], 3)


def load_frame_sequence(
    path: str, fps_override: Optional[float] = None
) -> FrameSequence:
    """Load a frame sequence.

    ``path`` is either a directory of lexicographically ordered PPM/PNG
    images or a ``.rgbv`` raw file. The frame rate comes from the
    sidecar (``<name>.json``) when present, otherwise from
    ``fps_override``, otherwise it defaults to 30.

    :param path: directory or ``.rgbv`` file
    :param fps_override: frame rate used when no sidecar provides one
    :return: a FrameSequence with pixel values in [0, 255]
    """
    sidecar = _sidecar_path(path)
    header: Optional[RgbvHeader] = None
    if os.path.isdir(path):
        if os.path.exists(sidecar):
            header = _read_sidecar(sidecar)
        raw = _load_image_directory(path)
    else:
        if not os.path.exists(sidecar):
            raise IngestError(f"missing sidecar {sidecar} for {path}")
        header = _read_sidecar(sidecar)
        raw = _load_rgbv(path, header)

    fps = DEFAULT_FPS
    if header is not None and "fps" in header:
        fps = float(header["fps"])
    elif fps_override is not None:
        fps = float(fps_override)
    start_time = header.get("start_time") if header is not None else None
    log.info("loaded %d frames (%dx%d @ %g fps) from %s",
             raw.shape[0], raw.shape[2], raw.shape[1], fps, path)
    return FrameSequence(raw.astype(np.float32), fps, start_time)


def write_rgbv(
    path: str, frames: np.ndarray, fps: float, start_time: Optional[float] = None
) -> str:
    """Write frames to a ``.rgbv`` file and its sidecar.

    Values are clamped to [0, 255] and rounded to the nearest integer.

    :param path: destination (``.rgbv`` suffix added if missing)
    :param frames: (count, height, width, 3) array
    :return: the written path
    """
    if not path.endswith(RGBV_SUFFIX):
        path += RGBV_SUFFIX
    data = np.asarray(frames)
    if data.ndim != 4 or data.shape[3] != 3:
        raise ValueError("frames must be a (count, height, width, 3) array")
    if data.dtype != np.uint8:
        data = np.rint(np.clip(data, 0, 255)).astype(np.uint8)
    data.tofile(path)
    header: RgbvHeader = {
        "width": int(data.shape[2]),
        "height": int(data.shape[1]),
        "fps": float(fps),
        "frame_count": int(data.shape[0]),
    }
    if start_time is not None:
        header["start_time"] = float(start_time)
    with open(_sidecar_path(path), "w", encoding="utf-8") as fp:
        json.dump(header, fp, sort_keys=True, indent=2)
        fp.write("\n")
    return path


def _scan_lines(path: str) -> Iterator[Tuple[int, str]]:
    """Yield (line number, stripped content) for every non blank line."""
    try:
        with open(path, "r", encoding="utf-8") as fp:
            for lineno, line in enumerate(fp, start=1):
                line = line.strip()
                if line:
                    yield lineno, line
    except OSError as e:
        raise IngestError(f"unreadable file {path}: {e}")


def _parse_boxes(value, name: str, path: str, lineno: int) -> List[Box]:
    if not isinstance(value, list):
        raise ParseError(f"'{name}' must be a list of boxes", path, lineno)
    boxes = []
    for item in value:
        try:
            box = to_box(item)
        except (TypeError, ValueError) as e:
            raise ParseError(f"bad box {item!r} in '{name}': {e}", path, lineno)
        if not box.is_valid():
            raise ParseError(f"invalid box {list(box)} in '{name}'", path, lineno)
        boxes.append(box)
    return boxes


def load_annotations(
    path: str,
    frame_size: Optional[Tuple[int, int]] = None,
    check_eyes: bool = True,
) -> AnnotationTrack:
    """Load a JSON Lines annotation file.

    Each line looks like::

      {"frame": 0, "faces": [[10, 10, 100, 120]], "eyes": [[20, 30, 18, 10]]}

    Eye boxes are expressed in face-local coordinates and must lie
    inside the largest face of the record.

    :param path: the file to load
    :param frame_size: optional (width, height) used to check face boxes
    :param check_eyes: check that eye boxes lie inside the largest face
    :return: the validated track (possibly empty)
    """
    records: List[AnnotationRecord] = []
    for lineno, line in _scan_lines(path):
        try:
            content = json.loads(line)
        except json.JSONDecodeError as e:
            raise ParseError(f"malformed JSON ({e.msg})", path, lineno)
        if not isinstance(content, dict):
            raise ParseError("a record must be a JSON object", path, lineno)
        frame = content.get("frame")
        if not isinstance(frame, int) or isinstance(frame, bool) or frame < 0:
            raise ParseError("'frame' must be a non-negative integer", path, lineno)
        if records and frame == records[-1]["frame"]:
            raise ParseError(f"duplicate frame index {frame}", path, lineno)
        if records and frame < records[-1]["frame"]:
            raise ParseError(
                "frame indices must increase (%d after %d)"
                % (frame, records[-1]["frame"]),
                path,
                lineno,
            )
        faces = _parse_boxes(content.get("faces", []), "faces", path, lineno)
        eyes = _parse_boxes(content.get("eyes", []), "eyes", path, lineno)
        if len(eyes) > 2:
            raise ParseError("at most two eye boxes are allowed", path, lineno)
        if frame_size is not None:
            for face in faces:
                if not face.fits_in(*frame_size):
                    raise ParseError(
                        f"face box {list(face)} outside the frame", path, lineno
                    )
        if faces and check_eyes:
            largest = max(faces, key=lambda b: b.area)
            for eye in eyes:
                if not eye.fits_in(largest.w, largest.h):
                    raise ParseError(
                        f"eye box {list(eye)} outside the face box", path, lineno
                    )
        records.append({"frame": frame, "faces": faces, "eyes": eyes})
    log.info("loaded %d annotation records from %s", len(records), path)
    return AnnotationTrack(tuple(records))


def dump_annotations(track: AnnotationTrack, target=sys.stdout):
    """Write a track back to JSON Lines.

    :param target: opened file pointer where the records will be written
    """
    for record in track.records:
        content = {
            "frame": record["frame"],
            "faces": [list(b) for b in record["faces"]],
            "eyes": [list(b) for b in record["eyes"]],
        }
        target.write(json.dumps(content) + "\n")


def _first_float(line: str, path: str, lineno: int) -> float:
    try:
        return float(line.split(",")[0])
    except ValueError:
        raise ParseError(f"non-numeric value '{line}'", path, lineno)


def _read_e4_series(path: str) -> TimeSeries:
    """Read an E4 file shaped as: timestamp line, rate line, samples."""
    lines = list(_scan_lines(path))
    if len(lines) < 2:
        raise ParseError("timestamp and sample rate lines expected", path)
    start = _first_float(lines[0][1], path, lines[0][0])
    rate = _first_float(lines[1][1], path, lines[1][0])
    if not rate > 0:
        raise ParseError(f"nonpositive sample rate {rate}", path, lines[1][0])
    values = np.array(
        [_first_float(line, path, lineno) for lineno, line in lines[2:]],
        dtype=np.float64,
    )
    return TimeSeries(start, rate, values)


def _read_e4_ibi(path: str) -> Tuple[float, np.ndarray]:
    lines = list(_scan_lines(path))
    if not lines:
        raise ParseError("timestamp line expected", path)
    start = _first_float(lines[0][1], path, lines[0][0])
    rows = []
    for lineno, line in lines[1:]:
        parts = line.split(",")
        if len(parts) != 2:
            raise ParseError(f"'offset,interval' expected, got '{line}'", path, lineno)
        try:
            offset, interval = float(parts[0]), float(parts[1])
        except ValueError:
            raise ParseError(f"non-numeric value '{line}'", path, lineno)
        if not interval > 0:
            raise ParseError(f"nonpositive interval {interval}", path, lineno)
        if rows and offset < rows[-1][0]:
            raise ParseError(f"decreasing offset {offset}", path, lineno)
        rows.append((offset, interval))
    return start, np.array(rows, dtype=np.float64).reshape(-1, 2)


def load_e4_reference(dirname: str) -> ReferenceRecord:
    """Load an Empatica-E4-style recording directory.

    BVP.csv is mandatory, HR.csv and IBI.csv are optional.

    :param dirname: the directory containing the CSV files
    :return: the ReferenceRecord
    """
    bvp_path = os.path.join(dirname, "BVP.csv")
    if not os.path.isfile(bvp_path):
        raise ReferenceUnavailable(dirname)
    bvp = _read_e4_series(bvp_path)
    hr = None
    hr_path = os.path.join(dirname, "HR.csv")
    if os.path.isfile(hr_path):
        hr = _read_e4_series(hr_path)
    ibi_start, ibi = None, np.empty((0, 2))
    ibi_path = os.path.join(dirname, "IBI.csv")
    if os.path.isfile(ibi_path):
        ibi_start, ibi = _read_e4_ibi(ibi_path)
    log.info(
        "loaded reference from %s: %d BVP samples @ %g Hz, HR %s, %d IBIs",
        dirname,
        len(bvp),
        bvp.rate,
        "present" if hr is not None else "absent",
        len(ibi),
    )
    return ReferenceRecord(bvp, hr, ibi_start, ibi)
