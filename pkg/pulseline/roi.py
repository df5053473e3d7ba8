"""
Region of interest extraction.

Turns a frame sequence and its face/eye annotations into a fixed-size
masked face video: the largest face is kept (previous box when nothing is
detected), eyes are resolved (mirrored when only one is seen, carried
forward when none is), the face is cropped, eye rectangles are zeroed and
the crop is resized to 104x104.
"""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import cv2
import numpy as np

from .ingest import (
    AnnotationTrack,
    FrameSequence,
    dump_annotations,
    load_annotations,
    load_frame_sequence,
    write_rgbv,
)
from .tools import Box, PulselineError

log = logging.getLogger(__name__)

OUTPUT_SIZE = 104

EyePair = Tuple[Box, Box]


class RoiError(PulselineError):
    """Invalid geometry while building the region of interest"""

    def __init__(self, msg: str, frame: Optional[int] = None):
        self.msg = msg
        self.frame = frame

    def __str__(self):
        if self.frame is None:
            return f"roi error: {self.msg}"
        return f"roi error: frame {self.frame}: {self.msg}"


def scaled_eye_box(box: Box, crop_w: int, crop_h: int) -> Box:
    """Output-space rectangle covering every resized pixel whose bilinear
    footprint touches ``box``.

    Bilinear resizing maps output pixel j to source coordinate
    (j + 0.5) / s - 0.5, s being out/src; it reads the two source pixels
    surrounding that coordinate.
    """

    def axis(start: int, length: int, src: int) -> Tuple[int, int]:
        scale = OUTPUT_SIZE / src
        lo = int(np.floor((start - 0.5) * scale - 0.5)) + 1
        hi = int(np.ceil((start + length + 0.5) * scale - 0.5))
        return max(lo, 0), min(hi, OUTPUT_SIZE)

    x0, x1 = axis(box.x, box.w, crop_w)
    y0, y1 = axis(box.y, box.h, crop_h)
    return Box(x0, y0, max(x1 - x0, 0), max(y1 - y0, 0))


@dataclass(frozen=True)
class RoiFrame:
    image: np.ndarray
    face_box_used: Box
    eye_boxes_used: EyePair

    def scaled_eye_boxes(self) -> List[Box]:
        """Eye rectangles in the 104x104 output space."""
        face = self.face_box_used
        boxes = []
        for eye in self.eye_boxes_used:
            clipped = eye.clip(face.w, face.h)
            if clipped.area:
                boxes.append(scaled_eye_box(clipped, face.w, face.h))
        return boxes


@dataclass(frozen=True)
class RoiVideo:
    """Masked face video: (count, 104, 104, 3) images plus the boxes used."""

    images: np.ndarray
    face_boxes: Tuple[Box, ...]
    eye_boxes: Tuple[EyePair, ...]
    fps: float
    start_time: Optional[float] = None

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[1:] != (
            OUTPUT_SIZE,
            OUTPUT_SIZE,
            3,
        ):
            raise ValueError("images must be a (count, 104, 104, 3) array")
        if not len(self.images):
            raise ValueError("a roi video needs at least one frame")
        if len(self.face_boxes) != len(self.images) or len(self.eye_boxes) != len(
            self.images
        ):
            raise ValueError("one face box and one eye pair per frame expected")
        if not self.fps > 0:
            raise ValueError(f"fps must be positive, got {self.fps}")

    def __len__(self):
        return self.images.shape[0]

    def __getitem__(self, index: int) -> RoiFrame:
        return RoiFrame(self.images[index], self.face_boxes[index], self.eye_boxes[index])

    def window(self, start: int, end: int) -> "RoiVideo":
        """Frames [start, end) as a new video."""
        if not 0 <= start < end <= len(self):
            raise IndexError(f"window [{start}, {end}) outside [0, {len(self)})")
        return RoiVideo(
            self.images[start:end],
            self.face_boxes[start:end],
            self.eye_boxes[start:end],
            self.fps,
            self.start_time,
        )

    def with_images(self, images: np.ndarray) -> "RoiVideo":
        return RoiVideo(
            images, self.face_boxes, self.eye_boxes, self.fps, self.start_time
        )


def select_face_box(candidates: Sequence[Box], previous: Box) -> Box:
    """Return the candidate with the largest area.

    The first candidate wins on equal areas; ``previous`` is returned when
    there is no candidate.
    """
    if not candidates:
        return previous
    return max(candidates, key=lambda b: b.area)


def resolve_eyes(
    detected: Sequence[Box], previous_pair: EyePair, face_width: int
) -> EyePair:
    """Build the pair of eye boxes used for masking.

    :param detected: 0, 1 or 2 eye boxes, face-local coordinates
    :param previous_pair: pair used on the previous frame
    :param face_width: width of the face box the eyes belong to
    """
    if face_width <= 0:
        raise RoiError(f"face width must be positive, got {face_width}")
    if len(detected) > 2:
        raise RoiError(f"{len(detected)} eyes given, 2 at most")
    if len(detected) == 2:
        return detected[0], detected[1]
    if not detected:
        return previous_pair
    eye = detected[0]
    # Mirror the center across x = face_width / 2
    mirrored_x = face_width - eye.x - eye.w
    mirrored_x = min(max(mirrored_x, 0), max(face_width - eye.w, 0))
    mirrored = Box(mirrored_x, eye.y, eye.w, eye.h)
    if mirrored.x < eye.x:
        return mirrored, eye
    return eye, mirrored


def mask_crop_resize(frame: np.ndarray, face_box: Box, eyes: EyePair) -> RoiFrame:
    """Crop the face, zero the eyes and resize to 104x104 (bilinear).

    Eye rectangles are zeroed again after resizing, over their scaled
    footprint, so interpolation cannot bring light back into them.
    """
    height, width = frame.shape[:2]
    if face_box.w < 2 or face_box.h < 2:
        raise RoiError(f"degenerate face box {list(face_box)}")
    if not face_box.is_valid() or not face_box.fits_in(width, height):
        raise RoiError(f"face box {list(face_box)} outside the {width}x{height} frame")
    for eye in eyes:
        if eye.w <= 0 or eye.h <= 0:
            raise RoiError(f"degenerate eye box {list(eye)}")

    crop = np.array(
        frame[face_box.y : face_box.y + face_box.h, face_box.x : face_box.x + face_box.w],
        dtype=np.float32,
    )
    clipped = [eye.clip(face_box.w, face_box.h) for eye in eyes]
    for eye in clipped:
        crop[eye.y : eye.y + eye.h, eye.x : eye.x + eye.w] = 0
    image = cv2.resize(
        crop, (OUTPUT_SIZE, OUTPUT_SIZE), interpolation=cv2.INTER_LINEAR
    )
    for eye in clipped:
        if not eye.area:
            continue
        scaled = scaled_eye_box(eye, face_box.w, face_box.h)
        image[scaled.y : scaled.y + scaled.h, scaled.x : scaled.x + scaled.w] = 0
    return RoiFrame(image, face_box, (eyes[0], eyes[1]))


def resolve_boxes(
    count: int, track: AnnotationTrack, initial_face: Box, initial_eyes: EyePair
) -> Tuple[List[Box], List[EyePair]]:
    """Thread the face/eye fallback state through ``count`` frames."""
    faces: List[Box] = []
    eye_pairs: List[EyePair] = []
    face, eyes = initial_face, initial_eyes
    fallbacks = 0
    for index in range(count):
        record = track.get(index)
        candidates = record["faces"] if record is not None else []
        detected = record["eyes"] if record is not None else []
        if not candidates:
            fallbacks += 1
        face = select_face_box(candidates, face)
        try:
            eyes = resolve_eyes(detected, eyes, face.w)
        except RoiError as e:
            raise RoiError(e.msg, index)
        faces.append(face)
        eye_pairs.append(eyes)
    if fallbacks:
        log.info("%d/%d frames reuse the previous face box", fallbacks, count)
    return faces, eye_pairs


def build_roi_video(
    seq: FrameSequence,
    track: AnnotationTrack,
    initial_face: Box,
    initial_eyes: EyePair,
    jobs: int = 1,
) -> RoiVideo:
    """Apply the face selection, eye resolution and masking rules to a
    whole sequence.

    Box resolution is sequential; masking runs on ``jobs`` threads once
    every box is known.
    """
    if len(initial_eyes) != 2:
        raise RoiError("two initial eye boxes expected")
    faces, eye_pairs = resolve_boxes(seq.count, track, initial_face, initial_eyes)

    def process(index: int) -> np.ndarray:
        try:
            return mask_crop_resize(seq.frames[index], faces[index], eye_pairs[index]).image
        except RoiError as e:
            raise RoiError(e.msg, index)

    with ThreadPoolExecutor(max_workers=max(jobs, 1)) as executor:
        images = list(executor.map(process, range(seq.count)))
    log.info("built roi video: %d frames @ %g fps", seq.count, seq.fps)
    return RoiVideo(
        np.stack(images), tuple(faces), tuple(eye_pairs), seq.fps, seq.start_time
    )


def _boxes_path(path: str) -> str:
    base = path[: -len(".rgbv")] if path.endswith(".rgbv") else path
    return base + ".boxes.jsonl"


def save_roi_video(video: RoiVideo, path: str) -> str:
    """Write the masked video (``.rgbv``) and the boxes used (JSON Lines)."""
    path = write_rgbv(path, video.images, video.fps, video.start_time)
    records = tuple(
        {"frame": index, "faces": [face], "eyes": list(eyes)}
        for index, (face, eyes) in enumerate(zip(video.face_boxes, video.eye_boxes))
    )
    with open(_boxes_path(path), "w", encoding="utf-8") as fp:
        dump_annotations(AnnotationTrack(records), fp)
    return path


def load_roi_video(path: str) -> RoiVideo:
    """Read back a video written by :func:`save_roi_video`."""
    seq = load_frame_sequence(path)
    if (seq.width, seq.height) != (OUTPUT_SIZE, OUTPUT_SIZE):
        raise RoiError(f"{path} is {seq.width}x{seq.height}, not a roi video")
    boxes = _boxes_path(path)
    if not os.path.exists(boxes):
        raise RoiError(f"missing box file {boxes}")
    track = load_annotations(boxes, check_eyes=False)
    if len(track) != seq.count:
        raise RoiError(f"{boxes} has {len(track)} records for {seq.count} frames")
    faces, eye_pairs = [], []
    for record in track.records:
        if len(record["faces"]) != 1 or len(record["eyes"]) != 2:
            raise RoiError("one face and two eyes expected per record", record["frame"])
        faces.append(record["faces"][0])
        eye_pairs.append((record["eyes"][0], record["eyes"][1]))
    return RoiVideo(
        np.array(seq.frames), tuple(faces), tuple(eye_pairs), seq.fps, seq.start_time
    )
