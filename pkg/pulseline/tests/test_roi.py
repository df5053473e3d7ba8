"""Region of interest test cases."""

import os
import shutil
import tempfile
import unittest

import numpy as np

from pulseline import roi
from pulseline.ingest import AnnotationTrack, FrameSequence, load_annotations
from pulseline.tools import Box

FILES = os.path.join(os.path.dirname(__file__), "files")

EYES = (Box(6, 10, 10, 6), Box(24, 10, 10, 6))


class SelectionTestCase(unittest.TestCase):
    def test_largest_face(self):
        previous = Box(0, 0, 5, 5)
        self.assertEqual(
            roi.select_face_box([Box(0, 0, 4, 4), Box(1, 1, 6, 6)], previous),
            Box(1, 1, 6, 6),
        )
        # equal areas: first one wins
        self.assertEqual(
            roi.select_face_box([Box(0, 0, 4, 9), Box(1, 1, 6, 6)], previous),
            Box(0, 0, 4, 9),
        )
        self.assertEqual(roi.select_face_box([], previous), previous)
        # not restricted to the previous rectangle
        self.assertEqual(
            roi.select_face_box([Box(1, 1, 3, 3), Box(40, 40, 8, 8)], previous),
            Box(40, 40, 8, 8),
        )

    def test_resolve_eyes(self):
        previous = (Box(1, 1, 2, 2), Box(5, 1, 2, 2))
        self.assertEqual(roi.resolve_eyes(list(EYES), previous, 40), EYES)
        self.assertEqual(roi.resolve_eyes([], previous, 40), previous)
        self.assertEqual(roi.resolve_eyes([EYES[0]], previous, 40), EYES)
        self.assertEqual(roi.resolve_eyes([EYES[1]], previous, 40), EYES)

    def test_mirror_clamped(self):
        left, right = roi.resolve_eyes([Box(0, 3, 50, 5)], EYES, 40)
        self.assertEqual(left, Box(0, 3, 50, 5))
        self.assertEqual(right, Box(0, 3, 50, 5))

    def test_too_many_eyes(self):
        with self.assertRaises(roi.RoiError):
            roi.resolve_eyes([Box(0, 0, 1, 1)] * 3, EYES, 40)


class MaskTestCase(unittest.TestCase):
    def setUp(self):
        self.frame = np.full((64, 64, 3), 100.0, dtype=np.float32)
        self.face = Box(10, 8, 40, 52)

    def test_output(self):
        result = roi.mask_crop_resize(self.frame, self.face, EYES)
        self.assertEqual(result.image.shape, (roi.OUTPUT_SIZE, roi.OUTPUT_SIZE, 3))
        self.assertEqual(result.face_box_used, self.face)
        masked = np.zeros(result.image.shape[:2], dtype=bool)
        for box in result.scaled_eye_boxes():
            self.assertGreater(box.area, 0)
            masked[box.y : box.y + box.h, box.x : box.x + box.w] = True
        self.assertTrue(np.all(result.image[masked] == 0))
        # zeroing must not leak outside the scaled footprints
        np.testing.assert_allclose(result.image[~masked], 100.0, atol=1e-3)

    def test_scaled_eye_box(self):
        self.assertEqual(roi.scaled_eye_box(Box(10, 4, 5, 3), 52, 52), Box(19, 7, 12, 8))

    def test_eye_partially_outside(self):
        eyes = (Box(30, 10, 20, 6), EYES[0])
        result = roi.mask_crop_resize(self.frame, self.face, eyes)
        self.assertEqual(result.eye_boxes_used, eyes)
        self.assertEqual(len(result.scaled_eye_boxes()), 2)

    def test_bad_face(self):
        with self.assertRaises(roi.RoiError):
            roi.mask_crop_resize(self.frame, Box(0, 0, 1, 10), EYES)
        with self.assertRaises(roi.RoiError):
            roi.mask_crop_resize(self.frame, Box(30, 30, 40, 40), EYES)

    def test_bad_eye(self):
        with self.assertRaises(roi.RoiError):
            roi.mask_crop_resize(self.frame, self.face, (Box(1, 1, 0, 3), EYES[1]))


class VideoTestCase(unittest.TestCase):
    def setUp(self):
        frames = np.full((7, 64, 64, 3), 90.0, dtype=np.float32)
        frames[:, :, :, 1] = np.arange(7)[:, None, None] + 100
        self.seq = FrameSequence(frames, 30.0, 1000.0)
        self.track = load_annotations(os.path.join(FILES, "annotations.jsonl"))
        self.tmpdir = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.tmpdir)

    def test_resolve_boxes(self):
        faces, eyes = roi.resolve_boxes(
            7, self.track, Box(0, 0, 8, 8), (Box(0, 0, 2, 2), Box(4, 0, 2, 2))
        )
        self.assertEqual(
            faces,
            [Box(10, 8, 40, 44)] * 5 + [Box(12, 8, 40, 44)] * 2,
        )
        self.assertEqual(eyes, [EYES] * 7)

    def test_build(self):
        video = roi.build_roi_video(
            self.seq, self.track, Box(0, 0, 8, 8), (Box(0, 0, 2, 2), Box(4, 0, 2, 2)), jobs=2
        )
        self.assertEqual(len(video), 7)
        self.assertEqual(video.fps, 30.0)
        self.assertEqual(video.start_time, 1000.0)
        self.assertEqual(video[3].face_box_used, Box(10, 8, 40, 44))
        self.assertAlmostEqual(float(video.images[6, 0, 0, 1]), 106.0, places=4)

        part = video.window(2, 5)
        self.assertEqual(len(part), 3)
        self.assertEqual(part.face_boxes[0], video.face_boxes[2])
        with self.assertRaises(IndexError):
            video.window(5, 9)

    def test_error_has_frame(self):
        track = AnnotationTrack(
            (
                {"frame": 0, "faces": [Box(1, 1, 30, 30)], "eyes": []},
                {"frame": 3, "faces": [Box(50, 50, 30, 30)], "eyes": []},
            )
        )
        with self.assertRaises(roi.RoiError) as ctx:
            roi.build_roi_video(self.seq, track, Box(0, 0, 8, 8), EYES)
        self.assertEqual(ctx.exception.frame, 3)
        self.assertTrue(str(ctx.exception).startswith("roi error: frame 3: "))

    def test_save_load(self):
        video = roi.build_roi_video(
            self.seq, self.track, Box(0, 0, 8, 8), (Box(0, 0, 2, 2), Box(4, 0, 2, 2))
        )
        path = roi.save_roi_video(video, os.path.join(self.tmpdir, "roi.rgbv"))
        self.assertTrue(os.path.exists(os.path.join(self.tmpdir, "roi.boxes.jsonl")))
        loaded = roi.load_roi_video(path)
        self.assertEqual(loaded.face_boxes, video.face_boxes)
        self.assertEqual(loaded.eye_boxes, video.eye_boxes)
        self.assertEqual(loaded.fps, video.fps)
        self.assertEqual(loaded.start_time, video.start_time)
        np.testing.assert_allclose(loaded.images, video.images, atol=0.5)

    def test_load_missing_boxes(self):
        video = roi.build_roi_video(self.seq, self.track, Box(0, 0, 8, 8), EYES)
        path = roi.save_roi_video(video, os.path.join(self.tmpdir, "roi.rgbv"))
        os.remove(os.path.join(self.tmpdir, "roi.boxes.jsonl"))
        with self.assertRaises(roi.RoiError):
            roi.load_roi_video(path)


if __name__ == "__main__":
    unittest.main()
