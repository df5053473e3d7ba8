"""Command line and end-to-end test cases."""

import contextlib
import csv
import io
import json
import os
import shutil
import tempfile
import unittest

import numpy as np

from pulseline import cli, commands, evaluation, stats
from pulseline.scli import Scli, Variant, write_scli

WINDOW_ARGS = ["--window-s", "10", "--step-s", "2"]


def run(*argv):
    """Run the front end, return (status, parsed stdout or None, stderr)."""
    out, err = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        status = cli.run(list(argv))
    content = json.loads(out.getvalue()) if status == 0 else None
    return status, content, err.getvalue()


class RegistryTestCase(unittest.TestCase):
    def test_known_commands(self):
        for name in commands.COMMANDS:
            command = commands.get_command_instance(name)
            self.assertEqual(command.name, name)
            self.assertTrue(command.summary_line)

    def test_unknown_command(self):
        with self.assertRaises(commands.UnknownCommand) as ctx:
            commands.get_command_instance("frobnicate")
        self.assertEqual(str(ctx.exception), "unknown command 'frobnicate'")
        with self.assertRaises(commands.UnknownCommand):
            commands.get_command_instance("run")

    def test_add_commands(self):
        class EchoCommand(commands.Command):
            """Print the output directory."""

            args_definition = [commands.out]

            def execute(self, args):
                return {"out": self.config.out}

        commands.add_commands(EchoCommand)
        self.addCleanup(commands.COMMANDS.remove, "echo")
        self.addCleanup(vars(commands).pop, "EchoCommand")
        self.assertIn("echo", commands.COMMANDS)
        tmpdir = tempfile.mkdtemp()
        self.addCleanup(shutil.rmtree, tmpdir)
        status, content, _ = run("echo", "--out", tmpdir)
        self.assertEqual(status, 0)
        self.assertEqual(content, {"out": tmpdir})
        with self.assertRaises(commands.CommandError):
            commands.add_commands([dict])

    def test_run_config(self):
        parser = cli.build_parser()
        args = parser.parse_args(
            ["estimate", "--scli", "x.csv", "--out", "o", "--smooth-ms", "300", "--variant", "a_evm"]
        )
        config = commands.RunConfig.from_args(args)
        self.assertEqual(config.variants(), [Variant.A_EVM])
        self.assertEqual(config.peak_config(Variant.A_EVM).smooth_width_s, 0.3)
        self.assertGreaterEqual(config.jobs, 1)
        default = commands.RunConfig()
        self.assertEqual(default.variants(), [Variant.B_EVM, Variant.A_EVM])
        self.assertEqual(default.peak_config(Variant.A_EVM).smooth_width_s, 0.433)


class UsageTestCase(unittest.TestCase):
    def setUp(self):
        self.tmpdir = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.tmpdir)

    def test_usage_errors(self):
        self.assertEqual(run()[0], 2)
        self.assertEqual(run("bogus")[0], 2)
        self.assertEqual(run("estimate", "--out", self.tmpdir)[0], 2)
        self.assertEqual(run("synth", "--out", self.tmpdir, "--f0", "9")[0], 2)
        self.assertEqual(run("extract", "--out", self.tmpdir, "--alpha", "-3")[0], 2)

    def test_processing_errors(self):
        status, _, err = run("roi", "--out", self.tmpdir)
        self.assertEqual(status, 1)
        self.assertIn("--frames", err)
        status, _, err = run(
            "evaluate",
            "--pulse",
            os.path.join(self.tmpdir, "missing.csv"),
            "--reference",
            self.tmpdir,
            "--out",
            self.tmpdir,
        )
        self.assertEqual(status, 1)

    def test_missing_reference(self):
        pulse = os.path.join(self.tmpdir, "pulse.csv")
        with open(pulse, "w") as fp:
            fp.write("window_id,variant,pr_bpm,n_peaks,mean_ibi_s\n0,b_evm,72.0,12,0.8333\n")
        status, _, err = run(
            "evaluate", "--pulse", pulse, "--reference", self.tmpdir, "--out", self.tmpdir
        )
        self.assertEqual(status, 1)
        self.assertIn("reference unavailable", err)

    def _scli(self):
        path = os.path.join(self.tmpdir, "scli_b_evm_0000.csv")
        values = np.sin(2 * np.pi * 1.2 * np.arange(300) / 30.0)
        with open(path, "w", newline="") as fp:
            write_scli(Scli(0, Variant.B_EVM, 30.0, values), fp)
        return path

    def test_smoothing_below_one_sample(self):
        path = self._scli()
        status, _, err = run("estimate", "--scli", path, "--smooth-ms", "10", "--out", self.tmpdir)
        self.assertEqual(status, 2)
        self.assertIn("--smooth-ms", err)
        status, _, err = run(
            "estimate", "--scli", path, "--smooth-ms", "100", "--out", self.tmpdir
        )
        self.assertEqual(status, 0, err)

    def test_bad_calibration_file(self):
        path = self._scli()
        calibration = os.path.join(self.tmpdir, "calibration.json")
        with open(calibration, "w") as fp:
            json.dump({"b_evm": {"samples": 3}}, fp)
        status, _, err = run(
            "estimate", "--scli", path, "--calibration", calibration, "--out", self.tmpdir
        )
        self.assertEqual(status, 1)
        self.assertIn("not a calibration file", err)
        with open(calibration, "w") as fp:
            json.dump({"b_evm": {"smooth_ms": 5000}}, fp)
        status, _, err = run(
            "estimate", "--scli", path, "--calibration", calibration, "--out", self.tmpdir
        )
        self.assertEqual(status, 1)
        self.assertIn("smooth_width_s", err)


class StatsCommandTestCase(unittest.TestCase):
    def setUp(self):
        self.tmpdir = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.tmpdir)

    def _csv(self, name, rates, reference=70):
        path = os.path.join(self.tmpdir, name)
        with open(path, "w", newline="") as fp:
            writer = csv.writer(fp)
            writer.writerow(["window_id", "reference_bpm", "extracted_bpm", "ae"])
            for index, rate in enumerate(rates):
                writer.writerow([index, reference, rate, abs(rate - reference)])
        return path

    def _report(self, name, variant, pairs):
        path = os.path.join(self.tmpdir, name)
        with open(path, "w") as fp:
            json.dump(
                {
                    "variant": variant,
                    "diff_sign": "extracted-minus-reference",
                    "pairs": [
                        {"window_id": i, "reference_bpm": r, "extracted_bpm": e}
                        for i, (r, e) in enumerate(pairs)
                    ],
                },
                fp,
            )
        return path

    def _csv_groups(self):
        a = [self._csv(f"a{i}.csv", [70 + i, 71 + i, 72 + i], 68 + i) for i in range(5)]
        b = [self._csv(f"b{i}.csv", [80 + i, 81 + i, 82 + i], 68 + i) for i in range(5)]
        return a, b

    def test_csv_groups(self):
        a, b = self._csv_groups()
        status, content, err = run(
            "stats", "--group-a", *a, "--group-b", *b, "--out", self.tmpdir
        )
        self.assertEqual(status, 0, err)
        self.assertEqual((content["n_a"], content["n_b"]), (5, 5))
        self.assertEqual(content["unit"], "recording")
        expected = stats.compare_groups([71, 72, 73, 74, 75], [81, 82, 83, 84, 85])
        self.assertEqual(content["p"], expected.todict())
        self.assertEqual(content["p"]["test_name"], "t-test")
        self.assertLess(content["p"]["p_value"], 0.05)
        # same reference rates in both groups
        self.assertAlmostEqual(content["reference"]["p_value"], 1.0)
        with open(os.path.join(self.tmpdir, "stats.json")) as fp:
            self.assertEqual(json.load(fp), content)

    def test_pooled_windows(self):
        a, b = self._csv_groups()
        status, content, err = run(
            "stats", "--group-a", *a, "--group-b", *b, "--pool-windows", "--out", self.tmpdir
        )
        self.assertEqual(status, 0, err)
        self.assertEqual((content["n_a"], content["n_b"]), (15, 15))
        self.assertEqual(content["unit"], "window")

    def test_pulse_csv_groups(self):
        paths = {}
        for group, base in (("a", 70), ("b", 90)):
            paths[group] = []
            for i in range(4):
                path = os.path.join(self.tmpdir, f"pulse_{group}{i}.csv")
                with open(path, "w") as fp:
                    fp.write("window_id,variant,pr_bpm,n_peaks,mean_ibi_s\n")
                    fp.write(f"0,b_evm,{base + 2 * i},12,0.8\n1,b_evm,nan,0,nan\n")
                paths[group].append(path)
        status, content, err = run(
            "stats", "--group-a", *paths["a"], "--group-b", *paths["b"], "--out", self.tmpdir
        )
        self.assertEqual(status, 0, err)
        self.assertEqual((content["n_a"], content["n_b"]), (4, 4))
        self.assertIsNone(content["reference"])

    def test_bad_rate(self):
        a, b = self._csv_groups()
        bad = os.path.join(self.tmpdir, "bad.csv")
        with open(bad, "w") as fp:
            fp.write("window_id,variant,pr_bpm\n0,b_evm,72.0\n1,b_evm,abc\n")
        status, _, err = run(
            "stats", "--group-a", bad, *a, "--group-b", *b, "--out", self.tmpdir
        )
        self.assertEqual(status, 1)
        self.assertIn("bad.csv: line 3", err)
        no_rate = os.path.join(self.tmpdir, "no_rate.csv")
        with open(no_rate, "w") as fp:
            fp.write("window_id,variant\n0,b_evm\n")
        status, _, err = run(
            "stats", "--group-a", no_rate, *a, "--group-b", *b, "--out", self.tmpdir
        )
        self.assertEqual(status, 1)
        self.assertIn("pr_bpm", err)

    def test_report_groups(self):
        a_pairs = [[(60 + 4 * i + k, 60 + 4 * i + k + 1 + i) for k in (0, 4, 8)] for i in range(5)]
        b_pairs = [
            [(60 + 4 * i + k, 60 + 4 * i + k + 8 + 2 * i) for k in (0, 4, 8)] for i in range(5)
        ]
        a = [self._report(f"a{i}.json", "b_evm", p) for i, p in enumerate(a_pairs)]
        b = [self._report(f"b{i}.json", "a_evm", p) for i, p in enumerate(b_pairs)]
        status, content, err = run(
            "stats", "--group-a", *a, "--group-b", *b, "--welch", "--out", self.tmpdir
        )
        self.assertEqual(status, 0, err)
        self.assertEqual((content["n_a"], content["n_b"]), (5, 5))
        for column in ("p", "p.f.", "p.f.f."):
            self.assertIn(content[column]["test_name"], ("t-test", "wilcoxon-rank-sum"))
        self.assertIn("self_fit", content)
        self.assertAlmostEqual(content["reference"]["p_value"], 1.0)

        def faros(pairs, variant):
            fix = evaluation.preset_correction("preset-faros", variant)
            return [evaluation.apply_linear_correction(e, r, fix) for r, e in pairs]

        expected = stats.compare_groups(
            stats.recording_means([faros(p, Variant.B_EVM) for p in a_pairs]),
            stats.recording_means([faros(p, Variant.A_EVM) for p in b_pairs]),
            welch=True,
        )
        self.assertEqual(content["p.f.f."], expected.todict())
        raw = stats.compare_groups([65, 70, 75, 80, 85], [72, 78, 84, 90, 96], welch=True)
        self.assertEqual(content["p"], raw.todict())

    def test_report_without_variant(self):
        path = os.path.join(self.tmpdir, "old.json")
        with open(path, "w") as fp:
            json.dump({"diff_sign": "extracted-minus-reference", "pairs": []}, fp)
        status, _, err = run("stats", "--group-a", path, "--group-b", path, "--out", self.tmpdir)
        self.assertEqual(status, 1)
        self.assertIn("not an evaluation report", err)


class PipelineTestCase(unittest.TestCase):
    """A 12 s synthetic recording at 72 bpm through every stage."""

    @classmethod
    def setUpClass(cls):
        cls.tmpdir = tempfile.mkdtemp()
        cls.corpus = os.path.join(cls.tmpdir, "corpus")
        status, cls.manifest, err = run(
            "synth", "--out", cls.corpus, "--duration", "12", "--f0", "1.2", "--seed", "3"
        )
        assert status == 0, err
        cls.out = os.path.join(cls.tmpdir, "run")
        cls.status, cls.summary, cls.err = run(
            "pipeline", "--manifest", cls.corpus, "--out", cls.out, "--jobs", "2", *WINDOW_ARGS
        )

    @classmethod
    def tearDownClass(cls):
        shutil.rmtree(cls.tmpdir)

    def test_pipeline(self):
        self.assertEqual(self.status, 0, self.err)
        self.assertEqual(self.summary["roi"]["frames"], 360)
        self.assertEqual(self.summary["extract"]["windows"], 2)
        self.assertEqual(self.summary["estimate"]["usable"], 4)
        for variant in ("b_evm", "a_evm"):
            self.assertEqual(self.summary["calibrate"][variant]["items"], 2)
            self.assertAlmostEqual(
                self.summary["estimate"]["smooth_ms"][variant],
                self.summary["calibrate"][variant]["smooth_ms"],
            )
        for variant in ("b_evm", "a_evm"):
            path = os.path.join(self.out, "evaluate", f"report_{variant}.json")
            with open(path) as fp:
                report = json.load(fp)
            self.assertEqual(report["n_pairs"], 2)
            for pair in report["pairs"]:
                self.assertAlmostEqual(pair["reference_bpm"], 72.0)
                self.assertAlmostEqual(pair["extracted_bpm"], 72.0, delta=2.0)
            self.assertLess(report["metrics"]["mae"], 2.0)
            self.assertEqual(report["snr_video_db"]["n"], 2)
            self.assertEqual(len(report["waveform_correlations"]), 2)
            self.assertTrue(
                os.path.exists(os.path.join(self.out, "evaluate", f"plot_{variant}.csv"))
            )

    def test_extract_outputs(self):
        extract = os.path.join(self.out, "extract")
        with open(os.path.join(extract, "extract.json")) as fp:
            content = json.load(fp)
        self.assertEqual(content["start_time"], self.manifest["start_time"])
        self.assertEqual(len(content["windows"]), 4)
        self.assertTrue(os.path.exists(os.path.join(extract, "scli_b_evm_0001.csv")))
        self.assertTrue(os.path.exists(os.path.join(extract, "scli_a_evm_0000.csv")))

    def test_estimate_variant_filter(self):
        out = os.path.join(self.tmpdir, "estimate_b")
        status, content, err = run(
            "estimate",
            "--scli",
            os.path.join(self.out, "extract"),
            "--variant",
            "b_evm",
            "--out",
            out,
        )
        self.assertEqual(status, 0, err)
        self.assertEqual(content["windows"], 2)

    def test_corrections(self):
        reference = os.path.join(self.corpus, "e4")
        pulse = os.path.join(self.out, "estimate", "pulse.csv")
        out = os.path.join(self.tmpdir, "evaluate_faros")
        status, content, err = run(
            "evaluate",
            "--pulse",
            pulse,
            "--reference",
            reference,
            "--correction",
            "preset-faros",
            "--out",
            out,
            *WINDOW_ARGS,
        )
        self.assertEqual(status, 0, err)
        self.assertEqual(content["b_evm"]["correction"]["name"], "preset-faros")
        # a single reference rate cannot be fitted
        status, _, err = run(
            "evaluate",
            "--pulse",
            pulse,
            "--reference",
            reference,
            "--correction",
            "self-fit",
            "--out",
            out,
            *WINDOW_ARGS,
        )
        self.assertEqual(status, 1)
        self.assertIn("self-fit", err)

    def test_calibrate(self):
        out = os.path.join(self.tmpdir, "calibrate")
        status, content, err = run(
            "calibrate",
            "--scli",
            os.path.join(self.out, "extract"),
            "--reference",
            os.path.join(self.corpus, "e4"),
            "--out",
            out,
            *WINDOW_ARGS,
        )
        self.assertEqual(status, 0, err)
        for variant in ("b_evm", "a_evm"):
            self.assertEqual(content[variant]["items"], 2)
            self.assertGreaterEqual(content[variant]["samples"], 1)
            self.assertAlmostEqual(
                content[variant]["smooth_ms"], content[variant]["samples"] * 1000 / 30.0
            )
        self.assertTrue(os.path.exists(os.path.join(out, "calibration.json")))

    def test_window_geometry(self):
        extract = os.path.join(self.out, "extract")
        reference = os.path.join(self.corpus, "e4")
        pulse = os.path.join(self.out, "estimate", "pulse.csv")
        out = os.path.join(self.tmpdir, "evaluate_geometry")
        # no window flags: the 10 s / 2 s geometry comes from extract.json
        status, _, err = run(
            "evaluate", "--pulse", pulse, "--reference", reference, "--scli", extract, "--out", out
        )
        self.assertEqual(status, 0, err)
        for variant in ("b_evm", "a_evm"):
            with open(os.path.join(out, f"report_{variant}.json")) as fp:
                report = json.load(fp)
            with open(os.path.join(self.out, "evaluate", f"report_{variant}.json")) as fp:
                self.assertEqual(report["pairs"], json.load(fp)["pairs"])
        status, _, err = run(
            "evaluate",
            "--pulse",
            pulse,
            "--reference",
            reference,
            "--scli",
            extract,
            "--window-s",
            "30",
            "--out",
            out,
        )
        self.assertEqual(status, 1)
        self.assertIn("--window-s 30.0 conflicts", err)
        status, _, err = run(
            "calibrate",
            "--scli",
            extract,
            "--reference",
            reference,
            "--step-s",
            "5",
            "--out",
            os.path.join(self.tmpdir, "calibrate_geometry"),
        )
        self.assertEqual(status, 1)
        self.assertIn("--step-s 5.0 conflicts", err)

    def test_without_calibration(self):
        out = os.path.join(self.tmpdir, "uncalibrated")
        status, summary, err = run(
            "pipeline",
            "--manifest",
            self.corpus,
            "--variant",
            "b_evm",
            "--no-calibration",
            "--out",
            out,
            *WINDOW_ARGS,
        )
        self.assertEqual(status, 0, err)
        self.assertIsNone(summary["calibrate"])
        self.assertEqual(list(summary["estimate"]["smooth_ms"]), ["b_evm"])
        self.assertAlmostEqual(summary["estimate"]["smooth_ms"]["b_evm"], 400.0)
        self.assertFalse(os.path.exists(os.path.join(out, "calibrate")))

    def test_magnify(self):
        out = os.path.join(self.tmpdir, "magnify")
        status, content, err = run(
            "magnify",
            "--roi",
            os.path.join(self.out, "roi", "roi.rgbv"),
            "--window-id",
            "1",
            "--out",
            out,
            *WINDOW_ARGS,
        )
        self.assertEqual(status, 0, err)
        self.assertEqual(content["frames"], 300)
        status, _, _ = run(
            "magnify",
            "--roi",
            os.path.join(self.out, "roi", "roi.rgbv"),
            "--window-id",
            "7",
            "--out",
            out,
            *WINDOW_ARGS,
        )
        self.assertEqual(status, 2)


class FastPulseTestCase(unittest.TestCase):
    """A 150 bpm recording: recovered once the smoothing is calibrated."""

    def test_calibrated_smoothing(self):
        tmpdir = tempfile.mkdtemp()
        try:
            corpus = os.path.join(tmpdir, "corpus")
            self.assertEqual(
                run("synth", "--out", corpus, "--duration", "12", "--f0", "2.5")[0], 0
            )
            extract = os.path.join(tmpdir, "extract")
            status, _, err = run(
                "extract",
                "--manifest",
                corpus,
                "--variant",
                "b_evm",
                "--out",
                extract,
                *WINDOW_ARGS,
            )
            self.assertEqual(status, 0, err)
            status, calibration, err = run(
                "calibrate",
                "--scli",
                extract,
                "--reference",
                os.path.join(corpus, "e4"),
                "--variant",
                "b_evm",
                "--out",
                os.path.join(tmpdir, "calibrate"),
                *WINDOW_ARGS,
            )
            self.assertEqual(status, 0, err)
            estimate = os.path.join(tmpdir, "estimate")
            status, _, err = run(
                "estimate",
                "--scli",
                extract,
                "--smooth-ms",
                str(calibration["b_evm"]["smooth_ms"]),
                "--out",
                estimate,
            )
            self.assertEqual(status, 0, err)
            with open(os.path.join(estimate, "pulse.csv")) as fp:
                rates = [float(row["pr_bpm"]) for row in csv.DictReader(fp)]
            self.assertEqual(len(rates), 2)
            for rate in rates:
                self.assertAlmostEqual(rate, 150.0, delta=2.0)
        finally:
            shutil.rmtree(tmpdir)


KNOWN_RATES = (0.75, 1.2, 1.5, 2.0, 2.5)


def load_report(out, variant):
    with open(os.path.join(out, "evaluate", f"report_{variant}.json")) as fp:
        return json.load(fp)


class KnownRateTestCase(unittest.TestCase):
    """40 s recordings across the pulse range, default 30 s / 10 s windows."""

    @classmethod
    def setUpClass(cls):
        cls.tmpdir = tempfile.mkdtemp()
        cls.runs = {}
        for f0 in KNOWN_RATES:
            corpus = os.path.join(cls.tmpdir, f"corpus_{f0}")
            status, _, err = run("synth", "--out", corpus, "--duration", "40", "--f0", str(f0))
            assert status == 0, err
            out = os.path.join(cls.tmpdir, f"run_{f0}")
            cls.runs[f0] = (corpus, out) + run("pipeline", "--manifest", corpus, "--out", out)

    @classmethod
    def tearDownClass(cls):
        shutil.rmtree(cls.tmpdir)

    def test_every_window(self):
        for f0 in KNOWN_RATES:
            _, out, status, summary, err = self.runs[f0]
            self.assertEqual(status, 0, f"{f0} Hz: {err}")
            self.assertEqual(summary["extract"]["windows"], 2)
            for variant in ("b_evm", "a_evm"):
                report = load_report(out, variant)
                self.assertEqual(report["n_pairs"], 2, f"{f0} Hz {variant}")
                for pair in report["pairs"]:
                    self.assertAlmostEqual(
                        pair["extracted_bpm"], 60 * f0, delta=1.0, msg=f"{f0} Hz {variant}"
                    )

    def test_reproducible(self):
        corpus, out = self.runs[1.2][:2]
        again = os.path.join(self.tmpdir, "again")
        status, _, err = run("pipeline", "--manifest", corpus, "--out", again)
        self.assertEqual(status, 0, err)
        for name in (
            os.path.join("extract", "extract.json"),
            os.path.join("calibrate", "calibration.json"),
            os.path.join("estimate", "pulse.csv"),
            os.path.join("evaluate", "report_b_evm.json"),
            os.path.join("evaluate", "report_a_evm.json"),
        ):
            with open(os.path.join(out, name), "rb") as first, open(
                os.path.join(again, name), "rb"
            ) as second:
                self.assertEqual(first.read(), second.read(), name)


class NoisyRecordingTestCase(unittest.TestCase):
    def test_mae(self):
        tmpdir = tempfile.mkdtemp()
        self.addCleanup(shutil.rmtree, tmpdir)
        corpus = os.path.join(tmpdir, "corpus")
        status, _, err = run(
            "synth",
            "--out",
            corpus,
            "--duration",
            "40",
            "--f0",
            "1.2",
            "--noise",
            "2",
            "--drift",
            "10",
            "--drift-freq",
            "0.05",
            "--jitter",
            "2",
            "--seed",
            "11",
        )
        self.assertEqual(status, 0, err)
        out = os.path.join(tmpdir, "run")
        status, _, err = run("pipeline", "--manifest", corpus, "--out", out)
        self.assertEqual(status, 0, err)
        for variant in ("b_evm", "a_evm"):
            report = load_report(out, variant)
            self.assertEqual(report["n_pairs"], 2)
            self.assertLessEqual(report["metrics"]["mae"], 5.0, variant)


if __name__ == "__main__":
    unittest.main()
