"""Command-line checks: exit codes, artifacts and printed reports.

Usage: test_cli.py <path to the clusvpr binary>
"""

import json
import os
import subprocess
import sys
import tempfile
import unittest
from pathlib import Path

BIN = None


def run(*args, cwd=None, env=None):
    return subprocess.run([BIN, *map(str, args)], capture_output=True, text=True, cwd=cwd, env=env)


class CliTest(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.tmp = tempfile.TemporaryDirectory()
        cls.root = Path(cls.tmp.name)

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()

    def test_usage_errors(self):
        self.assertEqual(run().returncode, 1)
        self.assertEqual(run("frobnicate").returncode, 1)
        r = run("params", "--config", "no-such-preset", "--run-dir", self.root / "u")
        self.assertEqual(r.returncode, 1)
        self.assertIn("no-such-preset", r.stderr)
        self.assertEqual(run("--help").returncode, 0)

    def test_unknown_config_key_is_named(self):
        cfg = self.root / "bad.json"
        cfg.write_text('{"preset": "tiny", "model": {"clusterz": 3}}')
        r = run("synth", "--config", cfg, "--run-dir", self.root / "bad_run")
        self.assertEqual(r.returncode, 1)
        self.assertIn("model.clusterz", r.stderr)
        self.assertFalse((self.root / "bad_run").exists())

    def test_params_table(self):
        r = run("params", "--config", "default", "--run-dir", self.root / "p")
        self.assertEqual(r.returncode, 0, r.stderr)
        self.assertIn("536870912", r.stdout)
        self.assertIn("536.9M", r.stdout)
        self.assertIn("67.1M", r.stdout)
        self.assertIn("PCA ratio at equal K (G/lambda): 4", r.stdout)

    def test_gradcheck(self):
        r = run("gradcheck", "--config", "tiny", "--coords", "4", "--run-dir", self.root / "g")
        self.assertEqual(r.returncode, 0, r.stderr)
        self.assertIn("optlad.gem_p", r.stdout)
        self.assertNotIn(",no", r.stdout)

    def test_run_dir_from_environment(self):
        env = dict(os.environ, CLUSVPR_RUN_DIR=str(self.root / "env_run"))
        r = run("synth", "--config", "tiny", env=env)
        self.assertEqual(r.returncode, 0, r.stderr)
        resolved = json.loads((self.root / "env_run" / "config.resolved").read_text())
        self.assertEqual(resolved["preset"], "tiny")
        self.assertTrue((self.root / "env_run" / "world" / "gallery.csv").exists())

    def test_pipeline(self):
        rd = self.root / "pipe"
        r = run("synth", "--config", "tiny", "--run-dir", rd)
        self.assertEqual(r.returncode, 0, r.stderr)
        world = rd / "world"
        self.assertTrue((world / "gallery.csv").exists())

        again = self.root / "pipe_again"
        run("synth", "--config", "tiny", "--run-dir", again)
        self.assertEqual((world / "gallery.csv").read_bytes(), (again / "world" / "gallery.csv").read_bytes())

        r = run("train", "--config", "tiny", "--run-dir", rd)
        self.assertEqual(r.returncode, 0, r.stderr)
        train = rd / "train"
        for name in ("init.ckpt", "gen1.ckpt", "gen2.ckpt", "metrics.csv"):
            self.assertTrue((train / name).exists(), name)
        lines = (train / "metrics.csv").read_text().splitlines()
        self.assertEqual(lines[0], "generation,epoch,step,loss_t,loss_s,recall1")
        self.assertEqual(len(lines), 3)

        idx = rd / "gallery.idx"
        r = run("index", "--config", "tiny", "--run-dir", rd, "--checkpoint", train / "gen2.ckpt",
                "--manifest", world / "gallery.csv", "--out", idx)
        self.assertEqual(r.returncode, 0, r.stderr)
        self.assertTrue(idx.exists())
        self.assertTrue(Path(str(idx) + ".ckpt").exists())
        self.assertEqual(idx.read_bytes()[:8], b"CVPRIDX1")

        first = (world / "gallery.csv").read_text().splitlines()[1].split(",")
        r = run("query", "--config", "tiny", "--run-dir", rd, "--index", idx, "--image", world / first[1], "--k", "2")
        self.assertEqual(r.returncode, 0, r.stderr)
        self.assertIn(first[0], r.stdout.splitlines()[1])

        r = run("eval", "--config", "tiny", "--run-dir", rd, "--index", idx,
                "--queries", world / "test_queries.csv", "--k", "1,2,4")
        self.assertEqual(r.returncode, 0, r.stderr)
        out = r.stdout.splitlines()
        self.assertEqual(out[0], "k,recall,queries,threshold_m")
        recalls = [float(line.split(",")[1]) for line in out[1:4]]
        self.assertEqual(recalls, sorted(recalls))

        r = run("eval", "--config", "tiny", "--run-dir", rd, "--index", idx,
                "--queries", world / "test_queries.csv", "--k", "1,x")
        self.assertEqual(r.returncode, 1)

    def test_numerical_failure_exit_code(self):
        rd = self.root / "diverge"
        self.assertEqual(run("synth", "--config", "tiny", "--run-dir", rd).returncode, 0)
        cfg = self.root / "diverge.json"
        cfg.write_text('{"preset": "tiny", "train": {"learning_rate": 1e12}}')
        r = run("train", "--config", cfg, "--run-dir", rd)
        self.assertEqual(r.returncode, 2, r.stderr)
        self.assertIn("numerical failure", r.stderr)

    def test_failed_command_leaves_no_outputs(self):
        rd = self.root / "fail"
        out = self.root / "fail_index.bin"
        r = run("index", "--config", "tiny", "--run-dir", rd, "--checkpoint", self.root / "missing.ckpt",
                "--manifest", self.root / "missing.csv", "--out", out)
        self.assertNotEqual(r.returncode, 0)
        self.assertFalse(out.exists())
        self.assertFalse(rd.exists())


if __name__ == "__main__":
    BIN = sys.argv.pop(1)
    unittest.main()
