"""
Command-line walkthrough
========================

The same pipeline from the shell: synthesize a pair, train briefly,
register, export keypoints and evaluate.  Each step is one ``tractreg``
invocation; here they are driven through ``subprocess``.
"""
import subprocess
import sys
import tempfile
from pathlib import Path


def tractreg(*args):
    cmd = [sys.executable, "-m", "tractreg.cli", *map(str, args)]
    print("$ tractreg", " ".join(map(str, args)))
    out = subprocess.run(cmd, capture_output=True, text=True)
    print(out.stdout, end="")
    if out.returncode:
        print(out.stderr, end="")
    return out.returncode


with tempfile.TemporaryDirectory() as tmp:
    tmp = Path(tmp)
    tractreg("synth", "--out-dir", tmp / "data", "--bundles", "3", "--streamlines", "100", "--seed", "1")
    tractreg("train", "--data-dir", tmp / "data", "--out-dir", tmp / "run", "--epochs", "20",
             "--set", "model.n_keypoints=16", "--set", "model.hidden=16", "--set", "model.layers=2",
             "--set", "data.patch_size=150")
    tractreg("register", "--moving", tmp / "data/moving.trg", "--fixed", tmp / "data/fixed.trg",
             "--checkpoint", tmp / "run/last.ckpt", "--out", tmp / "moved.trg",
             "--transform-out", tmp / "warp.tps")
    tractreg("keypoints", "--tractogram", tmp / "data/fixed.trg", "--checkpoint", tmp / "run/last.ckpt",
             "--out", tmp / "keypoints.csv")
    print("pre-registration:")
    tractreg("evaluate", "--moved", tmp / "data/moving.trg", "--fixed", tmp / "data/fixed.trg")
    print("post-registration:")
    tractreg("evaluate", "--moved", tmp / "moved.trg", "--fixed", tmp / "data/fixed.trg")
    code = tractreg("register", "--moving", tmp / "data/moving.trg", "--fixed", tmp / "data/fixed.trg",
                    "--out", tmp / "x.trg")
    print("missing --checkpoint exits with", code)
