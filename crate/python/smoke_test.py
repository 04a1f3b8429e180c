"""Smoke test for the ivfuse Python extension.

Builds the extension with cargo unless IVFUSE_LIB points at an already
built shared library, imports it, and exercises every exported entry point
on a tiny synthetic dataset.
"""

import importlib.util
import os
import shutil
import subprocess
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def locate_library():
    if "IVFUSE_LIB" in os.environ:
        return Path(os.environ["IVFUSE_LIB"])
    subprocess.run(
        ["cargo", "build", "--release", "-p", "ivfuse-py", "--features", "extension-module"],
        cwd=ROOT,
        check=True,
    )
    target = ROOT / "target" / "release"
    for name in ("libivfuse.so", "libivfuse.dylib", "ivfuse.dll"):
        if (target / name).exists():
            return target / name
    sys.exit(f"no built extension found in {target}")


def load(lib, workdir):
    suffix = ".pyd" if lib.suffix == ".dll" else ".so"
    dest = Path(workdir) / f"ivfuse{suffix}"
    shutil.copy(lib, dest)
    spec = importlib.util.spec_from_file_location("ivfuse", dest)
    module = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(module)
    return module


def check(cond, message):
    if not cond:
        raise AssertionError(message)
    print(f"ok  {message}")


def main():
    lib = locate_library()
    with tempfile.TemporaryDirectory() as work:
        ivfuse = load(lib, work)
        print(f"ivfuse {ivfuse.__version__}")

        parts = ivfuse.decompose_masks([[True, True], [False, False]], [[True, False], [True, False]])
        check(parts["shared"] == [[True, False], [False, False]], "shared part is the intersection")
        check(parts["background"] == [[False, False], [False, True]], "background is the complement of the union")

        flat = [[0.4] * 8 for _ in range(8)]
        ramp = [[(x + y) / 14 for x in range(8)] for y in range(8)]
        m = ivfuse.evaluate(flat, ramp, ramp)
        check(m["en"] == 0.0 and m["sf"] == 0.0 and m["ag"] == 0.0, "metrics of a constant image vanish")
        check(abs(ivfuse.evaluate(ramp, ramp, ramp)["cc"] - 1.0) < 1e-12, "self-correlation is 1")

        phi = [0.1 * k for k in range(12)]
        check(ivfuse.feature_similarity(phi, (3, 2, 2), phi[:3], (3, 1, 1)) == 1.0, "single-point similarity is 1")
        check(abs(ivfuse.contextual_cs(phi[:3], phi[:3], (3, 1, 1))) < 1e-7, "CS of a point with itself is 0")

        model = ivfuse.FusionModel(base_channels=4, seed=1)
        fused = model.fuse(ramp * 3, flat * 3)
        check(len(fused) == 24 and len(fused[0]) == 8, "fusion keeps an unpadded 24x8 input size")
        check(all(0.0 < v < 1.0 for row in fused for v in row), "fused values lie in (0, 1)")

        manifest = ivfuse.write_synthetic_dataset(Path(work) / "data", count=4, size=32, seed=3)
        config = "\n".join([
            "batch_size = 4",
            "group_n = 2",
            "steps = 2",
            "[net]",
            "base_channels = 4",
            "attention_token_downsample = 4",
            "[patch]",
            "size = 16",
        ])
        summary = ivfuse.train(config, manifest, Path(work) / "run")
        check(summary["steps"] == 2, "two training steps ran")
        restored = ivfuse.FusionModel.load(summary["checkpoint"])
        check(restored.parameter_count == model.parameter_count, "checkpoint restores the same architecture")

        try:
            ivfuse.train("steps = 1\ngroup_n = 5", manifest, Path(work) / "bad")
        except ValueError as e:
            check("divisible" in str(e), "invalid configuration raises ValueError")
        else:
            raise AssertionError("expected ValueError")
    print("smoke test passed")


if __name__ == "__main__":
    main()
