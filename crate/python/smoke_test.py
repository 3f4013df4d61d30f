"""Smoke test for the epimatch Python extension.

Build and install first:
    pip install --no-build-isolation ./crates/python
"""

import json
import math
import sys
import tempfile
from pathlib import Path

import epimatch


def main() -> int:
    k = (500.0, 500.0, 35.0, 28.0)
    rot = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
    t = [0.05, 0.01, 0.0]
    f = epimatch.fundamental(k, rot, t)
    # A point at depth 2 seen from both cameras lies on its epipolar line.
    x, y, z = 0.1, -0.05, 2.0
    ps = (k[0] * x / z + k[2], k[1] * y / z + k[3])
    pt = (k[0] * (x + t[0]) / z + k[2], k[1] * (y + t[1]) / z + k[3])
    d = epimatch.symmetric_distance(f, ps, pt)
    assert d < 1e-9, d

    n = 14
    patch = [math.sin(0.7 * i) + math.cos(1.3 * j) * 0.5 + ((i * 7 + j * 3) % 5) * 0.1 for j in range(n) for i in range(n)]
    shifted = [patch[((j + 2) % n) * n + (i - 3) % n] for j in range(n) for i in range(n)]
    assert epimatch.phase_correlation(patch, shifted, n) == (-3, 2)

    with tempfile.TemporaryDirectory() as tmp:
        root = Path(tmp)
        cfg = root / "synth.json"
        cfg.write_text(json.dumps({"scenes": 1, "height": 56, "width": 70, "views_per_scene": 1}))
        code = epimatch.run_cli(["synth", "--config", str(cfg), "--out", str(root / "scenes")])
        assert code == 0, code
        scene = root / "scenes" / "scene_000"
        img = scene / "image.png"
        rows = epimatch.match_images(str(img), str(img), embed_dim=32)
        assert len(rows) == 20 and all(abs(r[4] - 1.0) < 1e-9 and r[:2] == r[2:4] for r in rows), rows[:3]

        pose = json.loads((scene / "view_000_pose.json").read_text())
        intr = json.loads((scene / "intrinsics.json").read_text())
        lines = (scene / "view_000_gt.csv").read_text().splitlines()[1:]
        gt = [tuple(float(v) for v in line.split(",")) for line in lines]
        r = pose["R"]
        rotation = [r[0:3], r[3:6], r[6:9]]
        report = json.loads(epimatch.evaluate(gt, (intr["fx"], intr["fy"], intr["cx"], intr["cy"]), rotation, pose["t"]))
        assert report["precision"] == 100.0, report

        assert epimatch.run_cli(["eval", "--bogus"]) == 2

    print("python smoke test: ok")
    return 0


if __name__ == "__main__":
    sys.exit(main())
