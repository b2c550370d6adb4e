"""Builds the extension module and exercises it end to end on a tiny run.

Usage: python3 python/smoke_test.py
"""

import math
import os
import shutil
import subprocess
import sys
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def build(dest):
    subprocess.run(
        ["cargo", "build", "--release", "-p", "vfe-tps-python", "--features", "extension-module"],
        cwd=ROOT,
        check=True,
    )
    lib = os.path.join(ROOT, "target", "release", "libvfe_tps_py.so")
    shutil.copy(lib, os.path.join(dest, "vfe_tps_py.so"))
    sys.path.insert(0, dest)


def main():
    with tempfile.TemporaryDirectory() as tmp:
        build(tmp)
        import vfe_tps_py as v

        data = os.path.join(tmp, "data")
        counts = v.generate_dataset(data, identities=8, seed=1)
        assert set(counts) == {"train", "val", "test"}, counts

        cfg = v.TrainConfig(
            "desk", width=16, layers=1, heads=2, embed_dim=16, batch_size=8, pairs=4, epochs=2
        )
        cfg.set("dtype", "f64")
        cfg.validate()
        t = v.Trainer(cfg, data)
        first = t.run_epoch()
        assert first["epoch"] == 1 and math.isfinite(first["total"]), first
        t.train()
        assert t.epoch == 2 and len(t.history) == 2

        report = t.evaluate("test")
        assert 0.0 <= report["rank1"] <= 100.0, report
        ck = os.path.join(tmp, "ck.vftc")
        t.save(ck)
        again = v.Trainer.load(ck, data)
        assert again.evaluate("test") == report

        rows = v.gradcheck(cfg, seeds=1)
        assert rows and all(r["passed"] for r in rows), rows

        sim = [[0.9, 0.1, 0.3], [0.2, 0.8, 0.7]]
        assert v.rank_k(sim, [0, 1], [0, 1, 1], 1) == 100.0
        assert abs(v.mean_average_precision(sim, [0, 1], [0, 1, 1]) - 100.0) < 1e-12
        s = v.silhouette([[0.0, 0.0], [0.1, 0.0], [5.0, 5.0], [5.1, 5.0]], [0, 0, 1, 1])
        assert s > 0.9, s
        total, i2t, t2i = v.cmpm([[1.0, 0.0], [0.0, 1.0]], [[1.0, 0.1], [0.1, 1.0]], [0, 1])
        assert abs(total - i2t - t2i) < 1e-12 and total > -1e-6

        try:
            cfg.set("no_such_key", 1)
        except ValueError:
            pass
        else:
            raise AssertionError("unknown key accepted")

    print("smoke test passed")


if __name__ == "__main__":
    main()
