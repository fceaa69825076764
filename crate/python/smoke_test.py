#!/usr/bin/env python3
"""Builds the camhd_py extension and exercises the main entry points."""

import json
import shutil
import subprocess
import sys
import sysconfig
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def build_extension() -> Path:
    subprocess.run(
        ["cargo", "build", "-p", "camhd-py", "--release"], cwd=ROOT, check=True
    )
    built = ROOT / "target" / "release" / "libcamhd_py.so"
    suffix = sysconfig.get_config_var("EXT_SUFFIX") or ".so"
    out_dir = Path(tempfile.mkdtemp(prefix="camhd_py_"))
    target = out_dir / f"camhd_py{suffix}"
    shutil.copy2(built, target)
    return out_dir


def main() -> None:
    sys.path.insert(0, str(build_extension()))
    import camhd_py

    # quadratic surface: gradient descent at 1/L reaches the minimum
    q = camhd_py.Quadratic(6, 25.0, 3)
    theta = [x + 1.0 for x in q.solution()]
    for _ in range(400):
        g = q.grad(theta)
        theta = [t - gi / q.lipschitz for t, gi in zip(theta, g)]
    assert q.loss(theta) < 1e-8, q.loss(theta)

    # small classifier with the multi-level optimizer
    x, y = camhd_py.make_blobs(150, 4, 3, 3.0, 0)
    net = camhd_py.Network([4, 8, 3], seed=1)
    opt = camhd_py.Optimizer(
        net,
        json.dumps(
            {
                "mode": "cam-hd",
                "alpha0": 0.05,
                "hyper_lr": 1e-4,
                "cam_lr": 0.01,
                "levels": ["global", "layer"],
                "gamma_init": [0.5, 0.5],
                "base": {"kind": "sgd"},
            }
        ),
    )
    first = net.forward(x, y)
    for _ in range(60):
        loss = net.forward(x, y)
        grads = net.backward()
        net.set_params(opt.step(net.params(), grads))
    assert loss < first, (first, loss)
    gamma = opt.gamma()
    assert abs(sum(gamma) - 1.0) < 1e-9, gamma
    assert opt.t == 60

    preds = net.predict(x)
    acc = sum(
        1 for row, label in zip(preds, y) if max(range(3), key=row.__getitem__) == label
    ) / len(y)
    assert acc > 0.8, acc

    # harness + verification entry points
    summary = json.loads(
        camhd_py.run_experiment(
            json.dumps(
                {
                    "model": {"hidden": [8]},
                    "dataset": {
                        "kind": "blobs",
                        "n": 120,
                        "d": 4,
                        "classes": 3,
                        "separation": 3.0,
                    },
                    "optimizer": {"alpha0": 0.01},
                    "batch_size": 30,
                    "epochs": 2,
                    "seeds": [0, 1],
                }
            )
        )
    )
    assert summary["n_seeds"] == 2 and summary["n_diverged"] == 0, summary

    reports = [json.loads(r) for r in camhd_py.run_verify("theorem1")]
    assert all(r["passed"] for r in reports), reports

    print("smoke test passed")


if __name__ == "__main__":
    main()
