#!/usr/bin/env python3
"""Smoke test for the skillseq_py extension module.

Build the module first, then run this script from the repository root:

    cargo build --release -p skillseq-py
    cp target/release/libskillseq_py.so python/skillseq_py.so
    python3 python/smoke_test.py

(With maturin instead: `maturin develop -m crates/py/Cargo.toml`.)
"""

import json
import math
import os
import sys

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import skillseq_py as sq


def approx(a, b, tol=1e-9):
    assert abs(a - b) < tol, f"{a} != {b} (tol {tol})"


def main():
    # ── manifold primitives ──────────────────────────────────────────
    m2 = sq.Manifold.euclidean(2)
    assert m2.ambient_dim == 2 and m2.tangent_dim == 2
    approx(m2.distance([1.0, 1.0], [4.0, 5.0]), 5.0)
    assert m2.exp([1.0, 2.0], [3.0, -1.0]) == [4.0, 1.0]

    pose = sq.Manifold.pose()
    assert pose.ambient_dim == 7 and pose.tangent_dim == 6
    identity = [0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]
    # rotate by pi about x: geodesic distance equals the rotation angle
    target = pose.exp(identity, [0, 0, 0, math.pi, 0, 0])
    approx(pose.distance(identity, target), math.pi)
    # transport preserves norms
    v = [0.3, -0.2, 0.7, 0.1, 0.4, -0.5]
    t = pose.transport(identity, target, v)
    approx(
        sum(x * x for x in t) ** 0.5,
        sum(x * x for x in v) ** 0.5,
    )

    # product of a 1-D Gaussian with itself halves the covariance
    m1 = sq.Manifold.euclidean(1)
    mean, cov = m1.gaussian_product([([2.0], [[0.8]]), ([2.0], [[0.8]])])
    approx(mean[0], 2.0)
    approx(cov[0][0], 0.4)
    # closed-form KL of unit-variance Gaussians one apart
    approx(m1.kl_divergence([0.0], [[1.0]], [1.0], [[1.0]]), 0.5)

    # ── pipeline over JSON schemas ───────────────────────────────────
    dataset = sq.generate_dataset("chain", seed=3, demos=10)
    fetch = sq.learn(dataset, skill="fetch", k=5, seed=0)
    deliver = sq.learn(dataset, skill="deliver", k=5, seed=0)
    joint = sq.compose([fetch, deliver])
    meta = json.loads(joint)
    assert meta["metadata"]["k"] == 10, meta["metadata"]

    initial, goal = sq.sample_task(seed=11)
    plan = sq.plan(joint, initial, goal)
    plan_doc = json.loads(plan)
    names = [seg["skill_name"] for seg in plan_doc["plan"]["segments"]]
    assert names == ["fetch", "deliver"], names

    trajectory = json.loads(sq.track(joint, plan))
    assert len(trajectory["rows"]) == plan_doc["plan"]["horizon"]

    report = json.loads(sq.run_trials([fetch, deliver], trials=3, seed=100))
    assert report["success_rate"] == 1.0, report

    # errors surface as Python exceptions
    try:
        sq.generate_dataset("warehouse")
    except ValueError as e:
        assert "fig3" in str(e)
    else:
        raise AssertionError("invalid scenario must raise ValueError")

    print("smoke test passed:",
          f"{len(json.loads(dataset)['skills'])} skills,",
          f"joint K={meta['metadata']['k']},",
          f"horizon {plan_doc['plan']['horizon']},",
          f"success rate {report['success_rate']}")


if __name__ == "__main__":
    main()
