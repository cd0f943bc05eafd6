"""Smoke test for the ferret Python extension.

Build and install first:

    pip install --no-build-isolation ./crates/py
    python python/smoke_test.py
"""

import math
import random
import struct

import ferret


def f32_bits(x):
    return struct.unpack("<I", struct.pack("<f", x))[0]


def check_frozen_stream():
    assert ferret.derive_subseed(42, 0, 0, 0, 0) == 1248613635523000035
    assert ferret.derive_subseed(42, 1, 2, 0, 0) == 4931694834183873840
    v = ferret.sample_basis(42, 0, 16, 0)
    assert [f32_bits(x) for x in v[:4]] == [0x39BD4607, 0x3E304022, 0x3E643493, 0xBD5B1EC3]
    assert all(abs(x) <= 1 / math.sqrt(16) for x in v)


def check_rho():
    s = ferret.trunc_gauss_stats(1_000_000)
    assert abs(s.rho * s.dim - 1 / 3) < 1e-3
    assert s.bound == 1e-3


def check_projection():
    rng = random.Random(0)
    part = ferret.BlockPartition([40, 24], [6, 4])
    delta = [rng.gauss(0, 1) for _ in range(part.dim)]
    trials = 4000
    acc = [0.0] * part.dim
    for seed in range(trials):
        rec = ferret.reconstruct(ferret.project(delta, part, seed), part)
        acc = [a + r for a, r in zip(acc, rec)]
    mean = [a / trials for a in acc]
    err = math.dist(mean, delta) / math.hypot(*delta)
    assert err < 0.15, err

    upd = ferret.project(delta, part, 7)
    assert upd.numeric_units == 11
    raw = upd.to_bytes()
    assert len(raw) == 1 + 1 + 4 + 8 + 4 + (4 + 4 * 6) + (4 + 4 * 4)
    assert ferret.ProjectedUpdate.from_bytes(raw) == upd
    assert upd.partition_id == part.id


def check_allocation():
    k = ferret.allocate_budgets([10.0, 1.0, 1.0, 1.0], [256] * 4, 64)
    assert sum(k) == 64 and k[0] == max(k)
    try:
        ferret.allocate_budgets([1.0], [4], 9)
    except ValueError:
        pass
    else:
        raise AssertionError("infeasible budget accepted")


EXPERIMENT = """
[federation]
method = "ferret"
num_clients = 4
rounds = 5
local_iters = 5
total_bases = 8
local_lr = 0.05
root_seed = 3

[model]
kind = "linear-regression"
input_dim = 15

[data]
source = "synthetic-regression"
examples = 400
noise = 0.1
seed = 1
test_examples = 100
"""


def check_experiment():
    a = ferret.Experiment.from_toml(EXPERIMENT)
    first = a.step()
    records = a.run()
    assert len(records) == 5 and records[0] == first
    assert records[-1]["loss"] < records[0]["loss"]
    b = ferret.Experiment.from_toml(EXPERIMENT)
    assert b.run() == records
    s = a.summary()
    assert s["total_upload"] == 5 * 4 * 9

    try:
        ferret.Experiment.from_toml(EXPERIMENT.replace("rounds = 5", "rounds = -1"))
    except ValueError as e:
        assert "line" in str(e)
    else:
        raise AssertionError("bad config accepted")


if __name__ == "__main__":
    for check in [check_frozen_stream, check_rho, check_projection, check_allocation, check_experiment]:
        check()
        print(f"ok {check.__name__}")
