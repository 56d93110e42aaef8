import json
import os
import subprocess
import sys

import numpy as np
import pytest

from opera import _kernels
from opera.numerics import Rng

needs_numba = pytest.mark.skipif(not _kernels.HAVE_NUMBA, reason="numba not installed")


def python_splitmix(seed, counter, n):
    mask = (1 << 64) - 1
    out = []
    for i in range(counter + 1, counter + n + 1):
        z = (seed + 0x9E3779B97F4A7C15 * i) & mask
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & mask
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & mask
        out.append(z ^ (z >> 31))
    return out


def python_knn(sims, labels, k, num_classes):
    out = []
    for row in sims:
        order = sorted(range(len(row)), key=lambda j: (-row[j], j))[:k]
        counts = [0] * num_classes
        for j in order:
            counts[labels[j]] += 1
        out.append(max(range(num_classes), key=lambda c: (counts[c], -c)))
    return out


@pytest.mark.parametrize("seed, counter", [(0, 0), (12345, 7), (2**64 - 1, 1000)])
def test_splitmix_numpy_matches_big_int_reference(seed, counter):
    got = _kernels.splitmix64_block_numpy(seed, counter, 50)
    assert [int(v) for v in got] == python_splitmix(seed, counter, 50)


@needs_numba
@pytest.mark.parametrize("seed, counter", [(0, 0), (12345, 7), (2**64 - 1, 1000)])
def test_splitmix_backends_identical(seed, counter):
    a = _kernels.splitmix64_block_numpy(seed, counter, 1000)
    b = _kernels.splitmix64_block_numba(seed, counter, 1000)
    assert a.dtype == b.dtype == np.uint64
    assert np.array_equal(a, b)


def test_knn_numpy_matches_reference():
    rng = Rng(0)
    sims = np.round(rng.normal((30, 40)), 1)  # rounding forces similarity ties
    labels = rng.integers(4, 40)
    for k in (1, 2, 5, 40):
        got = _kernels.knn_vote_numpy(sims, labels, k, 4)
        assert got.tolist() == python_knn(sims.tolist(), labels.tolist(), k, 4)


@needs_numba
def test_knn_backends_identical():
    rng = Rng(1)
    for t in range(10):
        r = rng.spawn(t)
        sims = np.round(r.normal((25, 60)), 1)
        labels = r.integers(5, 60)
        k = 1 + t
        assert np.array_equal(
            _kernels.knn_vote_numpy(sims, labels, k, 5), _kernels.knn_vote_numba(sims, labels, k, 5)
        )


def test_vote_tie_goes_to_lowest_class():
    sims = np.array([[0.9, 0.8]])
    labels = np.array([3, 1])
    assert _kernels.knn_vote_numpy(sims, labels, 2, 4).tolist() == [1]
    if _kernels.HAVE_NUMBA:
        assert _kernels.knn_vote_numba(sims, labels, 2, 4).tolist() == [1]


_PROBE = """
import json
from opera import _kernels
from opera.training import RunConfig, datasets_for, pretrain
from opera.evaluation import knn_eval
cfg = RunConfig(num_classes=3, per_class=10, dim=5, backbone="8,8", proj_hidden=8, pred_hidden=8,
                embed_dim=4, head_hidden=8, batch_size=10, epochs=3)
train, test = datasets_for(cfg)
pair, hist = pretrain(cfg, train)
print(json.dumps({"backend": _kernels.backend(),
                  "metrics": [r.to_json_dict() for r in hist.records],
                  "knn": knn_eval(pair.online.encode, train, test, 3)}))
"""


def _run(disable):
    env = dict(os.environ)
    env["OPERA_DISABLE_NUMBA"] = "1" if disable else "0"
    out = subprocess.run([sys.executable, "-c", _PROBE], env=env, capture_output=True, text=True, check=True)
    return json.loads(out.stdout)


@needs_numba
def test_env_flag_switches_backend_without_changing_results():
    fast, slow = _run(False), _run(True)
    assert fast["backend"] == "numba" and slow["backend"] == "numpy"
    assert fast["metrics"] == slow["metrics"]
    assert fast["knn"] == slow["knn"]


@needs_numba
def test_benchmark_runs(capsys):
    import importlib.util
    from pathlib import Path

    path = Path(__file__).resolve().parents[1] / "benchmarks" / "bench_kernels.py"
    spec = importlib.util.spec_from_file_location("bench_kernels", path)
    bench = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(bench)
    assert bench.main(["--repeat", "1"]) == 0
    assert "disagree" not in capsys.readouterr().out
