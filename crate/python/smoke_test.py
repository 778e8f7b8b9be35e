"""Exercises the compiled bindings end to end on small inputs."""

import json
import math
import random
import sys
import tempfile
from pathlib import Path

import lcnn

ROOT = Path(__file__).resolve().parent.parent


def blobs(m, seed):
    rng = random.Random(seed)
    x, y = [], []
    for i in range(m):
        label = i % 2
        shift = 1.5 if label else -1.5
        x.append([rng.gauss(shift, 1.0), rng.gauss(0.0, 1.0), rng.gauss(0.0, 1.0)])
        y.append(label)
    return x, y


def main():
    x, y = blobs(200, 1)

    net = lcnn.Network([3, 6, 1], ["tanh", "tanh"], seed=3)
    spec = json.dumps({"SE": True, "LC-A": True, "lcnn_D": 1e-4})
    err = net.gradient_check(x[:8], y[:8], spec)
    assert err < 1e-5, err

    epochs = net.train(x, y, spec, epochs=30, batch_size=16, learning_rate=0.05)
    assert len(epochs) == 30
    acc = sum(p == t for p, t in zip(net.predict(x), y)) / len(y)
    assert acc > 0.85, acc

    restored = lcnn.Network.from_json(net.to_json())
    assert restored.predict(x) == net.predict(x)

    terms = net.objective(x, y, spec)
    assert terms["total"] > 0.0
    bound = net.capacity(x)
    assert 1.0 <= bound["gamma_bound"] <= 7.0, bound

    assert lcnn.dichotomy_count(4, 2) == 8
    assert lcnn.dichotomy_count(200, 100) == 2 * sum(math.comb(199, k) for k in range(100))

    w = lcnn.wilcoxon([0.9, 0.8, 0.85, 0.7, 0.95, 0.6], [0.8, 0.7, 0.8, 0.71, 0.9, 0.5])
    assert w["exact"] and 0.0 < w["p_value"] <= 1.0
    f = lcnn.friedman([[3.0, 2.0, 1.0]] * 4)
    assert abs(f["chi_squared"] - 8.0) < 1e-9

    ae = lcnn.Autoencoder(6, 3, seed=2)
    data = [[random.Random(i).random() for _ in range(6)] for i in range(40)]
    assert ae.gradient_check(data[:5], 1e-2, 1e-4) < 1e-5
    before = ae.reconstruction_error(data)
    ae.train(data, 1e-3, 1e-4, epochs=50, batch_size=10, learning_rate=0.5)
    assert ae.reconstruction_error(data) < before
    assert len(ae.encode(data[:2])) == 2

    with tempfile.TemporaryDirectory() as out:
        table = lcnn.run_experiment(str(ROOT / "manifests" / "demo.json"), out)
        assert (Path(out) / "bundle" / "comparison.json").exists()
        assert len(table["datasets"]) == 3

    try:
        lcnn.Network([3, 2], ["bogus"])
    except ValueError:
        pass
    else:
        raise AssertionError("bad activation accepted")

    print("smoke test passed")


if __name__ == "__main__":
    sys.exit(main())
