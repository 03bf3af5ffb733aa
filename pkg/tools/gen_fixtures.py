#!/usr/bin/env python3
"""Regenerate the checked-in fixture models and datasets (deterministic).

Run from the repository root:  python3 tools/gen_fixtures.py
"""

import hashlib
import json
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from zkeval import graph as G  # noqa: E402
from zkeval import models  # noqa: E402

ROOT = Path(__file__).resolve().parents[1]
FIX = ROOT / "fixtures"


def write_graph(name: str, g) -> None:
    doc = G.graph_to_document(g, encoding="b64")
    path = FIX / f"{name}.json"
    path.write_text(json.dumps(doc, sort_keys=True))
    print(f"{name}: {g.n_parameters()} params, {G.count_macs(g)} MACs -> {path}")


def write_samples(dirname: str, xs, ys) -> str:
    d = FIX / "datasets" / dirname
    d.mkdir(parents=True, exist_ok=True)
    h = hashlib.sha256()
    for i, (x, y) in enumerate(zip(xs, ys)):
        doc = {"x": np.asarray(x).reshape(-1).tolist(),
               "x_shape": list(np.asarray(x).shape), "y": y}
        blob = json.dumps(doc, sort_keys=True)
        (d / f"{i:04d}.json").write_text(blob)
        h.update(blob.encode())
    digest = h.hexdigest()
    (d / "digest.txt").write_text(digest + "\n")
    print(f"{dirname}: {len(xs)} samples, digest {digest[:16]}...")
    return digest


def main():
    FIX.mkdir(exist_ok=True)
    rng = np.random.default_rng(20240517)

    regression = models.linear_graph(in_dim=30, out_dim=1, seed=101)
    write_graph("regression", regression)

    svm = models.svm_margin_graph(in_dim=62, seed=102)
    write_graph("svm", svm)

    mlp = models.mlp_graph(784, 32, 10, seed=110)
    write_graph("mlp_784x32x10", mlp)

    cnn = models.cnn_graph(channels=8, image=16, kernel=3, out_dim=10, seed=104)
    write_graph("cnn_small", cnn)

    tiny = models.mlp_graph(16, 8, 4, seed=105)
    write_graph("mlp_tiny", tiny)

    # pixel-style classification set for the MLP; labels from the float model
    # with a hold-out fraction flipped so accuracy is nontrivial
    xs = models.sparse_grid_inputs(rng, 64, (784,))
    ys = []
    for i, x in enumerate(xs):
        label = int(np.argmax(G.infer_float(mlp, x)))
        if i % 5 == 4:
            label = (label + 1) % 10
        ys.append(label)
    write_samples("mlp_mnist_like", xs, ys)

    xs = models.dense_grid_inputs(rng, 32, (30,), lo=0.0, hi=1.0)
    ys = [float(np.round(G.infer_float(regression, x)[0] * 64) / 64) for x in xs]
    write_samples("regression_targets", xs, ys)

    xs = models.dense_grid_inputs(rng, 32, (62,), lo=0.0, hi=1.0)
    ys = [int(G.infer_float(svm, x)[0] > 0) for x in xs]
    write_samples("svm_margins", xs, ys)

    xs = [np.round(np.clip(rng.normal(0.3, 0.25, (1, 16, 16)), 0, 1) * 128) / 128
          for _ in range(32)]
    ys = [int(np.argmax(G.infer_float(cnn, x))) for x in xs]
    write_samples("cnn_images", xs, ys)

    xs = models.dense_grid_inputs(rng, 32, (16,))
    ys = [int(np.argmax(G.infer_float(tiny, x))) for x in xs]
    write_samples("tiny_classes", xs, ys)


if __name__ == "__main__":
    main()
