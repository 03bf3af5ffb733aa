"""Desk-scale example model builders and synthetic sample generators."""

from __future__ import annotations

import numpy as np

from .graph import Graph, load_graph


def _w(rng, shape, spread):
    return rng.uniform(-spread, spread, size=shape)


def linear_graph(in_dim: int = 30, out_dim: int = 1, seed: int = 11,
                 spread: float = 0.6) -> Graph:
    """Plain linear map y = Wx + b (regression-style)."""
    rng = np.random.default_rng(seed)
    return load_graph({
        "ir_version": 1,
        "inputs": [{"name": "x", "shape": [in_dim]}],
        "nodes": [
            {"id": "wx", "op": "MatMul", "inputs": ["x", "w"]},
            {"id": "y", "op": "Add", "inputs": ["wx", "b"]},
        ],
        "outputs": ["y"],
        "weights": {
            "w": {"shape": [in_dim, out_dim],
                  "data": _w(rng, (in_dim, out_dim), spread).reshape(-1).tolist()},
            "b": {"shape": [out_dim], "data": _w(rng, (out_dim,), spread).tolist()},
        },
    })


def svm_margin_graph(in_dim: int = 62, seed: int = 13, spread: float = 0.5) -> Graph:
    """Linear decision margin w.x + b; the sign is public postprocessing."""
    return linear_graph(in_dim, 1, seed=seed, spread=spread)


def mlp_graph(in_dim: int = 784, hidden: int = 32, out_dim: int = 10,
              seed: int = 3, spread: float = 0.8, argmax_head: bool = False) -> Graph:
    rng = np.random.default_rng(seed)
    nodes = [
        {"id": "h", "op": "MatMul", "inputs": ["x", "w1"]},
        {"id": "hb", "op": "Add", "inputs": ["h", "b1"]},
        {"id": "act", "op": "ReLU", "inputs": ["hb"]},
        {"id": "o", "op": "MatMul", "inputs": ["act", "w2"]},
        {"id": "logits", "op": "Add", "inputs": ["o", "b2"]},
    ]
    outputs = ["logits"]
    if argmax_head:
        nodes.append({"id": "label", "op": "ArgMax", "inputs": ["logits"]})
        outputs = ["label"]
    return load_graph({
        "ir_version": 1,
        "inputs": [{"name": "x", "shape": [in_dim]}],
        "nodes": nodes,
        "outputs": outputs,
        "weights": {
            "w1": {"shape": [in_dim, hidden],
                   "data": _w(rng, (in_dim, hidden), spread).reshape(-1).tolist()},
            "b1": {"shape": [hidden], "data": _w(rng, (hidden,), spread).tolist()},
            "w2": {"shape": [hidden, out_dim],
                   "data": _w(rng, (hidden, out_dim), spread).reshape(-1).tolist()},
            "b2": {"shape": [out_dim], "data": _w(rng, (out_dim,), spread).tolist()},
        },
    })


def cnn_graph(channels: int = 8, image: int = 16, kernel: int = 3,
              out_dim: int = 10, seed: int = 17, spread: float = 0.35) -> Graph:
    """One conv layer, ReLU, then a dense classifier head."""
    rng = np.random.default_rng(seed)
    conv_out = image - kernel + 1
    flat = channels * conv_out * conv_out
    return load_graph({
        "ir_version": 1,
        "inputs": [{"name": "img", "shape": [1, image, image]}],
        "nodes": [
            {"id": "conv", "op": "Conv2D", "inputs": ["img", "k"],
             "stride": 1, "padding": 0},
            {"id": "act", "op": "ReLU", "inputs": ["conv"]},
            {"id": "flat", "op": "Reshape", "inputs": ["act"], "shape": [flat]},
            {"id": "o", "op": "MatMul", "inputs": ["flat", "wf"]},
            {"id": "logits", "op": "Add", "inputs": ["o", "bf"]},
        ],
        "outputs": ["logits"],
        "weights": {
            "k": {"shape": [channels, 1, kernel, kernel],
                  "data": _w(rng, (channels, 1, kernel, kernel), spread)
                  .reshape(-1).tolist()},
            "wf": {"shape": [flat, out_dim],
                   "data": _w(rng, (flat, out_dim), spread * 0.3).reshape(-1).tolist()},
            "bf": {"shape": [out_dim], "data": _w(rng, (out_dim,), spread).tolist()},
        },
    })


def sparse_grid_inputs(rng: np.random.Generator, n: int, shape,
                       density: float = 0.2, grid: int = 128) -> list[np.ndarray]:
    """Pixel-style samples: mostly zeros, active values on a 1/grid lattice."""
    out = []
    for _ in range(n):
        x = np.zeros(shape)
        mask = rng.random(shape) < density
        x[mask] = np.round(rng.uniform(0, 1, int(mask.sum())) * grid) / grid
        out.append(x)
    return out


def dense_grid_inputs(rng: np.random.Generator, n: int, shape,
                      grid: int = 16, lo: float = -1.0, hi: float = 1.0):
    return [np.round(rng.uniform(lo, hi, shape) * grid) / grid for _ in range(n)]
