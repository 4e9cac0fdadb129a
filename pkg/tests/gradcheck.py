"""Central finite-difference gradient checker shared by unit and acceptance tests."""
from __future__ import annotations

import numpy as np

from fusionqa.model import GraphBatch, ModelConfig, init_params, loss_and_backward

from .conftest import random_working_graph

STEP = 1e-5
# relative error uses max(|a|, |n|, FLOOR) as denominator; see the decisions ledger
FLOOR = 1e-6


def relative_error(a: np.ndarray, n: np.ndarray) -> np.ndarray:
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), FLOOR)


def random_instance(seed: int, k: int, fc: int, gnn_dim: int = 16, input_dim: int = 8, n_questions: int = 2,
                    kind: str = "qagnn"):
    rng = np.random.default_rng(seed)
    table = rng.normal(size=(60, input_dim))
    table /= np.linalg.norm(table, axis=1, keepdims=True)
    graphs = [random_working_graph(rng, int(rng.integers(0, 20)), 60) for _ in range(4 * n_questions)]
    contexts = rng.normal(size=(4 * n_questions, input_dim))
    cfg = ModelConfig(input_dim=input_dim, gnn_dim=gnn_dim, fc_dim=gnn_dim, gnn_layers=k, fc_layers=fc,
                      kind=kind, seed=seed)
    params = init_params(cfg)
    # nonzero gate and larger embeddings so every parameter carries signal
    if kind == "qagnn":
        params["gate"] = np.array(rng.normal())
        params["type_emb"] = rng.normal(0, 0.5, params["type_emb"].shape)
        params["rel_emb"] = rng.normal(0, 0.5, params["rel_emb"].shape)
    labels = rng.integers(0, 4, n_questions)
    batch = GraphBatch(graphs, contexts, table) if kind == "qagnn" else contexts
    return params, batch, labels, cfg


def check(params, batch, labels, cfg: ModelConfig) -> float:
    """Max relative error over every parameter coordinate."""
    _, grads, _ = loss_and_backward(params, batch, labels, cfg)
    worst = 0.0
    for name, p in params.items():
        flat = p.reshape(-1) if p.ndim else None
        numeric = np.zeros(p.size)
        for i in range(p.size):
            if p.ndim:
                orig = flat[i]
                flat[i] = orig + STEP
                up = loss_and_backward(params, batch, labels, cfg, need_grad=False)[0]
                flat[i] = orig - STEP
                down = loss_and_backward(params, batch, labels, cfg, need_grad=False)[0]
                flat[i] = orig
            else:
                orig = float(p)
                params[name] = np.array(orig + STEP)
                up = loss_and_backward(params, batch, labels, cfg, need_grad=False)[0]
                params[name] = np.array(orig - STEP)
                down = loss_and_backward(params, batch, labels, cfg, need_grad=False)[0]
                params[name] = p
            numeric[i] = (up - down) / (2 * STEP)
        analytic = np.asarray(grads[name]).reshape(-1)
        assert analytic.shape == numeric.shape, name
        worst = max(worst, float(relative_error(analytic, numeric).max(initial=0.0)))
    return worst
