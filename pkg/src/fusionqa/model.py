"""Attention message passing over working graphs, fused choice scoring, and
the context-only baseline head. Forward and backward passes are explicit
numpy code in float64.

Per layer, for node i with incoming message edges j -> i::

    key_j   = K(h_j + t_j + g * rho_j)
    alpha_ij = softmax_j( Q(h_i) . key_j / sqrt(D) )
    h_i'    = ReLU(h_i + sum_j alpha_ij * M([h_j ; r_ij]))

Nodes without incoming edges keep ``h_i``. Initial states are
``W_in x_i + b_in + t_i``. A graph's score reads ``[c ; z ; pooled]`` where
``z`` is the final context-node state and ``pooled`` attends over KG nodes
with query ``Q(z)`` and the last layer's key map.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .subgraph import CONTEXT_RELATION, N_NODE_TYPES, N_RELATIONS, WorkingGraph

CKPT_MAGIC = b"FQACKPT\n"
CKPT_VERSION = 1


class ConfigError(ValueError):
    pass


class ContractViolation(ValueError):
    pass


class NonFiniteLoss(FloatingPointError):
    def __init__(self, example_id: str, value: float):
        super().__init__(f"non-finite loss {value} on example {example_id}")
        self.example_id = example_id


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int = 128
    gnn_dim: int = 200
    fc_dim: int = 200
    gnn_layers: int = 2
    fc_layers: int = 0
    pooling: str = "attention"
    bidirectional: bool = True
    kind: str = "qagnn"
    seed: int = 0

    def __post_init__(self):
        for name in ("input_dim", "gnn_dim", "fc_dim", "gnn_layers"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.fc_layers not in (0, 1):
            raise ConfigError(f"fc_layers must be 0 or 1, got {self.fc_layers}")
        if self.pooling not in ("attention", "mean"):
            raise ConfigError(f"unknown pooling {self.pooling!r}")
        if self.kind not in ("qagnn", "baseline"):
            raise ConfigError(f"unknown model kind {self.kind!r}")

    @property
    def fused_dim(self) -> int:
        return self.input_dim + 2 * self.gnn_dim


# name -> (shape, init) where init is "linear:<fan_in>", "embed" or "zero"
def param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    d, D, F = cfg.input_dim, cfg.gnn_dim, cfg.fc_dim
    if cfg.kind == "baseline":
        return [
            ("base.W1", (d, F), f"linear:{d}"),
            ("base.b1", (F,), f"linear:{d}"),
            ("base.w", (F,), f"linear:{F}"),
            ("base.b", (), f"linear:{F}"),
        ]
    shapes = [
        ("input.W", (d, D), f"linear:{d}"),
        ("input.b", (D,), f"linear:{d}"),
        ("type_emb", (N_NODE_TYPES, D), "embed"),
        ("rel_emb", (N_RELATIONS, D), "embed"),
        ("gate", (), "zero"),
    ]
    for layer in range(cfg.gnn_layers):
        shapes += [
            (f"layer{layer}.Wq", (D, D), f"linear:{D}"),
            (f"layer{layer}.bq", (D,), f"linear:{D}"),
            (f"layer{layer}.Wk", (D, D), f"linear:{D}"),
            (f"layer{layer}.bk", (D,), f"linear:{D}"),
            (f"layer{layer}.Wm", (2 * D, D), f"linear:{2 * D}"),
            (f"layer{layer}.bm", (D,), f"linear:{2 * D}"),
        ]
    fused = cfg.fused_dim
    if cfg.fc_layers:
        shapes += [
            ("head.W1", (fused, F), f"linear:{fused}"),
            ("head.b1", (F,), f"linear:{fused}"),
            ("head.w", (F,), f"linear:{F}"),
            ("head.b", (), f"linear:{F}"),
        ]
    else:
        shapes += [("head.w", (fused,), f"linear:{fused}"), ("head.b", (), f"linear:{fused}")]
    return shapes


def init_params(cfg: ModelConfig) -> dict[str, np.ndarray]:
    """Seeded init: linear maps U(-1/sqrt(fan_in), 1/sqrt(fan_in)), embeddings N(0, 0.02^2)."""
    rng = np.random.default_rng(cfg.seed)
    params = {}
    for name, shape, init in param_shapes(cfg):
        if init == "embed":
            params[name] = rng.normal(0.0, 0.02, size=shape)
        elif init == "zero":
            params[name] = np.zeros(shape)
        else:
            bound = 1.0 / math.sqrt(int(init.split(":")[1]))
            params[name] = rng.uniform(-bound, bound, size=shape)
    return params


def n_parameters(params: dict[str, np.ndarray]) -> int:
    return sum(int(np.size(p)) for p in params.values())


def choice_probabilities(scores: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction."""
    scores = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise ContractViolation("non-finite choice score")
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


class _Segments:
    """Sums and softmaxes over contiguous groups of a sorted key array."""

    def __init__(self, keys: np.ndarray, n: int):
        self.keys = keys
        self.n = n
        if keys.size:
            self.uniq, self.starts = np.unique(keys, return_index=True)
        else:
            self.uniq = self.starts = np.zeros(0, dtype=np.int64)

    def sum(self, v: np.ndarray) -> np.ndarray:
        out = np.zeros((self.n,) + v.shape[1:])
        if self.keys.size:
            out[self.uniq] = np.add.reduceat(v, self.starts, axis=0)
        return out

    def softmax(self, s: np.ndarray) -> np.ndarray:
        if not s.size:
            return s.copy()
        m = np.zeros(self.n)
        m[self.uniq] = np.maximum.reduceat(s, self.starts)
        e = np.exp(s - m[self.keys])
        return e / self.sum(e)[self.keys]

    def softmax_backward(self, alpha: np.ndarray, dalpha: np.ndarray) -> np.ndarray:
        return alpha * (dalpha - self.sum(alpha * dalpha)[self.keys])


def _scatter(index: np.ndarray, n: int) -> sp.csr_matrix:
    """Sparse (n x len(index)) matrix summing rows into ``index`` slots."""
    m = index.size
    return sp.csr_matrix((np.ones(m), (index, np.arange(m))), shape=(n, m))


class GraphBatch:
    """Disjoint union of working graphs with precomputed index structures.

    KG node inputs are rows ``node_table[kg_id]``; each graph's context node
    takes its context vector instead.
    """

    def __init__(
        self,
        graphs: Sequence[WorkingGraph],
        contexts: np.ndarray,
        node_table,
        bidirectional: bool = True,
    ):
        if len(graphs) != len(contexts):
            raise ContractViolation("graphs and contexts differ in length")
        sizes = np.array([g.n_nodes for g in graphs], dtype=np.int64)
        offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)
        self.n_graphs = len(graphs)
        self.n_nodes = N = int(sizes.sum())
        self.contexts = np.asarray(contexts, dtype=np.float64).reshape(len(graphs), -1)
        d = self.contexts.shape[1]
        ids = np.concatenate([g.kg_ids for g in graphs]) if graphs else np.zeros(0, np.int64)
        X = np.empty((N, d))
        kg_rows = ids >= 0
        if kg_rows.any():
            X[kg_rows] = np.asarray(node_table[ids[kg_rows]], dtype=np.float64).reshape(-1, d)
        X[offsets] = self.contexts
        self.X = X
        self.types = np.concatenate([g.node_types for g in graphs]).astype(np.int64) if graphs else np.zeros(0, np.int64)
        self.rho = np.concatenate([g.relevance for g in graphs]) if graphs else np.zeros(0)
        self.ctx = offsets
        self.graph_of = np.repeat(np.arange(self.n_graphs), sizes)

        src, dst, rel = [], [], []
        for g, off in zip(graphs, offsets):
            e = g.edges
            if not e.size:
                continue
            src.append(e[:, 0] + off)
            dst.append(e[:, 1] + off)
            rel.append(e[:, 2])
            if bidirectional:
                kg = e[:, 2] != CONTEXT_RELATION
                src.append(e[kg, 1] + off)
                dst.append(e[kg, 0] + off)
                rel.append(e[kg, 2])
        if src:
            src, dst, rel = (np.concatenate(a).astype(np.int64) for a in (src, dst, rel))
        else:
            src = dst = rel = np.zeros(0, dtype=np.int64)
        order = np.lexsort((src, dst))
        self.src, self.dst, self.rel = src[order], dst[order], rel[order]
        self.seg = _Segments(self.dst, N)
        self.has_in = np.zeros(N, dtype=bool)
        self.has_in[self.dst] = True
        self.S_src = _scatter(self.src, N)
        self.S_rel = _scatter(self.rel, N_RELATIONS)
        self.S_type = _scatter(self.types, N_NODE_TYPES)

        is_kg = np.ones(N, dtype=bool)
        is_kg[offsets] = False
        self.kg = np.flatnonzero(is_kg)
        self.kg_graph = self.graph_of[self.kg]
        self.pool_seg = _Segments(self.kg_graph, self.n_graphs)
        self.S_kg_type = _scatter(self.types[self.kg], N_NODE_TYPES)
        counts = np.bincount(self.kg_graph, minlength=self.n_graphs).astype(np.float64)
        self.kg_counts = counts


def _relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def gnn_forward(params: dict[str, np.ndarray], batch: GraphBatch, cfg: ModelConfig) -> tuple[np.ndarray, dict]:
    """Final node states (N x D) and the activations needed for backward."""
    if batch.X.shape[1] != cfg.input_dim:
        raise ContractViolation(f"node inputs have dim {batch.X.shape[1]}, model expects {cfg.input_dim}")
    D = cfg.gnn_dim
    scale = 1.0 / math.sqrt(D)
    T, R, g = params["type_emb"], params["rel_emb"], float(params["gate"])
    H = batch.X @ params["input.W"] + params["input.b"] + T[batch.types]
    type_rho = T[batch.types] + g * batch.rho[:, None]
    layers = []
    for layer in range(cfg.gnn_layers):
        p = lambda k: params[f"layer{layer}.{k}"]  # noqa: E731
        A = H @ p("Wq") + p("bq")
        U = H + type_rho
        Kt = U @ p("Wk") + p("bk")
        s = np.einsum("ed,ed->e", A[batch.dst], Kt[batch.src]) * scale
        alpha = batch.seg.softmax(s)
        Min = np.concatenate([H[batch.src], R[batch.rel]], axis=1)
        M = Min @ p("Wm") + p("bm")
        pre = H + batch.seg.sum(alpha[:, None] * M)
        Hn = np.where(batch.has_in[:, None], _relu(pre), H)
        layers.append(dict(H=H, A=A, U=U, Kt=Kt, alpha=alpha, Min=Min, M=M, pre=pre))
        H = Hn
    return H, {"layers": layers, "H": H}


def score_forward(params: dict[str, np.ndarray], batch: GraphBatch, cfg: ModelConfig) -> tuple[np.ndarray, dict]:
    """One score per graph, plus the full trace."""
    H, trace = gnn_forward(params, batch, cfg)
    D = cfg.gnn_dim
    scale = 1.0 / math.sqrt(D)
    z = H[batch.ctx]
    Hk = H[batch.kg]
    if cfg.pooling == "attention":
        last = cfg.gnn_layers - 1
        Wq, bq = params[f"layer{last}.Wq"], params[f"layer{last}.bq"]
        Wk, bk = params[f"layer{last}.Wk"], params[f"layer{last}.bk"]
        q = z @ Wq + bq
        Up = Hk + params["type_emb"][batch.types[batch.kg]] + float(params["gate"]) * batch.rho[batch.kg][:, None]
        Kp = Up @ Wk + bk
        sp_ = np.einsum("nd,nd->n", q[batch.kg_graph], Kp) * scale
        beta = batch.pool_seg.softmax(sp_)
        trace.update(q=q, Up=Up, Kp=Kp)
    else:
        beta = 1.0 / batch.kg_counts[batch.kg_graph] if batch.kg.size else np.zeros(0)
    pooled = batch.pool_seg.sum(beta[:, None] * Hk)
    fused = np.concatenate([batch.contexts, z, pooled], axis=1)
    score, head = _head_forward(params, fused, "head", cfg.fc_layers)
    trace.update(z=z, Hk=Hk, beta=beta, pooled=pooled, fused=fused, head=head)
    return score, trace


def _head_forward(params, x, prefix, fc_layers):
    if fc_layers:
        z1 = x @ params[f"{prefix}.W1"] + params[f"{prefix}.b1"]
        a1 = _relu(z1)
        return a1 @ params[f"{prefix}.w"] + params[f"{prefix}.b"], {"x": x, "z1": z1, "a1": a1}
    return x @ params[f"{prefix}.w"] + params[f"{prefix}.b"], {"x": x}


def _head_backward(params, cache, dscore, prefix, fc_layers, grads):
    if fc_layers:
        grads[f"{prefix}.w"] = cache["a1"].T @ dscore
        grads[f"{prefix}.b"] = np.asarray(dscore.sum())
        dz1 = np.outer(dscore, params[f"{prefix}.w"]) * (cache["z1"] > 0)
        grads[f"{prefix}.W1"] = cache["x"].T @ dz1
        grads[f"{prefix}.b1"] = dz1.sum(axis=0)
        return dz1 @ params[f"{prefix}.W1"].T
    grads[f"{prefix}.w"] = cache["x"].T @ dscore
    grads[f"{prefix}.b"] = np.asarray(dscore.sum())
    return np.outer(dscore, params[f"{prefix}.w"])


def score_backward(
    params: dict[str, np.ndarray], batch: GraphBatch, cfg: ModelConfig, trace: dict, dscore: np.ndarray
) -> dict[str, np.ndarray]:
    D, d = cfg.gnn_dim, cfg.input_dim
    scale = 1.0 / math.sqrt(D)
    grads = {name: np.zeros_like(p) for name, p in params.items()}
    dfused = _head_backward(params, trace["head"], dscore, "head", cfg.fc_layers, grads)
    dz = dfused[:, d:d + D].copy()
    dpooled = dfused[:, d + D:]

    H = trace["H"]
    dH = np.zeros_like(H)
    beta, Hk = trace["beta"], trace["Hk"]
    dpool_n = dpooled[batch.kg_graph]
    dHk = beta[:, None] * dpool_n
    dT = np.zeros_like(params["type_emb"])
    dg = 0.0
    if cfg.pooling == "attention" and batch.kg.size:
        last = cfg.gnn_layers - 1
        Wq, Wk = params[f"layer{last}.Wq"], params[f"layer{last}.Wk"]
        q, Up, Kp = trace["q"], trace["Up"], trace["Kp"]
        dbeta = np.einsum("nd,nd->n", dpool_n, Hk)
        ds = batch.pool_seg.softmax_backward(beta, dbeta) * scale
        dq = batch.pool_seg.sum(ds[:, None] * Kp)
        dKp = ds[:, None] * q[batch.kg_graph]
        grads[f"layer{last}.Wk"] += Up.T @ dKp
        grads[f"layer{last}.bk"] += dKp.sum(axis=0)
        dUp = dKp @ Wk.T
        dHk += dUp
        dT += batch.S_kg_type @ dUp
        dg += float(np.sum(dUp * batch.rho[batch.kg][:, None]))
        grads[f"layer{last}.Wq"] += trace["z"].T @ dq
        grads[f"layer{last}.bq"] += dq.sum(axis=0)
        dz += dq @ Wq.T
    dH[batch.kg] += dHk
    dH[batch.ctx] += dz

    R = params["rel_emb"]
    for layer in reversed(range(cfg.gnn_layers)):
        c = trace["layers"][layer]
        p = lambda k: params[f"layer{layer}.{k}"]  # noqa: E731
        dpre = np.where(batch.has_in[:, None] & (c["pre"] > 0), dH, 0.0)
        dprev = np.where(batch.has_in[:, None], dpre, dH)
        dagg_e = dpre[batch.dst]
        alpha = c["alpha"]
        dalpha = np.einsum("ed,ed->e", dagg_e, c["M"])
        dM = alpha[:, None] * dagg_e
        grads[f"layer{layer}.Wm"] += c["Min"].T @ dM
        grads[f"layer{layer}.bm"] += dM.sum(axis=0)
        dMin = dM @ p("Wm").T
        dprev += batch.S_src @ dMin[:, :D]
        grads["rel_emb"] += batch.S_rel @ dMin[:, D:]
        ds = batch.seg.softmax_backward(alpha, dalpha) * scale
        dA = batch.seg.sum(ds[:, None] * c["Kt"][batch.src])
        dKt = batch.S_src @ (ds[:, None] * c["A"][batch.dst])
        grads[f"layer{layer}.Wq"] += c["H"].T @ dA
        grads[f"layer{layer}.bq"] += dA.sum(axis=0)
        dprev += dA @ p("Wq").T
        grads[f"layer{layer}.Wk"] += c["U"].T @ dKt
        grads[f"layer{layer}.bk"] += dKt.sum(axis=0)
        dU = dKt @ p("Wk").T
        dprev += dU
        dT += batch.S_type @ dU
        dg += float(np.sum(dU * batch.rho[:, None]))
        dH = dprev
    grads["input.W"] += batch.X.T @ dH
    grads["input.b"] += dH.sum(axis=0)
    dT += batch.S_type @ dH
    grads["type_emb"] += dT
    grads["gate"] += dg
    return grads


def baseline_forward(params: dict[str, np.ndarray], contexts: np.ndarray) -> tuple[np.ndarray, dict]:
    """Context-only head: ReLU hidden layer then a scalar."""
    score, cache = _head_forward(params, np.asarray(contexts, dtype=np.float64), "base", 1)
    return score, {"head": cache}


def baseline_backward(params, trace, dscore) -> dict[str, np.ndarray]:
    grads = {name: np.zeros_like(p) for name, p in params.items()}
    _head_backward(params, trace["head"], dscore, "base", 1, grads)
    return grads


def forward_scores(params, batch_or_contexts, cfg: ModelConfig) -> tuple[np.ndarray, dict]:
    if cfg.kind == "baseline":
        contexts = batch_or_contexts.contexts if isinstance(batch_or_contexts, GraphBatch) else batch_or_contexts
        return baseline_forward(params, contexts)
    return score_forward(params, batch_or_contexts, cfg)


def loss_and_backward(
    params: dict[str, np.ndarray],
    batch,
    labels: np.ndarray,
    cfg: ModelConfig,
    example_ids: Sequence[str] | None = None,
    need_grad: bool = True,
) -> tuple[float, dict[str, np.ndarray] | None, np.ndarray]:
    """Mean cross-entropy over questions; graphs are laid out 4 per question.

    Returns (loss, gradients, probabilities).
    """
    scores, trace = forward_scores(params, batch, cfg)
    scores = scores.reshape(-1, 4)
    labels = np.asarray(labels, dtype=np.int64)
    shifted = scores - scores.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    nll = log_z - shifted[np.arange(len(labels)), labels]
    bad = np.flatnonzero(~np.isfinite(nll))
    if bad.size:
        eid = example_ids[bad[0]] if example_ids is not None else str(bad[0])
        raise NonFiniteLoss(eid, float(nll[bad[0]]))
    loss = float(nll.mean())
    probs = np.exp(shifted - log_z[:, None])
    if not need_grad:
        return loss, None, probs
    dscores = probs.copy()
    dscores[np.arange(len(labels)), labels] -= 1.0
    dscores = (dscores / len(labels)).reshape(-1)
    if cfg.kind == "baseline":
        return loss, baseline_backward(params, trace, dscores), probs
    return loss, score_backward(params, batch, cfg, trace, dscores), probs


def save_checkpoint(params: dict[str, np.ndarray], cfg: ModelConfig, path: str | Path, extra: dict | None = None) -> None:
    """Header (magic, version, JSON config echo) then float64 parameters in declaration order."""
    names = [name for name, _, _ in param_shapes(cfg)]
    header = json.dumps(
        {"config": asdict(cfg), "params": [[n, list(np.shape(params[n]))] for n in names], "extra": extra or {}},
        sort_keys=True,
    ).encode("utf-8")
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(header)))
        fh.write(header)
        for n in names:
            fh.write(np.ascontiguousarray(params[n], dtype="<f8").tobytes())
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], ModelConfig, dict]:
    data = Path(path).read_bytes()
    if data[:8] != CKPT_MAGIC:
        raise ConfigError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<II", data, 8)
    if version != CKPT_VERSION:
        raise ConfigError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    header = json.loads(data[16:16 + hlen].decode("utf-8"))
    cfg = ModelConfig(**header["config"])
    pos = 16 + hlen
    params = {}
    for name, shape in header["params"]:
        count = int(np.prod(shape)) if shape else 1
        if pos + 8 * count > len(data):
            raise ConfigError(f"{path}: truncated checkpoint")
        params[name] = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(shape).copy()
        pos += 8 * count
    if pos != len(data):
        raise ConfigError(f"{path}: trailing bytes in checkpoint")
    return params, cfg, header.get("extra", {})
