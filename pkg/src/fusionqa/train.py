"""Training loop, evaluation, dev-based model selection and the experiment grid."""
from __future__ import annotations

import copy
import itertools
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .grounding import DataError
from .model import ConfigError, GraphBatch, ModelConfig, forward_scores, init_params, loss_and_backward
from .optim import STEPS, OptimizerConfig, clip_grad_norm, init_state

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    epochs: int = 20
    lr: float = 1e-4
    optimizer: str = "radam"
    weight_decay: float = 0.0
    clip_norm: float = 1.0
    seed: int = 0
    facts: bool = False
    k: int = 2
    fc_layers: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        if self.optimizer not in STEPS:
            raise ConfigError(f"optimizer must be one of {sorted(STEPS)}")


@dataclass
class TrainRun:
    config: dict
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_dev: float = float("nan")
    test_acc: float | None = None
    wall_clock: float = 0.0

    def to_json(self) -> dict:
        return asdict(self)


def _graph_batch(questions, node_table, bidirectional: bool) -> GraphBatch:
    graphs = [g for q in questions for g in q.graphs]
    contexts = np.concatenate([q.contexts for q in questions])
    return GraphBatch(graphs, contexts, node_table, bidirectional)


def _contexts(questions) -> np.ndarray:
    return np.concatenate([q.contexts for q in questions])


def make_batch(dataset, idx: Sequence[int], cfg: ModelConfig):
    qs = [dataset.questions[i] for i in idx]
    if cfg.kind == "baseline":
        return _contexts(qs)
    return _graph_batch(qs, dataset.node_table, cfg.bidirectional)


def predict_scores(params, dataset, cfg: ModelConfig, batch_size: int = 256) -> np.ndarray:
    """(n_questions, 4) raw choice scores."""
    out = []
    for start in range(0, len(dataset), batch_size):
        batch = make_batch(dataset, range(start, min(start + batch_size, len(dataset))), cfg)
        out.append(forward_scores(params, batch, cfg)[0].reshape(-1, 4))
    return np.concatenate(out) if out else np.zeros((0, 4))


def accuracy(scores: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of rows whose argmax (lowest index on ties) equals the label."""
    if len(labels) == 0:
        raise DataError("cannot evaluate an empty split")
    return float(np.mean(np.argmax(scores, axis=1) == np.asarray(labels)))


def evaluate(params, dataset, cfg: ModelConfig) -> float:
    if len(dataset) == 0:
        raise DataError("cannot evaluate an empty split")
    return accuracy(predict_scores(params, dataset, cfg), dataset.labels)


class _EvalCache:
    """Batches for a fixed split, built once and reused every epoch."""

    def __init__(self, dataset, cfg: ModelConfig, batch_size: int = 256):
        self.labels = dataset.labels
        self.cfg = cfg
        self.batches = [
            make_batch(dataset, range(s, min(s + batch_size, len(dataset))), cfg)
            for s in range(0, len(dataset), batch_size)
        ]

    def accuracy(self, params) -> float:
        scores = np.concatenate([forward_scores(params, b, self.cfg)[0].reshape(-1, 4) for b in self.batches])
        return accuracy(scores, self.labels)


def train(
    train_set,
    dev_set,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    test_set=None,
    on_epoch: Callable[[dict], None] | None = None,
) -> tuple[dict[str, np.ndarray], TrainRun]:
    """Train for the full epoch budget; keep the parameters of the best dev epoch.

    Returns (best parameters, run record). The test split, when given, is
    scored once with the best parameters.
    """
    for ds in (train_set, dev_set, test_set):
        if ds is not None and ds.k is not None and model_cfg.kind == "qagnn" and ds.k != cfg.k:
            raise ConfigError(f"k mismatch: cache built with k={ds.k}, config asks k={cfg.k}")
    if model_cfg.kind == "qagnn" and model_cfg.gnn_layers != cfg.k:
        raise ConfigError(f"k mismatch: gnn_layers={model_cfg.gnn_layers}, k={cfg.k}")
    if len(train_set) == 0:
        raise DataError("empty training split")
    t0 = time.perf_counter()
    params = init_params(model_cfg)
    state = init_state(params)
    hp = OptimizerConfig(lr=cfg.lr, weight_decay=cfg.weight_decay)
    step = STEPS[cfg.optimizer]
    rng = np.random.default_rng(cfg.seed)
    labels = train_set.labels
    dev_eval = _EvalCache(dev_set, model_cfg)
    run = TrainRun(config={"model": asdict(model_cfg), "train": asdict(cfg)})
    best_params = None
    n = len(train_set)
    ids = [q.example_id for q in train_set.questions]
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch = make_batch(train_set, idx, model_cfg)
            loss, grads, _ = loss_and_backward(params, batch, labels[idx], model_cfg, [ids[i] for i in idx])
            clip_grad_norm(grads, cfg.clip_norm)
            step(params, grads, state, hp)
            total += loss * len(idx)
        dev_acc = dev_eval.accuracy(params)
        record = {"epoch": epoch, "train_loss": total / n, "dev_acc": dev_acc}
        run.epochs.append(record)
        if on_epoch is not None:
            on_epoch(record)
        logger.info("epoch %d loss %.4f dev %.4f", epoch, record["train_loss"], dev_acc)
        if best_params is None or dev_acc > run.best_dev:
            run.best_epoch, run.best_dev = epoch, dev_acc
            best_params = copy.deepcopy(params)
    if test_set is not None and len(test_set):
        run.test_acc = evaluate(best_params, test_set, model_cfg)
    run.wall_clock = time.perf_counter() - t0
    return best_params, run


@dataclass(frozen=True)
class GridCell:
    k: int
    fc_layers: int
    facts: bool
    seed: int

    @property
    def setting(self) -> str:
        return "with facts" if self.facts else "w/o facts"


def grid_cells(ks: Iterable[int], fcs: Iterable[int], facts: Iterable[bool], base_seed: int = 0) -> list[GridCell]:
    cells = list(itertools.product(facts, ks, fcs))
    if not cells:
        raise ConfigError("experiment grid is empty")
    return [GridCell(k, fc, f, base_seed + i) for i, (f, k, fc) in enumerate(cells)]


def run_matrix(
    cells: Sequence[GridCell],
    run_cell: Callable[[GridCell], TrainRun],
) -> list[dict]:
    """One training run per cell; failures are recorded and the grid continues."""
    rows = []
    for cell in cells:
        logger.info("grid cell %s seed=%d", cell, cell.seed)
        row = {"setting": cell.setting, "k": cell.k, "fc": cell.fc_layers, "seed": cell.seed}
        try:
            run = run_cell(cell)
            row.update(dev=run.best_dev, test=run.test_acc, error=None)
        except Exception as exc:  # recorded per cell, grid continues
            logger.exception("grid cell %s failed", cell)
            row.update(dev=None, test=None, error=f"{type(exc).__name__}: {exc}")
        rows.append(row)
    return rows


def format_table(rows: Sequence[dict]) -> str:
    """Tab-separated results table: setting, k, fc, dev, test."""
    def fmt(v):
        return "ERR" if v is None else f"{v:.3f}"

    lines = ["setting\tk\tfc\tdev\ttest"]
    for r in rows:
        lines.append(f"{r['setting']}\t{r['k']}\t{r['fc']}\t{fmt(r['dev'])}\t{fmt(r['test'])}")
    return "\n".join(lines) + "\n"


def metrics_line(record: dict) -> str:
    return json.dumps(record, sort_keys=True)
