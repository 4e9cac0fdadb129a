import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError
from sklearn.pipeline import Pipeline

from fusionqa.encoder import HashEncoder, HashEncoderConfig
from fusionqa.estimators import ContextBaselineClassifier, QAGNNClassifier, check_dataset
from fusionqa.grounding import DataError
from fusionqa.pipeline import Grounder, QADataset, WorkingGraphBuilder

QUICK = dict(gnn_dim=8, fc_dim=8, batch_size=16, epochs=2, learning_rate=3e-3)


def test_params_round_trip_and_clone():
    est = QAGNNClassifier(**QUICK)
    assert est.get_params()["gnn_dim"] == 8
    twin = clone(est)
    assert twin.get_params() == est.get_params()
    est.set_params(epochs=7)
    assert est.epochs == 7
    assert ContextBaselineClassifier().get_params()["optimizer"] == "adamw"
    assert QAGNNClassifier().get_params()["optimizer"] == "radam"


def test_fit_predict_shapes(synth):
    train, dev = synth.dataset[:60], synth.dataset[60:80]
    est = QAGNNClassifier(**QUICK).fit(train, eval_set=dev, test_set=dev)
    proba = est.predict_proba(dev)
    assert proba.shape == (20, 4)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0, atol=1e-12)
    assert np.array_equal(est.predict(dev), proba.argmax(axis=1))
    assert est.classes_.tolist() == [0, 1, 2, 3]
    assert est.score(dev) == est.run_.test_acc
    assert est.score(dev, dev.labels) == est.score(dev)


def test_explicit_labels_override(synth):
    ds = synth.dataset[:12]
    y = (ds.labels + 1) % 4
    est = QAGNNClassifier(**QUICK).fit(ds, y)
    assert est.run_.epochs


def test_baseline_classifier(synth):
    est = ContextBaselineClassifier(fc_dim=8, epochs=2, batch_size=8).fit(synth.dataset[:40])
    assert est.config_.kind == "baseline"
    assert est.predict(synth.dataset[40:50]).shape == (10,)


def test_not_fitted():
    with pytest.raises(NotFittedError):
        QAGNNClassifier().predict_proba(None)


def test_save_load_same_predictions(synth, tmp_path):
    est = QAGNNClassifier(**QUICK).fit(synth.dataset[:40])
    est.save(tmp_path / "m.ckpt", {"tag": 1})
    again = QAGNNClassifier.load(tmp_path / "m.ckpt")
    assert np.array_equal(again.decision_function(synth.dataset[40:60]), est.decision_function(synth.dataset[40:60]))
    assert again.checkpoint_extra_ == {"tag": 1}
    assert again.gnn_dim == 8


def test_dataset_validation(synth):
    with pytest.raises(TypeError):
        check_dataset([1, 2, 3])
    with pytest.raises(DataError):
        check_dataset(synth.dataset[:0])
    with pytest.raises(DataError):
        check_dataset(synth.dataset[:5], np.array([0, 1, 2]))
    with pytest.raises(DataError):
        check_dataset(synth.dataset[:2], np.array([0, 4]))


def test_input_dim_mismatch(synth):
    est = QAGNNClassifier(**QUICK).fit(synth.dataset[:20])
    other = WorkingGraphBuilder(synth.kg, HashEncoder(HashEncoderConfig(dim=16)), k=2).fit()
    with pytest.raises(DataError):
        est.predict(other.transform(synth.grounded[:3]))


def test_featurization_pipeline(synth):
    pipe = Pipeline([
        ("ground", Grounder(synth.kg, facts=True)),
        ("graphs", WorkingGraphBuilder(synth.kg, HashEncoder(HashEncoderConfig(dim=32)), k=2)),
    ])
    ds = pipe.fit_transform(synth.bench.records[:10])
    assert isinstance(ds, QADataset) and len(ds) == 10
    assert ds.k == 2 and ds.facts is True
    for q_new, q_old in zip(ds.questions, synth.dataset.questions[:10]):
        assert np.array_equal(q_new.contexts, q_old.contexts)
        assert all(np.array_equal(a.edges, b.edges) for a, b in zip(q_new.graphs, q_old.graphs))
