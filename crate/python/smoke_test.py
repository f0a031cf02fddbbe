"""Smoke test for the Python bindings.

Build and install first:
    cd crates/py && maturin build --release -o dist && pip install dist/lmd_py-*.whl
Then run with `python python/smoke_test.py` or `pytest python/`.
"""

import math
import os
import tempfile

import lmd_py


def small_config():
    cfg = lmd_py.Config()
    for key, value in [
        ("data.num_classes", "4"),
        ("data.head_count", "150"),
        ("data.imbalance_factor", "10"),
        ("data.feature_dim", "4"),
        ("data.noise_dims", "2"),
        ("stage1.epochs", "5"),
        ("stage1.lr", "0.05"),
        ("stage1.lambda1", "0.1"),
        ("stage1.gram_normalize", "true"),
        ("stage1.feature_dim", "6"),
        ("stage2.iterations", "2"),
        ("stage2.r_virtual", "300"),
        ("stage2.lr_classifier", "0.05"),
        ("stage2.lr_encoder", "0.005"),
        ("stage2.m_epochs", "1"),
        ("stage2.e_epochs", "1"),
        ("seeds", "1,2"),
    ]:
        cfg.set(key, value)
    cfg.validate()
    return cfg


def test_pareto_counts():
    assert lmd_py.pareto_counts(8, 1000, 100.0) == [1000, 518, 268, 139, 72, 37, 19, 10]


def test_dataset_round_trip():
    ds = lmd_py.Dataset.synthetic(num_classes=4, head_count=100, imbalance_factor=10.0, seed=3)
    assert len(ds) == sum(ds.class_counts)
    assert ds.dim == 16
    with tempfile.TemporaryDirectory() as d:
        for name in ("d.lmds", "d.csv"):
            p = os.path.join(d, name)
            ds.save(p)
            back = lmd_py.Dataset.load(p)
            assert back.labels == ds.labels
            assert back.features == ds.features
    train, val, test = ds.split(1)
    assert len(train) + len(val) + len(test) == len(ds)


def test_metrics():
    assert lmd_py.balanced_accuracy([0, 0, 1, 1], [0, 1, 1, 1], 2) == 0.75
    assert lmd_py.quadratic_weighted_kappa([0, 1, 2], [0, 1, 2], 3) == 1.0
    assert lmd_py.auc_ovr_macro([[0.9, 0.1], [0.2, 0.8]], [0, 1]) == 1.0


def test_stages_and_checkpoint():
    cfg = small_config()
    ds = lmd_py.Dataset.synthetic(num_classes=4, head_count=150, imbalance_factor=10.0,
                                  feature_dim=4, noise_dims=2, seed=1)
    train, val, test = ds.split(1)
    model, trace = lmd_py.train_stage1(cfg, train, val, 1)
    assert len(trace["epochs"]) == 5
    model2, trace2 = lmd_py.run_stage2(cfg, model, train, val, 1)
    assert len(trace2["iterations"]) == 2
    probs = model2.predict_proba(test.features[:3])
    assert all(math.isclose(sum(r), 1.0, abs_tol=1e-9) for r in probs)
    report = model2.evaluate(test, train.class_counts)
    assert 0.0 <= report["bacc"] <= 1.0
    with tempfile.TemporaryDirectory() as d:
        p = os.path.join(d, "m.ckpt")
        model2.save(p, stage="stage2", seed=1)
        assert lmd_py.Model.load(p).predict_proba(test.features[:3]) == probs


def test_pipeline_and_errors():
    agg = lmd_py.run_pipeline(small_config())
    assert agg["seeds"] == [1, 2]
    assert agg["metrics"]["bacc"]["n"] == 2
    cfg = lmd_py.Config()
    try:
        cfg.set("stage1.nonsense", "1")
    except lmd_py.LmdError as e:
        assert e.args[1] == 1
    else:
        raise AssertionError("unknown key accepted")
    try:
        lmd_py.Dataset.load("/nonexistent/file.lmds")
    except lmd_py.LmdError as e:
        assert e.args[1] == 2
    else:
        raise AssertionError("missing file accepted")


if __name__ == "__main__":
    for name, fn in sorted(globals().items()):
        if name.startswith("test_") and callable(fn):
            fn()
            print(f"{name}: ok")
