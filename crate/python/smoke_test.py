"""Smoke test for the pargraph_py extension module."""

import math
import os
import tempfile

import pargraph_py as pg


def main():
    train = pg.Dataset.synth(1, {"n_frames": 40, "n_subjects": 6, "n_groups": 2, "feature_dim": 8})
    test = pg.Dataset.synth(2, {"n_frames": 10, "n_subjects": 6, "n_groups": 2, "feature_dim": 8})
    assert len(train) == 40 and train.feature_dim == 8
    assert "subjects" in train.frame(0)

    model = pg.Model(train.feature_dim, seed=0, config={"hidden_dim": 12})
    assert model.num_parameters > 0
    losses = model.train(train, 5, lr=1e-3)
    assert len(losses) == 5 and all(math.isfinite(x) for x in losses)
    assert losses[-1] < losses[0], losses

    report = model.evaluate(test)
    print("evaluate:", {k: report[k] for k in sorted(report) if not isinstance(report[k], (dict, list))})
    preds = model.predict(test)
    assert len(preds) == len(test)

    r = model.relation_matrix(test, 0)
    assert len(r) == len(r[0]) and all(abs(r[i][i] - 1.0) < 1e-12 for i in range(len(r)))

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "model.json")
        model.save(path)
        again = pg.Model.load(path)
        assert again.predict(test) == preds
        data = os.path.join(tmp, "frames.ndjson")
        test.save(data)
        assert len(pg.Dataset.load(data)) == len(test)
        try:
            pg.Dataset.load(os.path.join(tmp, "missing.ndjson"))
        except (IOError, ValueError):
            pass
        else:
            raise AssertionError("missing file was accepted")

    block = [[1.0, 0.9, 0.0, 0.0], [0.9, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.1], [0.0, 0.0, 0.1, 1.0]]
    groups, singletons = pg.cluster_groups(block)
    assert groups == [[0, 1]] and sorted(singletons) == [2, 3], (groups, singletons)

    p, r_, f = pg.multilabel_prf({0, 2, 4}, {2, 3}, 6)
    assert abs(p - 1 / 3) < 1e-12 and abs(r_ - 0.5) < 1e-12 and abs(f - 0.4) < 1e-12
    scores = pg.group_detection([[0, 0, 1, 2]], [[0, 0, 1, 2]])
    assert scores["mat_iou"] == 1.0
    assert abs(pg.overall_f1(0.3, 0.6, 0.9) - 0.6) < 1e-12

    checks = pg.selftest()
    assert all(ok for _, ok, _ in checks), checks
    print("smoke test passed")


if __name__ == "__main__":
    main()
