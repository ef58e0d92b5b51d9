"""Smoke test for the compiled `consreid` module.

Build and run from the repository root:

    cargo build --release -p consreid-py --features extension-module
    cp target/release/libconsreid.so /tmp/consreid.so
    PYTHONPATH=/tmp python3 python/smoke_test.py
"""

import math
import os
import tempfile

import consreid

TINY = """
epochs = 2
iters_per_epoch = 3
encoder.stage_channels = [4, 4, 8, 8, 8]
encoder.embed_dim = 8
encoder.proj_dim = 8
data.num_identities = 4
data.num_test_identities = 2
data.images_per_identity = 6
data.num_cameras = 2
"""


def check_market_names():
    assert consreid.parse_market_name("0002_c1s1_000451_03.jpg") == (2, 1)
    try:
        consreid.parse_market_name("not_a_name.jpg")
    except ValueError:
        pass
    else:
        raise AssertionError("bad name accepted")


def check_dbscan():
    pts = [[0.0, 0.0], [0.1, 0.0], [0.0, 0.1], [5.0, 5.0], [5.1, 5.0], [5.0, 5.1], [20.0, 20.0]]
    labels = consreid.dbscan(pts, eps=0.5, min_pts=3)
    assert labels[:3] == [labels[0]] * 3 and labels[3:6] == [labels[3]] * 3
    assert labels[0] != labels[3] and labels[6] is None


def check_evaluate():
    dist = [[0.1, 0.9, 0.5], [0.8, 0.2, 0.3]]
    r = consreid.evaluate(dist, [1, 2], [0, 0], [1, 2, 3], [1, 1, 1])
    assert r["mAP"] == 1.0 and r["cmc1"] == 1.0


def check_training_round_trip():
    cfg = consreid.TrainConfig(TINY)
    assert cfg.epochs == 2
    assert consreid.TrainConfig(cfg.to_text()).to_text() == cfg.to_text()
    data = consreid.Dataset.synthetic(identities=4, cameras=2, seed=1, test_identities=2, images_per_identity=6)
    assert len(data) == 36 and set(data.splits()) == {"train", "query", "gallery"}
    model, log = consreid.train(cfg, data)
    assert len(log["total"]) == 6 and all(math.isfinite(x) for x in log["total"])
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "ckpt.json")
        model.save(path)
        again = consreid.Model.load(path)
        assert again.embed(data) == model.embed(data)
        data.save(os.path.join(d, "data"))
        loaded = consreid.Dataset.load(os.path.join(d, "data"))
        assert loaded.names() == data.names()
    metrics = model.evaluate(data)
    assert 0.0 <= metrics["mAP"] <= 1.0


if __name__ == "__main__":
    check_market_names()
    check_dbscan()
    check_evaluate()
    check_training_round_trip()
    print("python smoke test passed")
