import numpy as np
import pytest

from nodulenet import pipeline as P
from nodulenet.model import StreamConfig, build_model, forward
from nodulenet.sampler import extract_sample, theta_schedule
from nodulenet.volume import NoduleRecord, generate_phantom_set

TINY = StreamConfig(width=0.125, dense_width=16)


@pytest.fixture(scope="module")
def data():
    pairs = generate_phantom_set({"train": 2, "validation": 1, "test": 1}, seed=21)
    return {r.volume_id: v for v, r in pairs}, [r for _, r in pairs]


def _tiny_model(scales=(40.0,), seed=0):
    return build_model(scales, seed, TINY)


def _fake_records(counts):
    return [NoduleRecord(f"v{c}_{i}", (0, 0, 0), c, 6.0, "train") for c, n in enumerate(counts) for i in range(n)]


def test_default_config_values():
    c = P.TrainConfig(seed=1)
    assert (c.batch_size, c.lr, c.lr_decay, c.lr_decay_every, c.epochs) == (256, 1e-3, 3.0, 50, 200)
    assert (c.dropout, c.weight_decay, c.val_fusion_n, c.target_per_class) == (0.5, 1e-6, 30, 5000)
    assert c.scales == (10.0, 20.0, 40.0)
    d = P.TrainConfig.desk(1)
    assert d.max_samples_per_class == 200 and d.epochs <= 30
    assert P.TrainConfig.from_dict(d.to_dict()) == d
    with pytest.raises(ValueError):
        P.TrainConfig(seed=1, batch_size=0)
    with pytest.raises(ValueError):
        P.TrainConfig.from_dict({"seed": 1, "momentum": 0.9})


def test_lr_schedule():
    c = P.TrainConfig(seed=0)
    lrs = [P.lr_at(e, c) for e in (0, 49, 50, 99, 100, 149, 150)]
    assert lrs == [1e-3, 1e-3, 1e-3 / 3, 1e-3 / 3, 1e-3 / 9, 1e-3 / 9, 1e-3 / 27]


def test_plane_count_rule():
    counts = (694, 233, 63, 152, 181, 29)
    assert P.default_plane_counts(counts)[:5] == (8, 22, 80, 33, 28)
    assert P.default_plane_counts((30,)) == (167,)
    with pytest.raises(ValueError):
        P.default_plane_counts((10, 0))


def test_count_only_assembly():
    recs = _fake_records((3, 1, 2, 1, 1, 4))
    cfg = P.TrainConfig(seed=0, plane_counts=(2, 2, 2, 2, 2, 2))
    assert P.assemble_training_set(recs, cfg, count_only=True) == (96, 32, 64, 32, 32, 128)


def test_missing_class_is_an_error():
    with pytest.raises(ValueError, match="perifissural"):
        P.assemble_training_set(_fake_records((1, 1, 1, 1, 0, 1)), P.TrainConfig(seed=0), count_only=True)


def test_check_splits():
    a = NoduleRecord("v", (1, 2, 3), 0, 5.0, "train")
    P.check_splits([a, NoduleRecord("v", (4, 2, 3), 0, 5.0, "test")])
    with pytest.raises(ValueError):
        P.check_splits([a, NoduleRecord("v", (1, 2, 3), 0, 5.0, "test")])


def test_assembly_with_cap(data):
    vols, recs = data
    cfg = P.TrainConfig.desk(3, scales=(40.0,), plane_counts=(2,) * 6, max_samples_per_class=5)
    a = P.assemble_training_set(recs, cfg, vols)
    b = P.assemble_training_set(recs, cfg, vols)
    assert a.class_counts().tolist() == [5] * 6
    assert np.array_equal(a.patches, b.patches) and np.array_equal(a.aug, b.aug)
    assert a.patches.shape == (30, 1, 3, 64, 64)


def test_assembly_without_cap_counts(data):
    vols, recs = data
    cfg = P.TrainConfig(seed=0, scales=(10.0,), plane_counts=(1,) * 6)
    store = P.assemble_training_set(recs, cfg, vols)
    assert store.class_counts().tolist() == [2 * 16] * 6


def test_fuse():
    p = np.random.default_rng(0).dirichlet(np.ones(6), size=7)
    label, mean = P.fuse(p)
    for perm in (p[::-1], p[[3, 1, 4, 0, 6, 5, 2]]):
        l2, m2 = P.fuse(perm)
        assert l2 == label and np.array_equal(m2, mean)
    assert P.fuse([[0.4, 0.4, 0.2, 0, 0, 0]])[0] == 0
    with pytest.raises(ValueError):
        P.fuse(np.zeros((0, 6)))


def test_prediction_fusion(data):
    vols, recs = data
    m = _tiny_model((10.0, 40.0))
    rec = recs[0]
    label1, p1 = P.predict_nodule(m, vols[rec.volume_id], rec, n=1)
    direct = forward(m, extract_sample(vols[rec.volume_id], rec, 0.0, m.scales).patches)
    assert np.array_equal(p1, direct) and label1 == int(np.argmax(direct))
    th = theta_schedule(5)
    _, pa = P.predict_nodule(m, vols[rec.volume_id], rec, thetas=th, n=5)
    _, pb = P.predict_nodule(m, vols[rec.volume_id], rec, thetas=th[[4, 2, 0, 3, 1]], n=5)
    assert np.array_equal(pa, pb)
    with pytest.raises(ValueError):
        P.predict_nodule(m, vols[rec.volume_id], rec, n=0)


def test_evaluate_continues_past_bad_volume(data, tmp_path):
    vols, recs = data
    test = [r for r in recs if r.split == "test"]
    broken = NoduleRecord(str(tmp_path / "gone.mhd"), (0, 0, 0), 1, 6.0, "test", "gone")

    def source(r):
        return vols[r.volume_id] if r.volume_id in vols else P.VolumeLoader()(r)

    ev = P.evaluate_manifest(_tiny_model(), test + [broken], n=2, volumes=source)
    assert [f[0] for f in ev.failures] == ["gone"]
    assert ev.confusion.counts.sum(axis=1).tolist() == [1] * 6
    again = P.evaluate_manifest(_tiny_model(), test, n=2, volumes=vols)
    assert np.array_equal(again.confusion.counts, ev.confusion.counts)


def test_training_loop(data):
    vols, recs = data
    cfg = P.TrainConfig.desk(5, scales=(40.0,), plane_counts=(1,) * 6, max_samples_per_class=6, epochs=3,
                             batch_size=8, val_fusion_n=2, lr_decay_every=2)
    store = P.assemble_training_set(recs, cfg, vols)
    val = [r for r in recs if r.split == "validation"]
    runs = [P.train(_tiny_model(seed=2), store, val, cfg, vols) for _ in range(2)]
    (best, log), (_, log2) = runs
    assert log.losses == log2.losses
    assert [e.lr for e in log.epochs] == [P.lr_at(e, cfg) for e in range(3)]
    assert log.epochs[log.best_epoch].mean_f == max(e.mean_f for e in log.epochs)
    assert best.meta["best_epoch"] == log.best_epoch
    lines = log.to_text().splitlines()
    assert len(lines) == 4 and lines[0].startswith("epoch\tlr\tloss")


def test_train_rejects_empty_store(data):
    from nodulenet.sampler import SampleStore
    empty = SampleStore((40.0,), np.zeros(0, np.uint8), np.zeros(0), np.zeros((0, 2), np.uint8),
                        np.zeros((0, 1, 3, 64, 64), np.float32))
    with pytest.raises(ValueError):
        P.train(_tiny_model(), empty, [], P.TrainConfig.desk(0))
