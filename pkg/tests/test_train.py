import json

import numpy as np
import pytest

from channelkit import train as tr
from channelkit import zoo
from channelkit.checkpoint import load_checkpoint
from channelkit.errors import DataError, FormatError, ParameterError, ShapeError


def tiny_net(version="v1", seed=0):
    return zoo.build_network(zoo.build_model_spec(version, 0.125, 10, 32), seed)


def tiny_cfg(**kw):
    base = dict(base_lr=0.05, batch_size=32, total_epochs=1, decay_epochs=(), seed=0)
    return tr.TrainConfig(**{**base, **kw})


class TestMomentum:
    def test_plain_step(self):
        w, v = np.zeros(1), np.zeros(1)
        tr.sgd_momentum_step([w], [np.array([3.0])], [v], lr=1.0, momentum=0.0)
        assert w.tolist() == [-3.0]

    def test_two_steps(self):
        w, v, g = np.zeros(1), np.zeros(1), np.ones(1)
        for _ in range(2):
            tr.sgd_momentum_step([w], [g], [v], 0.1, 0.9)
        assert w[0] == pytest.approx(-0.29, abs=1e-15)

    def test_zero_gradient_coasts_then_freezes(self):
        w, v = np.zeros(1), np.ones(1)
        trail = []
        for _ in range(400):
            tr.sgd_momentum_step([w], [np.zeros(1)], [v], 1.0, 0.9)
            trail.append(w[0])
        # velocity decays geometrically, so w approaches -sum(0.9^k, k>=1) = -9
        assert all(b < a for a, b in zip(trail, trail[1:50]))
        assert trail[-1] == pytest.approx(-9.0, abs=1e-12) and v[0] < 1e-17

    def test_shape_errors(self):
        with pytest.raises(ShapeError):
            tr.sgd_momentum_step([np.zeros(2)], [np.zeros(3)], [np.zeros(2)], 0.1, 0.9)
        with pytest.raises(ShapeError):
            tr.sgd_momentum_step([np.zeros(2)], [], [], 0.1, 0.9)


class TestSchedule:
    @pytest.mark.parametrize("epoch,lr", [(0, 0.1), (44, 0.1), (45, 0.01), (60, 0.001),
                                          (79, 1e-6)])
    def test_published(self, epoch, lr):
        assert tr.lr_at(epoch, tr.TrainConfig.published()) == pytest.approx(lr, rel=1e-12)

    def test_published_values(self):
        cfg = tr.TrainConfig.published()
        assert (cfg.base_lr, cfg.momentum, cfg.dropout_p, cfg.total_epochs) == (0.1, 0.9, 1e-4, 80)

    def test_with_epochs_keeps_fitting_decays(self):
        assert tr.TrainConfig().with_epochs(62).decay_epochs == (45, 60)

    @pytest.mark.parametrize("kw", [dict(decay_epochs=(10, 5)), dict(decay_epochs=(90,)),
                                    dict(momentum=1.0), dict(batch_size=0), dict(base_lr=-1.0)])
    def test_invalid(self, kw):
        with pytest.raises(ParameterError):
            tr.TrainConfig(**kw)

    def test_json_round_trip(self, tmp_path):
        cfg = tiny_cfg(total_epochs=7, decay_epochs=(3,))
        (tmp_path / "c.json").write_text(cfg.to_json())
        assert tr.load_train_config(tmp_path / "c.json") == cfg
        (tmp_path / "bad.json").write_text(json.dumps({"learning_rate": 1}))
        with pytest.raises(FormatError, match="learning_rate"):
            tr.load_train_config(tmp_path / "bad.json")


def cifar_bytes(labels, seed=0):
    rng = np.random.default_rng(seed)
    recs = []
    for lab in labels:
        recs.append(bytes([lab]) + rng.integers(0, 256, 3072, dtype=np.uint8).tobytes())
    return b"".join(recs)


class TestCifar:
    def test_known_pixels(self, tmp_path):
        raw = bytearray(2 * 3073)
        raw[0], raw[3073] = 3, 9
        raw[1], raw[1 + 1024], raw[1 + 3071] = 255, 51, 102
        raw[3073 + 1 + 33] = 17
        (tmp_path / "b.bin").write_bytes(bytes(raw))
        ds = tr.read_cifar10_binary(tmp_path / "b.bin")
        assert ds.labels.tolist() == [3, 9] and ds.images.shape == (2, 3, 32, 32)
        assert ds.images[0, 0, 0, 0] == 1.0
        assert ds.images[0, 1, 0, 0] == 51 / 255
        assert ds.images[0, 2, 31, 31] == 102 / 255
        assert ds.images[1, 0, 1, 1] == 17 / 255

    def test_empty_file(self, tmp_path):
        (tmp_path / "e.bin").write_bytes(b"")
        assert len(tr.read_cifar10_binary(tmp_path / "e.bin")) == 0

    def test_truncated(self, tmp_path):
        (tmp_path / "t.bin").write_bytes(cifar_bytes([1, 2])[:-10])
        with pytest.raises(FormatError, match="offset 3073"):
            tr.read_cifar10_binary(tmp_path / "t.bin")

    def test_bad_label(self, tmp_path):
        (tmp_path / "l.bin").write_bytes(cifar_bytes([1, 10]))
        with pytest.raises(DataError, match="record 1"):
            tr.read_cifar10_binary(tmp_path / "l.bin")

    def test_directory_layout(self, tmp_path):
        for i in (1, 2):
            (tmp_path / f"data_batch_{i}.bin").write_bytes(cifar_bytes(range(10), i))
        (tmp_path / "test_batch.bin").write_bytes(cifar_bytes([0, 1, 2], 9))
        train, test = tr.load_cifar10(tmp_path, train_limit=15)
        assert len(train) == 15 and len(test) == 3
        np.testing.assert_allclose(train.images.mean(axis=(0, 2, 3)), 0, atol=1e-12)
        with pytest.raises(DataError):
            tr.load_cifar10(tmp_path / "missing")


class TestSynthetic:
    def test_noise_free_nearest_prototype(self):
        ds = tr.synthetic_dataset(noise=0.0, per_class=5)
        d = ((ds.images[:, None] - ds.prototypes[None]) ** 2).sum(axis=(2, 3, 4))
        assert np.array_equal(d.argmin(axis=1), ds.labels)

    def test_deterministic(self):
        a, b = tr.synthetic_dataset(seed=3, per_class=4), tr.synthetic_dataset(seed=3, per_class=4)
        assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)

    def test_linear_probe(self):
        train = tr.synthetic_dataset(per_class=50, noise=0.1, seed=1)
        test = tr.synthetic_dataset(per_class=20, noise=0.1, seed=2, prototypes=train.prototypes)
        x = train.images.reshape(len(train), -1)
        targets = np.eye(10)[train.labels]
        w, *_ = np.linalg.lstsq(x, targets, rcond=None)
        acc = (np.argmax(test.images.reshape(len(test), -1) @ w, axis=1) == test.labels).mean()
        assert acc > 0.95


class TestAugment:
    def test_seeded(self, rng):
        img = rng.standard_normal((3, 8, 8))
        assert np.array_equal(tr.augment(img, 5), tr.augment(img, 5))

    def test_flip_involution(self, rng):
        img = rng.standard_normal((3, 8, 8))
        once = tr.augment(img, 0, offset=(4, 4), flip=True)
        assert np.array_equal(tr.augment(once, 0, offset=(4, 4), flip=True), img)

    def test_extreme_offset_shows_zero_border(self):
        out = tr.augment(np.ones((3, 8, 8)), 0, offset=(0, 0), flip=False)
        assert not out[:, :4].any() and not out[:, :, :4].any() and np.all(out[:, 4:, 4:] == 1)


class TestTraining:
    def data(self):
        return tr.synthetic_dataset(per_class=7, noise=0.5, seed=0).subset(64)

    def test_one_epoch_reduces_loss(self):
        data = tr.synthetic_dataset(per_class=7, noise=0.1, seed=0).subset(64)
        m = tr.train(tiny_net("v3"), data, tiny_cfg(base_lr=0.02, batch_size=8))
        assert [r.epoch for r in m.rows] == [0, 1]
        assert m.rows[1].train_loss < m.rows[0].train_loss

    def test_zero_lr_leaves_params(self):
        net = tiny_net()
        before = [p.value.copy() for p in net.params()]
        tr.train(net, self.data(), tiny_cfg(base_lr=0.0))
        assert all(np.array_equal(a, p.value) for a, p in zip(before, net.params()))

    def test_zero_epochs_only_initial_row(self, tmp_path):
        net = tiny_net()
        state = [a.copy() for _, a in net.state()]
        m = tr.train(net, self.data(), tiny_cfg(total_epochs=0), out_dir=tmp_path)
        assert len(m.rows) == 1 and m.rows[0].epoch == 0
        assert all(np.array_equal(a, b) for a, (_, b) in zip(state, net.state()))
        assert (tmp_path / "metrics.csv").read_text().splitlines()[0] == \
            "epoch,lr,train_loss,train_top1,eval_top1"

    def test_same_seed_same_metrics_and_files(self, tmp_path):
        runs = []
        for k in ("a", "b"):
            m = tr.train(tiny_net(), self.data(), tiny_cfg(total_epochs=2, augment=True),
                         out_dir=tmp_path / k)
            runs.append(m)
        assert runs[0].rows == runs[1].rows
        for f in ("metrics.csv", "best.cnkt"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_divergence(self, tmp_path):
        ds = self.data()
        ds.images[5] = np.nan
        with pytest.raises(tr.TrainingDiverged) as err:
            tr.train(tiny_net(), ds, tiny_cfg(), out_dir=tmp_path)
        assert err.value.metrics is not None
        assert (tmp_path / "best.cnkt").exists()

    def test_best_checkpoint_loads(self, tmp_path):
        net = tiny_net("v3")
        tr.train(net, self.data(), tiny_cfg(), out_dir=tmp_path)
        tiny_net("v3", seed=9).load_state(load_checkpoint(tmp_path / "best.cnkt"))

    def test_wrong_image_size(self):
        with pytest.raises(ShapeError):
            tr.train(tiny_net(), tr.synthetic_dataset(per_class=1, size=16), tiny_cfg())


class TestSparsity:
    def test_all_zero(self):
        rep = tr.analyze_fc_sparsity(np.zeros((4, 6)), [0.01])
        assert rep.fractions[0.01] == 1.0

    def test_identity_like(self):
        rep = tr.analyze_fc_sparsity(np.eye(5), [0.5])
        assert rep.active_per_class[0.5].tolist() == [1] * 5

    def test_histogram_shape_and_mass(self, rng):
        w = rng.uniform(-0.1, 0.1, (10, 40))
        rep = tr.analyze_fc_sparsity(w)
        assert rep.counts.shape == (64,) and rep.edges.shape == (65,) and rep.counts.sum() == 400
        assert set(rep.fractions) == set(tr.DEFAULT_TAUS)
        assert "tau" in rep.to_text() and rep.to_csv().startswith("bin_lo,bin_hi,count")

    def test_errors(self):
        with pytest.raises(DataError):
            tr.analyze_fc_sparsity(np.zeros((0, 3)))
        with pytest.raises(ParameterError):
            tr.analyze_fc_sparsity(np.ones((2, 2)), [0.0])
