import math

import numpy as np
import pytest

from actionfeat import finetune as F
from actionfeat import layers as L
from actionfeat import network as N
from actionfeat.errors import ConfigError, DivergedError, SweepError

from conftest import TINY_ARCH, pretrained_tiny, toy_images
from oracles import central_diff, rel_err


def toy_feats(net):
    imgs, labels = toy_images()
    return F.backbone_cache(net, imgs), labels


def small_head_net(seed=0):
    """Tiny network with a narrow head, in float64 for gradient checks."""
    text = (TINY_ARCH.replace("16 fc out=64", "16 fc out=6")
            .replace("19 fc out=64", "19 fc out=5").replace("22 fc out=2", "22 fc out=3"))
    net = N.init_weights(N.parse_arch(text), np.random.default_rng(seed))
    for i in net.spec.fc_indices():
        p = net.params[i]
        rng = np.random.default_rng(i)
        net.params[i] = L.FcParams(rng.standard_normal(p.weights.shape) * 0.5,
                                   rng.standard_normal(p.bias.shape) * 0.5)
    return net


class TestConfig:
    def test_defaults(self):
        cfg = F.FinetuneConfig()
        assert cfg.learning_rate == 1e-4 and cfg.iterations == 20_000 and cfg.batch_size == 32

    @pytest.mark.parametrize("lr", [-1e-4, float("nan"), float("inf")])
    def test_bad_lr(self, lr):
        with pytest.raises(ConfigError):
            F.FinetuneConfig(learning_rate=lr)

    def test_loss_log(self):
        log = F.LossLog()
        log.add(0, 0.5)
        log.add(10, 0.25)
        assert log.to_tsv() == "0\t0.5\n10\t0.25\n"
        with pytest.raises(ValueError):
            log.add(10, 0.1)


class TestReplaceHead:
    def test_nine_classes(self, default_net):
        net = F.replace_head(default_net, {}, 9, np.random.default_rng(0))
        assert net.params[22].weights.shape == (9, 4096)
        assert net.spec.layer(22).params["out"] == 9

    def test_fc19_6144(self, default_net):
        net = F.replace_head(default_net, {19: 6144}, 9, np.random.default_rng(0))
        assert net.params[19].weights.shape == (6144, 4096)
        assert net.params[22].weights.shape == (9, 6144)
        x = np.random.default_rng(1).standard_normal((3, 227, 227)).astype(np.float32)
        res = N.forward(net, x, taps=[16, 19])
        assert len(N.concat_features([res.taps[16], res.taps[19]]).values) == 10240

    def test_backbone_bitwise(self, tiny_spec):
        net = N.init_weights(tiny_spec, np.random.default_rng(0))
        new = F.replace_head(net, {16: 8, 22: 5}, 3, np.random.default_rng(1))
        for i in (1, 5, 9, 11, 13):
            assert new.params[i].weights.tobytes() == net.params[i].weights.tobytes()
            assert new.params[i].bias.tobytes() == net.params[i].bias.tobytes()
        assert new.params[22].out_dim == 5

    def test_fresh_gaussian(self, tiny_spec):
        net = N.init_weights(tiny_spec, np.random.default_rng(0))
        new = F.replace_head(net, {16: 4000}, 2, np.random.default_rng(1))
        w = new.params[16].weights.astype(np.float64)
        assert abs(w.mean()) < 1e-3 and w.std() == pytest.approx(0.01, rel=0.02)
        assert not new.params[16].bias.any()

    def test_undersized(self, tiny_spec):
        net = N.init_weights(tiny_spec, np.random.default_rng(0))
        with pytest.raises(ConfigError):
            F.replace_head(net, {22: 2}, 9, np.random.default_rng(0))
        with pytest.raises(ConfigError):
            F.replace_head(net, {}, 1, np.random.default_rng(0))
        with pytest.raises(ConfigError):
            F.replace_head(net, {13: 8}, 2, np.random.default_rng(0))


class TestGradients:
    def test_head_matches_finite_differences(self):
        net = small_head_net()
        feats = np.random.default_rng(7).standard_normal((4, net.params[16].in_dim))
        labels = np.array([0, 2, 1, 2])
        _, grads = F.head_loss_and_grads(net, feats, labels)
        assert sorted(grads) == [16, 19, 22]
        for i in (16, 19, 22):
            p = net.params[i]

            def loss_w(w):
                q = net.copy()
                q.params[i] = L.FcParams(w, p.bias)
                return F.head_loss_and_grads(q, feats, labels)[0]

            def loss_b(b):
                q = net.copy()
                q.params[i] = L.FcParams(p.weights, b)
                return F.head_loss_and_grads(q, feats, labels)[0]

            assert rel_err(grads[i][0], central_diff(loss_w, p.weights, h=1e-5)) < 1e-4
            assert rel_err(grads[i][1], central_diff(loss_b, p.bias, h=1e-5)) < 1e-4

    def test_dropout_mask_respected(self):
        net = small_head_net()
        feats = np.random.default_rng(8).standard_normal((5, net.params[16].in_dim))
        labels = np.array([0, 1, 2, 0, 1])

        def loss(w):
            q = net.copy()
            q.params[19] = L.FcParams(w, net.params[19].bias)
            return F.head_loss_and_grads(q, feats, labels, True, np.random.default_rng(3))[0]

        _, grads = F.head_loss_and_grads(net, feats, labels, True, np.random.default_rng(3))
        num = central_diff(loss, net.params[19].weights, h=1e-5)
        assert rel_err(grads[19][0], num) < 1e-4

    def test_trainable_subset(self):
        net = small_head_net()
        feats = np.random.default_rng(7).standard_normal((3, net.params[16].in_dim))
        _, grads = F.head_loss_and_grads(net, feats, np.array([0, 1, 2]), trainable=[22])
        assert sorted(grads) == [22]


class TestTraining:
    def cfg(self, **kw):
        base = dict(learning_rate=1e-4, iterations=500, batch_size=32, log_every=10, seed=0)
        return F.FinetuneConfig(**{**base, **kw})

    def test_zero_lr(self):
        net = pretrained_tiny()
        feats, labels = toy_feats(net)
        cfg = self.cfg(learning_rate=0.0, iterations=400, log_every=1)
        out, log = F.train_head_cached(net, feats, labels, cfg)
        for i in net.spec.fc_indices():
            assert out.params[i].weights.tobytes() == net.params[i].weights.tobytes()
            assert out.params[i].bias.tobytes() == net.params[i].bias.tobytes()
        # dropout and minibatch draws still jitter each value, but there is no trend
        means = np.array(log.losses()).reshape(4, 100).mean(axis=1)
        assert np.ptp(means) < 0.01

    def test_converges(self):
        net = pretrained_tiny()
        feats, labels = toy_feats(net)
        _, log = F.train_head_cached(net, feats, labels, self.cfg())
        assert log.entries[-1][0] == 499
        assert log.losses()[-1] < 0.1

    def test_initial_loss_near_ln_k(self):
        # moderate backbone gain keeps the fresh head's logits small
        for k in (2, 5, 9):
            net = F.replace_head(pretrained_tiny(gain=100.0), {}, k, np.random.default_rng(k))
            feats, labels = toy_feats(net)
            _, log = F.train_head_cached(net, feats, labels, self.cfg(iterations=1))
            assert log.losses()[0] == pytest.approx(math.log(k), abs=0.1)

    def test_backbone_frozen_and_input_untouched(self):
        net = pretrained_tiny()
        before = {i: p.weights.copy() for i, p in net.params.items()}
        feats, labels = toy_feats(net)
        out, _ = F.train_head_cached(net, feats, labels, self.cfg(iterations=50))
        for i in (1, 5, 9, 11, 13):
            assert out.params[i].weights.tobytes() == before[i].tobytes()
        for i, w in before.items():
            assert np.array_equal(net.params[i].weights, w)
        assert not np.array_equal(out.params[16].weights, before[16])

    def test_deterministic(self):
        net = pretrained_tiny()
        feats, labels = toy_feats(net)
        a, la = F.train_head_cached(net, feats, labels, self.cfg(iterations=60))
        b, lb = F.train_head_cached(net, feats, labels, self.cfg(iterations=60))
        assert la.entries == lb.entries
        for i in net.spec.fc_indices():
            assert a.params[i].weights.tobytes() == b.params[i].weights.tobytes()

    def test_smoothed_loss_non_increasing(self):
        net = pretrained_tiny()
        feats, labels = toy_feats(net)
        _, log = F.train_head_cached(net, feats, labels, self.cfg(log_every=1))
        losses = np.array(log.losses()[:500])
        means = losses.reshape(10, 50).mean(axis=1)
        assert np.all(np.diff(means) <= 0)

    def test_cached_equals_uncached(self, tmp_path):
        from actionfeat import dataio as D
        net = pretrained_tiny()
        imgs, labels = toy_images()
        samples = []
        for i, im in enumerate(imgs):
            assert im.max() < 255
            # channel-major float image -> bytes; round so decoding is exact
            pix = np.round(im.transpose(1, 2, 0)).astype(np.uint8)
            (tmp_path / f"{i}.ppm").write_bytes(D.encode_ppm(pix))
            samples.append(D.Sample(f"{i}.ppm", "ab"[labels[i]], f"v{i}"))
        manifest = D.DatasetManifest(samples, root=str(tmp_path))
        pcfg = D.PreprocessConfig(15, 15)
        inputs = [D.load_input(manifest, s, pcfg) for s in samples]
        cached = F.backbone_cache(net, inputs)
        direct = np.stack([N.forward_backbone(net, x) for x in inputs])
        assert cached.tobytes() == direct.tobytes()
        a, la = F.train_head(net, manifest, self.cfg(iterations=20), pcfg)
        b, lb = F.train_head_cached(net, cached, manifest.labels(), self.cfg(iterations=20))
        assert la.entries == lb.entries

    def test_diverges(self):
        net = pretrained_tiny(gain=1e6)
        feats, labels = toy_feats(net)
        with pytest.raises(DivergedError) as info:
            F.train_head_cached(net, feats, labels, self.cfg(learning_rate=10.0, iterations=200))
        assert info.value.iteration < 200

    def test_label_beyond_head(self):
        net = pretrained_tiny()
        feats, _ = toy_feats(net)
        with pytest.raises(ConfigError):
            F.train_head_cached(net, feats, np.array([0, 1, 2, 3]), self.cfg())


class TestSweep:
    def test_example_trace(self):
        table = {2048: 0.60, 4096: 0.70, 8192: 0.65, 6144: 0.68, 5120: 0.69, 7168: 0.66}
        best, trace = F.sweep_layer_size(table.__getitem__, [8192, 2048, 4096])
        assert [s for s, _ in trace] == [2048, 4096, 8192, 6144, 5120, 7168]
        assert best == 4096

    def test_zero_rounds(self):
        calls = []

        def evaluate(size):
            calls.append(size)
            return {100: 0.1, 200: 0.3, 300: 0.2}[size]

        assert F.sweep_layer_size(evaluate, [100, 200, 300], rounds=0)[0] == 200
        assert calls == [100, 200, 300]

    def test_unimodal_peak(self):
        def evaluate(size):
            return -abs(size - 6000)

        best, trace = F.sweep_layer_size(evaluate, [2048, 4096, 8192], rounds=4)
        nearest = 512 * round(6000 / 512)
        assert abs(best - nearest) <= 512
        assert len({s for s, _ in trace}) == len(trace)

    def test_error_names_size(self):
        def evaluate(size):
            if size == 6144:
                raise RuntimeError("out of memory")
            return {2048: 0.6, 4096: 0.7, 8192: 0.65}[size]

        with pytest.raises(SweepError) as info:
            F.sweep_layer_size(evaluate, [2048, 4096, 8192])
        assert info.value.size == 6144 and "6144" in str(info.value)

    def test_bad_initial(self):
        with pytest.raises(ConfigError):
            F.sweep_layer_size(lambda s: 0.0, [4096, 4096, 8192])
