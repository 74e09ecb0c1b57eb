import numpy as np
import pytest

from lffactor import autodiff as ad
from lffactor.autodiff import Tensor
from lffactor.lightfield import LightField
from lffactor.networks import (Checkpoint, NetworkSpec, build_network,
                               build_stacked_cnn, build_unet, forward_infer,
                               load_checkpoint, param_count, save_checkpoint,
                               views_to_input)


def stacked_spec(**kw):
    return NetworkSpec(arch="stacked", in_channels=25, out_channels=3, **kw)


def unet_spec(**kw):
    return NetworkSpec(arch="unet", in_channels=25, out_channels=3, **kw)


def tiny_unet(seed=0):
    return NetworkSpec(arch="unet", in_channels=4, out_channels=2,
                       base_channels=4, unet_depth=2, seed=seed)


class TestSpec:
    def test_validation(self):
        with pytest.raises(ValueError):
            NetworkSpec(arch="mlp", in_channels=1, out_channels=1)
        with pytest.raises(ValueError):
            NetworkSpec(arch="unet", in_channels=0, out_channels=1)

    def test_roundtrip(self):
        s = unet_spec(seed=9)
        assert NetworkSpec.from_dict(s.to_dict()) == s


class TestParamCount:
    def test_stacked_paper_scale(self):
        # (25*64*9+64) + 18*(64*64*9+64) + (64*3*9+3)
        assert param_count(stacked_spec()) == 680_899

    def test_counts_match_built_parameters(self):
        spec = tiny_unet()
        net = build_network(spec)
        assert param_count(spec) == sum(p.data.size for p in net.parameters())

    def test_doubling_base_quadruples_interior_convs(self):
        # interior 64->64 conv weights go from 64*64*9 to 128*128*9
        small = stacked_spec(base_channels=64)
        big = stacked_spec(base_channels=128)
        w_small = 64 * 64 * 9
        w_big = 128 * 128 * 9
        assert w_big == 4 * w_small
        assert param_count(big) > param_count(small)

    def test_unet_channel_progression(self):
        # depth 4 encoder runs 64->128->256->512 with a 1024 bottleneck
        from lffactor.networks import _param_shapes
        shapes = dict((n, s) for n, s, _ in _param_shapes(unet_spec()))
        assert shapes["enc0.conv2.weight"][0] == 64
        assert shapes["enc1.conv2.weight"][0] == 128
        assert shapes["enc2.conv2.weight"][0] == 256
        assert shapes["enc3.conv2.weight"][0] == 512
        assert shapes["bottleneck.conv2.weight"][0] == 1024
        assert shapes["up0.conv2.weight"][0] == 64
        assert shapes["head.weight"] == (3, 64, 1, 1)


class TestBuilders:
    def test_stacked_shape_preserving(self, rng):
        spec = NetworkSpec(arch="stacked", in_channels=4, out_channels=2,
                           base_channels=8, stacked_modules=3)
        net = build_stacked_cnn(spec)
        x = Tensor(rng.random((1, 4, 7, 9)).astype(np.float32))
        assert net.forward(x).shape == (1, 2, 7, 9)

    def test_unet_shape_preserving(self, rng):
        net = build_unet(tiny_unet())
        x = Tensor(rng.random((1, 4, 8, 12)).astype(np.float32))
        assert net.forward(x).shape == (1, 2, 8, 12)

    def test_seed_determinism(self):
        a = build_network(tiny_unet(seed=5))
        b = build_network(tiny_unet(seed=5))
        for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert na == nb
            np.testing.assert_array_equal(pa.data, pb.data)

    def test_wrong_arch_rejected(self):
        with pytest.raises(ValueError):
            build_unet(stacked_spec())
        with pytest.raises(ValueError):
            build_stacked_cnn(tiny_unet())

    def test_skip_connections_live(self, rng):
        # zeroing the encoder activations feeding the skips changes the output
        spec = tiny_unet(seed=1)
        net = build_network(spec)
        x = Tensor(rng.random((1, 4, 8, 8)).astype(np.float32))
        baseline = net.forward(x).data.copy()

        original = ad.concat_channels
        def zero_skip_concat(a, b):
            return original(Tensor(np.zeros_like(a.data)), b)
        ad.concat_channels = zero_skip_concat
        try:
            ablated = net.forward(x).data
        finally:
            ad.concat_channels = original
        assert not np.allclose(baseline, ablated)

    def test_all_params_receive_gradient(self, rng):
        net = build_network(tiny_unet(seed=2))
        x = Tensor(rng.random((2, 4, 8, 8)).astype(np.float32))
        target = rng.random((2, 2, 8, 8)).astype(np.float32)
        loss = ad.mse_loss(net.forward(x), target)
        ad.backward(loss)
        for name, p in net.named_parameters():
            assert p.grad is not None and np.any(p.grad != 0), f"dead branch: {name}"


class TestForwardInfer:
    def test_zero_parameters_zero_layers(self, rng):
        net = build_network(tiny_unet())
        for p in net.parameters():
            p.data[...] = 0.0
        lf = LightField(rng.uniform(0, 1, (2, 2, 8, 8)))
        stack = forward_infer(net, lf)
        assert not stack.layers.any()

    def test_fully_convolutional(self, rng):
        net = build_network(tiny_unet(seed=3))
        small = LightField(rng.uniform(0, 1, (2, 2, 16, 16)))
        large = LightField(rng.uniform(0, 1, (2, 2, 32, 32)))
        assert forward_infer(net, small).layers.shape == (2, 16, 16)
        assert forward_infer(net, large).layers.shape == (2, 32, 32)

    def test_reflect_padding_for_odd_sizes(self, rng):
        net = build_network(tiny_unet(seed=3))
        lf = LightField(rng.uniform(0, 1, (2, 2, 11, 13)))
        assert forward_infer(net, lf).layers.shape == (2, 11, 13)

    def test_matches_training_path(self, rng):
        net = build_network(tiny_unet(seed=4))
        lf = LightField(rng.uniform(0, 1, (2, 2, 8, 8)))
        stack = forward_infer(net, lf, clamp=False)
        x = Tensor(views_to_input(lf))
        train_out = net.forward(x).data[0]
        np.testing.assert_allclose(stack.layers, train_out, atol=1e-6)

    def test_clamp(self, rng):
        net = build_network(tiny_unet(seed=5))
        for p in net.parameters():
            p.data *= 50.0  # force values past 1
        lf = LightField(rng.uniform(0, 1, (2, 2, 8, 8)))
        stack = forward_infer(net, lf, clamp=True)
        assert stack.layers.max() <= 1.0

    def test_channel_mismatch(self, rng):
        net = build_network(tiny_unet())
        lf = LightField(rng.uniform(0, 1, (3, 3, 8, 8)))
        with pytest.raises(ValueError, match="views"):
            forward_infer(net, lf)

    def test_no_graph_built(self, rng):
        net = build_network(tiny_unet())
        lf = LightField(rng.uniform(0, 1, (2, 2, 8, 8)))
        forward_infer(net, lf)
        for p in net.parameters():
            assert not p.grad.any()


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, tmp_path, rng):
        net = build_network(tiny_unet(seed=6))
        ckpt = Checkpoint.from_network(net, metadata={"epoch": 3,
                                                      "test_psnr_db": 31.5})
        save_checkpoint(ckpt, tmp_path / "ck")
        loaded = load_checkpoint(tmp_path / "ck")
        assert loaded.spec == ckpt.spec
        assert loaded.metadata["epoch"] == 3
        for name in ckpt.params:
            np.testing.assert_array_equal(loaded.params[name], ckpt.params[name])
        lf = LightField(rng.uniform(0, 1, (2, 2, 8, 8)))
        np.testing.assert_array_equal(forward_infer(net, lf).layers,
                                      forward_infer(loaded.network(), lf).layers)

    def test_version_mismatch(self, tmp_path):
        net = build_network(tiny_unet())
        save_checkpoint(Checkpoint.from_network(net), tmp_path / "ck")
        spec_file = tmp_path / "ck" / "spec.json"
        spec_file.write_text(spec_file.read_text().replace('"format_version": 1',
                                                           '"format_version": 99'))
        with pytest.raises(ValueError, match="version"):
            load_checkpoint(tmp_path / "ck")

    def test_blob_length_validated(self, tmp_path):
        net = build_network(tiny_unet())
        save_checkpoint(Checkpoint.from_network(net), tmp_path / "ck")
        (tmp_path / "ck" / "head.weight.bin").write_bytes(b"\0" * 8)
        with pytest.raises(ValueError, match="length"):
            load_checkpoint(tmp_path / "ck")
