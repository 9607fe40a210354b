import time
from dataclasses import replace

import numpy as np
import pytest

from dla.errors import ShapeMismatchError, VolumeFormatError
from dla.nn import (
    Architecture,
    forward,
    init_params,
    load_checkpoint,
    loss_and_grad,
    save_checkpoint,
    softmax,
    zeros_like_params,
)


def finite_difference_check(params, arch, x, y, eps=1e-5):
    """Worst relative error between analytic and central-difference gradients."""
    _, grads = loss_and_grad(params, arch, x, y)
    worst = 0.0
    for name, p in params.items():
        flat = p.reshape(-1)
        numeric = np.empty(flat.size)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            up, _ = loss_and_grad(params, arch, x, y)
            flat[i] = old - eps
            down, _ = loss_and_grad(params, arch, x, y)
            flat[i] = old
            numeric[i] = (up - down) / (2 * eps)
        g = grads[name].reshape(-1)
        err = np.abs(g - numeric) / np.maximum(np.maximum(np.abs(g), np.abs(numeric)), 1e-7)
        worst = max(worst, float(err.max()))
    return worst


class TestArchitecture:
    def test_default_stages(self):
        arch = Architecture()
        assert arch.stage_boundaries == (2, 4)
        assert [b[2] for b in arch.blocks()] == [1, 2, 2, 1]
        assert arch.final_channels == 64

    def test_thirty_conv_shape(self):
        arch = Architecture(conv_layers=30, base_channels=2, patch_size=9)
        assert arch.n_blocks == 15 and arch.stage_boundaries == (10, 20)
        x = np.random.default_rng(0).normal(size=(2, 5, 9, 9)) * 300
        assert forward(init_params(arch, 0), arch, x).shape == (2, 3)

    def test_flatten_features(self):
        arch = Architecture(pooling="flatten")
        assert arch.final_size == 11  # 41 -> 21 -> 11
        assert arch.param_shapes()["fc.weight"] == (3, 64 * 11 * 11)

    @pytest.mark.parametrize("kw", [{"conv_layers": 7}, {"input_filter": 4}, {"stage_boundaries": (3,)},
                                    {"pooling": "max"}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            Architecture(**kw)


class TestInit:
    def test_deterministic(self, tiny_arch):
        a, b = init_params(tiny_arch, 3), init_params(tiny_arch, 3)
        assert all(np.array_equal(a[k], b[k]) for k in a)

    def test_biases_zero(self):
        p = init_params(Architecture(), 0)
        assert all(not v.any() for k, v in p.items() if k.endswith("bias"))

    def test_variance_scaling(self):
        p = init_params(Architecture(base_channels=16), 1)
        w = p["block0.conv1.weight"]  # fan_in = 16 * 3 * 3 = 144
        assert w.size >= 2304
        big = init_params(Architecture(base_channels=64, conv_layers=2), 2)["block0.conv1.weight"]
        assert big.size >= 1e4
        assert abs(big.var() / (2 / (64 * 9)) - 1) < 0.15
        assert abs(w.var() / (2 / 144) - 1) < 0.15


class TestForward:
    def test_zero_propagation(self, tiny_arch):
        z = zeros_like_params(tiny_arch)
        logits = forward(z, tiny_arch, np.zeros((3, 5, 9, 9)))
        assert not logits.any()

    def test_identical_rows(self, tiny_arch, rng):
        p = init_params(tiny_arch, 0)
        x = np.repeat(rng.normal(size=(1, 5, 9, 9)) * 500, 4, axis=0)
        out = forward(p, tiny_arch, x)
        assert (out == out[0]).all()

    def test_permutation(self, tiny_arch, rng):
        p = init_params(tiny_arch, 0)
        x = rng.normal(size=(6, 5, 9, 9)) * 500
        perm = rng.permutation(6)
        np.testing.assert_allclose(forward(p, tiny_arch, x)[perm], forward(p, tiny_arch, x[perm]), rtol=1e-12, atol=1e-12)

    def test_chunking_is_exact(self, tiny_arch, rng):
        p = init_params(tiny_arch, 0)
        x = rng.normal(size=(10, 5, 9, 9)) * 500
        np.testing.assert_array_equal(forward(p, tiny_arch, x, chunk_rows=3)[:3], forward(p, tiny_arch, x[:3]))

    def test_shape_checked(self, tiny_arch):
        with pytest.raises(ShapeMismatchError):
            forward(init_params(tiny_arch), tiny_arch, np.zeros((2, 5, 7, 7)))


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_array_equal(softmax(np.zeros(3)), np.full(3, 1 / 3))

    def test_shift_invariance(self):
        a = softmax(np.array([2.0, 5.0, 2.0]))
        b = softmax(np.array([-40.0, -37.0, -40.0]))
        np.testing.assert_allclose(a, b, rtol=1e-12)

    def test_no_overflow(self):
        p = softmax(np.array([1000.0, 0.0, 0.0]))
        assert np.isfinite(p).all() and p[0] == 1.0

    def test_simplex(self, rng):
        p = softmax(rng.normal(size=(100, 3)) * 30)
        assert (p >= 0).all()
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)


class TestLossAndGrad:
    def test_uniform_loss(self, tiny_arch):
        loss, _ = loss_and_grad(zeros_like_params(tiny_arch), tiny_arch, np.zeros((4, 5, 9, 9)), [1, 2, 3, 1])
        assert loss == pytest.approx(np.log(3), abs=1e-15)

    @pytest.mark.parametrize("pooling", ["avg", "flatten"])
    def test_finite_differences(self, tiny_arch, pooling):
        tiny_arch = replace(tiny_arch, pooling=pooling)
        rng = np.random.default_rng(0)
        p = init_params(tiny_arch, 1)
        for k in p:  # non-zero biases so every path is exercised
            if k.endswith("bias"):
                p[k] = rng.normal(size=p[k].shape) * 0.1
        x = rng.normal(size=(2, 5, 9, 9)) * 400
        start = time.perf_counter()
        worst = finite_difference_check(p, tiny_arch, x, np.array([1, 3]))
        assert worst <= 1e-5
        assert time.perf_counter() - start <= 60

    def test_duplicated_batch(self, tiny_arch, rng):
        p = init_params(tiny_arch, 0)
        x = rng.normal(size=(3, 5, 9, 9)) * 400
        y = np.array([1, 2, 3])
        l1, g1 = loss_and_grad(p, tiny_arch, x, y)
        l2, g2 = loss_and_grad(p, tiny_arch, np.concatenate([x, x]), np.concatenate([y, y]))
        assert l1 == pytest.approx(l2, rel=1e-13)
        for k in g1:
            np.testing.assert_allclose(g1[k], g2[k], rtol=1e-11, atol=1e-15)

    @pytest.mark.parametrize("labels", [[0, 1], [1, 4]])
    def test_bad_labels(self, tiny_arch, labels):
        with pytest.raises(ValueError):
            loss_and_grad(init_params(tiny_arch), tiny_arch, np.zeros((2, 5, 9, 9)), labels)


class TestCheckpoint:
    def test_round_trip(self, tmp_path, tiny_arch):
        p = init_params(tiny_arch, 4)
        save_checkpoint(tmp_path / "m.dlam", p, tiny_arch)
        q, arch = load_checkpoint(tmp_path / "m.dlam")
        assert arch == tiny_arch and list(q) == list(p)
        assert all(q[k].tobytes() == p[k].tobytes() for k in p)
        assert (tmp_path / "m.dlam").read_bytes()[:4] == b"DLAM"

    def test_round_trip_flatten(self, tmp_path, tiny_arch):
        arch = replace(tiny_arch, pooling="flatten")
        save_checkpoint(tmp_path / "m.dlam", init_params(arch, 1), arch)
        assert load_checkpoint(tmp_path / "m.dlam")[1] == arch

    def test_bad_magic(self, tmp_path, tiny_arch):
        save_checkpoint(tmp_path / "m.dlam", init_params(tiny_arch), tiny_arch)
        raw = bytearray((tmp_path / "m.dlam").read_bytes())
        raw[0:4] = b"NOPE"
        (tmp_path / "m.dlam").write_bytes(bytes(raw))
        with pytest.raises(VolumeFormatError):
            load_checkpoint(tmp_path / "m.dlam")

    def test_truncated(self, tmp_path, tiny_arch):
        save_checkpoint(tmp_path / "m.dlam", init_params(tiny_arch), tiny_arch)
        raw = (tmp_path / "m.dlam").read_bytes()
        (tmp_path / "m.dlam").write_bytes(raw[:-8])
        with pytest.raises(VolumeFormatError):
            load_checkpoint(tmp_path / "m.dlam")
