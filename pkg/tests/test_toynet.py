import hashlib

import numpy as np
import pytest

from pgnseg.tensor import DimensionError
from pgnseg.toynet import (
    NumericError,
    forward,
    gen_synthetic,
    load_bundle,
    save_bundle,
    softmax,
    splitmix64,
)


def test_splitmix64_reference_values():
    # published SplitMix64 outputs for seed 1234567
    z = splitmix64(1234567, 0, 3)
    assert [int(v) for v in z] == [6457827717110365317, 3203168211198807973, 9817491932198370423]


class TestSoftmax:
    def col(self, *v):
        return np.array(v, dtype=np.float64).reshape(-1, 1, 1)

    def test_uniform(self):
        np.testing.assert_allclose(softmax(self.col(0, 0, 0)).ravel(), [1 / 3] * 3, rtol=1e-15)

    def test_ln4(self):
        np.testing.assert_allclose(softmax(self.col(np.log(4), 0)).ravel(), [0.8, 0.2], rtol=1e-14)

    def test_no_overflow(self):
        assert softmax(self.col(1000, 1000)).ravel().tolist() == [0.5, 0.5]

    def test_nonfinite(self):
        with pytest.raises(NumericError):
            softmax(self.col(np.nan, 0))

    def test_shift_invariance(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(4, 3, 3))
        shift = rng.normal(size=(1, 3, 3)) * 50
        np.testing.assert_allclose(softmax(x + shift), softmax(x), atol=1e-6)


class TestForward:
    def test_identity_composition(self):
        params, x = gen_synthetic(0, {"c_prev": 3, "c_feat": 3})
        x = np.abs(x)
        k = np.zeros((3, 3, 3, 3))
        k[np.arange(3), np.arange(3), 1, 1] = 1.0
        eps = params.bn_eps
        p = params.replace(
            k_penult=k, b_penult=np.zeros(3), bn_gamma=np.ones(3), bn_beta=np.zeros(3),
            bn_mean=np.zeros(3), bn_var=np.full(3, 1 - eps),
        )
        np.testing.assert_allclose(forward(p, x).psi, x, rtol=1e-15)

    def test_zero_input_uniform_probs(self):
        params, x = gen_synthetic(1)
        c = params.num_classes
        p = params.replace(b_penult=np.zeros(params.c_feat), bn_beta=np.zeros(params.c_feat),
                           bn_mean=np.zeros(params.c_feat), b_last=np.zeros(c))
        t = forward(p, np.zeros_like(x))
        assert not t.logits.any()
        np.testing.assert_allclose(t.probs, 1 / c)

    def test_seed42_normalization(self):
        params, x = gen_synthetic(42, {"c_prev": 4, "c_feat": 6, "num_classes": 5, "height": 8, "width": 8})
        t = forward(params, x)
        assert np.abs(t.probs.sum(axis=0) - 1).max() <= 1e-6
        assert np.all((t.probs > 0) & (t.probs < 1))
        np.testing.assert_array_equal(t.pred, t.probs.argmax(axis=0))
        assert np.all(t.psi >= 0)

    def test_deterministic(self):
        params, x = gen_synthetic(5)
        a, b = forward(params, x), forward(params, x)
        for name in ("pre_bn", "pre_relu", "psi", "logits", "probs", "pred"):
            assert getattr(a, name).tobytes() == getattr(b, name).tobytes()

    def test_channel_mismatch(self):
        params, x = gen_synthetic(5)
        with pytest.raises(DimensionError):
            forward(params, x[:2])


class TestGenSynthetic:
    def _digest(self, tmp_path, seed, name):
        params, x = gen_synthetic(seed)
        save_bundle(tmp_path / name, params, x)
        return {f.name: hashlib.sha256(f.read_bytes()).hexdigest() for f in sorted((tmp_path / name).iterdir())}

    def test_same_seed_identical(self, tmp_path):
        assert self._digest(tmp_path, 7, "a") == self._digest(tmp_path, 7, "b")

    def test_different_seeds_differ(self):
        a, _ = gen_synthetic(1)
        b, _ = gen_synthetic(2)
        assert not np.array_equal(a.k_penult, b.k_penult)

    def test_c1_rejected(self):
        with pytest.raises(ValueError):
            gen_synthetic(0, {"num_classes": 1})

    def test_bn_var_positive(self):
        for seed in range(20):
            assert np.all(gen_synthetic(seed)[0].bn_var > 0)

    def test_bundle_roundtrip(self, tmp_path):
        params, x = gen_synthetic(3)
        files = save_bundle(tmp_path, params, x)
        assert len(files) == 9
        p2, x2, manifest = load_bundle(tmp_path)
        assert manifest["dims"]["num_classes"] == params.num_classes
        np.testing.assert_array_equal(x2, x)
        np.testing.assert_array_equal(p2.k_penult, params.k_penult)
        assert p2.bn_eps == params.bn_eps
