"""Two-scale BEV backbone: shapes, zero input, frame independence and gradients."""

import numpy as np
import pytest

from helpers import leaf, probe
from mgtanet.autodiff import ParamStore, Tensor, gradcheck
from mgtanet.backbone import Backbone
from mgtanet.errors import ConfigError


def test_shape_contract_full_size():
    bb = Backbone(ParamStore(), in_channels=64, channels=32)
    f1, f2, f = bb(Tensor(np.random.default_rng(0).normal(size=(64, 64, 64))))
    assert f1.shape == (32, 64, 64) and f2.shape == (32, 32, 32) and f.shape == (32, 64, 64)
    assert (f1.scale, f2.scale, f.scale) == (1, 2, 1)


@pytest.mark.parametrize("hw", [(8, 8), (8, 12), (10, 16)])
def test_shape_contract_even_sizes(hw):
    bb = Backbone(ParamStore(), in_channels=3, channels=4)
    f1, f2, f = bb(Tensor(np.ones((3, *hw))))
    assert f1.shape == (4, *hw) and f2.shape == (4, hw[0] // 2, hw[1] // 2) and f.shape == (4, *hw)


def test_zero_canvas_zero_bias_gives_zero():
    bb = Backbone(ParamStore(rng_seed=4), in_channels=5, channels=6)
    outs = bb(Tensor(np.zeros((5, 8, 8))))
    assert all(not o.tensor.data.any() for o in outs)


def test_odd_size_rejected():
    bb = Backbone(ParamStore(), in_channels=2, channels=4)
    with pytest.raises(ConfigError):
        bb(Tensor(np.zeros((2, 8, 7))))


def test_frames_are_independent():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(2, 3, 8, 8))
    bb = Backbone(ParamStore(rng_seed=2), in_channels=3, channels=4)
    first = [bb(Tensor(x))[2].tensor.data for x in (a, b)]
    second = [bb(Tensor(x))[2].tensor.data for x in (b, a)]
    assert first[0].tobytes() == second[1].tobytes()
    assert first[1].tobytes() == second[0].tobytes()


def test_gradcheck_toy_canvas():
    store = ParamStore(rng_seed=3)
    bb = Backbone(store, in_channels=2, channels=3)
    for name, t in store.items():
        if name.endswith(".b"):
            store.set(name, np.random.default_rng(len(name)).normal(0, 0.1, t.shape))
    x = leaf(np.random.default_rng(5).normal(size=(2, 8, 8)))

    def fn():
        f1, f2, f = bb(x)
        return probe(f.tensor, 0) + probe(f2.tensor, 1)

    rep = gradcheck(fn, {"canvas": x, **dict(store.items())}, max_per_tensor=20)
    assert rep.passed(1e-4), rep.summary()
