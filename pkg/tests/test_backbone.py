import pytest
import torch

from mgalign.backbone import PyramidExtractor
from mgalign.config import ConfigError


def test_three_level_shapes():
    torch.manual_seed(0)
    pyr = PyramidExtractor((3, 4, 5), 64)(torch.rand(1, 3, 128, 128))
    assert [tuple(m.shape[-2:]) for m in pyr.maps] == [(16, 16), (8, 8), (4, 4)]
    assert pyr.strides == [8, 16, 32]
    assert all(m.shape[1] == 64 for m in pyr.maps)


def test_single_level():
    pyr = PyramidExtractor((3,), 32)(torch.rand(2, 3, 64, 64))
    assert len(pyr) == 1 and tuple(pyr.maps[0].shape) == (2, 32, 8, 8)


@pytest.mark.parametrize("levels,size", [((3, 4, 5, 6, 7), 256), ((4, 6), 128), ((5,), 96)])
def test_stride_arithmetic(levels, size):
    pyr = PyramidExtractor(levels, 16)(torch.rand(1, 3, size, size))
    for lvl, m, s in pyr:
        assert s == 2**lvl
        assert tuple(m.shape[-2:]) == (size // s, size // s)


def test_zero_image_is_finite():
    pyr = PyramidExtractor()(torch.zeros(1, 3, 64, 64))
    assert all(torch.isfinite(m).all() for m in pyr.maps)


def test_indivisible_size_names_stride():
    with pytest.raises(ConfigError, match="32"):
        PyramidExtractor((3, 4, 5))(torch.rand(1, 3, 100, 100))


def test_deterministic():
    torch.manual_seed(3)
    net = PyramidExtractor()
    x = torch.rand(1, 3, 64, 64)
    assert all(torch.equal(a, b) for a, b in zip(net(x).maps, net(x).maps))


@pytest.mark.parametrize("level_index", [0, 1, 2])
def test_gradient_reaches_first_layer(level_index):
    torch.manual_seed(0)
    net = PyramidExtractor()
    net(torch.rand(1, 3, 64, 64)).maps[level_index].sum().backward()
    first = net.backbone.stem[0].weight
    assert first.grad is not None and first.grad.norm() > 0
