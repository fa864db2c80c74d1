"""Tests for the frozen texture feature extractor."""

import numpy.testing as npt
import pytest
import torch

from pslnet.model import ShapeError
from pslnet.perception import (PerceptionNet, extract_features, make_perception,
                               save_perception_weights)

from oracles import rel_err


def test_feature_shape():
    net = make_perception(seed=0)
    feats = extract_features(torch.rand(2, 3, 32, 32), net)
    assert feats.shape == (2, 128, 16, 16)


def test_zero_weights_give_zero_features():
    net = PerceptionNet()
    with torch.no_grad():
        for p in net.parameters():
            p.zero_()
    feats = net(torch.rand(1, 3, 16, 16))
    assert torch.all(feats == 0)


def test_identical_inputs_give_identical_features():
    net = make_perception(seed=1)
    x = torch.rand(1, 3, 16, 16)
    a = net(x)
    b = net(x.clone())
    assert torch.equal(a, b)
    assert float((a - b).abs().mean()) == 0.0


def test_weights_are_frozen():
    net = make_perception(seed=2)
    assert all(not p.requires_grad for p in net.parameters())
    x = torch.rand(1, 3, 16, 16, requires_grad=True)
    net(x).sum().backward()
    assert x.grad is not None
    assert all(p.grad is None for p in net.parameters())


def test_shape_preconditions():
    net = make_perception(seed=3)
    with pytest.raises(ShapeError):
        net(torch.rand(1, 1, 16, 16))
    with pytest.raises(ShapeError):
        net(torch.rand(1, 3, 2, 8))


def test_translation_covariance():
    net = make_perception(seed=4, dtype=torch.float64)
    base = torch.rand(1, 3, 48, 48, dtype=torch.float64)
    crop_a = base[:, :, 4:36, 4:36]
    crop_b = base[:, :, 6:38, 4:36]  # shifted two pixels down in content
    fa = net(crop_a)
    fb = net(crop_b)
    # one pooling stage: a 2-pixel input shift is a 1-pixel feature shift
    inner_a = fa[:, :, 5:12, 4:12]
    inner_b = fb[:, :, 4:11, 4:12]
    npt.assert_allclose(inner_a.numpy(), inner_b.numpy(), atol=1e-5)


def test_input_gradient_matches_finite_differences():
    net = make_perception(seed=5, dtype=torch.float64)
    gen = torch.Generator().manual_seed(6)
    x = torch.rand(1, 3, 16, 16, generator=gen, dtype=torch.float64,
                   requires_grad=True)
    ref = torch.rand(1, 3, 16, 16, generator=gen, dtype=torch.float64)
    with torch.no_grad():
        f_ref = net(ref)
    (net(x) - f_ref).abs().mean().backward()

    def loss():
        with torch.no_grad():
            return float((net(x) - f_ref).abs().mean())

    import numpy as np
    from oracles import smooth_central_difference
    rng = np.random.default_rng(7)
    checked = 0
    for _ in range(15):
        if checked == 6:
            break
        idx = (0, int(rng.integers(3)), int(rng.integers(16)), int(rng.integers(16)))

        def read():
            return x.data[idx].item()

        def write(v):
            with torch.no_grad():
                x.data[idx] = v

        fd = smooth_central_difference(loss, read, write, h=1e-5)
        if fd is None:  # kink inside the probe interval
            continue
        assert rel_err(fd, x.grad[idx].item()) < 1e-4
        checked += 1
    assert checked == 6


def test_weight_file_round_trip(tmp_path):
    net = make_perception(seed=8)
    path = tmp_path / "pn.zip"
    save_perception_weights(path, net)
    loaded = make_perception(weights_path=path)
    for p, q in zip(net.parameters(), loaded.parameters()):
        assert torch.equal(p, q)
