"""Tests for the five-term mixed loss and its gradients."""

import numpy as np
import pytest
import torch

from pslnet.loss import loss_gradient, mixed_loss
from pslnet.model import PSLNet, PslnetOutput, ShapeError, init_weights
from pslnet.perception import make_perception
from pslnet.train import TensorBatch

from oracles import rel_err


def _batch(gen, shape=(1, 3, 16, 16), dtype=torch.float64):
    return TensorBatch(input=torch.rand(*shape, generator=gen, dtype=dtype),
                       denoise_target=torch.rand(*shape, generator=gen, dtype=dtype),
                       removal_target=torch.rand(*shape, generator=gen, dtype=dtype))


def _net(micro_config, seed=0, dtype=torch.float64):
    net = PSLNet(micro_config).to(dtype)
    init_weights(net, seed)
    return net


def test_all_terms_zero_when_outputs_match_targets(micro_config):
    net = _net(micro_config, seed=1)
    gen = torch.Generator().manual_seed(2)
    x = torch.rand(1, 3, 16, 16, generator=gen, dtype=torch.float64)
    out = net(x)
    pn = make_perception(seed=3, dtype=torch.float64)
    batch = TensorBatch(input=x,
                        denoise_target=out.intermediates["dn_out"].detach(),
                        removal_target=out.upper.detach())
    # force every output to equal its target
    forced = PslnetOutput(upper=out.upper, lower=out.lower, fused=out.upper,
                          intermediates=out.intermediates)
    bd = mixed_loss(forced, out.intermediates["dn_out"], batch, pn, lam=0.5)
    for term in (bd.l_s1, bd.l_s2, bd.l_s3, bd.l_t1, bd.l_t2, bd.total):
        assert float(term.detach()) == 0.0


def test_lambda_zero_sums_structural_terms(micro_config):
    net = _net(micro_config, seed=4)
    gen = torch.Generator().manual_seed(5)
    batch = _batch(gen)
    out = net(batch.input)
    bd = mixed_loss(out, out.intermediates["dn_out"], batch, None, lam=0.0)
    assert float(bd.total.detach()) == float((bd.l_s1 + bd.l_s2 + bd.l_s3).detach())
    assert float(bd.l_t1) == 0.0 and float(bd.l_t2) == 0.0


def test_hand_computed_constant_offsets():
    shape = (1, 3, 16, 16)
    target = torch.zeros(*shape, dtype=torch.float64)
    out = PslnetOutput(upper=torch.full(shape, 0.1, dtype=torch.float64),
                       lower=torch.zeros(*shape, dtype=torch.float64),
                       fused=torch.full(shape, 0.3, dtype=torch.float64))
    dn_out = torch.full(shape, 0.2, dtype=torch.float64)
    batch = TensorBatch(input=target, denoise_target=target, removal_target=target)
    bd = mixed_loss(out, dn_out, batch, None, lam=0.0)
    assert abs(float(bd.l_s1) - 0.2) < 1e-12
    assert abs(float(bd.l_s2) - 0.1) < 1e-12
    assert abs(float(bd.l_s3) - 0.3) < 1e-12
    assert abs(float(bd.total.detach()) - 0.6) < 1e-12


def test_decomposition_identity_and_nonnegativity(micro_config):
    net = _net(micro_config, seed=6)
    pn = make_perception(seed=7, dtype=torch.float64)
    gen = torch.Generator().manual_seed(8)
    for trial in range(5):
        batch = _batch(gen)
        out = net(batch.input)
        lam = [0.0, 0.01, 0.5, 1.0, 2.0][trial]
        bd = mixed_loss(out, out.intermediates["dn_out"], batch,
                        pn if lam > 0 else None, lam=lam)
        terms = [float(t.detach()) for t in (bd.l_s1, bd.l_s2, bd.l_s3, bd.l_t1, bd.l_t2)]
        assert all(t >= 0 for t in terms)
        recomposed = terms[0] + terms[1] + terms[2] + lam * (terms[3] + terms[4])
        assert abs(float(bd.total.detach()) - recomposed) < 1e-12


def test_structural_targets_are_the_removal_reference(micro_config):
    net = _net(micro_config, seed=9)
    gen = torch.Generator().manual_seed(10)
    batch = _batch(gen)
    out = net(batch.input)
    bd = mixed_loss(out, out.intermediates["dn_out"], batch, None, lam=0.0)
    assert float(bd.l_s2.detach()) == pytest.approx(
        float((out.upper - batch.removal_target).detach().abs().mean()), abs=0)
    assert float(bd.l_s3.detach()) == pytest.approx(
        float((out.fused - batch.removal_target).detach().abs().mean()), abs=0)


def test_l2_variant(micro_config):
    net = _net(micro_config, seed=11)
    gen = torch.Generator().manual_seed(12)
    batch = _batch(gen)
    out = net(batch.input)
    bd = mixed_loss(out, out.intermediates["dn_out"], batch, None, lam=0.0,
                    losstype="l2")
    expect = float((((out.intermediates["dn_out"] - batch.denoise_target) ** 2)
                    .detach()).mean())
    assert float(bd.l_s1.detach()) == pytest.approx(expect, abs=0)
    with pytest.raises(ValueError):
        mixed_loss(out, out.intermediates["dn_out"], batch, None, lam=0.0,
                   losstype="huber")


def test_shape_mismatch_raises(micro_config):
    net = _net(micro_config, seed=13)
    gen = torch.Generator().manual_seed(14)
    batch = _batch(gen)
    out = net(batch.input)
    bad = TensorBatch(input=batch.input, denoise_target=batch.denoise_target,
                      removal_target=torch.rand(1, 3, 32, 32, dtype=torch.float64))
    with pytest.raises(ShapeError):
        mixed_loss(out, out.intermediates["dn_out"], bad, None, lam=0.0)


def test_gradients_zero_at_perfect_fit(micro_config):
    net = _net(micro_config, seed=15)
    gen = torch.Generator().manual_seed(16)
    x = torch.rand(1, 3, 16, 16, generator=gen, dtype=torch.float64)
    out = net(x)
    pn = make_perception(seed=17, dtype=torch.float64)
    batch = TensorBatch(input=x,
                        denoise_target=out.intermediates["dn_out"].detach(),
                        removal_target=out.upper.detach())
    net.zero_grad()
    forced = PslnetOutput(upper=out.upper, lower=out.lower, fused=out.upper,
                          intermediates=out.intermediates)
    bd = mixed_loss(forced, out.intermediates["dn_out"], batch, pn, lam=0.3)
    bd.total.backward()
    for name, p in net.named_parameters():
        if p.grad is not None:
            assert float(p.grad.abs().max()) == 0.0, name


def test_no_gradient_reaches_perception_weights(micro_config):
    net = _net(micro_config, seed=18)
    pn = make_perception(seed=19, dtype=torch.float64)
    gen = torch.Generator().manual_seed(20)
    batch = _batch(gen)
    _, grads = loss_gradient(net, pn, batch, lam=0.1)
    assert set(grads) == {n for n, _ in net.named_parameters()}
    assert all(p.grad is None for p in pn.parameters())


def test_texture_gradient_scales_linearly_with_lambda(micro_config):
    net = _net(micro_config, seed=21)
    pn = make_perception(seed=22, dtype=torch.float64)
    gen = torch.Generator().manual_seed(23)
    batch = _batch(gen)
    _, g0 = loss_gradient(net, None, batch, lam=0.0)
    _, g1 = loss_gradient(net, pn, batch, lam=0.2)
    _, g2 = loss_gradient(net, pn, batch, lam=0.4)
    for name in g0:
        texture_1 = g1[name] - g0[name]
        texture_2 = g2[name] - g0[name]
        assert torch.allclose(texture_2, 2.0 * texture_1, atol=1e-9)


def test_full_loss_gradient_matches_finite_differences(micro_config):
    from oracles import smooth_central_difference
    net = _net(micro_config, seed=24)
    pn = make_perception(seed=25, dtype=torch.float64)
    gen = torch.Generator().manual_seed(26)
    batch = _batch(gen)
    _, grads = loss_gradient(net, pn, batch, lam=0.05)

    def total():
        with torch.no_grad():
            out = net(batch.input)
            return float(mixed_loss(out, out.intermediates["dn_out"], batch,
                                    pn, lam=0.05).total)

    rng = np.random.default_rng(27)
    params = dict(net.named_parameters())
    names = sorted(params)
    checked = 0
    for _ in range(20):
        if checked == 8:
            break
        name = names[int(rng.integers(len(names)))]
        p = params[name]
        idx = tuple(int(rng.integers(s)) for s in p.shape)

        def read():
            return p.data[idx].item()

        def write(v):
            with torch.no_grad():
                p.data[idx] = v

        fd = smooth_central_difference(total, read, write, h=1e-5)
        if fd is None:  # kink inside the probe interval
            continue
        assert rel_err(fd, grads[name][idx].item()) < 1e-4, name
        checked += 1
    assert checked == 8
