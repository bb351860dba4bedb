import numpy as np
import pytest
import torch

from weitop.model import ModelConfig, WeiADNet, make_config
from weitop.numerics import make_rng
from weitop.training import build_model


@pytest.fixture(scope="module")
def net():
    return build_model(make_config(hidden=64), seed=0).eval()


def batch(n=4, seed=0, side=56):
    return torch.as_tensor(make_rng(seed).standard_normal((n, side, side, 3)))


def test_config_flat_round_trip():
    cfg = make_config(tiers=(2, 1, 1), epsilon=0.05, trainable_last_k=2)
    back = ModelConfig.from_flat(cfg.to_flat())
    assert back == cfg


def test_width_mismatch_rejected():
    cfg = make_config()
    cfg.aggregator.d_in = 32
    with pytest.raises(ValueError):
        ModelConfig(cfg.encoder, cfg.aggregator)


def test_unpruned_forward_has_distillation_pair(net):
    with torch.no_grad():
        out = net(batch())
    assert out.descriptor.shape == (4, net.descriptor_dim)
    assert out.teacher.shape == out.student_logits.shape == (4, 16)
    assert out.kept.shape == (4, 16)


def test_pruned_forward(net):
    with torch.no_grad():
        out = net(batch(), rho=0.5)
    assert out.kept.shape == (4, 8)
    assert out.teacher is None and out.student_logits is None
    assert out.plan.shape == (4, 9, 17)
    np.testing.assert_allclose(out.descriptor.norm(dim=1), 1.0, atol=1e-12)


def test_rho_one_is_bitwise_identity(net):
    x = batch(6, seed=3)
    with torch.no_grad():
        a = net(x).descriptor
        b = net(x, rho=1.0).descriptor
    assert torch.equal(a, b)


def test_pruning_is_per_image(net):
    x = batch(3, seed=5)
    with torch.no_grad():
        together = net(x, rho=0.4).descriptor
        alone = torch.cat([net(x[i:i + 1], rho=0.4).descriptor for i in range(3)])
    np.testing.assert_allclose(together, alone, atol=1e-12)


def test_random_selector_is_seeded(net):
    x = batch(2)
    with torch.no_grad():
        a = net(x, selector=net.random_selector(0.5, make_rng(1))).kept
        b = net(x, selector=net.random_selector(0.5, make_rng(1))).kept
    assert torch.equal(a, b)


def test_describe_chunks(net):
    x = batch(5, seed=9).numpy()
    # matmul blocking may differ with the batch shape, so only rounding-level agreement
    np.testing.assert_allclose(net.describe(x, batch_size=2), net.describe(x, batch_size=5), rtol=0, atol=1e-12)


def test_build_model_is_seeded():
    a = build_model(make_config(hidden=16), 3).state_dict()
    b = build_model(make_config(hidden=16), 3).state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)
    assert isinstance(build_model(make_config(hidden=16), 3), WeiADNet)
