import pytest
import torch

from ewir.optim import SGD


def _param(value):
    return torch.nn.Parameter(torch.tensor([value]))


def test_plain_step():
    p = _param(1.0)
    opt = SGD([p], momentum=0.0, weight_decay=0.0)
    p.grad = torch.tensor([1.0])
    opt.step(0.1)
    assert p.item() == pytest.approx(0.9)


def test_weight_decay_only():
    p = _param(1.0)
    opt = SGD([p], momentum=0.0, weight_decay=5e-4)
    p.grad = torch.tensor([0.0])
    opt.step(0.1)
    assert p.item() == pytest.approx(0.99995, abs=1e-8)


def test_momentum_accumulates():
    p = _param(0.0)
    opt = SGD([p], momentum=0.9, weight_decay=0.0)
    for _ in range(2):
        p.grad = torch.tensor([1.0])
        opt.step(0.1)
    # v1 = 1, v2 = 1.9 -> p = -0.1 - 0.19
    assert p.item() == pytest.approx(-0.29)


def test_matches_torch_sgd():
    torch.manual_seed(3)
    a = torch.nn.Parameter(torch.randn(5))
    b = torch.nn.Parameter(a.detach().clone())
    mine = SGD([a], momentum=0.9, weight_decay=5e-4)
    ref = torch.optim.SGD([b], lr=0.05, momentum=0.9, weight_decay=5e-4)
    for _ in range(4):
        g = torch.randn(5)
        a.grad, b.grad = g.clone(), g.clone()
        mine.step(0.05)
        ref.step()
    assert torch.allclose(a, b, atol=1e-7)


def test_rejects_nonpositive_lr_and_clears_grads():
    p = _param(1.0)
    opt = SGD([p])
    with pytest.raises(ValueError):
        opt.step(0.0)
    p.grad = torch.tensor([1.0])
    opt.step(0.1)
    assert p.grad is None


def test_frozen_params_skipped():
    p = _param(1.0)
    p.requires_grad_(False)
    assert SGD([p]).params == []
