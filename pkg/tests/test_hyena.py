import time

import numpy as np
import pytest
import torch

from conftest import reinit
from morphotr.errors import ConfigError
from morphotr.hyena import HyenaOperator, ImplicitFilter, hyena_forward, implicit_filter
from morphotr.tensor_core import as_array, grad_check

from oracles import filter_oracle, hyena_oracle


def test_filter_taps():
    gen = ImplicitFilter(4)
    assert implicit_filter(gen, 16).shape == (4, 31)
    assert implicit_filter(gen, 1).shape == (4, 1)


def test_filter_zero_final_layer():
    gen = ImplicitFilter(3)
    with torch.no_grad():
        gen.fc2.weight.zero_()
        gen.fc2.bias.zero_()
    assert torch.count_nonzero(implicit_filter(gen, 10)) == 0


def test_filter_decay_concentrates_mass():
    gen = ImplicitFilter(3)
    with torch.no_grad():
        gen.fc2.weight.zero_()
        gen.fc2.bias.fill_(1.0)
        gen.decay_param.fill_(float(np.log(np.expm1(2.0))))
    h = implicit_filter(gen, 20).detach().numpy()
    center = h[:, 19]
    tau = np.arange(-19, 20)
    ratio = np.abs(h[:, np.abs(tau) > 8]) / np.abs(center)[:, None]
    assert ratio.max() < 1e-6


def test_filter_envelope_bound():
    gen = reinit(ImplicitFilter(4, hidden=8), std=0.7)
    h = implicit_filter(gen, 25).detach().numpy()
    rate = torch.nn.functional.softplus(gen.decay_param).detach().numpy()
    bound = np.abs(gen.fc2.weight.detach().numpy()).sum(1) + np.abs(gen.fc2.bias.detach().numpy())
    tau = np.abs(np.arange(-24, 25))
    assert np.all(np.abs(h) <= bound[:, None] * np.exp(-rate[:, None] * tau) + 1e-12)


def test_filter_is_two_sided():
    h = implicit_filter(reinit(ImplicitFilter(2)), 6).detach().numpy()
    assert np.any(h[:, :5] != 0) and np.any(h[:, 6:] != 0)


def test_filter_matches_oracle():
    gen = reinit(ImplicitFilter(3, hidden=8), std=0.5)
    got = implicit_filter(gen, 9).detach().numpy()
    assert np.max(np.abs(got - filter_oracle(gen, 9))) < 1e-12


def test_filter_rejects_empty():
    with pytest.raises(ConfigError):
        implicit_filter(ImplicitFilter(2), 0)


def test_identity_recursion():
    d = 3
    layer = HyenaOperator(d, order=1)
    with torch.no_grad():
        layer.in_proj.weight.zero_()
        layer.in_proj.bias.zero_()
        layer.in_proj.weight[:d] = torch.eye(d)
        layer.in_proj.bias[d:] = 1.0
        f = layer.filters[0]
        f.fc2.weight.zero_()
        f.fc2.bias.fill_(1.0)
        f.decay_param.fill_(1000.0)
    u = as_array(np.random.default_rng(0).normal(size=(7, d)))
    assert torch.allclose(hyena_forward(u, layer), layer.out_proj(u), atol=1e-12)


def test_zero_input_no_bias():
    layer = reinit(HyenaOperator(4, order=3, bias=False))
    out = hyena_forward(torch.zeros(9, 4), layer)
    assert torch.count_nonzero(out) == 0


@pytest.mark.parametrize("L", [1, 2, 5, 12, 16])
def test_matches_literal_recursion(L):
    layer = reinit(HyenaOperator(3, order=3, filter_hidden=8), std=0.4, seed=L)
    u = np.random.default_rng(L).normal(size=(L, 3))
    got = hyena_forward(as_array(u), layer).detach().numpy()
    assert np.max(np.abs(got - hyena_oracle(u, layer))) < 1e-9


def test_batch_equals_per_sequence():
    layer = reinit(HyenaOperator(3, filter_hidden=8))
    u = as_array(np.random.default_rng(3).normal(size=(4, 6, 3)))
    batched = hyena_forward(u, layer)
    for b in range(4):
        assert torch.allclose(batched[b], hyena_forward(u[b], layer), atol=1e-12)


def test_reversal_commutes_with_symmetric_filter():
    layer = reinit(HyenaOperator(3, filter_hidden=8), std=0.4)
    with torch.no_grad():
        for f in layer.filters:
            f.fc1.weight[:, -1] = 0.0  # drop the sign(tau) feature
    u = as_array(np.random.default_rng(5).normal(size=(10, 3)))
    fwd = hyena_forward(u.flip(0), layer)
    assert torch.allclose(fwd, hyena_forward(u, layer).flip(0), atol=1e-12)


def test_shape_mismatch():
    layer = HyenaOperator(4)
    with pytest.raises(ConfigError):
        layer(torch.zeros(1, 5, 3))


def test_grad_check():
    layer = reinit(HyenaOperator(2, order=3, n_freqs=2, filter_hidden=4), std=0.5)
    u = as_array(np.random.default_rng(0).normal(size=(6, 2)), requires_grad=True)
    params = {"u": u, **dict(layer.named_parameters())}
    assert grad_check(lambda: (hyena_forward(u, layer) ** 2).sum(), params) < 1e-4


def _best_time(layer, L, reps=5):
    u = torch.randn(1, L, layer.d_model)
    best = float("inf")
    with torch.no_grad():
        layer(u)
        for _ in range(reps):
            t0 = time.perf_counter()
            layer(u)
            best = min(best, time.perf_counter() - t0)
    return best


def test_near_linear_scaling():
    # log-log slope of runtime vs length; quadratic cost would give 2
    layer = HyenaOperator(16)
    lengths = [256, 512, 1024, 2048, 4096, 8192]
    threads = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        times = [_best_time(layer, L, reps=7) for L in lengths]
    finally:
        torch.set_num_threads(threads)
    slope = np.polyfit(np.log(lengths), np.log(times), 1)[0]
    assert slope < 1.5, slope
