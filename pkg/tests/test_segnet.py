import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mtuda.segnet import (GlobalProjectionHead, LocalProjectionHead, NetworkConfig, SegNet, StageSpec,
                          attention_matrix, forward, load_arrays, load_pretrained, model_arrays)

from conftest import TINY_NET
from fdcheck import fd_param_check, random_picks


@pytest.fixture
def net():
    torch.manual_seed(0)
    return SegNet(TINY_NET).double().eval()


def test_output_shapes_and_softmax(net):
    x = torch.rand(3, 16, 16, dtype=torch.float64)
    out = net(x)
    assert out.logits.shape == (3, 2, 16, 16)
    assert torch.allclose(torch.softmax(out.logits, 1).sum(1), torch.ones(3, 16, 16, dtype=torch.float64), atol=1e-6)
    assert net(x[0]).logits.shape == (1, 2, 16, 16)


def test_deterministic_and_stateless_in_eval(net):
    x = torch.rand(2, 16, 16, dtype=torch.float64)
    before = {k: v.clone() for k, v in net.state_dict().items()}
    a, b = net(x).logits, net(x).logits
    assert torch.equal(a, b)
    assert all(torch.equal(before[k], v) for k, v in net.state_dict().items())


def test_attention_captured_only_on_request(net):
    x = torch.rand(1, 16, 16, dtype=torch.float64)
    assert net(x).attention_maps == []
    maps = net(x, capture_attention=True).attention_maps
    assert len(maps) == 1  # last stage has a single block in the tiny config
    deep = SegNet(NetworkConfig(stages=(StageSpec(3, 2, 8, 1, 1), StageSpec(3, 2, 8, 2, 3)),
                                local_proj_grid=2))
    assert len(deep(torch.rand(1, 16, 16), capture_attention=True).attention_maps) == 2
    for m in maps:
        assert (m >= 0).all()
        assert torch.allclose(m.sum(-1), torch.ones_like(m.sum(-1)), atol=1e-5)


def test_shape_errors(net):
    with pytest.raises(ValueError):
        net(torch.rand(1, 15, 16, dtype=torch.float64))
    with pytest.raises(ValueError):
        net(torch.rand(1, 3, 16, 16, dtype=torch.float64))
    with pytest.raises(ValueError):
        NetworkConfig(stages=(StageSpec(3, 2, 10, 3, 1),))


# --- attention matrix ----------------------------------------------------------

@settings(max_examples=30)
@given(st.integers(1, 6), st.sampled_from([1, 2, 4]), st.integers(0, 1000))
def test_attention_rows_stochastic(n, heads, seed):
    g = torch.Generator().manual_seed(seed)
    q = torch.randn(2, n, 8, generator=g, dtype=torch.float64)
    k = torch.randn(2, n, 8, generator=g, dtype=torch.float64)
    a = attention_matrix(q, k, heads)
    assert a.shape == (2, heads, n, n)
    assert (a >= 0).all()
    assert torch.allclose(a.sum(-1), torch.ones(2, heads, n, dtype=torch.float64), atol=1e-6)


def test_attention_against_direct_formula():
    torch.manual_seed(1)
    q, k = torch.randn(5, 6, dtype=torch.float64), torch.randn(5, 6, dtype=torch.float64)
    a = attention_matrix(q, k, 2)
    for h in range(2):
        qs, ks = q[:, 3 * h:3 * h + 3], k[:, 3 * h:3 * h + 3]
        logits = (qs @ ks.T / math.sqrt(3)).numpy()
        ref = np.exp(logits) / np.exp(logits).sum(1, keepdims=True)
        assert np.allclose(a[h].numpy(), ref, atol=1e-12)


def test_attention_examples():
    eye = torch.eye(4, dtype=torch.float64) * 10
    a = attention_matrix(eye, eye, 1)[0]
    assert torch.equal(a.argmax(-1), torch.arange(4))
    z = torch.zeros(2, 4, dtype=torch.float64)
    assert torch.allclose(attention_matrix(z, z, 1), torch.full((1, 2, 2), 0.5, dtype=torch.float64))
    with pytest.raises(ValueError):
        attention_matrix(torch.zeros(2, 5), torch.zeros(2, 5), 2)


# --- projection heads ------------------------------------------------------------

def test_projection_norms_and_shapes(net):
    fused = net(torch.rand(2, 16, 16, dtype=torch.float64)).fused_features
    loc = net.project_local(fused)
    glo = net.project_global(fused)
    assert loc.shape == (2, TINY_NET.local_proj_grid, TINY_NET.local_proj_grid, TINY_NET.local_proj_dim)
    assert torch.allclose(loc.norm(dim=-1), torch.ones(loc.shape[:-1], dtype=torch.float64), atol=1e-6)
    assert glo.shape == (2, TINY_NET.global_proj_dim)
    assert torch.allclose(glo.norm(dim=-1), torch.ones(2, dtype=torch.float64), atol=1e-6)


def test_global_head_ignores_non_max_columns():
    torch.manual_seed(2)
    head = GlobalProjectionHead(2, 3).double()
    fused = torch.rand(1, 2, 4, 4, dtype=torch.float64)
    with torch.no_grad():
        z = head.conv(fused)
    argmax_cells = set()
    for c in range(3):
        argmax_cells.add(divmod(int(z[0, c].argmax()), 4))
    free = [(r, c) for r in range(4) for c in range(4) if (r, c) not in argmax_cells]
    (r1, c1), (r2, c2) = free[0], free[-1]
    swapped = fused.clone()
    swapped[..., r1, c1], swapped[..., r2, c2] = fused[..., r2, c2], fused[..., r1, c1]
    assert torch.allclose(head(fused), head(swapped), atol=0)


def test_local_head_gradient_matches_fd():
    torch.manual_seed(3)
    head = LocalProjectionHead(2, 2, 1).double()
    fused = torch.rand(1, 2, 2, 2, dtype=torch.float64) + 0.1
    w = torch.randn(2, dtype=torch.float64)
    params = list(head.parameters())
    picks = random_picks(params, 4, np.random.default_rng(0))
    errs = fd_param_check(lambda: (head(fused) * w).sum(), params, picks)
    assert max(errs) < 1e-4


def test_global_head_gradient_matches_fd():
    torch.manual_seed(4)
    head = GlobalProjectionHead(3, 4).double()
    fused = torch.rand(2, 3, 3, 3, dtype=torch.float64)
    w = torch.randn(4, dtype=torch.float64)
    params = list(head.parameters())
    picks = [(0, i) for i in range(12)] + [(1, i) for i in range(4)]
    errs = fd_param_check(lambda: (head(fused) @ w).sum(), params, picks)
    assert max(errs) < 1e-4


# --- FPN connectivity ------------------------------------------------------------

def test_every_stage_reaches_the_logits():
    torch.manual_seed(5)
    net = SegNet(NetworkConfig(stages=(StageSpec(3, 2, 8, 1, 1), StageSpec(3, 2, 8, 2, 1),
                                       StageSpec(3, 2, 16, 2, 1)), local_proj_grid=2)).double().eval()
    x = torch.rand(1, 32, 32, dtype=torch.float64)
    full = net(x).logits
    for s in range(3):
        assert not torch.allclose(full, net(x, drop_stage=s).logits)


# --- param groups / serialization ------------------------------------------------

def test_param_groups_partition(net):
    enc, dec = net.param_groups()
    assert len(enc) + len(dec) == len(list(net.parameters()))
    names = {id(p): n for n, p in net.named_parameters()}
    assert all(names[id(p)].startswith("stages.") for p in enc)
    assert not any(names[id(p)].startswith("stages.") for p in dec)


def test_array_round_trip_bit_exact(net):
    arrays = model_arrays(net, "m/")
    torch.manual_seed(99)
    other = SegNet(TINY_NET).double()
    load_arrays(other, arrays, "m/")
    for k, v in net.state_dict().items():
        assert torch.equal(v, other.state_dict()[k])
    with pytest.raises(KeyError):
        load_arrays(other, {}, "m/")


def test_load_pretrained_skips_unknown(net):
    arrays = {"nope": np.zeros(3), "seg_head.bias": np.ones(2)}
    assert load_pretrained(net, arrays) == ["seg_head.bias"]
    assert torch.equal(net.seg_head.bias, torch.ones(2, dtype=torch.float64))


def test_config_round_trip():
    d = TINY_NET.to_dict()
    assert NetworkConfig.from_dict(d) == TINY_NET
    assert NetworkConfig.from_dict(d).digest() == TINY_NET.digest()


def test_module_level_forward(net):
    x = torch.rand(1, 16, 16, dtype=torch.float64)
    assert torch.equal(forward(net, x).logits, net(x).logits)
