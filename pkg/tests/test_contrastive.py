import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from mtuda.contrastive import (ContrastiveBatch, NegativeQueue, global_contrastive_loss, global_loss, glcl_loss,
                               local_contrastive_loss, local_loss, local_positive_index, queue_push)

from fdcheck import rel_err


def unit(rng, *shape):
    return F.normalize(torch.as_tensor(rng.normal(size=shape)), dim=-1)


def brute_infonce(anchor, pos, negs, tau):
    num = math.exp(float(anchor @ pos) / tau)
    den = num + sum(math.exp(float(anchor @ n) / tau) for n in negs)
    return -math.log(num / den)


# --- queue ---------------------------------------------------------------------

def test_queue_fifo_and_identity():
    q = NegativeQueue(2)
    vs = torch.eye(3, dtype=torch.float64)
    queue_push(q, vs)
    assert torch.equal(q.entries, vs[1:].float())
    assert q.write_cursor == 1
    before = q.entries.clone()
    q.push(torch.zeros(0, 3))
    assert torch.equal(q.entries, before)
    q64 = NegativeQueue(4, dtype=torch.float64)
    v = unit(np.random.default_rng(0), 2, 5)
    q64.push(v)
    assert torch.equal(q64.entries, v)


def test_queue_rejects_non_unit():
    with pytest.raises(ValueError):
        NegativeQueue(4).push(torch.tensor([[1.0, 1.0]]))
    q = NegativeQueue(4)
    q.push(torch.tensor([[1.0, 0.0]]))
    with pytest.raises(ValueError):
        q.push(torch.tensor([[1.0, 0.0, 0.0]]))


@given(st.lists(st.integers(1, 5), min_size=1, max_size=8), st.integers(1, 7))
def test_queue_keeps_last_capacity_in_order(sizes, cap):
    q = NegativeQueue(cap, dtype=torch.float64)
    pushed = []
    k = 0
    for n in sizes:
        vs = torch.zeros(n, 64, dtype=torch.float64)
        for i in range(n):
            vs[i, k % 64] = 1.0
            k += 1
        q.push(vs)
        pushed.extend(vs)
    assert len(q) == min(cap, len(pushed))
    assert torch.equal(q.entries, torch.stack(pushed[-cap:]))


def test_queue_state_round_trip():
    q = NegativeQueue(3, dtype=torch.float64)
    q.push(unit(np.random.default_rng(1), 4, 6))
    r = NegativeQueue.from_state(q.state())
    assert torch.equal(r.entries, q.entries) and r.total_pushed == 4 and r.capacity == 3


def test_queue_entries_never_receive_gradient():
    rng = np.random.default_rng(2)
    v = unit(rng, 3, 4).requires_grad_(True)
    q = NegativeQueue(8, dtype=torch.float64)
    q.push(v)
    assert not q.entries.requires_grad
    a = unit(rng, 2, 4).requires_grad_(True)
    global_contrastive_loss(a, unit(rng, 2, 4), None, q, 0.5).backward()
    assert v.grad is None and q.entries.grad is None
    assert a.grad is not None


# --- local ---------------------------------------------------------------------

def test_local_single_location_is_zero():
    rng = np.random.default_rng(3)
    assert local_contrastive_loss(unit(rng, 1, 1, 4), unit(rng, 1, 1, 4), 0.07).item() == 0.0


@pytest.mark.parametrize("S", [2, 3])
def test_local_orthonormal_closed_form(S):
    n = S * S
    g = torch.eye(n, dtype=torch.float64).reshape(S, S, n)
    tau = 0.07
    expected = -math.log(math.exp(1 / tau) / (math.exp(1 / tau) + (n - 1)))
    got = local_contrastive_loss(g, g.clone(), tau).item()
    assert abs(got - expected) < 1e-9
    brute = brute_infonce(g.reshape(n, n)[0], g.reshape(n, n)[0], list(g.reshape(n, n)[1:]), tau)
    assert abs(got - brute) < 1e-9


@settings(max_examples=30)
@given(st.integers(0, 10_000), st.integers(1, 3))
def test_local_matches_brute_force(seed, S):
    rng = np.random.default_rng(seed)
    a, p = unit(rng, S, S, 5), unit(rng, S, S, 5)
    af, pf = a.reshape(-1, 5), p.reshape(-1, 5)
    total = 0.0
    for m in range(S * S):
        sims = [float(af[m] @ pf[j]) for j in range(S * S)]
        best = max(range(S * S), key=lambda j: (sims[j], -j))
        assert local_positive_index(a, p)[m].item() == best
        total += brute_infonce(af[m], pf[best], [pf[j] for j in range(S * S) if j != best], 0.2)
    assert abs(local_contrastive_loss(a, p, 0.2).item() - total / (S * S)) < 1e-9


def test_local_same_index_variant():
    rng = np.random.default_rng(5)
    a, p = unit(rng, 2, 2, 3), unit(rng, 2, 2, 3)
    af, pf = a.reshape(4, 3), p.reshape(4, 3)
    ref = np.mean([brute_infonce(af[m], pf[m], [pf[j] for j in range(4) if j != m], 0.5) for m in range(4)])
    assert abs(local_contrastive_loss(a, p, 0.5, positive="same_index").item() - ref) < 1e-9
    with pytest.raises(ValueError):
        local_contrastive_loss(a, p, 0.5, positive="nearest")


def test_local_permutation_symmetry():
    rng = np.random.default_rng(6)
    a, p = unit(rng, 3, 3, 4), unit(rng, 3, 3, 4)
    perm = torch.as_tensor(rng.permutation(9))
    pa = a.reshape(9, 4)[perm].reshape(3, 3, 4)
    pp = p.reshape(9, 4)[perm].reshape(3, 3, 4)
    assert abs(local_contrastive_loss(a, p, 0.1).item() - local_contrastive_loss(pa, pp, 0.1).item()) < 1e-12


def test_temperature_and_shape_errors():
    g = torch.ones(1, 1, 1)
    with pytest.raises(ValueError):
        local_contrastive_loss(g, g, 0.0)
    with pytest.raises(ValueError):
        local_contrastive_loss(torch.ones(2, 2, 1), torch.ones(1, 1, 1), 0.1)
    with pytest.raises(ValueError):
        global_contrastive_loss(torch.ones(1, 1), torch.ones(1, 1), tau=-1.0)
    with pytest.raises(ValueError):
        global_contrastive_loss(torch.zeros(0, 3), torch.zeros(0, 3))


# --- global --------------------------------------------------------------------

def test_global_lone_positive_is_zero():
    a = torch.tensor([[0.6, 0.8]], dtype=torch.float64)
    assert global_contrastive_loss(a, a.clone()).item() == 0.0


@pytest.mark.parametrize("M", [1, 4, 16])
def test_global_orthogonal_queue_closed_form(M):
    eye = torch.eye(M + 1, dtype=torch.float64)
    q = NegativeQueue(64, dtype=torch.float64)
    q.push(eye[1:])
    a = eye[:1]
    got = global_contrastive_loss(a, a.clone(), None, q, 1.0).item()
    assert abs(got - (-math.log(math.e / (math.e + M)))) < 1e-9
    assert abs(got - brute_infonce(a[0], a[0], list(eye[1:]), 1.0)) < 1e-9


@settings(max_examples=30)
@given(st.integers(0, 10_000), st.integers(1, 4), st.integers(0, 3), st.integers(0, 5))
def test_global_matches_brute_denominator(seed, N, n_cross, n_queue):
    rng = np.random.default_rng(seed)
    a, p = unit(rng, N, 6), unit(rng, N, 6)
    cross = unit(rng, n_cross, 6) if n_cross else None
    q = NegativeQueue(16, dtype=torch.float64)
    if n_queue:
        q.push(unit(rng, n_queue, 6))
    tau = 0.3
    ref = 0.0
    for i in range(N):
        negs = [a[j] for j in range(N) if j != i] + (list(cross) if n_cross else []) + list(q.entries)
        ref += brute_infonce(a[i], p[i], negs, tau)
    assert abs(global_contrastive_loss(a, p, cross, q, tau).item() - ref / N) < 1e-9


def test_duplicate_queue_increases_loss():
    rng = np.random.default_rng(7)
    a, p = unit(rng, 2, 5), unit(rng, 2, 5)
    q = NegativeQueue(32, dtype=torch.float64)
    q.push(unit(rng, 4, 5))
    base = global_contrastive_loss(a, p, None, q, 0.1).item()
    q.push(q.entries.clone())
    assert global_contrastive_loss(a, p, None, q, 0.1).item() > base


@settings(max_examples=20)
@given(st.integers(0, 10_000))
def test_losses_rotation_invariant_and_nonnegative(seed):
    rng = np.random.default_rng(seed)
    R = torch.as_tensor(np.linalg.qr(rng.normal(size=(4, 4)))[0])
    a, p, c = unit(rng, 3, 4), unit(rng, 3, 4), unit(rng, 2, 4)
    q = NegativeQueue(8, dtype=torch.float64)
    q.push(unit(rng, 3, 4))
    qr = NegativeQueue(8, dtype=torch.float64)
    qr.push(q.entries @ R.T)
    g0 = global_contrastive_loss(a, p, c, q, 0.2).item()
    g1 = global_contrastive_loss(a @ R.T, p @ R.T, c @ R.T, qr, 0.2).item()
    assert g0 >= 0 and abs(g0 - g1) < 1e-9
    la, lp = unit(rng, 2, 2, 4), unit(rng, 2, 2, 4)
    l0 = local_contrastive_loss(la, lp, 0.2).item()
    l1 = local_contrastive_loss(la @ R.T, lp @ R.T, 0.2).item()
    assert l0 >= 0 and abs(l0 - l1) < 1e-9


def _fd_wrt(fn, x, eps=1e-6):
    x = x.detach().clone().requires_grad_(True)
    g = torch.autograd.grad(fn(x), x)[0]
    errs = []
    with torch.no_grad():
        for i in range(x.numel()):
            orig = x.view(-1)[i].item()
            x.view(-1)[i] = orig + eps
            up = fn(x).item()
            x.view(-1)[i] = orig - eps
            down = fn(x).item()
            x.view(-1)[i] = orig
            errs.append(rel_err((up - down) / (2 * eps), g.view(-1)[i].item()))
    return max(errs)


def test_global_gradient_matches_fd():
    rng = np.random.default_rng(8)
    a, p, c = unit(rng, 3, 3), unit(rng, 3, 3), unit(rng, 2, 3)
    q = NegativeQueue(8, dtype=torch.float64)
    q.push(unit(rng, 3, 3))
    assert _fd_wrt(lambda x: global_contrastive_loss(x, p, c, q, 0.5), a) < 1e-4


def test_local_gradient_matches_fd():
    rng = np.random.default_rng(9)
    a, p = unit(rng, 2, 2, 3), unit(rng, 2, 2, 3)
    # positive index is piecewise constant; the FD step never flips it here
    assert _fd_wrt(lambda x: local_contrastive_loss(x, p, 0.5), a) < 1e-4
    assert _fd_wrt(lambda x: local_contrastive_loss(a, x, 0.5), p) < 1e-4


# --- combined ------------------------------------------------------------------

def _batch(rng, N=2, S=2, K=3, d=4, tau=0.1):
    return ContrastiveBatch(*(unit(rng, N, S, S, K) for _ in range(4)), *(unit(rng, N, d) for _ in range(4)), tau)


def test_glcl_mixing():
    rng = np.random.default_rng(10)
    b = _batch(rng)
    gl, lo = global_loss(b).item(), local_loss(b).item()
    assert abs(glcl_loss(b, None, 1.0).item() - gl) < 1e-12
    assert abs(glcl_loss(b, None, 0.0).item() - lo) < 1e-12
    assert abs(glcl_loss(b, None, 0.5).item() - 0.5 * (gl + lo)) < 1e-12
    with pytest.raises(ValueError):
        glcl_loss(b, None, 1.5)


def test_glcl_pairs_views_by_domain():
    rng = np.random.default_rng(11)
    b = _batch(rng)
    src = global_contrastive_loss(b.global_s, b.global_s2t, b.global_t2s, None, b.tau)
    tgt = global_contrastive_loss(b.global_t, b.global_t2s, b.global_s2t, None, b.tau)
    assert abs(global_loss(b).item() - 0.5 * (src + tgt).item()) < 1e-12
    ls = local_contrastive_loss(b.local_s, b.local_t2s, b.tau)
    lt = local_contrastive_loss(b.local_t, b.local_s2t, b.tau)
    assert abs(local_loss(b).item() - 0.5 * (ls + lt).item()) < 1e-12


def test_glcl_pushes_after_computing():
    rng = np.random.default_rng(12)
    b = _batch(rng)
    q = NegativeQueue(16, dtype=torch.float64)
    q.push(unit(rng, 2, 4))
    expected = glcl_loss(b, NegativeQueue.from_state(q.state()), 0.5).item()
    teacher = unit(rng, 3, 4)
    got = glcl_loss(b, q, 0.5, teacher_vectors=teacher).item()
    assert got == expected
    assert len(q) == 5 and torch.equal(q.entries[-3:], teacher)
