import numpy as np
import pytest
import torch
import torch.nn as nn
import torch.nn.functional as F
from hypothesis import given, settings, strategies as st

from _fd import check_module, directional_fd
from fadpnet.lfeb import (
    ASSB,
    LFEB,
    NumericalInstabilityError,
    PositionalGate,
    PromptRouter,
    SelectiveStateSpace,
    SemanticPermutation,
    SqueezeExcitation,
    check_finite,
    discretize,
    gumbel_softmax,
    permute_rows,
    route_prompts,
    scan_reference,
    selective_scan,
    sgn_fold,
    sgn_unfold,
)


def _conv_loop(x, weight, bias, groups=1):
    """Dense loop convolution with zero padding, stride 1, float64."""
    n, cin, h, w = x.shape
    cout, cin_g, k, _ = weight.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    out = np.zeros((n, cout, h, w))
    per_group = cout // groups
    for o in range(cout):
        g = o // per_group
        for i in range(h):
            for j in range(w):
                patch = xp[:, g * cin_g:(g + 1) * cin_g, i:i + k, j:j + k]
                out[:, o, i, j] = (patch * weight[o]).sum((1, 2, 3)) + (0 if bias is None else bias[o])
    return out


# ---------------------------------------------------------------------------- gate

def test_gate_zero_preactivation_halves_input():
    gate = PositionalGate(4)
    for p in gate.parameters():
        nn.init.zeros_(p)
    x = torch.randn(2, 4, 5, 5)
    assert torch.allclose(gate(x), 0.5 * x)


def test_gate_of_zero_is_zero():
    assert torch.equal(PositionalGate(4)(torch.zeros(1, 4, 3, 3)), torch.zeros(1, 4, 3, 3))


def test_gate_matches_loop_oracle():
    torch.manual_seed(0)
    gate = PositionalGate(4).double()
    x = torch.randn(1, 4, 6, 6, dtype=torch.float64)
    xn = x.numpy()
    t = _conv_loop(xn, gate.pw.weight.detach().numpy(), gate.pw.bias.detach().numpy())
    t = _conv_loop(t, gate.dw.weight.detach().numpy(), gate.dw.bias.detach().numpy(), groups=4)
    want = xn / (1 + np.exp(-t))
    np.testing.assert_allclose(gate(x).detach().numpy(), want, atol=1e-12)


def test_gate_rejects_wrong_width():
    with pytest.raises(ValueError):
        PositionalGate(4)(torch.zeros(1, 3, 4, 4))


def test_gate_gradients():
    check_module(PositionalGate(4), torch.randn(1, 4, 5, 5))


# ---------------------------------------------------------------------------- routing

def test_hard_rows_are_one_hot():
    logits = F.log_softmax(torch.randn(2, 30, 8), -1)
    y = gumbel_softmax(logits, 0.7, hard=True, generator=torch.Generator().manual_seed(1))
    assert torch.equal(y.sum(-1), torch.ones(2, 30))
    assert torch.equal((y == 1).sum(-1), torch.ones(2, 30, dtype=torch.long))


def test_soft_rows_are_distributions():
    y = gumbel_softmax(torch.randn(3, 10, 5), 0.5, hard=False)
    assert (y >= 0).all()
    assert torch.allclose(y.sum(-1), torch.ones(3, 10), atol=1e-6)


def test_small_tau_without_noise_selects_argmax():
    logits = torch.randn(4, 9, 6)
    y = gumbel_softmax(logits, 1e-4, hard=False, noise=False)
    assert torch.equal(y.argmax(-1), logits.argmax(-1))
    assert torch.allclose(y.max(-1).values, torch.ones(4, 9), atol=1e-6)


def test_nonpositive_tau_rejected():
    with pytest.raises(ValueError):
        gumbel_softmax(torch.zeros(1, 3), 0.0)


def test_straight_through_gradient_is_soft_gradient():
    logits = torch.randn(5, 7, dtype=torch.float64, requires_grad=True)
    w = torch.randn(5, 7, dtype=torch.float64)
    gh = torch.autograd.grad((gumbel_softmax(logits, 0.8, True, generator=torch.Generator().manual_seed(3)) * w).sum(), logits)[0]
    gs = torch.autograd.grad((gumbel_softmax(logits, 0.8, False, generator=torch.Generator().manual_seed(3)) * w).sum(), logits)[0]
    assert torch.allclose(gh, gs, atol=1e-14)


def test_hand_set_pool_product():
    w_p = nn.Linear(2, 3, bias=False)
    with torch.no_grad():
        w_p.weight.copy_(torch.tensor([[0.0, 0.0], [5.0, 5.0], [0.0, 0.0]]))
    pool = torch.tensor([[1.0], [2.0], [0.0]]) @ torch.tensor([[1.0, -1.0]])
    p_m, p, _ = route_prompts(torch.ones(1, 1, 2), w_p, pool, noise=False)
    assert torch.equal(p_m[0, 0], torch.tensor([0.0, 1.0, 0.0]))
    assert torch.equal(p[0, 0], torch.tensor([2.0, -2.0]))


def test_router_rank_bound():
    with pytest.raises(ValueError):
        PromptRouter(8, num_prompts=6, rank=4, state_dim=16)


def test_router_shares_basis():
    basis = nn.Parameter(torch.randn(16, 4))
    a, b = PromptRouter(8, basis=basis), PromptRouter(8, basis=basis)
    assert a.m_a is b.m_a is basis


@pytest.mark.parametrize("variant", ["no_prompt_pool", "no_routing", "full_rank"])
def test_router_variants(variant):
    r = PromptRouter(8, variant=variant)
    p_m, p = r(torch.randn(2, 10, 8), noise=False)
    assert p.shape == (2, 10, 16)
    if variant == "no_prompt_pool":
        assert torch.equal(p, torch.zeros_like(p))
    if variant == "no_routing":
        assert torch.allclose(p, r.prompt_pool().mean(0).expand_as(p))


def test_route_gradients_soft():
    r = PromptRouter(6, num_prompts=8, rank=2, state_dim=4).double()
    tokens = torch.randn(1, 12, 6, dtype=torch.float64, requires_grad=True)
    err = directional_fd(lambda t: r(t, hard=False, noise=False)[1], [tokens], list(r.parameters()))
    assert err < 1e-4


# ---------------------------------------------------------------------------- SGN

def test_single_index_gives_identity():
    f2 = torch.randn(1, 3, 4, 5)
    p_m = torch.zeros(1, 20, 6)
    p_m[..., 2] = 1
    seq, perm = sgn_unfold(f2, p_m)
    assert torch.equal(perm.forward_index[0], torch.arange(20))
    assert torch.equal(seq, f2.flatten(2).transpose(1, 2))


def test_stable_sort_example():
    idx = torch.tensor([[1, 0, 1, 0]])
    p_m = F.one_hot(idx, 2).float()
    _, perm = sgn_unfold(torch.randn(1, 2, 2, 2), p_m)
    assert perm.forward_index.tolist() == [[1, 3, 0, 2]]


def test_unfold_rejects_row_mismatch():
    with pytest.raises(ValueError):
        sgn_unfold(torch.randn(1, 2, 3, 3), torch.zeros(1, 8, 4))


def test_fold_rejects_wrong_shape():
    f2 = torch.randn(1, 2, 3, 3)
    seq, perm = sgn_unfold(f2, torch.rand(1, 9, 4))
    with pytest.raises(ValueError):
        sgn_fold(seq, perm, (2, 4))


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 3), st.integers(1, 5), st.integers(1, 9), st.integers(1, 9),
       st.integers(1, 6), st.integers(0, 2 ** 31 - 1))
def test_fold_inverts_unfold(b, c, h, w, t, seed):
    gen = torch.Generator().manual_seed(seed)
    f2 = torch.randn(b, c, h, w, generator=gen)
    keys = torch.randint(0, t, (b, h * w), generator=gen)
    seq, perm = sgn_unfold(f2, F.one_hot(keys, t).float())
    assert torch.equal(sgn_fold(seq, perm, (h, w)), f2)
    # both index arrays are bijections and compose to the identity
    ident = torch.arange(h * w).expand(b, -1)
    assert torch.equal(torch.gather(perm.forward_index, 1, perm.inverse_index), ident)
    assert torch.equal(torch.sort(perm.forward_index, 1).values, ident)
    # keys come out sorted, ties in raster order
    k = torch.gather(keys, 1, perm.forward_index)
    assert (k[:, 1:] >= k[:, :-1]).all()
    tie = k[:, 1:] == k[:, :-1]
    assert (perm.forward_index[:, 1:] > perm.forward_index[:, :-1])[tie].all()


# ---------------------------------------------------------------------------- scan

def _random_scan_inputs(b=2, length=23, c=3, d=4, seed=0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(b, length, c, generator=g, dtype=dtype)
    delta = F.softplus(torch.randn(b, length, c, generator=g, dtype=dtype))
    a = -torch.rand(c, generator=g, dtype=dtype) * 3 - 0.1
    bm = torch.randn(b, length, d, generator=g, dtype=dtype)
    cm = torch.randn(b, length, d, generator=g, dtype=dtype)
    dsk = torch.randn(c, generator=g, dtype=dtype)
    p = torch.randn(b, length, d, generator=g, dtype=dtype)
    return x, delta, a, bm, cm, dsk, p


def test_hand_recurrence_scalar():
    # d = 1, one channel, length 4, transition and input maps fixed by hand
    x = torch.tensor([1.0, -2.0, 0.5, 3.0], dtype=torch.float64)
    a_bar = torch.tensor([0.5, 0.25, 0.8, 0.1], dtype=torch.float64)
    b_bar = torch.tensor([1.0, 2.0, 0.5, 1.0], dtype=torch.float64)
    c = torch.tensor([2.0, 1.0, -1.0, 0.5], dtype=torch.float64)
    h, want = 0.0, []
    for i in range(4):
        h = a_bar[i] * h + b_bar[i] * x[i]
        want.append(c[i] * h + 0.3 * x[i])
    got = scan_reference(x.view(1, 4, 1), a_bar.view(1, 4, 1), b_bar.view(1, 4, 1, 1),
                         c.view(1, 4, 1), torch.tensor([0.3], dtype=torch.float64))
    assert torch.allclose(got.view(4), torch.stack(want), atol=1e-15)


@pytest.mark.parametrize("chunk", [1, 5, 8, 37, 64])
@pytest.mark.parametrize("steep", [False, True])
def test_chunked_scan_matches_reference(chunk, steep):
    x, delta, a, bm, cm, dsk, p = _random_scan_inputs(length=41)
    if steep:
        # forces the segmented (unfactored) path inside a chunk
        a = a * 40
    a_bar, b_bar = discretize(delta, a, bm)
    want = scan_reference(x, a_bar, b_bar, cm, dsk, p)
    got = selective_scan(x, delta, a, bm, cm, dsk, p, chunk=chunk)
    assert torch.allclose(got, want, atol=1e-10, rtol=1e-10)


def test_zero_input_map_gives_skip_only():
    x, delta, a, bm, cm, dsk, p = _random_scan_inputs()
    y = selective_scan(x, delta, a, torch.zeros_like(bm), cm, dsk, p)
    assert torch.allclose(y, dsk * x, atol=1e-14)


def test_transition_is_stable():
    x, delta, a, bm, *_ = _random_scan_inputs()
    a_bar, _ = discretize(delta, a, bm)
    assert (a_bar < 1).all() and (a_bar > 0).all()


def test_pointwise_scan_commutes_with_permutation():
    # with a_bar = 0 every output depends on its own token only
    x, delta, a, bm, cm, dsk, p = _random_scan_inputs(b=1, length=12)
    a_bar, b_bar = torch.zeros_like(delta), delta[..., None] * bm[:, :, None, :]
    order = torch.randperm(12)
    y = scan_reference(x, a_bar, b_bar, cm, dsk, p)
    yp = scan_reference(x[:, order], a_bar[:, order], b_bar[:, order], cm[:, order], dsk, p[:, order])
    inv = torch.argsort(order)
    assert torch.allclose(yp[:, inv], y, atol=1e-14)


def test_nonfinite_scan_names_step():
    y = torch.zeros(1, 10, 2)
    y[0, 7, 1] = float("nan")
    with pytest.raises(NumericalInstabilityError, match="step 7"):
        check_finite(y)


def test_sse_gradients():
    sse = SelectiveStateSpace(3, state_dim=4, chunk=4)
    check_module(sse, torch.randn(1, 10, 3), torch.randn(1, 10, 4))


def test_sse_rejects_prompt_length():
    with pytest.raises(ValueError):
        SelectiveStateSpace(3, 4)(torch.randn(1, 5, 3), torch.randn(1, 6, 4))


# ---------------------------------------------------------------------------- blocks

def _soft(m):
    for sub in m.modules():
        if isinstance(sub, ASSB):
            sub.hard = False
    return m.eval()


def test_assb_gradients_soft_routing():
    check_module(_soft(ASSB(4, num_prompts=4, rank=2, state_dim=4, chunk=4)), torch.randn(1, 4, 4, 5))


def test_assb_eval_is_deterministic():
    m = ASSB(4, num_prompts=4, rank=2, state_dim=4).eval()
    x = torch.randn(2, 4, 6, 6)
    assert torch.equal(m(x), m(x))


def test_assb_training_noise_follows_generator():
    m = ASSB(4, num_prompts=4, rank=2, state_dim=4).train()
    x = torch.randn(1, 4, 6, 6)
    a = m(x, torch.Generator().manual_seed(5))
    b = m(x, torch.Generator().manual_seed(5))
    assert torch.equal(a, b)


@pytest.mark.parametrize("variant", ["no_prompt_pool", "no_routing", "no_reorder", "full_rank"])
def test_assb_variants_run(variant):
    y = ASSB(4, num_prompts=4, rank=2, state_dim=4, variant=variant)(torch.randn(1, 4, 4, 4))
    assert y.shape == (1, 4, 4, 4)


def _se_loop(x, fc1, fc2):
    s = x.mean(axis=(2, 3))
    hdn = s @ fc1.weight.detach().numpy().T + fc1.bias.detach().numpy()
    hdn = 0.5 * hdn * (1 + np.vectorize(__import__("math").erf)(hdn / np.sqrt(2)))
    z = hdn @ fc2.weight.detach().numpy().T + fc2.bias.detach().numpy()
    return x * (1 / (1 + np.exp(-z)))[:, :, None, None]


def test_seb_matches_loop_oracle():
    se = SqueezeExcitation(8, 4).double()
    x = torch.randn(2, 8, 5, 5, dtype=torch.float64)
    np.testing.assert_allclose(se(x).detach().numpy(), _se_loop(x.numpy(), se.fc1, se.fc2), atol=1e-12)


def test_seb_rejects_bad_reduction():
    with pytest.raises(ValueError):
        SqueezeExcitation(6, 4)
    with pytest.raises(ValueError):
        SqueezeExcitation(4, 4)


def test_seb_gradients():
    check_module(SqueezeExcitation(8, 4), torch.randn(2, 8, 4, 4))


def test_lfeb_gradients_soft_routing():
    check_module(_soft(LFEB(4, num_prompts=4, rank=2, state_dim=4, se_reduction=2, chunk=4)),
                 torch.randn(1, 4, 4, 4))


def test_lfeb_shape_and_width_check():
    m = LFEB(8, num_prompts=4, rank=2, state_dim=4)
    assert m(torch.randn(2, 8, 6, 6)).shape == (2, 8, 6, 6)
    with pytest.raises(ValueError):
        m(torch.randn(1, 4, 6, 6))


def test_lfeb_without_seb_has_no_second_scale():
    m = LFEB(8, num_prompts=4, rank=2, state_dim=4, use_seb=False)
    assert m.seb is None and m.s2 is None


def test_inverse_of_example_permutation():
    perm = SemanticPermutation.from_keys(torch.tensor([[1, 0, 1, 0]]))
    assert perm.inverse_index.tolist() == [[2, 0, 3, 1]]


def test_identity_permutation_fold_is_reshape():
    y = torch.randn(2, 12, 3)
    perm = SemanticPermutation.identity(2, 12)
    assert torch.equal(sgn_fold(y, perm, (3, 4)), y.transpose(1, 2).reshape(2, 3, 3, 4))


def test_assb_zero_projection_outputs_zero():
    m = ASSB(4, num_prompts=4, rank=2, state_dim=4)
    nn.init.zeros_(m.proj.weight)
    nn.init.zeros_(m.proj.bias)
    assert torch.equal(m(torch.randn(1, 4, 5, 5)), torch.zeros(1, 4, 5, 5))


def test_seb_zero_logits_halve_input():
    se = SqueezeExcitation(4, 2)
    nn.init.zeros_(se.fc2.weight)
    nn.init.zeros_(se.fc2.bias)
    x = torch.randn(1, 4, 3, 3)
    assert torch.allclose(se(x), 0.5 * x)
    assert torch.equal(se(torch.zeros(1, 4, 2, 2)), torch.zeros(1, 4, 2, 2))


def test_seb_hand_set_weights():
    se = SqueezeExcitation(4, 2).double()
    with torch.no_grad():
        se.fc1.weight.copy_(torch.tensor([[1.0, 0, 0, 0], [0, 1.0, 0, 0]]))
        se.fc1.bias.zero_()
        se.fc2.weight.copy_(torch.tensor([[1.0, 0], [0, 1.0], [1.0, 1.0], [-1.0, 0]]))
        se.fc2.bias.copy_(torch.tensor([0.0, 0.0, 0.0, 0.5]))
    x = torch.arange(16, dtype=torch.float64).view(1, 4, 2, 2) / 10
    np.testing.assert_allclose(se(x).detach().numpy(), _se_loop(x.numpy(), se.fc1, se.fc2), atol=1e-14)


def test_seb_output_bounded_by_input():
    x = torch.randn(3, 8, 5, 5)
    assert (SqueezeExcitation(8, 4)(x).abs() <= x.abs()).all()


def test_lfeb_zeroed_paths_are_identity():
    m = LFEB(8, num_prompts=4, rank=2, state_dim=4)
    with torch.no_grad():
        m.s1.zero_()
        m.s2.zero_()
        m.ffn.fc2.weight.zero_()
        m.ffn.fc2.bias.zero_()
    x = torch.randn(2, 8, 5, 7)
    assert torch.equal(m(x), x)


def test_lfeb_fusion_scale_gradients():
    m = _soft(LFEB(8, num_prompts=4, rank=2, state_dim=4, chunk=4)).double()
    x = torch.randn(1, 8, 4, 4, dtype=torch.float64)
    err = directional_fd(m, [x], [m.s1, m.s2])
    assert err < 1e-4


def test_assb_probe_gradients_all_parameters():
    check_module(_soft(ASSB(8, num_prompts=4, rank=2, state_dim=4, chunk=4)), torch.randn(1, 8, 4, 4))


def test_stability_sweep():
    sse = SelectiveStateSpace(6, 4)
    for scale in (0.01, 1.0, 100.0):
        delta, a, *_ = sse.params_for(torch.randn(2, 20, 6) * scale)
        a_bar = torch.exp(delta * a)
        assert (a_bar.abs() < 1).all() or (delta == 0).any()
