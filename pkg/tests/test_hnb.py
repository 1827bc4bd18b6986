"""Hybrid stage: conv-sum oracle, fusion algebra, degradation to the plain
transformer stack, gradient flow."""
import numpy as np
import numpy.testing as npt
import pytest

from hyneter import attention as A
from hyneter import hnb as H
from hyneter import tensor as T
from hyneter.tensor import Tensor

from grad_utils import check_grad
from oracles import conv2d_loops
from test_attention import rand_block


def rand_triple(rng, cin, cout=None, scale=0.3, record=None, prefix="t"):
    cout = cout if cout is not None else cin

    def reg(name, arr):
        if record is None:
            return Tensor(arr)
        return record.parameter(name, arr)

    return H.ConvTriple(
        w1=reg(f"{prefix}.k1", rng.standard_normal((cout, cin, 1, 1)) * scale),
        w3=reg(f"{prefix}.k3", rng.standard_normal((cout, cin, 3, 3)) * scale),
        w5=reg(f"{prefix}.k5", rng.standard_normal((cout, cin, 5, 5)) * scale))


def zero_triple(c):
    return H.ConvTriple(w1=Tensor(np.zeros((c, c, 1, 1))),
                        w3=Tensor(np.zeros((c, c, 3, 3))),
                        w5=Tensor(np.zeros((c, c, 5, 5))))


# ---------------------------------------------------------------------------
# multi-granularity conv


def test_zero_weights_give_zero_map():
    x = np.random.default_rng(0).standard_normal((1, 3, 6, 6))
    out = H.multi_granularity_conv(Tensor(x), zero_triple(3)).data
    npt.assert_array_equal(out, np.zeros((1, 3, 6, 6)))


def test_single_live_kernel_equals_that_conv_alone():
    rng = np.random.default_rng(1)
    c = 3
    w1 = rng.standard_normal((c, c, 1, 1))
    triple = H.ConvTriple(w1=Tensor(w1),
                          w3=Tensor(np.zeros((c, c, 3, 3))),
                          w5=Tensor(np.zeros((c, c, 5, 5))))
    x = rng.standard_normal((2, c, 5, 5))
    got = H.multi_granularity_conv(Tensor(x), triple).data
    alone = T.conv2d(Tensor(x), Tensor(w1)).data
    npt.assert_array_equal(got, alone)


def test_matches_three_conv_oracle_sum():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((1, 2, 4, 4))
    triple = rand_triple(rng, cin=2, cout=3)
    got = H.multi_granularity_conv(Tensor(x), triple).data
    want = (conv2d_loops(x, triple.w1.data, padding=0)
            + conv2d_loops(x, triple.w3.data, padding=1)
            + conv2d_loops(x, triple.w5.data, padding=2))
    npt.assert_allclose(got, want, atol=1e-12)
    assert got.shape == (1, 3, 4, 4)


def test_channel_mismatch_rejected():
    rng = np.random.default_rng(3)
    triple = rand_triple(rng, cin=4)
    with pytest.raises(ValueError):
        H.multi_granularity_conv(Tensor(np.ones((1, 3, 6, 6))), triple)


def test_triple_validates_kernel_sizes_and_channels():
    with pytest.raises(ValueError):
        H.ConvTriple(w1=Tensor(np.zeros((2, 2, 3, 3))),
                     w3=Tensor(np.zeros((2, 2, 3, 3))),
                     w5=Tensor(np.zeros((2, 2, 5, 5))))
    with pytest.raises(ValueError):
        H.ConvTriple(w1=Tensor(np.zeros((2, 2, 1, 1))),
                     w3=Tensor(np.zeros((3, 2, 3, 3))),
                     w5=Tensor(np.zeros((2, 2, 5, 5))))


def test_branch_stacks_with_gelu_between_layers():
    rng = np.random.default_rng(4)
    l1 = rand_triple(rng, cin=2)
    l2 = rand_triple(rng, cin=2)
    x = Tensor(rng.standard_normal((1, 2, 5, 5)))
    got = H.conv_branch(x, (l1, l2)).data
    mid = H.multi_granularity_conv(x, l1)
    want = H.multi_granularity_conv(T.gelu(mid), l2).data
    npt.assert_array_equal(got, want)


# ---------------------------------------------------------------------------
# fusion


def test_fuse_identity_x_with_all_ones_s1():
    # transformer branch as identity and S1 = 1: output is S + tanh(S)
    rng = np.random.default_rng(5)
    s = rng.standard_normal((1, 3, 4, 4))
    out = H.fuse(Tensor(s), Tensor(np.ones_like(s))).data
    npt.assert_allclose(out, s + np.tanh(s), atol=1e-15)


def test_fuse_output_within_tanh_bound():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((2, 3, 5, 5)) * 4
    s1 = rng.standard_normal((2, 3, 5, 5)) * 4
    out = H.fuse(Tensor(x), Tensor(s1)).data
    # one ulp of slack: the residual add rounds at magnitude |x| + 1
    assert (np.abs(out - x) <= 1.0 + 1e-12).all()


def test_stage_with_empty_transformer_branch_applies_pure_fusion():
    rng = np.random.default_rng(7)
    triple = rand_triple(rng, cin=3)
    p = H.HnbStageParams(conv_branch=(triple,), transformer_branch=())
    x = rng.standard_normal((1, 16, 3))
    tg = A.TokenGrid(Tensor(x), (4, 4))
    out = H.hnb_stage(tg, p).tokens.data
    x_map = A.re_view(tg)
    s1 = H.multi_granularity_conv(x_map, triple)
    want = A.flatten(H.fuse(x_map, s1)).tokens.data
    npt.assert_array_equal(out, want)


def test_zeroed_conv_branch_is_bit_identical_to_plain_blocks():
    rng = np.random.default_rng(8)
    blocks = (rand_block(rng, c=4, heads=2), rand_block(rng, c=4, heads=2))
    x = Tensor(rng.standard_normal((2, 16, 4)))
    tg = A.TokenGrid(x, (4, 4))

    with_zero = H.hnb_stage(
        tg, H.HnbStageParams(conv_branch=(zero_triple(4),),
                             transformer_branch=blocks)).tokens.data
    absent = H.hnb_stage(
        tg, H.HnbStageParams(conv_branch=None,
                             transformer_branch=blocks)).tokens.data
    plain = tg
    for bp in blocks:
        plain = A.transformer_block(plain, bp)
    npt.assert_array_equal(with_zero, plain.tokens.data)
    npt.assert_array_equal(absent, plain.tokens.data)


def test_stage_preserves_grid_and_shape():
    rng = np.random.default_rng(9)
    p = H.HnbStageParams(conv_branch=(rand_triple(rng, 4),),
                         transformer_branch=(rand_block(rng, 4, 2),))
    tg = A.TokenGrid(Tensor(rng.standard_normal((2, 25, 4))), (5, 5))
    out = H.hnb_stage(tg, p)
    assert out.grid == (5, 5) and out.tokens.shape == (2, 25, 4)


def test_every_conv_weight_receives_gradient():
    rng = np.random.default_rng(10)
    rec = T.DiffRecord()
    triple = rand_triple(rng, cin=4, record=rec, prefix="conv")
    block = rand_block(rng, c=4, heads=2, record=rec)
    p = H.HnbStageParams(conv_branch=(triple,), transformer_branch=(block,))
    x = rec.watch(rng.standard_normal((1, 16, 4)))
    out = H.hnb_stage(A.TokenGrid(x, (4, 4)), p)
    grads = rec.backward(T.mean(T.tanh(out.tokens)))
    for name in ("conv.k1", "conv.k3", "conv.k5"):
        assert np.abs(grads[name].data).max() > 1e-12, name
    # transformer branch weights keep getting gradients too
    assert np.abs(grads["wq"].data).max() > 1e-12


def test_grad_hnb_stage():
    def loss(x, k1, k3, k5, q, k, v, o, g1, s1, g2, s2, w1, b1, w2, b2):
        triple = H.ConvTriple(w1=k1, w3=k3, w5=k5)
        bp = A.BlockParams(
            ln1_gain=g1, ln1_shift=s1,
            attn=A.AttentionParams(wq=q, wk=k, wv=v, wo=o, heads=2,
                                   head_dim=2, delta=1.0),
            ln2_gain=g2, ln2_shift=s2,
            mlp_w1=w1, mlp_b1=b1, mlp_w2=w2, mlp_b2=b2)
        p = H.HnbStageParams(conv_branch=(triple,), transformer_branch=(bp,))
        return T.mean(T.tanh(H.hnb_stage(A.TokenGrid(x, (2, 2)), p).tokens))

    check_grad(
        loss,
        [(1, 4, 4), (4, 4, 1, 1), (4, 4, 3, 3), (4, 4, 5, 5)]
        + [(4, 4)] * 4 + [(4,)] * 4 + [(4, 8), (8,), (8, 4), (4,)],
        seed=50)
