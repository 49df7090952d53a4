import math

import numpy as np
import pytest

from omniscene import ContractViolation
from omniscene.fusion import (AttentionParams, DeformableParams, TextFusionParams, batched_depth_alignment,
                              deformable_aggregate, depth_alignment_loss, depth_targets, fuse_vision,
                              refine_depth, spatial_self_attention, temporal_cross_attention,
                              text_conditional_aggregate)
from omniscene.geometry import Camera, unproject
from omniscene.numeric import Mlp, Tensor, backward, finite_difference_grad, tsum

from _toy import attention_sums


def _attn(d, rng=None, **mats):
    rng = rng or np.random.default_rng(0)
    names = ("W_Q", "W_K", "W_V", "U_Q", "U_K", "U_V")
    return AttentionParams(*(Tensor(mats.get(n, rng.normal(size=(d, d))), requires_grad=True) for n in names))


# temporal --------------------------------------------------------------------

def test_temporal_current_only():
    rng = np.random.default_rng(1)
    p = _attn(3, rng)
    H = rng.normal(size=(2, 1, 3))
    np.testing.assert_allclose(temporal_cross_attention(Tensor(H), p).data, H[:, 0] @ p.W_V.data.T, atol=1e-14)


def test_temporal_identical_steps_uniform():
    rng = np.random.default_rng(2)
    p = _attn(4, rng)
    f = rng.normal(size=4)
    out, alpha = temporal_cross_attention(Tensor(np.tile(f, (1, 4, 1))), p, return_weights=True)
    np.testing.assert_allclose(alpha.data, 0.25, atol=1e-15)
    np.testing.assert_allclose(out.data[0], p.W_V.data @ f, atol=1e-14)


def test_temporal_hand_example():
    # W_Q = W_K = W_V = I, d = 2; history [F_t, F_{t-1}] = [[1, 0], [0, 1]]
    # scores: [1, 0] / sqrt(2); weights = softmax; output = weighted rows
    eye = np.eye(2)
    p = _attn(2, W_Q=eye, W_K=eye, W_V=eye)
    out = temporal_cross_attention(Tensor([[[1.0, 0.0], [0.0, 1.0]]]), p).data[0]
    a = math.exp(1 / math.sqrt(2))
    np.testing.assert_allclose(out, [a / (a + 1), 1 / (a + 1)], atol=1e-15)


def test_temporal_masked_padding_is_invariant():
    rng = np.random.default_rng(3)
    p = _attn(4, rng)
    H = rng.normal(size=(3, 2, 4))
    padded = np.concatenate([H, rng.normal(size=(3, 2, 4)) * 50], axis=1)
    mask = np.array([[True, True, False, False]] * 3)
    np.testing.assert_allclose(temporal_cross_attention(Tensor(padded), p, mask).data,
                               temporal_cross_attention(Tensor(H), p).data, atol=1e-13)


def test_temporal_errors():
    p = _attn(2)
    with pytest.raises(ContractViolation):
        temporal_cross_attention(Tensor(np.zeros((1, 0, 2))), p)
    with pytest.raises(ContractViolation):
        temporal_cross_attention(Tensor(np.zeros((1, 2, 2))), p, np.array([[False, True]]))


# spatial ---------------------------------------------------------------------

def test_spatial_single_instance():
    rng = np.random.default_rng(4)
    p = _attn(3, rng)
    x = rng.normal(size=(1, 3))
    np.testing.assert_allclose(spatial_self_attention(Tensor(x), p).data, x @ p.U_V.data.T, atol=1e-14)


def test_spatial_identical_instances():
    rng = np.random.default_rng(5)
    p = _attn(3, rng)
    x = np.tile(rng.normal(size=3), (2, 1))
    out, beta = spatial_self_attention(Tensor(x), p, return_weights=True)
    np.testing.assert_allclose(beta.data, 0.5, atol=1e-15)
    np.testing.assert_allclose(out.data, x @ p.U_V.data.T, atol=1e-14)


def test_spatial_permutation_equivariance():
    rng = np.random.default_rng(6)
    p = _attn(4, rng)
    x = rng.normal(size=(5, 4))
    perm = rng.permutation(5)
    np.testing.assert_allclose(spatial_self_attention(Tensor(x[perm]), p).data,
                               spatial_self_attention(Tensor(x), p).data[perm], atol=1e-13)


# deformable ------------------------------------------------------------------

def _cam():
    return Camera.mounted(0.0, (0.0, 0.0, 1.5), 50.0, 50.0, 20.0, 15.0, 40, 30)


def _deform(d, C, M, K, rng, w_alpha=None):
    offsets = Mlp.zeros([d, 4, M * K * 2])
    return DeformableParams(offsets, Tensor(rng.normal(size=(d, C)), requires_grad=True),
                            Tensor(w_alpha if w_alpha is not None else rng.normal(size=C), requires_grad=True),
                            M, K)


def test_deformable_single_sample():
    rng = np.random.default_rng(7)
    cam = _cam()
    fmap = rng.normal(size=(3, 30, 40))
    pos = unproject(cam, 12.0, 9.0, 10.0)[None]
    params = _deform(4, 3, 1, 1, rng)
    out, alpha = deformable_aggregate(Tensor(rng.normal(size=(1, 4))), pos, [cam], [fmap], params,
                                      return_weights=True)
    assert alpha.data.tolist() == [[1.0]]
    np.testing.assert_allclose(out.data[0], params.W_v.data @ fmap[:, 9, 12], atol=1e-12)


def test_deformable_identical_samples_uniform():
    rng = np.random.default_rng(8)
    cams = [_cam(), _cam()]
    z = rng.normal(size=3)
    fmaps = [np.broadcast_to(z[:, None, None], (3, 30, 40)).copy() for _ in cams]
    params = _deform(4, 3, 2, 3, rng)
    params.offsets.biases[-1].data[:] = rng.uniform(-2, 2, 12)
    out, alpha = deformable_aggregate(Tensor(rng.normal(size=(1, 4))), unproject(cams[0], 20, 15, 8)[None],
                                      cams, fmaps, params, return_weights=True)
    np.testing.assert_allclose(alpha.data, 1 / 6, atol=1e-15)
    np.testing.assert_allclose(out.data[0], params.W_v.data @ z, atol=1e-12)


def test_deformable_hand_weights():
    # M = 2, K = 2 with offsets pointing at four known pixels
    rng = np.random.default_rng(9)
    cams = [_cam(), _cam()]
    fmaps = [rng.normal(size=(2, 30, 40)) for _ in cams]
    w_alpha = np.array([1.0, -0.5])
    params = _deform(3, 2, 2, 2, rng, w_alpha)
    # projection lands on (20, 15); offsets (+1, 0), (0, +2) in view 0 and (-3, 0), (0, -1) in view 1
    params.offsets.biases[-1].data[:] = [1, 0, 0, 2, -3, 0, 0, -1]
    pos = unproject(cams[0], 20.0, 15.0, 10.0)[None]
    out = deformable_aggregate(Tensor(np.zeros((1, 3))), pos, cams, fmaps, params).data[0]
    z = np.array([fmaps[0][:, 15, 21], fmaps[0][:, 17, 20], fmaps[1][:, 15, 17], fmaps[1][:, 14, 20]])
    logits = z @ w_alpha
    a = np.exp(logits) / np.exp(logits).sum()
    np.testing.assert_allclose(out, params.W_v.data @ (a @ z), atol=1e-12)


def test_deformable_invisible_view_has_zero_logit():
    rng = np.random.default_rng(10)
    front, back = _cam(), Camera.mounted(math.pi, (0.0, 0.0, 1.5), 50.0, 50.0, 20.0, 15.0, 40, 30)
    fmaps = [rng.normal(size=(2, 30, 40)) + 3.0, rng.normal(size=(2, 30, 40))]
    params = _deform(3, 2, 2, 1, rng, np.array([1.0, 1.0]))
    pos = unproject(front, 20.0, 15.0, 10.0)[None]
    _, alpha = deformable_aggregate(Tensor(np.zeros((1, 3))), pos, [front, back], fmaps, params,
                                    return_weights=True)
    logit = fmaps[0][:, 15, 20].sum()
    np.testing.assert_allclose(alpha.data[0], [1 / (1 + math.exp(-logit)), 1 / (1 + math.exp(logit))], atol=1e-12)


def test_deformable_view_count_mismatch():
    rng = np.random.default_rng(11)
    with pytest.raises(ContractViolation):
        deformable_aggregate(Tensor(np.zeros((1, 3))), np.zeros((1, 3)), [_cam()], [np.zeros((2, 30, 40))] * 2,
                             _deform(3, 2, 2, 1, rng))


def test_attention_weights_sum_to_one():
    for seed in range(20):
        assert attention_sums(seed) <= 1e-9


# fuse_vision -----------------------------------------------------------------

def test_fuse_vision_examples():
    np.testing.assert_array_equal(fuse_vision(Tensor([1.0, 0.0]), Tensor([0.0, 2.0])).data, [1, 0, 0, 2])
    np.testing.assert_array_equal(fuse_vision(Tensor([[3.0, 4.0]]), Tensor(np.zeros((1, 2)))).data, [[3, 4, 0, 0]])
    with pytest.raises(ContractViolation):
        fuse_vision(Tensor([1.0]), Tensor([1.0, 2.0]))


def test_fuse_vision_gradient_reaches_both_halves():
    rng = np.random.default_rng(12)
    w = rng.normal(size=(2, 6))
    a0, b0 = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
    a, b = Tensor(a0, requires_grad=True), Tensor(b0, requires_grad=True)
    backward(tsum(fuse_vision(a, b) * w))
    fd_a = finite_difference_grad(lambda t: tsum(fuse_vision(t, Tensor(b0)) * w), Tensor(a0))
    fd_b = finite_difference_grad(lambda t: tsum(fuse_vision(Tensor(a0), t) * w), Tensor(b0))
    np.testing.assert_allclose(a.grad, fd_a.data, atol=1e-8)
    np.testing.assert_allclose(b.grad, fd_b.data, atol=1e-8)


# text fusion -----------------------------------------------------------------

def _text_params(W_f, W_t, w_gamma, b_gamma):
    return TextFusionParams(Tensor(W_f), Tensor(W_t), Tensor(w_gamma), Tensor(np.array(b_gamma)))


def test_text_gate_half():
    rng = np.random.default_rng(13)
    p = _text_params(rng.normal(size=(3, 4)), rng.normal(size=(3, 5)), np.zeros(6), 0.0)
    F, t = rng.normal(size=4), rng.normal(size=5)
    out, gate = text_conditional_aggregate(Tensor(F), Tensor(t), p, return_gate=True)
    assert gate.item() == 0.5
    np.testing.assert_allclose(out.data, p.W_f.data @ F + 0.5 * p.W_t.data @ t, atol=1e-14)


def test_text_suppressed_by_saturated_gate():
    rng = np.random.default_rng(14)
    p = _text_params(rng.normal(size=(3, 4)), rng.normal(size=(3, 5)), np.zeros(6), -40.0)
    F, t = rng.normal(size=(2, 4)), rng.normal(size=5)
    np.testing.assert_allclose(text_conditional_aggregate(Tensor(F), Tensor(t), p).data, F @ p.W_f.data.T,
                               atol=1e-15)


def test_text_hand_example():
    # f = W_f F = [1, 2]; t = W_t T = [3, 0]; gate = sigmoid(1*1 + 0*2 + 0*3 + 0*0 + ln 3 - 1) = 0.75
    p = _text_params(np.eye(2), np.array([[3.0], [0.0]]), np.array([1.0, 0.0, 0.0, 0.0]), math.log(3) - 1)
    out, gate = text_conditional_aggregate(Tensor([1.0, 2.0]), Tensor([1.0]), p, return_gate=True)
    assert gate.item() == pytest.approx(0.75, abs=1e-15)
    np.testing.assert_allclose(out.data, [1 + 0.75 * 3, 2.0], atol=1e-15)


def test_text_gate_in_open_interval():
    rng = np.random.default_rng(15)
    p = TextFusionParams.init(6, 4, rng)
    p.w_gamma.data[:] = rng.normal(0, 3, 12)
    _, gate = text_conditional_aggregate(Tensor(rng.normal(size=(50, 6))), Tensor(rng.normal(size=4)), p,
                                         return_gate=True)
    assert np.all((gate.data > 0) & (gate.data < 1))


def test_text_width_mismatch():
    p = TextFusionParams.init(4, 3, np.random.default_rng(16))
    with pytest.raises(ContractViolation):
        text_conditional_aggregate(Tensor(np.zeros(5)), Tensor(np.zeros(3)), p)
    with pytest.raises(ContractViolation):
        text_conditional_aggregate(Tensor(np.zeros(4)), Tensor(np.zeros(2)), p)


# depth -----------------------------------------------------------------------

def test_refine_depth_examples():
    F = Tensor(np.ones((2, 3)))
    np.testing.assert_array_equal(refine_depth(F, [5.0, 7.0], Mlp.zeros([3, 1])).data, [5.0, 7.0])
    plus_one = Mlp.zeros([3, 1])
    plus_one.biases[0].data[:] = 1.0
    np.testing.assert_array_equal(refine_depth(F, [5.0, 7.0], plus_one).data, [6.0, 8.0])
    back = Mlp.zeros([3, 1])
    back.biases[0].data[:] = -5.0
    assert refine_depth(Tensor(np.ones(3)), 5.0, back).item() == 0.1
    with pytest.raises(ContractViolation):
        refine_depth(F, [0.0, 1.0], plus_one)


def _depth_rig(values):
    cams, maps = [], []
    for yaw, value in values:
        cams.append(Camera.mounted(yaw, (0.0, 0.0, 0.0), 50.0, 50.0, 20.0, 15.0, 40, 30))
        maps.append(np.full((30, 40), value))
    return cams, maps


def test_depth_alignment_examples():
    cams, maps = _depth_rig([(0.0, 10.0), (0.2, 10.0)])
    p = np.array([10.0, 0.5, 0.0])
    assert depth_alignment_loss(Tensor(10.0), p, cams, maps).loss.item() == 0.0
    one = depth_alignment_loss(Tensor(12.0), p, cams[:1], maps[:1])
    assert (one.loss.item(), one.visible_views) == (2.0, 1)
    cams, maps = _depth_rig([(0.0, 9.0), (0.2, 13.0)])
    assert depth_alignment_loss(Tensor(10.0), p, cams, maps).loss.item() == pytest.approx(2.0)


def test_depth_alignment_skips_invisible_views():
    cams, maps = _depth_rig([(0.0, 9.0), (math.pi, 100.0)])
    res = depth_alignment_loss(Tensor(10.0), np.array([10.0, 0.0, 0.0]), cams, maps)
    assert res.visible_views == 1 and res.loss.item() == 1.0
    none = depth_alignment_loss(Tensor(10.0), np.array([-10.0, 0.0, 0.0]), cams[:1], maps[:1])
    assert none.visible_views == 0 and none.loss.item() == 0.0


def test_batched_depth_matches_per_instance():
    rng = np.random.default_rng(17)
    cams, _ = _depth_rig([(0.0, 0.0), (0.5, 0.0)])
    maps = [rng.uniform(5, 20, (30, 40)) for _ in cams]
    pts = np.array([[10.0, 0.5, 0.0], [8.0, 3.0, 0.5], [-5.0, 0.0, 0.0]])
    d = rng.uniform(5, 15, 3)
    per, counts = batched_depth_alignment(Tensor(d), pts, cams, maps)
    for i in range(3):
        single = depth_alignment_loss(Tensor(d[i]), pts[i], cams, maps)
        assert counts[i] == single.visible_views
        assert per.data[i] == pytest.approx(single.loss.item(), abs=1e-12)
    targets, tcounts = depth_targets(pts, cams, maps)
    assert tcounts.tolist() == counts.tolist()
    assert targets[2] == 0.0
