import math

import numpy as np
import pytest

from omniscene import ContractViolation
from omniscene.geometry import bilinear_sample, project, unproject
from omniscene.instance_init import (PPH_WIDTH, PRIOR_SIZES, QuerySet, aggregate_views,
                                     fuse_query, pph_forward, propose, sample_multiview, threshold)
from omniscene.numeric import Adam, Mlp, Tensor, backward, finite_difference_grad, tabs, tmean, tsum
from omniscene.simulator import RigConfig, SCENE_HALF, SCENE_HALF_Z


@pytest.fixture
def rig():
    cfg = RigConfig()
    return cfg, cfg.cameras()


def _maps(cfg, rng):
    return [rng.normal(size=(cfg.channels, cfg.height, cfg.width)) for _ in range(cfg.n_views)]


def test_sample_at_pixel_center_equals_pixel(rig):
    cfg, cams = rig
    fmaps = _maps(cfg, np.random.default_rng(0))
    cam = cams[0]
    point = unproject(cam, 70.0, 20.0, 15.0)
    u, v, _, _ = project(cam, point)
    assert u == pytest.approx(70.0, abs=1e-9) and v == pytest.approx(20.0, abs=1e-9)
    samples, mask = sample_multiview(Tensor(point[None]), cams[:1], fmaps[:1])
    np.testing.assert_allclose(samples.data[0, 0], fmaps[0][:, int(round(v)), int(round(u))], atol=1e-12)
    assert mask.tolist() == [[True]]


def test_query_behind_every_camera(rig):
    cfg, cams = rig
    samples, mask = sample_multiview(Tensor([[-40.0, 0.0, 1.0]]), cams, _maps(cfg, np.random.default_rng(1)))
    assert not mask.any()
    np.testing.assert_array_equal(samples.data, 0.0)


def test_multiview_rows_match_independent_samples(rig):
    cfg, cams = rig
    fmaps = _maps(cfg, np.random.default_rng(2))
    pts = np.array([[20.0, 2.0, 0.5], [18.0, 9.0, 0.0], [6.0, -12.0, 1.0]])
    samples, mask = sample_multiview(Tensor(pts), cams, fmaps)
    assert mask.sum() >= 4
    for i, p in enumerate(pts):
        for m, (cam, fmap) in enumerate(zip(cams, fmaps)):
            u, v, _, visible = project(cam, p)
            expected = bilinear_sample(fmap, u, v) if visible else np.zeros(cfg.channels)
            assert mask[i, m] == visible
            np.testing.assert_allclose(samples.data[i, m], expected, atol=1e-12)


def test_sample_multiview_errors(rig):
    cfg, cams = rig
    with pytest.raises(ContractViolation):
        sample_multiview(Tensor(np.zeros((1, 3))), [], [])
    maps = [np.zeros((4, cfg.height, cfg.width)), np.zeros((5, cfg.height, cfg.width))]
    with pytest.raises(ContractViolation):
        sample_multiview(Tensor(np.zeros((1, 3))), cams[:2], maps)


def test_aggregate_examples():
    a, b, c = np.array([1.0, 2.0]), np.array([3.0, -4.0]), np.array([100.0, 100.0])
    samples = Tensor(np.array([[a, b, c], [a, b, c], [a, b, c], [a, b, c]]))
    mask = np.array([[True, False, False], [True, True, False], [True, False, True], [False, False, False]])
    out = aggregate_views(samples, mask).data
    np.testing.assert_allclose(out[0], a)
    np.testing.assert_allclose(out[1], (a + b) / 2)
    np.testing.assert_allclose(out[2], (a + c) / 2)
    np.testing.assert_array_equal(out[3], 0.0)


def test_aggregate_is_view_permutation_invariant():
    rng = np.random.default_rng(3)
    samples = rng.normal(size=(5, 4, 3))
    mask = rng.random((5, 4)) > 0.4
    perm = rng.permutation(4)
    np.testing.assert_allclose(aggregate_views(Tensor(samples), mask).data,
                               aggregate_views(Tensor(samples[:, perm]), mask[:, perm]).data, atol=1e-14)


def test_fuse_query_examples():
    np.testing.assert_array_equal(fuse_query(Tensor([[1.0, 2.0]]), Tensor([[3.0]])).data, [[1.0, 2.0, 3.0]])
    np.testing.assert_array_equal(fuse_query(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4)))).data,
                                  np.zeros((2, 7)))
    with pytest.raises(ContractViolation):
        fuse_query(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 4))))


def test_fuse_query_gradient_reaches_both_halves():
    rng = np.random.default_rng(4)
    w = rng.normal(size=5)
    f0, q0 = rng.normal(size=(2, 3)), rng.normal(size=(2, 2))

    def loss(f, q):
        return tsum(fuse_query(f, q) * w)

    f, q = Tensor(f0, requires_grad=True), Tensor(q0, requires_grad=True)
    backward(loss(f, q))
    np.testing.assert_allclose(f.grad, finite_difference_grad(lambda t: loss(t, Tensor(q0)), Tensor(f0)).data,
                               atol=1e-8)
    np.testing.assert_allclose(q.grad, finite_difference_grad(lambda t: loss(Tensor(f0), t), Tensor(q0)).data,
                               atol=1e-8)
    assert np.all(f.grad != 0) and np.all(q.grad != 0)


def test_zero_head_proposals():
    pos = np.array([[1.0, 2.0, 0.5], [-3.0, 4.0, 0.0]])
    props = propose(Mlp.zeros([6, 4, PPH_WIDTH]), Tensor(np.ones((2, 6))), pos)
    for (score, box), p in zip(props, pos):
        assert score == 0.5
        assert box.center == tuple(p)
        np.testing.assert_allclose(box.size, PRIOR_SIZES[0])


def test_hand_set_head():
    net = Mlp.zeros([1, PPH_WIDTH], activation="identity")
    net.biases[0].data[0] = math.log(3)
    net.biases[0].data[8:] = [0.0, 5.0, 0.0]
    net.biases[0].data[4] = math.log(2)
    (score, box), = propose(net, Tensor([[0.0]]), np.zeros((1, 3)))
    assert score == pytest.approx(0.75, abs=1e-15)
    assert box.cls == 1
    np.testing.assert_allclose(box.size, [2 * PRIOR_SIZES[1][0], *PRIOR_SIZES[1][1:]])


def test_head_width_mismatch():
    with pytest.raises(ContractViolation):
        propose(Mlp.zeros([2, PPH_WIDTH - 1]), Tensor(np.zeros((1, 2))), np.zeros((1, 3)))


def _proposals(scores):
    from omniscene.geometry import Box3D
    return [(s, Box3D((float(i), 0.0, 0.0), (1.0, 1.0, 1.0), 0.0, 0, s)) for i, s in enumerate(scores)]


def test_threshold_examples():
    assert len(threshold(_proposals([0.2, 0.9]), 0.5)) == 1
    assert len(threshold(_proposals([0.1, 0.2, 0.9]), 0.0)) == 3
    assert threshold(_proposals([0.5, 0.6]), 0.5)[0].box.center[0] == 1.0
    kept = threshold(_proposals([0.9, 0.1, 0.8]), 0.3)
    assert [k.box.center[0] for k in kept] == [0.0, 2.0] and all(k.history == [] for k in kept)
    with pytest.raises(ContractViolation):
        threshold([], 1.5)


def test_threshold_count_nonincreasing_in_tau():
    props = _proposals(list(np.random.default_rng(5).random(40)))
    counts = [len(threshold(props, t)) for t in np.linspace(0, 1, 51)]
    assert all(a >= b for a, b in zip(counts, counts[1:]))


def test_history_is_bounded():
    inst = threshold(_proposals([0.9]), 0.5, horizon=2)[0]
    for k in range(5):
        inst.push(Tensor([float(k)]))
    assert [h.item() for h in inst.history] == [3.0, 4.0]


def test_grid_queries_fill_the_volume():
    q = QuerySet.grid(32, 8, np.random.default_rng(6))
    assert len(q) == 32 and q.embeddings.shape == (32, 8)
    assert np.all(np.abs(q.positions.data[:, :2]) < SCENE_HALF)
    assert np.all(np.abs(q.positions.data[:, 2]) < SCENE_HALF_Z)
    assert len({tuple(p) for p in q.positions.data}) == 32


def test_landmark_training_converges():
    """Train embeddings, positions and the head until the query nearest to a
    single landmark proposes a center within 0.5 m of it."""
    rng = np.random.default_rng(7)
    cfg = RigConfig()
    cams = cfg.cameras()
    landmark = np.array([14.0, 3.0, 0.5])
    vv, uu = np.mgrid[0:cfg.height, 0:cfg.width]
    fmaps = []
    for cam in cams:
        fmap = np.zeros((cfg.channels, cfg.height, cfg.width))
        u, v, _, visible = project(cam, landmark)
        if visible:
            fmap[:] = np.exp(-((uu - u) ** 2 + (vv - v) ** 2) / 50.0)[None] * rng.normal(size=(cfg.channels, 1, 1))
        fmaps.append(fmap)
    queries = QuerySet.grid(32, 8, rng)
    head = Mlp.init([cfg.channels + 8, 16, PPH_WIDTH], rng)
    nearest = int(np.argmin(np.linalg.norm(queries.positions.data - landmark, axis=1)))
    opt = Adam([queries.embeddings, queries.positions, *head.parameters()], lr=0.05)

    def centers():
        samples, mask = sample_multiview(queries.positions, cams, fmaps)
        F = fuse_query(aggregate_views(samples, mask), queries.embeddings)
        return pph_forward(head, F, queries.positions).center

    for _ in range(300):
        opt.zero_grad()
        backward(tmean(tabs(centers()[nearest] - landmark)))
        opt.step()
        queries.clamp_to_volume()
    assert np.linalg.norm(centers().data[nearest] - landmark) < 0.5
