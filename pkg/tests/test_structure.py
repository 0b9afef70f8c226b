import itertools

import numpy as np
import pytest

from hvmflow.errors import EmptyInputError, EmptyMaskError
from hvmflow.structure import (
    EPS_WEIGHT, DistanceParams, Event2DPoints, cluster_neighbors, coverage, fill_boundary,
    fuse_depth, fuse_depth_detailed, joint_distance, pseudo_label_loss,
)
from hvmflow.types import CameraIntrinsics, ProjectedPoints


def random_instance(rng, n_e=None, n_l=None, w=40, h=30):
    n_e = int(rng.integers(5, 80)) if n_e is None else n_e
    n_l = int(rng.integers(3, 40)) if n_l is None else n_l
    P_e = Event2DPoints(rng.integers(0, w, n_e).astype(float),
                        rng.integers(0, h, n_e).astype(float),
                        rng.choice([-1.0, 1.0], n_e))
    P_l = ProjectedPoints(rng.uniform(0, w, n_l), rng.uniform(0, h, n_l),
                          rng.uniform(2, 10, n_l), np.arange(n_l))
    return P_e, P_l


def two_blob_instance(rng, n_each=(4, 3), sep=14.0):
    """Events/LiDAR in two blobs with distinct polarity and depth."""
    ne, nl = n_each
    eu, ev, ep, lu, lv, ld = [], [], [], [], [], []
    for cx, pol, depth in ((3.0, 1.0, 3.0), (3.0 + sep, -1.0, 9.0)):
        eu += list(cx + rng.uniform(-1, 1, ne))
        ev += list(5 + rng.uniform(-1, 1, ne))
        ep += [pol] * ne
        lu += list(cx + rng.uniform(-1, 1, nl))
        lv += list(5 + rng.uniform(-1, 1, nl))
        ld += list(depth + rng.uniform(-0.3, 0.3, nl))
    P_e = Event2DPoints(np.array(eu), np.array(ev), np.array(ep))
    P_l = ProjectedPoints(np.array(lu), np.array(lv), np.array(ld), np.arange(len(lu)))
    return P_e, P_l


def exhaustive_two_means(P_e, P_l, n_s, d_scale):
    """Best 2-partition under the joint squared distance, by enumeration."""
    pos = np.concatenate([np.stack([P_e.u, P_e.v], 1), np.stack([P_l.u, P_l.v], 1)])
    val = np.concatenate([P_e.p, P_l.d / d_scale])
    is_ev = np.arange(len(val)) < len(P_e)
    n = len(val)
    # every labelling with point 0 in part 0
    labs = np.array(list(itertools.product((0, 1), repeat=n - 1)), dtype=int)
    labs = np.concatenate([np.zeros((labs.shape[0], 1), int), labs], axis=1)

    def sse(member, x):
        # sum of squared deviations from the member mean, per labelling
        cnt = member.sum(axis=1)
        s1 = member @ x
        s2 = member @ (x * x)
        return np.where(cnt > 0, s2 - s1 ** 2 / np.maximum(cnt, 1), 0.0)

    obj = np.zeros(labs.shape[0])
    for c in (0, 1):
        m = (labs == c).astype(float)
        obj += (sse(m, pos[:, 0]) + sse(m, pos[:, 1])) / n_s ** 2
        obj += sse(m * is_ev, val) + sse(m * ~is_ev, val)
    obj[labs.min(axis=1) == 1] = np.inf
    obj[labs.max(axis=1) == 0] = np.inf
    best = int(np.argmin(obj))
    return obj[best], labs[best]


def same_partition(a, b):
    return np.array_equal(a, b) or np.array_equal(a, 1 - b)


def test_joint_distance_by_hand():
    p = DistanceParams(n_s=2.0)
    assert joint_distance((0, 0, 1), (0, 0, -1), p) == pytest.approx(2.0)
    assert joint_distance((0, 0, 1), (4, 0, 1), p) == pytest.approx(2.0)
    assert joint_distance((0, 0, None), (3, 4, 0.5), p) == pytest.approx(2.5)
    assert joint_distance((1, 2, 0.3), (1, 2, 0.3), p) == 0.0


@pytest.mark.parametrize("seed", range(10))
def test_objective_never_increases(seed):
    rng = np.random.default_rng(seed)
    P_e, P_l = random_instance(rng)
    cm = cluster_neighbors(P_e, P_l, int(rng.integers(2, 12)), iters=10, seed=seed,
                           image_size=(40, 30))
    assert np.all(np.diff(cm.history) <= 1e-12)
    assert len(cm.history) <= 10
    assert cm.event_labels.max() < cm.n_clusters


@pytest.mark.parametrize("seed", range(8))
def test_two_blobs_match_exhaustive_oracle(seed):
    rng = np.random.default_rng(100 + seed)
    P_e, P_l = two_blob_instance(rng)
    params = DistanceParams(n_s=4.0)
    cm = cluster_neighbors(P_e, P_l, 2, iters=10, params=params, seed=seed,
                           image_size=(20, 10))
    labels = np.concatenate([cm.event_labels, cm.lidar_labels])
    obj, oracle = exhaustive_two_means(P_e, P_l, params.n_s, cm.depth_scale)
    assert same_partition(labels, oracle)
    assert cm.objective == pytest.approx(obj, rel=1e-12)


def test_too_many_clusters_reduced():
    rng = np.random.default_rng(3)
    P_e, P_l = random_instance(rng, 3, 2)
    cm = cluster_neighbors(P_e, P_l, 50)
    assert cm.k_reduced
    assert cm.n_clusters <= 5


def test_cluster_needs_points():
    empty = Event2DPoints(np.zeros(0), np.zeros(0), np.zeros(0))
    with pytest.raises(EmptyInputError):
        cluster_neighbors(empty, ProjectedPoints.empty(), 4)


def test_fill_boundary_keeps_lidar_and_adds_unique_events():
    rng = np.random.default_rng(5)
    P_e, P_l = random_instance(rng, 60, 10)
    cm = cluster_neighbors(P_e, P_l, 6, image_size=(40, 30))
    dens = fill_boundary(P_l, P_e, cm, k=3)
    assert np.array_equal(dens.u[:10], P_l.u)
    added = dens.added
    assert len(set(added.tolist())) == added.size
    # each added event shares a cluster with some LiDAR entry
    assert set(cm.event_labels[added]) <= set(cm.lidar_labels)
    assert added.size <= 3 * len(P_l)


def _idw_oracle(P_e, P_l, cm, k, i):
    same = np.flatnonzero(cm.lidar_labels == cm.event_labels[i])
    if same.size == 0:
        return 0.0, None
    d = [np.hypot(P_e.u[i] - P_l.u[j], P_e.v[i] - P_l.v[j]) / 16.0 for j in same]
    order = sorted(range(len(same)), key=lambda q: (d[q], q))[:k]
    w = [1.0 / (d[q] + EPS_WEIGHT) for q in order]
    vals = [P_l.d[same[q]] for q in order]
    return sum(a * b for a, b in zip(w, vals)) / sum(w), vals


def test_fuse_depth_matches_scalar_oracle():
    rng = np.random.default_rng(9)
    P_e, P_l = random_instance(rng, 40, 15)
    K = CameraIntrinsics(20.0, 20.0, 15.0, 40, 30)
    cm = cluster_neighbors(P_e, P_l, 5, image_size=(40, 30))
    res = fuse_depth_detailed(P_l, P_e, cm, 3, K)
    for i in range(len(P_e)):
        want, vals = _idw_oracle(P_e, P_l, cm, 3, i)
        assert res.event_depth[i] == pytest.approx(want, rel=1e-12)
        if vals:
            assert min(vals) <= res.event_depth[i] <= max(vals)
    img = fuse_depth(P_l, P_e, cm, 3, K).data
    assert img.shape == (30, 40) and img.min() >= 0


def test_pseudo_label_loss():
    pse = np.array([[1.0, 0.0], [2.0, 4.0]])
    pred = np.array([[1.5, 9.0], [2.0, 3.0]])
    loss = pseudo_label_loss(pred, pse, pse, pse)
    assert loss.value == pytest.approx(0.5)
    assert loss.grads["d_pred_t"][0, 1] == 0.0
    with pytest.raises(EmptyMaskError):
        pseudo_label_loss(pred, np.zeros((2, 2)), pred, pse)


def test_coverage():
    depth = np.array([[0.0, 1.0], [2.0, 0.0]])
    region = np.array([[True, True], [False, False]])
    assert coverage(depth, region) == 0.5
    assert coverage(depth, np.zeros((2, 2), bool)) == 0.0
