import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hvmflow.color import luma, rgb_to_yuv, yuv_to_rgb
from hvmflow.errors import DegenerateWeightsError, DomainError, EmptyMaskError, FormatError
from hvmflow.events import accumulate_intensity, slice_index, voxelize_events
from hvmflow.luminance import (
    adversarial_loss, blend_luminance, consistency_loss, fuse_luminance, fuse_rgb,
    spatiotemporal_residual, valid_mask,
)
from hvmflow.types import EventStream, FusionWeights, Image


def _random_events(rng, n=300, w=9, h=7):
    t = np.sort(rng.uniform(0, 1, n))
    return EventStream(rng.integers(0, w, n), rng.integers(0, h, n), t,
                       rng.choice([-1, 1], n), w, h)


def test_accumulate_by_hand():
    ev = EventStream([0, 0, 1], [0, 0, 1], [0.1, 0.2, 0.3], [1, 1, -1], 2, 2)
    out = accumulate_intensity(ev, 0.25).data
    assert out.tolist() == [[0.5, 0.0], [0.0, -0.25]]


def test_accumulate_window_is_closed():
    ev = EventStream([0, 0, 0], [0, 0, 0], [0.0, 0.5, 1.0], [1, 1, 1], 1, 1)
    assert accumulate_intensity(ev, 1.0, (0.0, 0.5)).data[0, 0] == 2.0


@pytest.mark.parametrize("T", [1, 3, 10])
@pytest.mark.parametrize("C", [0.1, 0.37, 1.0 / 32.0])
def test_slice_total_matches_full(rng, T, C):
    ev = _random_events(rng)
    vox = voxelize_events(ev, T, C)
    assert vox.slices.shape == (T, 7, 9)
    assert np.array_equal(vox.total(), accumulate_intensity(ev, C).data)


@pytest.mark.parametrize("C", [0.5, 1.0 / 32.0, 2.0 ** -10])
def test_float_slice_sum_exact_for_dyadic_threshold(rng, C):
    ev = _random_events(rng)
    vox = voxelize_events(ev, 10, C)
    assert np.array_equal(vox.slices.sum(axis=0), accumulate_intensity(ev, C).data)


def test_slice_edges_go_to_earlier_slice():
    k = slice_index(np.array([0.0, 0.25, 0.2500001, 1.0]), 0.0, 1.0, 4)
    assert k.tolist() == [0, 0, 1, 3]


def test_empty_stream_gives_zeros():
    ev = EventStream.empty(3, 2)
    assert not voxelize_events(ev, 4, 0.1).slices.any()


def test_bad_threshold():
    with pytest.raises(ValueError):
        accumulate_intensity(EventStream.empty(2, 2), 0.0)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=3, max_size=3))
def test_yuv_roundtrip(rgb):
    img = Image(np.array(rgb).reshape(1, 1, 3), "RGB")
    y, u, v = rgb_to_yuv(img)
    back = yuv_to_rgb(y.data, u.data, v.data)
    np.testing.assert_allclose(back.data, img.data, atol=1e-12)
    assert luma(img)[0, 0] == pytest.approx(y.data[0, 0], abs=1e-15)


def test_yuv_needs_rgb():
    with pytest.raises(FormatError):
        rgb_to_yuv(Image(np.zeros((2, 2)), "LUMA"))


def test_blend_weights():
    Y = np.full((2, 2), 0.4)
    X = np.full((2, 2), 0.8)
    assert np.allclose(blend_luminance(Y, X, FusionWeights(1, 1)), 0.6)
    assert np.array_equal(blend_luminance(Y, X, FusionWeights(0, 1)), Y)
    with pytest.raises(DegenerateWeightsError):
        blend_luminance(Y, X, FusionWeights(0, 0))


def test_fuse_clamps_and_counts():
    fused, n = fuse_luminance(np.array([[0.9, 0.1]]), np.array([[2.0, -2.0]]))
    assert n == 2
    assert fused.data.tolist() == [[1.0, 0.0]]


def test_fuse_rgb_without_events_is_identity(rng):
    img = Image(rng.uniform(0.1, 0.9, (4, 5, 3)), "RGB")
    y, _, _ = rgb_to_yuv(img)
    rgb, fused_y, n = fuse_rgb(img, y.data)
    assert n == 0
    np.testing.assert_allclose(rgb.data, img.data, atol=1e-12)
    np.testing.assert_allclose(fused_y.data, y.data, atol=1e-15)


def test_adversarial_values():
    loss = adversarial_loss([0.5], [0.5])
    assert loss.value == pytest.approx(2 * np.log(0.5))
    assert adversarial_loss([0.1, 0.2], [0.3]).value < 0
    with pytest.raises(DomainError):
        adversarial_loss([1.0], [0.5])
    with pytest.raises(DomainError):
        adversarial_loss([], [0.5])


def test_residual_zero_for_consistent_motion():
    # I ramps in x; a uniform flow u adds grad . U = u, cancelled by E = -u
    h, w, u = 6, 8, 0.5
    I = np.tile(np.arange(w, dtype=float) / w, (h, 1))
    E = np.full((h, w), -u / w)
    U = np.zeros((h, w, 2))
    U[..., 0] = u
    r, inside = spatiotemporal_residual(I, E, U)
    assert np.allclose(r[:, 1:-2][inside[:, 1:-2]], 0.0)


def test_consistency_loss_matches_direct(rng):
    h, w = 5, 6
    I, E = rng.uniform(size=(h, w)), rng.normal(size=(h, w))
    U = rng.uniform(-1, 1, (h, w, 2))
    V = (rng.uniform(size=(h, w)) < 0.6).astype(float)
    r, _ = spatiotemporal_residual(I, E, U)
    assert consistency_loss(I, E, U, V).value == pytest.approx(np.abs(r)[V > 0].mean())
    with pytest.raises(EmptyMaskError):
        consistency_loss(I, E, U, np.zeros((h, w)))


def test_valid_mask():
    ev = EventStream([1], [0], [0.5], [1], 3, 2)
    U = np.zeros((2, 3, 2))
    U[0, 1, 0] = 5.0
    assert not valid_mask(U, ev).any()
    U[0, 1, 0] = 1.0
    assert valid_mask(U, ev).tolist() == [[False, True, False], [False, False, False]]
