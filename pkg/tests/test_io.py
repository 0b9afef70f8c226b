import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hvmflow.errors import FormatError, ShapeError
from hvmflow.io import (
    FLOW_MAGIC, load_events, load_flow, load_image, load_points, save_events, save_flow,
    save_image, save_points,
)
from hvmflow.types import CameraIntrinsics, EventStream, FlowField2D, Image, PointCloud


def test_flow_roundtrip_bit_exact(tmp_path, rng):
    flow = rng.normal(0, 3, (7, 9, 2)).astype(np.float32).astype(np.float64)
    mask = rng.uniform(size=(7, 9)) < 0.8
    path = tmp_path / "f.vmfl"
    save_flow(path, FlowField2D(flow, mask))
    back = load_flow(path)
    assert np.array_equal(back.mask, mask)
    assert np.array_equal(back.flow, np.where(mask[..., None], flow, 0.0))
    save_flow(tmp_path / "g.vmfl", back)
    assert (tmp_path / "g.vmfl").read_bytes() == path.read_bytes()


def test_flow_layout(tmp_path):
    path = tmp_path / "f.vmfl"
    save_flow(path, FlowField2D(np.ones((2, 3, 2))))
    buf = path.read_bytes()
    assert buf[:4] == FLOW_MAGIC
    assert struct.unpack("<II", buf[4:12]) == (3, 2)
    assert len(buf) == 12 + 6 * 8 + 6


@pytest.mark.parametrize("mutate, where", [
    (lambda b: b"XXXX" + b[4:], 0),
    (lambda b: b[:10], None),
    (lambda b: b[:-1], None),
    (lambda b: b[:12] + struct.pack("<f", float("nan")) + b[16:], 12),
    (lambda b: b[:-1] + b"\x02", None),
])
def test_flow_rejects_malformed(tmp_path, mutate, where):
    path = tmp_path / "f.vmfl"
    save_flow(path, FlowField2D(np.ones((2, 2, 2))))
    path.write_bytes(mutate(path.read_bytes()))
    with pytest.raises(FormatError) as info:
        load_flow(path)
    if where is not None:
        assert info.value.offset == where


def test_flow_masked_pixel_with_value_rejected(tmp_path):
    path = tmp_path / "f.vmfl"
    save_flow(path, FlowField2D(np.ones((2, 2, 2)), np.array([[1, 0], [1, 1]])))
    buf = bytearray(path.read_bytes())
    buf[12 + 8:12 + 12] = struct.pack("<f", 5.0)
    path.write_bytes(bytes(buf))
    with pytest.raises(FormatError):
        load_flow(path)


@settings(max_examples=60, deadline=None)
@given(st.binary(max_size=200))
def test_flow_fuzz_never_crashes(tmp_path_factory, blob):
    path = tmp_path_factory.mktemp("fz") / "f.vmfl"
    path.write_bytes(blob)
    try:
        f = load_flow(path)
    except FormatError:
        return
    assert np.all(np.isfinite(f.flow))


def test_events_roundtrip(tmp_path):
    ev = EventStream([1, 0, 3], [2, 2, 0], [0.1, 0.25, 0.9], [1, -1, 1], 4, 3, (0.0, 1.0))
    save_events(tmp_path / "e.txt", ev)
    back = load_events(tmp_path / "e.txt")
    for name in ("x", "y", "t", "p"):
        assert np.array_equal(getattr(back, name), getattr(ev, name))
    assert (back.width, back.height, back.window) == (4, 3, (0.0, 1.0))


@pytest.mark.parametrize("body, line", [
    ("0.1 0 0 1\n0.05 0 0 1\n", 2),
    ("0.1 0 0 2\n", 1),
    ("0.1 0 0\n", 1),
    ("nan 0 0 1\n", 1),
    ("0.1 a 0 1\n", 1),
    ("0.1 -1 0 1\n", 1),
    ("# width 2\n0.1 5 0 1\n", 2),
])
def test_events_rejects_with_line(tmp_path, body, line):
    (tmp_path / "e.txt").write_text(body)
    with pytest.raises(FormatError) as info:
        load_events(tmp_path / "e.txt")
    assert info.value.line == line


def test_points_roundtrip(tmp_path, rng):
    pts = rng.normal(size=(11, 3))
    save_points(tmp_path / "p.txt", PointCloud(pts), header="densified")
    assert np.array_equal(load_points(tmp_path / "p.txt").points, pts)


def test_points_reject_inf(tmp_path):
    (tmp_path / "p.txt").write_text("1 2 3\n1 inf 3\n")
    with pytest.raises(FormatError) as info:
        load_points(tmp_path / "p.txt")
    assert info.value.line == 2


@pytest.mark.parametrize("bits", [8, 16])
def test_image_roundtrip_quantized(tmp_path, rng, bits):
    data = np.round(rng.uniform(size=(5, 6, 3)) * (2 ** bits - 1)) / (2 ** bits - 1)
    save_image(tmp_path / "a.ppm", Image(data, "RGB"), bits=bits)
    back = load_image(tmp_path / "a.ppm")
    assert back.semantics == "RGB"
    np.testing.assert_allclose(back.data, data, atol=1e-12)


def test_depth_image_millimetres(tmp_path):
    d = np.array([[0.0, 1.234], [6.0, 0.001]])
    save_image(tmp_path / "d.pgm", Image(d, "DEPTH"))
    back = load_image(tmp_path / "d.pgm")
    assert back.semantics == "DEPTH"
    np.testing.assert_allclose(back.data, d, atol=5e-4)


def test_intensity_not_storable(tmp_path):
    with pytest.raises(FormatError):
        save_image(tmp_path / "x.pgm", Image(np.full((2, 2), -0.5), "INTENSITY"))


@pytest.mark.parametrize("blob", [
    b"P7\n2 2\n255\n" + bytes(4),
    b"P5\n2 2\n255\n" + bytes(3),
    b"P5\n2 x\n255\n" + bytes(4),
    b"P5\n2 2\n0\n" + bytes(4),
    b"P5\n2 2\n10\n" + bytes([0, 0, 0, 11]),
    b"P5 2",
])
def test_image_rejects(tmp_path, blob):
    (tmp_path / "a.pgm").write_bytes(blob)
    with pytest.raises(FormatError):
        load_image(tmp_path / "a.pgm")


def test_type_invariants():
    with pytest.raises(FormatError):
        CameraIntrinsics(-1.0, 5, 5, 10, 10)
    with pytest.raises(FormatError):
        Image(np.full((2, 2), 1.5), "LUMA")
    with pytest.raises(ShapeError):
        PointCloud(np.zeros((3, 2)))
    with pytest.raises(FormatError):
        EventStream([0], [0], [0.5], [0], 2, 2)
    with pytest.raises(ShapeError):
        FlowField2D(np.zeros((2, 2, 3)))
