"""Readers and writers for events, point clouds, PNM images and binary flow.

Every loader validates the invariants of the type it builds and raises
:class:`FormatError` naming the offending line (text formats) or byte offset
(binary formats).
"""

import math
import struct

import numpy as np

from .errors import FormatError
from .types import EventStream, FlowField2D, Image, PointCloud

FLOW_MAGIC = b"VMFL"


def _read_text(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return fh.read().splitlines()
    except UnicodeDecodeError as exc:
        raise FormatError(f"not a text file: {exc}") from None


# ---------------------------------------------------------------- events

def save_events(path, ev):
    with open(path, "w") as fh:
        fh.write(f"# width {ev.width}\n# height {ev.height}\n")
        fh.write(f"# window {ev.window[0]!r} {ev.window[1]!r}\n")
        for t, x, y, p in zip(ev.t, ev.x, ev.y, ev.p):
            fh.write(f"{float(t)!r} {int(x)} {int(y)} {int(p):+d}\n")


def load_events(path, width=None, height=None, window=None):
    """Parse ``t x y p`` lines. Geometry and window come from ``#`` header
    lines when present, else from the arguments, else from the data."""
    ts, xs, ys, ps = [], [], [], []
    lines = []
    for ln, raw in enumerate(_read_text(path), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            tok = line[1:].split()
            try:
                if tok[:1] == ["width"] and len(tok) == 2:
                    width = int(tok[1])
                elif tok[:1] == ["height"] and len(tok) == 2:
                    height = int(tok[1])
                elif tok[:1] == ["window"] and len(tok) == 3:
                    window = (float(tok[1]), float(tok[2]))
            except ValueError:
                raise FormatError(f"bad header value in {line!r}", line=ln) from None
            continue
        tok = line.split()
        if len(tok) != 4:
            raise FormatError(f"expected 't x y p', got {len(tok)} fields", line=ln)
        try:
            t = float(tok[0])
            x, y, p = int(tok[1]), int(tok[2]), int(tok[3])
        except ValueError:
            raise FormatError(f"malformed event {line!r}", line=ln) from None
        if not math.isfinite(t):
            raise FormatError("non-finite timestamp", line=ln)
        if p not in (-1, 1):
            raise FormatError(f"polarity must be -1 or +1, got {p}", line=ln)
        if ts and t < ts[-1]:
            raise FormatError("timestamps not sorted", line=ln)
        if x < 0 or y < 0:
            raise FormatError("negative event coordinate", line=ln)
        ts.append(t)
        xs.append(x)
        ys.append(y)
        ps.append(p)
        lines.append(ln)
    if width is None:
        width = max(xs) + 1 if xs else 1
    if height is None:
        height = max(ys) + 1 if ys else 1
    if width < 1 or height < 1:
        raise FormatError(f"invalid sensor size {width}x{height}")
    if window is None:
        window = (ts[0], ts[-1]) if ts else (0.0, 0.0)
    if not (math.isfinite(window[0]) and math.isfinite(window[1])) or window[1] < window[0]:
        raise FormatError(f"invalid window {window}")
    for t, x, y, ln in zip(ts, xs, ys, lines):
        if x >= width or y >= height:
            raise FormatError(f"event ({x}, {y}) outside {width}x{height} sensor", line=ln)
        if t < window[0] or t > window[1]:
            raise FormatError(f"timestamp {t} outside window {window}", line=ln)
    return EventStream(xs, ys, ts, ps, width, height, window)


# ---------------------------------------------------------------- point clouds

def save_points(path, pc, header=None):
    pts = np.asarray(pc, dtype=np.float64).reshape(-1, 3)
    with open(path, "w") as fh:
        if header:
            fh.write(f"#{header}\n")
        for x, y, z in pts:
            fh.write(f"{float(x)!r} {float(y)!r} {float(z)!r}\n")


def load_points(path):
    """Parse ``x y z`` lines into a cloud; ``#`` lines are comments."""
    rows = []
    for ln, raw in enumerate(_read_text(path), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        tok = line.split()
        if len(tok) != 3:
            raise FormatError(f"expected 'x y z', got {len(tok)} fields", line=ln)
        try:
            row = [float(t) for t in tok]
        except ValueError:
            raise FormatError(f"malformed point {line!r}", line=ln) from None
        if not all(math.isfinite(v) for v in row):
            raise FormatError(f"non-finite coordinate in {line!r}", line=ln)
        rows.append(row)
    return PointCloud(np.array(rows, dtype=np.float64).reshape(-1, 3))


# ---------------------------------------------------------------- PNM images

def _write_pnm(path, arr, magic, maxval, comments=()):
    arr = np.asarray(arr)
    h, w = arr.shape[:2]
    dtype = ">u2" if maxval > 255 else "u1"
    with open(path, "wb") as fh:
        fh.write(magic + b"\n")
        for c in comments:
            fh.write(f"# {c}\n".encode("ascii"))
        fh.write(f"{w} {h}\n{maxval}\n".encode("ascii"))
        fh.write(arr.astype(dtype).tobytes())


def save_image(path, img, bits=8):
    """Write PGM (1 channel) or PPM (RGB).

    DEPTH is always 16-bit millimeters. Other semantics are quantized to
    ``bits`` (8 or 16) over [0, 1]; INTENSITY cannot be stored.
    """
    sem = img.semantics
    data = img.data
    if sem == "DEPTH":
        mm = np.clip(np.rint(data * 1000.0), 0, 65535)
        _write_pnm(path, mm, b"P5", 65535,
                   ["semantics DEPTH", "depth_mm: stored value / 1000 = meters, 0 = missing"])
        return
    if sem == "INTENSITY":
        raise FormatError("INTENSITY frames are signed and have no PNM encoding")
    maxval = 255 if bits == 8 else 65535
    q = np.clip(np.rint(data * maxval), 0, maxval)
    magic = b"P6" if img.channels == 3 else b"P5"
    _write_pnm(path, q, magic, maxval, [f"semantics {sem}"])


def _pnm_tokens(buf):
    """Return (tokens, comments, data offset) for a PNM header."""
    tokens, comments = [], []
    i, n = 0, len(buf)
    while len(tokens) < 4:
        if i >= n:
            raise FormatError("truncated PNM header", offset=i)
        c = buf[i:i + 1]
        if c == b"#":
            j = buf.find(b"\n", i)
            j = n if j < 0 else j
            comments.append(buf[i + 1:j].decode("ascii", "replace").strip())
            i = j + 1
        elif c.isspace():
            i += 1
        else:
            j = i
            while j < n and not buf[j:j + 1].isspace() and buf[j:j + 1] != b"#":
                j += 1
            tokens.append((buf[i:j], i))
            i = j
    if i >= n or not buf[i:i + 1].isspace():
        raise FormatError("missing whitespace after PNM header", offset=i)
    return tokens, comments, i + 1


def load_image(path):
    """Read a P5/P6 file into an :class:`Image`.

    A ``semantics`` comment restores the tag; ``semantics DEPTH`` converts
    millimeters back to meters.
    """
    with open(path, "rb") as fh:
        buf = fh.read()
    tokens, comments, start = _pnm_tokens(buf)
    magic = tokens[0][0]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"unsupported PNM magic {magic!r}", offset=0)
    try:
        w, h, maxval = (int(t) for t, _ in tokens[1:4])
    except ValueError:
        raise FormatError("non-integer PNM header field", offset=tokens[1][1]) from None
    if w <= 0 or h <= 0:
        raise FormatError(f"invalid PNM size {w}x{h}", offset=tokens[1][1])
    if not 0 < maxval <= 65535:
        raise FormatError(f"invalid maxval {maxval}", offset=tokens[3][1])
    ch = 3 if magic == b"P6" else 1
    size = 2 if maxval > 255 else 1
    need = w * h * ch * size
    if len(buf) - start != need:
        raise FormatError(f"expected {need} pixel bytes, found {len(buf) - start}", offset=start)
    raw = np.frombuffer(buf, dtype=">u2" if size == 2 else "u1", offset=start, count=w * h * ch)
    if raw.max(initial=0) > maxval:
        bad = int(np.argmax(raw > maxval))
        raise FormatError("sample exceeds maxval", offset=start + bad * size)
    arr = raw.astype(np.float64).reshape((h, w, 3) if ch == 3 else (h, w))
    sem = "RGB" if ch == 3 else "LUMA"
    for c in comments:
        tok = c.split()
        if len(tok) == 2 and tok[0] == "semantics":
            sem = tok[1]
    if sem == "DEPTH":
        if ch != 1:
            raise FormatError("depth images must be single-channel", offset=0)
        return Image(arr / 1000.0, "DEPTH")
    if sem not in ("RGB", "YUV", "LUMA"):
        raise FormatError(f"semantics {sem!r} not storable as PNM", offset=0)
    if sem == "RGB" and ch != 3:
        raise FormatError("RGB semantics on a single-channel file", offset=0)
    return Image(arr / maxval, sem)


def save_labels(path, labels):
    """Cluster assignment as a 16-bit PGM; 0 is background, cluster c is c+1."""
    lab = np.asarray(labels, dtype=np.int64)
    _write_pnm(path, np.clip(lab + 1, 0, 65535), b"P5", 65535, ["semantics LABELS"])


def save_ppm_rgb8(path, rgb8):
    """Write an already-quantized ``(H, W, 3)`` uint8 array as PPM."""
    _write_pnm(path, np.asarray(rgb8, dtype=np.uint8), b"P6", 255)


# ---------------------------------------------------------------- binary flow

def save_flow(path, flow):
    """``VMFL`` | u32 width | u32 height | f32 (du, dv) row-major | u8 mask."""
    f = flow if isinstance(flow, FlowField2D) else FlowField2D(flow)
    h, w = f.flow.shape[:2]
    with open(path, "wb") as fh:
        fh.write(FLOW_MAGIC)
        fh.write(struct.pack("<II", w, h))
        fh.write(f.flow.astype("<f4").tobytes())
        fh.write(f.mask.astype("u1").tobytes())


def load_flow(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 12:
        raise FormatError("truncated flow header", offset=len(buf))
    if buf[:4] != FLOW_MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}", offset=0)
    w, h = struct.unpack("<II", buf[4:12])
    if w == 0 or h == 0:
        raise FormatError(f"invalid flow size {w}x{h}", offset=4)
    n = w * h
    need = 12 + n * 9
    if len(buf) != need:
        raise FormatError(f"expected {need} bytes, found {len(buf)}", offset=min(len(buf), need))
    data = np.frombuffer(buf, dtype="<f4", offset=12, count=2 * n).astype(np.float64)
    mask = np.frombuffer(buf, dtype="u1", offset=12 + 8 * n, count=n)
    bad = np.flatnonzero(~np.isfinite(data))
    if bad.size:
        raise FormatError("non-finite flow value", offset=12 + 4 * int(bad[0]))
    bad = np.flatnonzero(mask > 1)
    if bad.size:
        raise FormatError("mask byte not 0/1", offset=12 + 8 * n + int(bad[0]))
    flow = data.reshape(h, w, 2)
    m = mask.reshape(h, w).astype(bool)
    bad = np.flatnonzero(np.any(flow[~m] != 0, axis=-1)) if (~m).any() else np.zeros(0)
    if bad.size:
        pix = int(np.flatnonzero(~m.ravel())[bad[0]])
        raise FormatError("masked-out pixel carries nonzero flow", offset=12 + 8 * pix)
    return FlowField2D(flow, m)
