"""Wire codec for the framed guidance protocol (worker side).

Frame: little-endian u32 payload length, then the payload.

Request payload:
    b"MVGS" | u32 version | str prompt | str negative | u32 n_views |
    u32 height | u32 width |
    per view: f32 azimuth, f32 elevation, 16*f32 camera-to-world (row-major),
              H*W*3*f32 RGB image |
    f32 guidance_scale | f32 t_min | f32 t_max | u64 seed

Response payload:
    u32 status | f64 loss | u32 n_views | u32 height | u32 width |
    per view: H*W*3*f32 dL/dcolor | str diagnostic

Strings are u32 length + utf-8 bytes. Status 0 means success, 1 a malformed
or unsupported frame, 2 a model failure.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"MVGS"
PROTOCOL_VERSION = 1

STATUS_OK = 0
STATUS_BAD_FRAME = 1
STATUS_MODEL_ERROR = 2


class FrameError(ValueError):
    """Malformed or unsupported request frame."""


@dataclass
class RequestView:
    azimuth_deg: float
    elevation_deg: float
    camera_to_world: np.ndarray
    image: np.ndarray


@dataclass
class Request:
    prompt: str
    negative_prompt: str
    views: list
    guidance_scale: float
    t_min: float
    t_max: float
    seed: int


@dataclass
class Response:
    status: int = STATUS_OK
    loss: float = 0.0
    gradients: list = field(default_factory=list)
    diagnostic: str = ""
    height: int = 0
    width: int = 0


def _take(buf: bytes, off: int, n: int) -> bytes:
    if off + n > len(buf):
        raise FrameError("frame truncated")
    return buf[off:off + n]


def _read_str(buf: bytes, off: int):
    (n,) = struct.unpack_from("<I", _take(buf, off, 4), 0)
    off += 4
    return _take(buf, off, n).decode("utf-8"), off + n


def parse_request(payload: bytes) -> Request:
    if _take(payload, 0, 4) != MAGIC:
        raise FrameError(f"bad magic {payload[:4]!r}")
    (version,) = struct.unpack_from("<I", _take(payload, 4, 4), 0)
    if version != PROTOCOL_VERSION:
        raise FrameError(f"unsupported protocol version {version}")
    off = 8
    prompt, off = _read_str(payload, off)
    negative, off = _read_str(payload, off)
    n_views, h, w = struct.unpack_from("<III", _take(payload, off, 12), 0)
    off += 12
    if n_views == 0 or h == 0 or w == 0:
        raise FrameError("empty view set")
    views = []
    px = h * w * 3
    for _ in range(n_views):
        az, el = struct.unpack_from("<ff", _take(payload, off, 8), 0)
        off += 8
        c2w = np.frombuffer(_take(payload, off, 64), dtype="<f4").reshape(4, 4).copy()
        off += 64
        img = np.frombuffer(_take(payload, off, px * 4), dtype="<f4").reshape(h, w, 3).copy()
        off += px * 4
        views.append(RequestView(az, el, c2w, img))
    scale, t_min, t_max = struct.unpack_from("<fff", _take(payload, off, 12), 0)
    off += 12
    (seed,) = struct.unpack_from("<Q", _take(payload, off, 8), 0)
    off += 8
    if off != len(payload):
        raise FrameError(f"{len(payload) - off} trailing bytes")
    for v in views:
        if not np.all(np.isfinite(v.image)):
            raise FrameError("non-finite image values")
    return Request(prompt, negative, views, scale, t_min, t_max, seed)


def build_response(resp: Response) -> bytes:
    h, w = resp.height, resp.width
    if resp.gradients:
        h, w = resp.gradients[0].shape[:2]
    parts = [struct.pack("<I", resp.status), struct.pack("<d", resp.loss),
             struct.pack("<III", len(resp.gradients), h, w)]
    for g in resp.gradients:
        parts.append(np.ascontiguousarray(g, dtype="<f4").tobytes())
    diag = resp.diagnostic.encode("utf-8")
    parts.append(struct.pack("<I", len(diag)) + diag)
    return b"".join(parts)


def frame(payload: bytes) -> bytes:
    return struct.pack("<I", len(payload)) + payload


def read_frame(sock) -> bytes:
    head = read_exact(sock, 4)
    (size,) = struct.unpack("<I", head)
    return read_exact(sock, size)


def read_exact(sock, n: int) -> bytes:
    chunks = []
    got = 0
    while got < n:
        chunk = sock.recv(min(n - got, 1 << 20))
        if not chunk:
            raise ConnectionError("peer closed mid-frame")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)
