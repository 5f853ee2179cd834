"""Framed binary protocol for remote guidance, and the TCP client.

Every message travels as a little-endian length-prefixed frame:

    u32 payload_length | payload

Request payload:
    magic  b"MVGS"
    u32    protocol version (1)
    u32    prompt length | utf-8 prompt
    u32    negative prompt length | utf-8 negative prompt
    u32    n_views
    u32    height, u32 width
    per view:
        f32 azimuth_deg, f32 elevation_deg
        16 x f32 camera-to-world matrix, row-major
        H*W*3 x f32 RGB image, row-major
    f32    guidance scale
    f32    t_min, f32 t_max
    u64    seed

Response payload:
    u32    status (0 = ok)
    f64    loss
    u32    n_views
    u32    height, u32 width
    per view: H*W*3 x f32 dL/dcolor
    u32    diagnostic length | utf-8 diagnostic
"""
from __future__ import annotations

import socket
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"MVGS"
PROTOCOL_VERSION = 1

STATUS_OK = 0
STATUS_BAD_FRAME = 1
STATUS_MODEL_ERROR = 2


class ProtocolError(RuntimeError):
    pass


class GuidanceRemoteError(RuntimeError):
    """Raised when the worker reports a non-zero status."""


@dataclass
class ViewPayload:
    azimuth_deg: float
    elevation_deg: float
    camera_to_world: np.ndarray   # (4, 4) float32
    image: np.ndarray             # (H, W, 3) float32


@dataclass
class GuidanceRequest:
    prompt: str = ""
    negative_prompt: str = ""
    views: list = field(default_factory=list)
    guidance_scale: float = 50.0
    t_min: float = 0.02
    t_max: float = 0.98
    seed: int = 0
    version: int = PROTOCOL_VERSION


@dataclass
class GuidanceResponse:
    status: int = STATUS_OK
    loss: float = 0.0
    gradients: list = field(default_factory=list)  # (H, W, 3) float32 per view
    diagnostic: str = ""


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def _unpack_str(buf: bytes, off: int):
    (n,) = struct.unpack_from("<I", buf, off)
    off += 4
    return buf[off:off + n].decode("utf-8"), off + n


def encode_request(req: GuidanceRequest) -> bytes:
    if not req.views:
        raise ProtocolError("request carries no views")
    h, w = req.views[0].image.shape[:2]
    parts = [MAGIC, struct.pack("<I", req.version),
             _pack_str(req.prompt), _pack_str(req.negative_prompt),
             struct.pack("<III", len(req.views), h, w)]
    for v in req.views:
        if v.image.shape != (h, w, 3):
            raise ProtocolError("views must share one image shape")
        parts.append(struct.pack("<ff", v.azimuth_deg, v.elevation_deg))
        c2w = np.asarray(v.camera_to_world, dtype="<f4").reshape(16)
        parts.append(c2w.tobytes())
        parts.append(np.ascontiguousarray(v.image, dtype="<f4").tobytes())
    parts.append(struct.pack("<fff", req.guidance_scale, req.t_min, req.t_max))
    parts.append(struct.pack("<Q", req.seed))
    return b"".join(parts)


def decode_request(payload: bytes) -> GuidanceRequest:
    if payload[:4] != MAGIC:
        raise ProtocolError(f"bad magic {payload[:4]!r}")
    off = 4
    (version,) = struct.unpack_from("<I", payload, off)
    off += 4
    if version != PROTOCOL_VERSION:
        raise ProtocolError(f"unsupported protocol version {version}")
    prompt, off = _unpack_str(payload, off)
    negative, off = _unpack_str(payload, off)
    n_views, h, w = struct.unpack_from("<III", payload, off)
    off += 12
    views = []
    img_bytes = h * w * 3 * 4
    for _ in range(n_views):
        az, el = struct.unpack_from("<ff", payload, off)
        off += 8
        c2w = np.frombuffer(payload, dtype="<f4", count=16, offset=off).reshape(4, 4).copy()
        off += 64
        img = np.frombuffer(payload, dtype="<f4", count=h * w * 3,
                            offset=off).reshape(h, w, 3).copy()
        off += img_bytes
        views.append(ViewPayload(az, el, c2w, img))
    scale, t_min, t_max = struct.unpack_from("<fff", payload, off)
    off += 12
    (seed,) = struct.unpack_from("<Q", payload, off)
    off += 8
    if off != len(payload):
        raise ProtocolError(f"trailing bytes in request ({len(payload) - off})")
    if not all(np.all(np.isfinite(v.image)) for v in views):
        raise ProtocolError("request images contain non-finite values")
    return GuidanceRequest(prompt=prompt, negative_prompt=negative, views=views,
                           guidance_scale=scale, t_min=t_min, t_max=t_max,
                           seed=seed, version=version)


def encode_response(resp: GuidanceResponse, height: int = 0, width: int = 0) -> bytes:
    if resp.gradients:
        height, width = resp.gradients[0].shape[:2]
    parts = [struct.pack("<I", resp.status), struct.pack("<d", resp.loss),
             struct.pack("<III", len(resp.gradients), height, width)]
    for g in resp.gradients:
        parts.append(np.ascontiguousarray(g, dtype="<f4").tobytes())
    parts.append(_pack_str(resp.diagnostic))
    return b"".join(parts)


def decode_response(payload: bytes) -> GuidanceResponse:
    off = 0
    (status,) = struct.unpack_from("<I", payload, off)
    off += 4
    (loss,) = struct.unpack_from("<d", payload, off)
    off += 8
    n_views, h, w = struct.unpack_from("<III", payload, off)
    off += 12
    grads = []
    for _ in range(n_views):
        g = np.frombuffer(payload, dtype="<f4", count=h * w * 3,
                          offset=off).reshape(h, w, 3).copy()
        off += h * w * 3 * 4
        grads.append(g)
    diag, off = _unpack_str(payload, off)
    if off != len(payload):
        raise ProtocolError(f"trailing bytes in response ({len(payload) - off})")
    return GuidanceResponse(status=status, loss=loss, gradients=grads, diagnostic=diag)


# ---------------------------------------------------------------------------
# Framing over a socket
# ---------------------------------------------------------------------------

def write_frame(sock: socket.socket, payload: bytes) -> None:
    sock.sendall(struct.pack("<I", len(payload)) + payload)


def read_frame(sock: socket.socket, max_size: int = 1 << 30) -> bytes:
    head = _read_exact(sock, 4)
    (size,) = struct.unpack("<I", head)
    if size > max_size:
        raise ProtocolError(f"frame of {size} bytes exceeds limit")
    return _read_exact(sock, size)


def _read_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    got = 0
    while got < n:
        chunk = sock.recv(min(n - got, 1 << 20))
        if not chunk:
            raise ProtocolError("connection closed mid-frame")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


class RemoteGuidance:
    """GuidanceInterface backed by a worker over the framed TCP protocol."""

    def __init__(self, address: str, timeout: float = 120.0):
        host, _, port = address.rpartition(":")
        if not host or not port:
            raise ProtocolError(f"address must be HOST:PORT, got {address!r}")
        self.host = host
        self.port = int(port)
        self.timeout = timeout
        self._sock: socket.socket | None = None

    def _connect(self) -> socket.socket:
        if self._sock is None:
            self._sock = socket.create_connection((self.host, self.port),
                                                  timeout=self.timeout)
        return self._sock

    def evaluate(self, views, context):
        req = GuidanceRequest(
            prompt=context.prompt, negative_prompt=context.negative_prompt,
            views=[ViewPayload(v.azimuth_deg, v.elevation_deg,
                               v.camera.camera_to_world().astype(np.float32),
                               v.image.astype(np.float32)) for v in views],
            guidance_scale=context.guidance_scale,
            t_min=context.t_range[0], t_max=context.t_range[1],
            seed=context.seed)
        sock = self._connect()
        try:
            write_frame(sock, encode_request(req))
            resp = decode_response(read_frame(sock))
        except (OSError, ProtocolError):
            self.close()
            raise
        if resp.status != STATUS_OK:
            raise GuidanceRemoteError(
                f"worker returned status {resp.status}: {resp.diagnostic}")
        return resp.loss, [g.astype(float) for g in resp.gradients]

    def close(self) -> None:
        if self._sock is not None:
            try:
                self._sock.close()
            finally:
                self._sock = None
