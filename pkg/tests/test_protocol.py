import json
import socket
import struct
import threading
from pathlib import Path

import numpy as np
import pytest

from mvsplat.core import Camera
from mvsplat.protocol import (MAGIC, PROTOCOL_VERSION, GuidanceRemoteError,
                              GuidanceRequest, GuidanceResponse, ProtocolError,
                              RemoteGuidance, ViewPayload, decode_request,
                              decode_response, encode_request, encode_response,
                              read_frame, write_frame)
from mvsplat.trainer import GuidanceContext, ViewRecord

FIXTURES = Path(__file__).parent / "fixtures"


def sample_request(n=4, h=6, w=8, seed=3):
    rng = np.random.default_rng(seed)
    views = [ViewPayload(azimuth_deg=90.0 * i, elevation_deg=11.0,
                         camera_to_world=np.eye(4, dtype=np.float32),
                         image=rng.uniform(size=(h, w, 3)).astype(np.float32))
             for i in range(n)]
    return GuidanceRequest(prompt="prompt", negative_prompt="neg", views=views,
                           guidance_scale=50.0, t_min=0.02, t_max=0.98, seed=99)


class TestCodec:
    def test_request_roundtrip(self):
        req = sample_request()
        back = decode_request(encode_request(req))
        assert back.prompt == req.prompt
        assert back.negative_prompt == req.negative_prompt
        assert back.seed == req.seed
        assert len(back.views) == 4
        for a, b in zip(req.views, back.views):
            np.testing.assert_array_equal(a.image, b.image)
            np.testing.assert_array_equal(a.camera_to_world, b.camera_to_world)
            assert a.azimuth_deg == b.azimuth_deg

    def test_response_roundtrip(self):
        rng = np.random.default_rng(0)
        grads = [rng.normal(size=(6, 8, 3)).astype(np.float32) for _ in range(4)]
        resp = GuidanceResponse(status=0, loss=0.5, gradients=grads, diagnostic="d")
        back = decode_response(encode_response(resp))
        assert back.status == 0 and back.loss == 0.5 and back.diagnostic == "d"
        for a, b in zip(grads, back.gradients):
            np.testing.assert_array_equal(a, b)

    def test_magic_and_version_checks(self):
        payload = bytearray(encode_request(sample_request()))
        payload[:4] = b"XXXX"
        with pytest.raises(ProtocolError, match="magic"):
            decode_request(bytes(payload))
        payload = bytearray(encode_request(sample_request()))
        payload[4:8] = struct.pack("<I", 999)
        with pytest.raises(ProtocolError, match="version"):
            decode_request(bytes(payload))

    def test_trailing_bytes_rejected(self):
        raw = encode_request(sample_request()) + b"\x00"
        with pytest.raises(ProtocolError, match="trailing"):
            decode_request(raw)

    def test_shapes_must_match(self):
        rng = np.random.default_rng(0)
        views = [ViewPayload(0, 0, np.eye(4, dtype=np.float32),
                             rng.uniform(size=(6, 8, 3)).astype(np.float32)),
                 ViewPayload(0, 0, np.eye(4, dtype=np.float32),
                             rng.uniform(size=(4, 8, 3)).astype(np.float32))]
        with pytest.raises(ProtocolError, match="share"):
            encode_request(GuidanceRequest(views=views))


class TestGoldenFrames:
    def test_request_fixture_decodes_to_sidecar_values(self):
        side = json.loads((FIXTURES / "protocol_sidecar.json").read_text())["request"]
        req = decode_request((FIXTURES / "request_v1.bin").read_bytes())
        assert req.prompt == side["prompt"]
        assert req.negative_prompt == side["negative_prompt"]
        assert len(req.views) == side["n_views"]
        assert req.seed == side["seed"]
        np.testing.assert_allclose([v.azimuth_deg for v in req.views],
                                   side["azimuths"])
        np.testing.assert_allclose(
            [float(np.float64(v.image.sum())) for v in req.views],
            side["image_sums"], rtol=1e-6)

    def test_response_fixture_decodes_to_sidecar_values(self):
        side = json.loads((FIXTURES / "protocol_sidecar.json").read_text())["response"]
        resp = decode_response((FIXTURES / "response_v1.bin").read_bytes())
        assert resp.status == side["status"]
        assert resp.loss == side["loss"]
        assert resp.diagnostic == side["diagnostic"]
        np.testing.assert_allclose(
            [float(np.float64(g.sum())) for g in resp.gradients],
            side["gradient_sums"], rtol=1e-6)

    def test_reencoding_request_preserves_bytes(self):
        raw = (FIXTURES / "request_v1.bin").read_bytes()
        assert encode_request(decode_request(raw)) == raw


class _StubServer:
    """Minimal in-test peer: replies to every frame with a canned response."""

    def __init__(self, responder):
        self.responder = responder
        self.sock = socket.socket()
        self.sock.bind(("127.0.0.1", 0))
        self.sock.listen(1)
        self.port = self.sock.getsockname()[1]
        self.thread = threading.Thread(target=self._serve, daemon=True)
        self.thread.start()

    def _serve(self):
        conn, _ = self.sock.accept()
        try:
            while True:
                payload = read_frame(conn)
                write_frame(conn, self.responder(payload))
        except (ProtocolError, OSError):
            pass

    def close(self):
        self.sock.close()


def make_views(n=4, h=6, w=8):
    cam = Camera.look_at((2.5, 0, 0.5), (0, 0, 0), width=w, height=h, fov_deg=40)
    rng = np.random.default_rng(0)
    return [ViewRecord(image=rng.uniform(size=(h, w, 3)), camera=cam,
                       azimuth_deg=90.0 * i, elevation_deg=5.0,
                       background=np.zeros(3)) for i in range(n)]


class TestRemoteGuidance:
    def test_round_trip_against_stub(self):
        def responder(payload):
            req = decode_request(payload)
            grads = [np.full_like(v.image, 0.125, dtype=np.float32)
                     for v in req.views]
            return encode_response(GuidanceResponse(status=0, loss=0.75,
                                                    gradients=grads))

        stub = _StubServer(responder)
        try:
            rg = RemoteGuidance(f"127.0.0.1:{stub.port}", timeout=10)
            loss, grads = rg.evaluate(make_views(), GuidanceContext(seed=1))
            assert loss == 0.75
            assert all(np.all(g == 0.125) for g in grads)
            rg.close()
        finally:
            stub.close()

    def test_error_status_raises(self):
        def responder(payload):
            return encode_response(GuidanceResponse(status=2, diagnostic="boom"))

        stub = _StubServer(responder)
        try:
            rg = RemoteGuidance(f"127.0.0.1:{stub.port}", timeout=10)
            with pytest.raises(GuidanceRemoteError, match="boom"):
                rg.evaluate(make_views(), GuidanceContext())
            rg.close()
        finally:
            stub.close()

    def test_bad_address_rejected(self):
        with pytest.raises(ProtocolError):
            RemoteGuidance("nonsense")

    def test_request_carries_context_fields(self):
        captured = {}

        def responder(payload):
            req = decode_request(payload)
            captured["prompt"] = req.prompt
            captured["scale"] = req.guidance_scale
            captured["seed"] = req.seed
            grads = [np.zeros_like(v.image, dtype=np.float32) for v in req.views]
            return encode_response(GuidanceResponse(status=0, gradients=grads))

        stub = _StubServer(responder)
        try:
            rg = RemoteGuidance(f"127.0.0.1:{stub.port}", timeout=10)
            ctx = GuidanceContext(prompt="a fox", guidance_scale=30.0, seed=777)
            rg.evaluate(make_views(), ctx)
            rg.close()
        finally:
            stub.close()
        assert captured == {"prompt": "a fox", "scale": 30.0, "seed": 777}
