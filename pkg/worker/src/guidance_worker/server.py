"""TCP guidance service: one framed request/response at a time per connection."""
from __future__ import annotations

import argparse
import logging
import socket
import socketserver
import threading

import numpy as np

from . import protocol
from .model import DiffusionAdapter, ModelError, SDSSettings, load_adapter, sds_image_gradients

log = logging.getLogger("guidance_worker")


class GuidanceService:
    """Evaluates requests against one adapter; serialized by a lock because
    model inference is the bottleneck and gains nothing from concurrency."""

    def __init__(self, adapter: DiffusionAdapter, settings: SDSSettings | None = None):
        self.adapter = adapter
        self.settings = settings or SDSSettings()
        self._lock = threading.Lock()

    def handle_payload(self, payload: bytes) -> bytes:
        try:
            req = protocol.parse_request(payload)
        except protocol.FrameError as exc:
            log.warning("bad frame: %s", exc)
            return protocol.build_response(protocol.Response(
                status=protocol.STATUS_BAD_FRAME, diagnostic=str(exc)))
        try:
            with self._lock:
                images = [v.image.astype(np.float64) for v in req.views]
                cams = [v.camera_to_world for v in req.views]
                loss, grads = sds_image_gradients(
                    self.adapter, images, cams, req.prompt, req.negative_prompt,
                    req.guidance_scale, req.t_min, req.t_max, req.seed,
                    self.settings)
        except (ModelError, ValueError) as exc:
            log.error("model failure: %s", exc)
            h, w = req.views[0].image.shape[:2]
            return protocol.build_response(protocol.Response(
                status=protocol.STATUS_MODEL_ERROR, diagnostic=str(exc),
                height=h, width=w))
        return protocol.build_response(protocol.Response(
            status=protocol.STATUS_OK, loss=float(loss),
            gradients=[g.astype(np.float32) for g in grads]))


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        sock: socket.socket = self.request
        service: GuidanceService = self.server.service
        while True:
            try:
                payload = protocol.read_frame(sock)
            except (ConnectionError, OSError):
                return
            response = service.handle_payload(payload)
            try:
                sock.sendall(protocol.frame(response))
            except OSError:
                return


class GuidanceServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, address, service: GuidanceService):
        super().__init__(address, _Handler)
        self.service = service


def serve(listen: str, adapter: DiffusionAdapter,
          settings: SDSSettings | None = None) -> GuidanceServer:
    """Start serving on HOST:PORT; returns the server (serve_forever on it)."""
    host, _, port = listen.rpartition(":")
    server = GuidanceServer((host or "127.0.0.1", int(port)),
                            GuidanceService(adapter, settings))
    return server


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="guidance-worker")
    parser.add_argument("--listen", default="127.0.0.1:7060", help="HOST:PORT")
    parser.add_argument("--model", default=None,
                        help="python module providing make_adapter()")
    parser.add_argument("--mock", action="store_true",
                        help="identity encoder, eps_hat = eps (+ --mock-bias)")
    parser.add_argument("--mock-bias", type=float, default=0.0)
    parser.add_argument("--weight-mode", default="constant",
                        choices=("constant", "one_minus_alpha_bar"))
    parser.add_argument("--verbose", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        adapter = load_adapter(args.model, args.mock, args.mock_bias)
    except ModelError as exc:
        print(f"error: {exc}")
        return 2
    server = serve(args.listen, adapter, SDSSettings(weight_mode=args.weight_mode))
    log.info("serving on %s (%s)", args.listen,
             "mock" if args.mock else f"model={args.model}")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.shutdown()
        server.server_close()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
