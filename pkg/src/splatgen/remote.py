"""Binary wire protocol for out-of-process score providers.

One POST to ``<endpoint>/v1/score`` per camera batch; see
``docs/wire_protocol.md`` for the byte layout. All integers and floats are
little-endian; tensors are float32 in (B, H, W, C) order.
"""

from __future__ import annotations

import socket
import struct
import threading
import urllib.error
import urllib.request
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np

from .errors import ProtocolError, TransportError
from .guidance import ScoreProvider, ScoreRequest, ScoreResponse

REQUEST_MAGIC = b"SGSQ"
RESPONSE_MAGIC = b"SGSA"
VERSION = 1
_HEADER = struct.Struct("<4sHHIIII")
_LEN = struct.Struct("<I")
RGB_CHANNELS = 3
DEPTH_CHANNELS = 1
POSE_CHANNELS = 3


def _pack_header(magic, t, h, w, b, prompt, negative):
    out = [_HEADER.pack(magic, VERSION, 0, t, h, w, b)]
    for text in (prompt, negative):
        raw = text.encode("utf-8")
        out += [_LEN.pack(len(raw)), raw]
    return b"".join(out)


def _unpack_header(buf, magic):
    if len(buf) < _HEADER.size:
        raise ProtocolError(f"truncated frame: {len(buf)} bytes, header needs {_HEADER.size}")
    got_magic, version, _flags, t, h, w, b = _HEADER.unpack_from(buf, 0)
    if got_magic != magic:
        raise ProtocolError(f"bad magic {got_magic!r}, expected {magic!r}")
    if version != VERSION:
        raise ProtocolError(f"unsupported protocol version {version}")
    pos = _HEADER.size
    texts = []
    for field in ("prompt", "negative_prompt"):
        if len(buf) < pos + _LEN.size:
            raise ProtocolError(f"truncated frame in {field} length")
        (n,) = _LEN.unpack_from(buf, pos)
        pos += _LEN.size
        if len(buf) < pos + n:
            raise ProtocolError(f"truncated frame in {field}")
        try:
            texts.append(bytes(buf[pos:pos + n]).decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise ProtocolError(f"{field} is not valid UTF-8") from exc
        pos += n
    return {"t": t, "H": h, "W": w, "B": b, "prompt": texts[0], "negative_prompt": texts[1]}, pos


def _read_tensors(buf, pos, specs):
    out = {}
    for name, shape in specs:
        count = int(np.prod(shape))
        size = 4 * count
        if len(buf) < pos + size:
            raise ProtocolError(f"truncated payload in tensor {name}")
        out[name] = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(shape)
        pos += size
    if pos != len(buf):
        raise ProtocolError(f"{len(buf) - pos} trailing bytes after last tensor")
    return out


def _f32(arr):
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


def encode_request(req: ScoreRequest) -> bytes:
    b, h, w, _ = req.x_t.shape
    pose = np.zeros((b, h, w, POSE_CHANNELS)) if req.pose is None else req.pose
    return b"".join([_pack_header(REQUEST_MAGIC, req.t, h, w, b, req.prompt, req.negative_prompt),
                     _f32(req.x_t), _f32(req.d_t), _f32(pose)])


def decode_request(buf: bytes) -> ScoreRequest:
    head, pos = _unpack_header(buf, REQUEST_MAGIC)
    b, h, w = head["B"], head["H"], head["W"]
    ts = _read_tensors(buf, pos, [("x_t", (b, h, w, RGB_CHANNELS)),
                                  ("d_t", (b, h, w, DEPTH_CHANNELS)),
                                  ("pose", (b, h, w, POSE_CHANNELS))])
    return ScoreRequest(ts["x_t"], ts["d_t"], head["t"], head["prompt"],
                        head["negative_prompt"], ts["pose"])


_RESPONSE_FIELDS = (
    ("eps_cond", RGB_CHANNELS), ("eps_uncond", RGB_CHANNELS), ("eps_neg", RGB_CHANNELS),
    ("eps_cond_depth", DEPTH_CHANNELS), ("eps_uncond_depth", DEPTH_CHANNELS),
    ("eps_neg_depth", DEPTH_CHANNELS),
)


def encode_response(resp: ScoreResponse, req: ScoreRequest) -> bytes:
    b, h, w, _ = resp.eps_cond.shape
    parts = [_pack_header(RESPONSE_MAGIC, req.t, h, w, b, req.prompt, req.negative_prompt)]
    parts += [_f32(getattr(resp, name)) for name, _ in _RESPONSE_FIELDS]
    return b"".join(parts)


def decode_response(buf: bytes, req: ScoreRequest) -> ScoreResponse:
    head, pos = _unpack_header(buf, RESPONSE_MAGIC)
    b, h, w, _ = req.x_t.shape
    for key, want in (("t", req.t), ("H", h), ("W", w), ("B", b)):
        if head[key] != want:
            raise ProtocolError(f"response field {key} = {head[key]}, request had {want}")
    ts = _read_tensors(buf, pos, [(name, (b, h, w, c)) for name, c in _RESPONSE_FIELDS])
    return ScoreResponse(**{name: ts[name].astype(np.float64) for name, _ in _RESPONSE_FIELDS})


class RemoteProvider(ScoreProvider):
    """Client for a score server speaking the binary frame protocol."""

    needs_pose_map = True

    def __init__(self, endpoint: str, timeout: float = 60.0):
        self.url = endpoint.rstrip("/") + "/v1/score"
        self.timeout = timeout

    def score(self, request, schedule=None):
        body = encode_request(request)
        req = urllib.request.Request(self.url, data=body, method="POST",
                                     headers={"Content-Type": "application/octet-stream"})
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                payload = resp.read()
        except urllib.error.HTTPError as exc:
            if exc.code >= 500:
                raise TransportError(f"score server error {exc.code} at {self.url}") from exc
            raise ProtocolError(f"score server rejected request: HTTP {exc.code}") from exc
        except (urllib.error.URLError, socket.timeout, ConnectionError, OSError) as exc:
            raise TransportError(f"cannot reach score server at {self.url}: {exc}") from exc
        return decode_response(payload, request)


def remote_provider(endpoint: str, timeout: float = 60.0) -> RemoteProvider:
    return RemoteProvider(endpoint, timeout)


def zeros_scorer(request: ScoreRequest) -> ScoreResponse:
    z = np.zeros(request.x_t.shape)
    zd = np.zeros(request.d_t.shape)
    return ScoreResponse(z, z, z, zd, zd, zd)


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"

    def do_POST(self):
        if self.path != "/v1/score":
            self.send_error(404)
            return
        length = int(self.headers.get("Content-Length", 0))
        body = self.rfile.read(length)
        try:
            req = decode_request(body)
        except ProtocolError as exc:
            self.send_error(400, str(exc))
            return
        try:
            out = encode_response(self.server.scorer(req), req)
        except Exception as exc:  # scorer bugs surface as a server error, not a hangup
            self.send_error(500, f"scorer failed: {exc}")
            return
        self.send_response(200)
        self.send_header("Content-Type", "application/octet-stream")
        self.send_header("Content-Length", str(len(out)))
        self.end_headers()
        self.wfile.write(out)

    def log_message(self, *args):
        pass


class EchoServer:
    """Reference score server for integration tests.

    ``scorer`` maps a decoded request to a response; the default answers
    zeros for every prediction. Usable as a context manager.
    """

    def __init__(self, host="127.0.0.1", port=0, scorer=zeros_scorer):
        self.httpd = ThreadingHTTPServer((host, port), _Handler)
        self.httpd.scorer = scorer
        self.httpd.daemon_threads = True
        self._thread = None

    @property
    def url(self):
        host, port = self.httpd.server_address[:2]
        return f"http://{host}:{port}"

    def start(self):
        self._thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)
        self._thread.start()
        return self

    def serve_forever(self):
        self.httpd.serve_forever()

    def stop(self):
        # shutdown() blocks until serve_forever exits, so only call it when running
        if self._thread is not None:
            self.httpd.shutdown()
            self._thread.join()
            self._thread = None
        self.httpd.server_close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()
