import numpy as np
import pytest

from splatgen.errors import ProtocolError, TransportError
from splatgen.guidance import (GuidanceConfig, NoiseSchedule, ScoreRequest, ScoreResponse,
                               dual_branch_delta)
from splatgen.remote import (EchoServer, RemoteProvider, decode_request, decode_response,
                             encode_request, encode_response, zeros_scorer)


def make_request(rng, b=2, h=5, w=7):
    return ScoreRequest(rng.normal(size=(b, h, w, 3)).astype(np.float32),
                        rng.normal(size=(b, h, w, 1)).astype(np.float32), 417,
                        "a person in a red coat", "blurry, ünïcode",
                        rng.uniform(size=(b, h, w, 3)).astype(np.float32))


def make_response(rng, b=2, h=5, w=7):
    rgb = [rng.normal(size=(b, h, w, 3)).astype(np.float32) for _ in range(3)]
    dep = [rng.normal(size=(b, h, w, 1)).astype(np.float32) for _ in range(3)]
    return ScoreResponse(*rgb, *dep)


class TestFrames:
    def test_request_roundtrip_bit_exact(self, rng):
        req = make_request(rng)
        back = decode_request(encode_request(req))
        assert (back.t, back.prompt, back.negative_prompt) == (417, req.prompt,
                                                               req.negative_prompt)
        for name in ("x_t", "d_t", "pose"):
            assert getattr(back, name).tobytes() == getattr(req, name).tobytes()

    def test_response_roundtrip_bit_exact(self, rng):
        req, resp = make_request(rng), make_response(rng)
        back = decode_response(encode_response(resp, req), req)
        for name in ("eps_cond", "eps_uncond", "eps_neg", "eps_cond_depth", "eps_uncond_depth",
                     "eps_neg_depth"):
            np.testing.assert_array_equal(getattr(back, name), getattr(resp, name))

    def test_header_layout(self, rng):
        req = make_request(rng, b=1, h=2, w=3)
        buf = encode_request(req)
        assert buf[:4] == b"SGSQ"
        assert int.from_bytes(buf[4:6], "little") == 1
        assert int.from_bytes(buf[8:12], "little") == 417
        assert [int.from_bytes(buf[i:i + 4], "little") for i in (12, 16, 20)] == [2, 3, 1]
        n_prompt = len(req.prompt.encode())
        n_neg = len(req.negative_prompt.encode())
        assert len(buf) == 24 + 8 + n_prompt + n_neg + 4 * 2 * 3 * (3 + 1 + 3)

    def test_wrong_height_names_field(self, rng):
        req = make_request(rng)
        resp = make_response(rng, h=6)
        with pytest.raises(ProtocolError, match="field H"):
            decode_response(encode_response(resp, req), req)

    def test_truncated_and_trailing(self, rng):
        req = make_request(rng)
        buf = encode_response(make_response(rng), req)
        with pytest.raises(ProtocolError, match="truncated"):
            decode_response(buf[:-4], req)
        with pytest.raises(ProtocolError, match="trailing"):
            decode_response(buf + b"\0\0\0\0", req)
        with pytest.raises(ProtocolError, match="magic"):
            decode_response(b"XXXX" + buf[4:], req)


class TestServer:
    def test_echo_zeros_algebra(self, rng):
        schedule = NoiseSchedule()
        cfg = GuidanceConfig()
        req = make_request(rng)
        with EchoServer() as server:
            resp = RemoteProvider(server.url, timeout=10).score(req)
        for name in ("eps_cond", "eps_uncond", "eps_neg"):
            assert not np.any(getattr(resp, name))
        eps_x = rng.normal(size=req.x_t.shape)
        eps_d = rng.normal(size=req.d_t.shape)
        adj_x, adj_d = dual_branch_delta(resp, eps_x, eps_d, req.t, schedule, cfg)
        # all classifier scores vanish, so the annealed adjoint is zero
        assert not np.any(adj_x) and not np.any(adj_d)
        vanilla = GuidanceConfig(mode="vanilla")
        adj_x, _ = dual_branch_delta(resp, eps_x, eps_d, req.t, schedule, vanilla)
        np.testing.assert_allclose(adj_x, -0.5 * eps_x)

    def test_scorer_payload_roundtrip(self, rng):
        def echo(request):
            return ScoreResponse(request.x_t, request.x_t * 2, request.pose, request.d_t,
                                 request.d_t, request.d_t)

        req = make_request(rng)
        with EchoServer(scorer=echo) as server:
            resp = RemoteProvider(server.url, timeout=10).score(req)
        assert resp.eps_cond.astype(np.float32).tobytes() == req.x_t.tobytes()
        assert resp.eps_neg.astype(np.float32).tobytes() == req.pose.tobytes()

    def test_server_wrong_shape(self, rng):
        def bad(request):
            b, h, w, _ = request.x_t.shape
            return zeros_scorer(ScoreRequest(np.zeros((b, h + 1, w, 3)),
                                             np.zeros((b, h + 1, w, 1)), request.t))

        with EchoServer(scorer=bad) as server:
            with pytest.raises(ProtocolError, match="field H"):
                RemoteProvider(server.url, timeout=10).score(make_request(rng))

    def test_server_error_is_retriable(self, rng):
        def boom(request):
            raise RuntimeError("out of memory")

        with EchoServer(scorer=boom) as server:
            with pytest.raises(TransportError):
                RemoteProvider(server.url, timeout=10).score(make_request(rng))

    def test_unreachable(self, rng):
        server = EchoServer()
        url = server.url
        server.stop()
        with pytest.raises(TransportError):
            RemoteProvider(url, timeout=2).score(make_request(rng))

    def test_not_found_is_protocol_error(self, rng):
        with EchoServer() as server:
            with pytest.raises(ProtocolError):
                RemoteProvider(server.url + "/nope", timeout=5).score(make_request(rng))
