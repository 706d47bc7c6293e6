import http.server
import json
import threading

import httpx
import numpy as np
import pytest

from scenedistill.guidance import (GuidanceError, GuidanceProtocolError,
                                   GuidanceTransportError, MockGuidance,
                                   RemoteGuidance, TextCondition, add_noise,
                                   build_condition, ddpm_linear_schedule,
                                   decode_f32, encode_f32, flat_prompt,
                                   linear_schedule, noise_request_body)
from scenedistill.render import camera_from_angles, view_prompt_weights


def front_condition(role="human", prompt="a photo of a person, 8K, HD"):
    cam = camera_from_angles((0, 0, 0), 2.0, 0.0, 0.0)
    return TextCondition(prompt=prompt, view_weights=view_prompt_weights(cam),
                         role=role)


class TestSchedules:
    def test_linear_monotone_in_range(self):
        s = linear_schedule()
        ts = np.linspace(0.02, 0.98, 33)
        vals = [s.alpha_bar(t) for t in ts]
        assert all(0 < v < 1 for v in vals)
        assert all(a > b for a, b in zip(vals, vals[1:]))

    def test_ddpm_table_monotone(self):
        s = ddpm_linear_schedule()
        ts = np.linspace(0.02, 0.98, 33)
        vals = [s.alpha_bar(t) for t in ts]
        assert all(0 < v < 1 for v in vals)
        assert all(a >= b for a, b in zip(vals, vals[1:]))

    def test_out_of_domain_rejected(self):
        with pytest.raises(GuidanceError):
            linear_schedule().alpha_bar(0.0)


class TestAddNoise:
    def test_small_t_is_near_identity(self):
        x = np.random.default_rng(0).uniform(size=(4, 4, 3))
        eps = np.random.default_rng(1).standard_normal((4, 4, 3))
        out = add_noise(x, 1e-9, eps, linear_schedule())
        assert out == pytest.approx(x, abs=1e-4)

    def test_quarter_alpha_bar_closed_form(self):
        # alpha_bar(0.75) = 0.25 under the linear schedule: x_t = 0.5 * 1 + 0
        x = np.ones((2, 2, 3))
        eps = np.zeros((2, 2, 3))
        out = add_noise(x, 0.75, eps, linear_schedule())
        assert out == pytest.approx(np.full_like(x, 0.5))

    def test_zero_eps_low_t(self):
        x = np.random.default_rng(2).uniform(size=(3, 3, 3))
        out = add_noise(x, 1e-12, np.zeros_like(x), linear_schedule())
        assert out == pytest.approx(x)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(GuidanceError):
            add_noise(np.zeros((2, 2, 3)), 0.5, np.zeros((2, 3, 3)), linear_schedule())


class TestMockGuidance:
    def test_inversion_recovers_epsilon_exactly(self):
        rng = np.random.default_rng(3)
        target = rng.uniform(size=(8, 8, 3))
        provider = MockGuidance({"human": target})
        eps = rng.standard_normal(target.shape)
        t = 0.37
        x_t = add_noise(target, t, eps, provider.schedule())
        eps_hat = provider.predict_noise(x_t, t, front_condition())
        assert eps_hat == pytest.approx(eps, abs=1e-12)

    def test_residual_sign_tracks_render_minus_target(self):
        gray = np.full((4, 4, 3), 0.5)
        white = np.ones((4, 4, 3))
        provider = MockGuidance({"human": gray})
        t = 0.5
        eps = np.random.default_rng(4).standard_normal(white.shape)
        x_t = add_noise(white, t, eps, provider.schedule())
        residual = provider.predict_noise(x_t, t, front_condition()) - eps
        ab = provider.schedule().alpha_bar(t)
        expected = np.sqrt(ab / (1 - ab)) * (white - gray)
        assert residual == pytest.approx(expected, abs=1e-12)

    def test_missing_role_rejected(self):
        provider = MockGuidance({"human": np.zeros((4, 4, 3))})
        with pytest.raises(GuidanceError):
            provider.predict_noise(np.zeros((4, 4, 3)), 0.5, front_condition("object"))

    def test_embeddings_unit_norm_and_deterministic(self):
        provider = MockGuidance({}, embed_dim=32)
        a = provider.embed_text("a guitar")
        b = provider.embed_text("a guitar")
        c = provider.embed_text("a piano")
        assert np.array_equal(a, b)
        assert np.linalg.norm(a) == pytest.approx(1.0)
        assert abs(float(a @ c)) < 0.9

    def test_embed_image_deterministic(self):
        provider = MockGuidance({}, embed_dim=16)
        img = np.random.default_rng(5).uniform(size=(16, 16, 3))
        assert np.array_equal(provider.embed_image(img), provider.embed_image(img))


class TestConditions:
    def test_prompt_assembly(self):
        cam = camera_from_angles((0, 0, 0), 2.0, 0.0, 0.0)
        cond = build_condition("a tall wizard", "human", cam)
        assert cond.prompt == "a photo of a tall wizard, 8K, HD"
        head = build_condition("a tall wizard", "human_head", cam)
        assert head.prompt == "a photo of the head of a tall wizard, 8K, HD"

    def test_default_guidance_scale_twenty(self):
        cond = front_condition()
        assert cond.guidance_scale == 20.0

    def test_flat_prompt_appends_argmax_view(self):
        cam = camera_from_angles((0, 0, 0), 2.0, 0.0, 180.0)
        cond = build_condition("a dog", "object", cam)
        assert flat_prompt(cond).endswith(", back view")

    def test_empty_prompt_rejected(self):
        cam = camera_from_angles((0, 0, 0), 2.0, 0.0, 0.0)
        with pytest.raises(GuidanceError):
            TextCondition(prompt="", view_weights=view_prompt_weights(cam),
                          role="human")


class TestSerialization:
    def test_f32_round_trip_bit_exact(self):
        arr = np.random.default_rng(6).standard_normal((64, 64, 3)).astype("<f4")
        back = decode_f32(encode_f32(arr), arr.shape)
        assert np.array_equal(back.astype("<f4"), arr)

    def test_payload_size_arithmetic(self):
        import base64
        img = np.zeros((64, 64, 3))
        body = noise_request_body("r1", img, 0.5, front_condition())
        raw = base64.b64decode(body["image_b64"])
        assert len(raw) == 49_152       # 12,288 f32 values * 4 bytes
        decoded = decode_f32(body["image_b64"], (64, 64, 3))
        assert decoded.size == 12_288

    def test_wrong_size_rejected(self):
        with pytest.raises(GuidanceProtocolError):
            decode_f32(encode_f32(np.zeros(5)), (6,))


class _StubHandler(http.server.BaseHTTPRequestHandler):
    """Echo-zeros guidance stub speaking the wire protocol."""

    fail_first = 0  # class-level counter: number of requests to drop

    def _send(self, payload: dict, code: int = 200):
        raw = json.dumps(payload).encode()
        self.send_response(code)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(raw)))
        self.end_headers()
        self.wfile.write(raw)

    def do_GET(self):
        self._send({"version": "stub-1"})

    def do_POST(self):
        if _StubHandler.fail_first > 0:
            _StubHandler.fail_first -= 1
            self.connection.close()
            return
        length = int(self.headers["Content-Length"])
        body = json.loads(self.rfile.read(length))
        if self.path == "/v1/noise_prediction":
            n = body["width"] * body["height"] * body["channels"]
            sched = ddpm_linear_schedule()
            self._send({
                "request_id": body["request_id"],
                "noise_b64": encode_f32(np.zeros(n)),
                "schedule": {"name": sched.name,
                             "alpha_bar_at_t": sched.alpha_bar(body["t"])},
            })
        elif self.path == "/v1/embed_text":
            vec = np.zeros(8)
            vec[0] = 1.0
            self._send({"dim": 8, "vector_b64": encode_f32(vec)})
        else:
            self._send({"error": "unknown"}, code=404)

    def log_message(self, *args):
        pass


@pytest.fixture
def stub_server():
    server = http.server.ThreadingHTTPServer(("127.0.0.1", 0), _StubHandler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{server.server_address[1]}"
    server.shutdown()


class TestRemoteGuidance:
    def test_zero_noise_round_trip(self, stub_server):
        client = RemoteGuidance(stub_server)
        x_t = np.random.default_rng(7).standard_normal((8, 8, 3))
        out = client.predict_noise(x_t, 0.5, front_condition())
        assert out.shape == x_t.shape
        assert np.all(out == 0.0)

    def test_health(self, stub_server):
        assert RemoteGuidance(stub_server).health()["version"] == "stub-1"

    def test_embed_text(self, stub_server):
        vec = RemoteGuidance(stub_server).embed_text("anything")
        assert vec.shape == (8,) and vec[0] == 1.0

    def test_schedule_mismatch_is_protocol_error(self, stub_server):
        client = RemoteGuidance(stub_server, schedule=linear_schedule())
        with pytest.raises(GuidanceProtocolError):
            client.predict_noise(np.zeros((4, 4, 3)), 0.5, front_condition())

    def test_transport_retry_then_success(self, stub_server):
        _StubHandler.fail_first = 2
        client = RemoteGuidance(stub_server, retries=3, backoff=0.01)
        out = client.predict_noise(np.zeros((4, 4, 3)), 0.5, front_condition())
        assert out.shape == (4, 4, 3)

    def test_transport_exhaustion_raises(self):
        client = RemoteGuidance("http://127.0.0.1:9", retries=1, backoff=0.01,
                                timeout=0.2)
        with pytest.raises(GuidanceTransportError):
            client.predict_noise(np.zeros((4, 4, 3)), 0.5, front_condition())


class TestWireFixture:
    def test_recorded_fixture_round_trips_bit_exactly(self, tmp_path):
        rng = np.random.default_rng(8)
        image = rng.uniform(size=(16, 16, 3)).astype("<f4").astype(np.float64)
        cond = front_condition()
        body = noise_request_body("fix-1", image, 0.5, cond)
        noise = rng.standard_normal((16, 16, 3)).astype("<f4").astype(np.float64)
        response = {"request_id": "fix-1", "noise_b64": encode_f32(noise),
                    "schedule": {"name": "ddpm-linear-1000", "alpha_bar_at_t": 0.1}}
        path = tmp_path / "fixture.json"
        from scenedistill.guidance import load_wire_fixture, save_wire_fixture
        save_wire_fixture(path, body, response)
        req, resp = load_wire_fixture(path)
        assert req == body
        assert np.array_equal(decode_f32(req["image_b64"], (16, 16, 3)), image)
        assert np.array_equal(decode_f32(resp["noise_b64"], (16, 16, 3)), noise)
