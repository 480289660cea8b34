import time

import pytest
from fastapi.testclient import TestClient

from cogworks.clock import TickingClock
from cogworks.platform import Platform, PlatformConfig
from cogworks.service import create_app


@pytest.fixture
def platform():
    p = Platform(PlatformConfig(seed=9), clock=TickingClock(1586131200.0)).boot()
    yield p
    p.shutdown()


@pytest.fixture
def client(platform):
    with TestClient(create_app(platform)) as c:
        yield c


def send_and_wait(ws, text, timeout=10.0):
    ws.send_json({"text": text})
    return ws.receive_json()


class TestChannelWebSocket:
    def test_login_turn_round_trip(self, client):
        with client.websocket_connect("/channel/web01") as ws:
            frame = send_and_wait(ws, "Hi Machine, my secret is ABCXYZ")
            assert "Welcome, operator1." in frame["reply"]
            assert frame["session"]
            assert frame["modality"] == "voice"

    def test_full_conversation(self, client):
        with client.websocket_connect("/channel/web01") as ws:
            send_and_wait(ws, "Hi Machine, my secret is ABCXYZ")
            oee = send_and_wait(ws, "Machine, what is the current OEE?")
            assert "0.84645" in oee["reply"]
            order = send_and_wait(
                ws,
                "activate a new working order for further 2300 units by the end of the following week",
            )
            assert "accepted" in order["reply"]

    def test_unknown_channel_autoregisters_with_modality(self, client):
        with client.websocket_connect("/channel/console-x?modality=text") as ws:
            frame = send_and_wait(ws, "hello?")
            assert frame["modality"] == "text"
            assert not frame["reply"].startswith("simulated-speech")

    def test_bad_frame_reports_error(self, client):
        with client.websocket_connect("/channel/web01") as ws:
            ws.send_json({"nope": 1})
            frame = ws.receive_json()
            assert "error" in frame


class TestHttpEndpoints:
    def test_metrics_shape(self, client):
        with client.websocket_connect("/channel/web01") as ws:
            send_and_wait(ws, "Hi Machine, my secret is ABCXYZ")
        response = client.get("/metrics")
        assert response.status_code == 200
        body = response.json()
        assert body["broker"]["published"] > 0
        assert "redelivered" in body["broker"]
        assert "dead_lettered" in body["broker"]
        for record in body["benchmarks"].values():
            assert record["p95"] >= record["p50"]

    def test_session_endpoint(self, client, platform):
        with client.websocket_connect("/channel/web01") as ws:
            frame = send_and_wait(ws, "Hi Machine, my secret is ABCXYZ")
            session_id = frame["session"]
        response = client.get(f"/sessions/{session_id}")
        assert response.status_code == 200
        body = response.json()
        assert body["principal"] == "operator1"
        assert body["authenticated"] is True
        assert body["context"]["active_intent"] == "#LOGIN"

    def test_session_not_found(self, client):
        assert client.get("/sessions/session-ghost").status_code == 404

    def test_chaos_endpoint_kill_consumer_keeps_service(self, client, platform):
        with client.websocket_connect("/channel/web01") as ws:
            send_and_wait(ws, "Hi Machine, my secret is ABCXYZ")
            response = client.post("/chaos", json={"kill_consumer": "core-2"})
            assert response.status_code == 200
            assert response.json()["applied"] == {"killed_consumer": "core-2"}
            frame = send_and_wait(ws, "Machine, what is the current OEE?")
            assert "0.84645" in frame["reply"]
        assert "core-2" not in platform.core_member_names()

    def test_chaos_unknown_consumer_404(self, client):
        assert client.post("/chaos", json={"kill_consumer": "core-99"}).status_code == 404

    def test_chaos_ack_drop_toggle(self, client):
        response = client.post("/chaos", json={"ack_drop_prob": 0.25, "seed": 3})
        assert response.json()["applied"] == {"ack_drop_prob": 0.25}
        response = client.post("/chaos", json={"ack_drop_prob": 0.0})
        assert response.json()["applied"] == {"ack_drop_prob": 0.0}
