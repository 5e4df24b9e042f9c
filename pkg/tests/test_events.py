import json
import socket
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import numpy as np
import pytest

from dhce.ehr import ClinicalEvent
from dhce.events import (EncoderConnectionError, EncoderDimensionError, EncoderHTTPError, EventRepresentation,
                         HashingEncoder, RemoteEncoder, aggregate_events, encode_visit_events, hashing_encode,
                         make_encoder, remote_encode, serialize_event)
from dhce.model import ModelParameters

GOLDEN = Path(__file__).parent / "data" / "golden_events.jsonl"


def golden_cases():
    rows = [json.loads(line) for line in GOLDEN.read_text(encoding="utf-8").splitlines()]
    return [(ClinicalEvent(r["type"], tuple(tuple(f) for f in r["features"])), r["text"]) for r in rows]


class TestSerialize:
    def test_template(self):
        e = ClinicalEvent("lab", (("glucose", "180"), ("hba1c", "7.2")))
        assert serialize_event(e).text == "[CLS] lab [SEP] glucose [SEP] 180 [SEP] hba1c [SEP] 7.2"
        assert serialize_event(e).event_type == "lab"

    def test_no_features(self):
        assert serialize_event(ClinicalEvent("lab")).text == "[CLS] lab"

    def test_deterministic(self):
        e = ClinicalEvent("rx", (("drug", "x"),))
        assert serialize_event(e) == serialize_event(e)

    def test_golden_corpus(self):
        cases = golden_cases()
        assert len(cases) == 20
        for event, text in cases:
            assert serialize_event(event).text.encode("utf-8") == text.encode("utf-8")

    def test_injective_on_corpus(self):
        texts = [serialize_event(e).text for e, _ in golden_cases()]
        assert len(set(texts)) == len(texts)


class TestHashing:
    def test_deterministic(self):
        a = hashing_encode(["[CLS] lab [SEP] k [SEP] 1", "[CLS] lab [SEP] k [SEP] 1"], 32, seed=7)
        assert a[0].tobytes() == a[1].tobytes()

    def test_empty_string(self):
        assert not hashing_encode([""], 16).any()

    def test_unit_norm(self):
        rows = hashing_encode([t for _, t in golden_cases()], 64, seed=1)
        np.testing.assert_allclose(np.linalg.norm(rows, axis=1), 1.0, rtol=0, atol=1e-12)

    def test_position_independent(self):
        texts = [t for _, t in golden_cases()]
        batch = hashing_encode(texts, 24, seed=3)
        for i, t in enumerate(texts):
            assert hashing_encode([t], 24, seed=3)[0].tobytes() == batch[i].tobytes()

    def test_seed_matters(self):
        t = ["[CLS] rx [SEP] drug [SEP] heparin"]
        assert not np.array_equal(hashing_encode(t, 64, 0), hashing_encode(t, 64, 1))

    def test_min_dim(self):
        with pytest.raises(ValueError):
            hashing_encode(["a"], 4)

    def test_encoder_memo_matches_function(self):
        enc = HashingEncoder(16, seed=2)
        texts = ["a b", "c", "a b"]
        np.testing.assert_array_equal(enc.encode(texts), hashing_encode(texts, 16, 2))
        np.testing.assert_array_equal(enc.encode(texts), hashing_encode(texts, 16, 2))


class _Stub(BaseHTTPRequestHandler):
    dim = 3
    reply_dim = 3
    fail_status = None

    def log_message(self, *args):
        pass

    def _send(self, status, payload):
        body = json.dumps(payload).encode() if not isinstance(payload, bytes) else payload
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def do_GET(self):
        self._send(200, {"dim": self.server.dim})

    def do_POST(self):
        if self.server.fail_status:
            self._send(self.server.fail_status, b"model overloaded")
            return
        texts = json.loads(self.rfile.read(int(self.headers["Content-Length"])))["texts"]
        self.server.requests.append(texts)
        vecs = [[float(len(t)), float(i), 0.5][: self.server.reply_dim] + [0.0] * (self.server.reply_dim - 3)
                for i, t in enumerate(texts)]
        self._send(200, {"vectors": vecs})


@pytest.fixture
def stub():
    server = ThreadingHTTPServer(("127.0.0.1", 0), _Stub)
    server.dim, server.reply_dim, server.fail_status, server.requests = 3, 3, None, []
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield server
    server.shutdown()
    server.server_close()


def url(server):
    return f"http://127.0.0.1:{server.server_address[1]}"


class TestRemote:
    def test_pass_through(self, stub):
        out = remote_encode(["abc", "de"], url(stub))
        np.testing.assert_array_equal(out, [[3.0, 0.0, 0.5], [2.0, 1.0, 0.5]])

    def test_order_and_memo(self, stub):
        enc = RemoteEncoder(url(stub))
        assert enc.dim == 3
        out = enc.encode(["xy", "abcd", "xy"])
        np.testing.assert_array_equal(out[:, 0], [2, 4, 2])
        enc.encode(["abcd"])
        assert stub.requests == [["xy", "abcd"]]

    def test_wrong_dim(self, stub):
        stub.reply_dim = 4
        with pytest.raises(EncoderDimensionError):
            RemoteEncoder(url(stub)).encode(["a"])

    def test_configured_dim_mismatch(self, stub):
        with pytest.raises(EncoderDimensionError):
            RemoteEncoder(url(stub), dim=8)

    def test_http_error(self, stub):
        stub.fail_status = 503
        with pytest.raises(EncoderHTTPError, match="503.*model overloaded") as info:
            RemoteEncoder(url(stub), retries=0).encode(["a"])
        assert info.value.status == 503

    def test_connection_error(self):
        with socket.socket() as s:
            s.bind(("127.0.0.1", 0))
            port = s.getsockname()[1]
        with pytest.raises(EncoderConnectionError):
            RemoteEncoder(f"http://127.0.0.1:{port}", timeout=1, retries=1)

    def test_make_encoder(self, stub):
        enc = make_encoder({"kind": "remote", "endpoint": url(stub)})
        assert enc.describe()["dim"] == 3
        with pytest.raises(ValueError):
            make_encoder({"kind": "bert"})


@pytest.fixture
def params():
    p = ModelParameters.initialize(5, 4, 16, seed=0)
    rng = np.random.default_rng(1)
    for name in ("event_attn_proj", "event_attn_ctx", "event_out", "event_default"):
        p[name].data = rng.normal(size=p[name].shape)
    return p


class TestAggregate:
    def test_type_pooling(self):
        enc = HashingEncoder(16)
        events = [ClinicalEvent("lab", (("a", "1"),)), ClinicalEvent("rx", (("b", "2"),)),
                  ClinicalEvent("lab", (("c", "3"),))]
        reps = encode_visit_events(events, enc)
        assert reps.types == ("lab", "rx")
        texts = [serialize_event(e).text for e in events]
        rows = enc.encode(texts)
        np.testing.assert_array_equal(reps.vectors[0], (rows[0] + rows[2]) / 2)

    def test_single_type(self, params):
        v = np.random.default_rng(2).normal(size=(1, 16))
        o_e, w = aggregate_events(EventRepresentation(("lab",), v), params, with_weights=True)
        np.testing.assert_allclose(o_e.data, v @ params["event_out"].data, rtol=0, atol=1e-14)
        np.testing.assert_array_equal(w.data, [[1.0]])

    def test_identical_types(self, params):
        v = np.tile(np.random.default_rng(3).normal(size=(1, 16)), (3, 1))
        o_e = aggregate_events(EventRepresentation(("a", "b", "c"), v), params)
        np.testing.assert_allclose(o_e.data, v[:1] @ params["event_out"].data, rtol=0, atol=1e-13)

    def test_zero_events(self, params):
        o_e = aggregate_events(encode_visit_events([], HashingEncoder(16)), params)
        assert o_e is params["event_default"]

    def test_weights_normalized(self, params):
        v = np.random.default_rng(4).normal(size=(3, 16))
        _, w = aggregate_events(EventRepresentation(("a", "b", "c"), v), params, with_weights=True)
        assert abs(w.data.sum() - 1) <= 1e-12 and (w.data > 0).all()

    def test_pure(self, params):
        enc = HashingEncoder(16)
        events = [ClinicalEvent("proc", (("x", "y"),))]
        a = aggregate_events(encode_visit_events(events, enc), params).data
        b = aggregate_events(encode_visit_events(events, HashingEncoder(16)), params).data
        assert a.tobytes() == b.tobytes()
