"""Service tests: cache contract, concurrency, request validation, retention."""

import threading
from concurrent.futures import ThreadPoolExecutor
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import httpx
import numpy as np
import pytest

from tldrsum import features as ft
from tldrsum import serve as srv
from tldrsum import tensor as tt
from tldrsum.model import Model, ModelConfig, save_checkpoint
from tldrsum.rng import Stream
from tldrsum.serve import CacheStore, SummarizerService, content_hash, make_server
from tldrsum.tensor import Tensor

PAYLOAD_MARK = b"UNIQUE-PAYLOAD-MARK-9301"


@pytest.fixture(scope="module")
def service_dir(tmp_path_factory):
    """Untrained tiny checkpoint + vocabulary; decoding is deterministic."""
    root = tmp_path_factory.mktemp("svc")
    config = ModelConfig(d_model=16, n_heads=2, n_components=2, enc_depth=1, dec_depth=1,
                         d_z=4, flow_depth=2, vocab_size=96, fixed_audio_len=4, ffn_mult=2)
    vocab = ft.build_vocab(["the quick brown fox jumps over lazy dogs while scholars "
                            "measure pipelines and write summaries"], 96)
    config.vocab_size = len(vocab)
    model = Model(config, seed=9)
    save_checkpoint(root / "checkpoint.mtlg", model)
    vocab.save(root / "vocab.txt")
    return root


@pytest.fixture()
def service(service_dir, tmp_path):
    return SummarizerService(service_dir / "checkpoint.mtlg", service_dir / "vocab.txt",
                             tmp_path / "cache.jsonl", beams=2, max_len=8)


@pytest.fixture()
def server(service):
    httpd = make_server(service, 0)
    thread = threading.Thread(target=httpd.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{httpd.server_address[1]}", service
    httpd.shutdown()


def wav_bytes(freq=330.0, tmp_path=None, seconds=0.2):
    import io
    import wave as wave_mod

    t = np.arange(int(16000 * seconds)) / 16000.0
    pcm = (0.3 * np.sin(2 * np.pi * freq * t) * 32768).astype("<i2")
    buf = io.BytesIO()
    with wave_mod.open(buf, "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(16000)
        wf.writeframes(pcm.tobytes())
    return buf.getvalue()


def video_bytes(seed=3):
    blocks = Stream(seed, "vid").normal(2 * 2048).reshape(2, 2048)
    return tt.tensor_to_bytes(Tensor(blocks))


class TestContentHash:
    def test_field_order_matters(self):
        a = content_hash([b"text", b"audio"])
        b = content_hash([b"audio", b"text"])
        assert a != b
        assert len(a) == 64 and a == a.lower()

    def test_stable(self):
        assert content_hash([b"x", b"", b"y"]) == content_hash([b"x", b"", b"y"])


class TestCacheStore:
    def test_put_get_and_reload(self, tmp_path):
        store = CacheStore(tmp_path / "c.jsonl")
        store.put("k1", "hello", {"title": "t"})
        assert store.get("k1")["summary"] == "hello"
        again = CacheStore(tmp_path / "c.jsonl")  # index rebuilt from the log
        assert again.get("k1")["summary"] == "hello"

    def test_compaction_keeps_last(self, tmp_path):
        store = CacheStore(tmp_path / "c.jsonl")
        store.put("k1", "one", {})
        store.put("k1", "two", {})
        store.put("k2", "x", {})
        assert len((tmp_path / "c.jsonl").read_text().splitlines()) == 3
        kept = store.compact()
        assert kept == 2
        lines = (tmp_path / "c.jsonl").read_text().splitlines()
        assert len(lines) == 2
        reloaded = CacheStore(tmp_path / "c.jsonl")
        assert reloaded.get("k1")["summary"] == "two"


class TestSummarizeEndpoint:
    def test_multipart_roundtrip_and_cache(self, server):
        url, service = server
        files = {"text": ("doc.txt", b"the quick brown fox measures pipelines"),
                 "audio": ("a.wav", wav_bytes()),
                 "video": ("v.tnsr", video_bytes())}
        with httpx.Client() as client:
            first = client.post(f"{url}/summarize", files=files).json()
            calls_after_first = service.model_calls
            second = client.post(f"{url}/summarize", files=files).json()
        assert first["cached"] is False
        assert second["cached"] is True
        assert second["summary"] == first["summary"]  # byte-identical text
        assert first["id"] == second["id"]
        assert "elapsed_ms" in first and "elapsed_ms" in second
        assert service.model_calls == calls_after_first  # cache hit skipped the model

    def test_text_only_request(self, server):
        url, _ = server
        with httpx.Client() as client:
            resp = client.post(f"{url}/summarize", files={"text": ("d.txt", b"lazy dogs")})
        assert resp.status_code == 200
        assert isinstance(resp.json()["summary"], str)

    def test_metadata_persisted_not_inputs(self, server, tmp_path):
        url, service = server
        files = {"text": ("d.txt", PAYLOAD_MARK),
                 "title": (None, "my title"), "year": (None, "2024")}
        with httpx.Client() as client:
            resp = client.post(f"{url}/summarize", files=files)
        assert resp.status_code == 200
        entry = service.cache.get(resp.json()["id"])
        assert entry["metadata"] == {"title": "my title", "year": "2024"}
        assert "created_at" in entry

    def test_four_concurrent_distinct_requests(self, server):
        url, _ = server
        texts = [f"quick brown fox number {i} jumps" for i in range(4)]

        def post(text):
            with httpx.Client(timeout=60) as client:
                return client.post(f"{url}/summarize",
                                   files={"text": ("d.txt", text.encode())})

        with ThreadPoolExecutor(max_workers=4) as pool:
            results = list(pool.map(post, texts))
        assert all(r.status_code == 200 for r in results)
        assert len({r.json()["id"] for r in results}) == 4

    def test_missing_text_field_is_400(self, server):
        url, _ = server
        with httpx.Client() as client:
            resp = client.post(f"{url}/summarize", files={"audio": ("a.wav", wav_bytes())})
        assert resp.status_code == 400

    def test_bad_content_type_is_400(self, server):
        url, _ = server
        with httpx.Client() as client:
            resp = client.post(f"{url}/summarize", content=b"plain",
                               headers={"Content-Type": "text/plain"})
        assert resp.status_code == 400

    def test_bad_wav_is_400(self, server):
        url, _ = server
        with httpx.Client() as client:
            resp = client.post(f"{url}/summarize",
                               files={"text": ("d.txt", b"x"), "audio": ("a.wav", b"notawav")})
        assert resp.status_code == 400

    def test_payload_cap_is_413(self, server, monkeypatch):
        url, _ = server
        monkeypatch.setattr(srv, "PAYLOAD_LIMIT", 64)
        with httpx.Client() as client:
            resp = client.post(f"{url}/summarize",
                               files={"text": ("d.txt", b"y" * 4096)})
        assert resp.status_code == 413

    def test_queue_full_is_503(self, server):
        url, service = server
        service.queue_limit = 0
        try:
            with httpx.Client() as client:
                resp = client.post(f"{url}/summarize", files={"text": ("d.txt", b"z")})
            assert resp.status_code == 503
        finally:
            service.queue_limit = srv.QUEUE_LIMIT

    def test_no_payload_bytes_retained(self, server, tmp_path):
        url, service = server
        with httpx.Client() as client:
            resp = client.post(f"{url}/summarize", files={"text": ("d.txt", PAYLOAD_MARK)})
        assert resp.status_code == 200
        # scan everything the service could have written
        for path in tmp_path.rglob("*"):
            if path.is_file():
                assert PAYLOAD_MARK not in path.read_bytes(), path


class TestUrlMode:
    @pytest.fixture()
    def file_host(self):
        payload = {"/doc.txt": b"scholars write summaries about pipelines"}

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):
                pass

            def do_GET(self):
                blob = payload.get(self.path)
                if blob is None:
                    self.send_response(404)
                    self.end_headers()
                    return
                self.send_response(200)
                self.send_header("Content-Length", str(len(blob)))
                self.end_headers()
                self.wfile.write(blob)

        httpd = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        thread = threading.Thread(target=httpd.serve_forever, daemon=True)
        thread.start()
        yield f"http://127.0.0.1:{httpd.server_address[1]}", payload
        httpd.shutdown()

    def test_url_fetch_matches_upload(self, server, file_host):
        url, service = server
        host, payload = file_host
        with httpx.Client() as client:
            via_upload = client.post(f"{url}/summarize",
                                     files={"text": ("d.txt", payload["/doc.txt"])}).json()
            via_url = client.post(f"{url}/summarize",
                                  json={"text_url": f"{host}/doc.txt"}).json()
        assert via_url["id"] == via_upload["id"]
        assert via_url["cached"] is True  # same content hash, second request
        assert via_url["summary"] == via_upload["summary"]

    def test_missing_text_url_is_400(self, server):
        url, _ = server
        with httpx.Client() as client:
            resp = client.post(f"{url}/summarize", json={"audio_url": "http://x/y"})
        assert resp.status_code == 400

    def test_bad_scheme_is_400(self, server):
        url, _ = server
        with httpx.Client() as client:
            resp = client.post(f"{url}/summarize", json={"text_url": "ftp://host/doc"})
        assert resp.status_code == 400


class TestHealth:
    def test_health_reports_version_and_hash(self, server):
        url, service = server
        with httpx.Client() as client:
            body = client.get(f"{url}/health").json()
        assert body["model_hash"] == service.model_hash
        assert body["version"]

    def test_health_not_blocked_by_queue(self, server):
        url, service = server
        service.queue_limit = 0
        try:
            with httpx.Client() as client:
                assert client.get(f"{url}/health").status_code == 200
        finally:
            service.queue_limit = srv.QUEUE_LIMIT

    def test_unknown_path_404(self, server):
        url, _ = server
        with httpx.Client() as client:
            assert client.get(f"{url}/nope").status_code == 404
            assert client.post(f"{url}/nope").status_code == 404


class TestServiceDeterminism:
    def test_same_input_same_summary_across_instances(self, service_dir, tmp_path):
        a = SummarizerService(service_dir / "checkpoint.mtlg", service_dir / "vocab.txt",
                              tmp_path / "c1.jsonl", beams=2, max_len=8)
        b = SummarizerService(service_dir / "checkpoint.mtlg", service_dir / "vocab.txt",
                              tmp_path / "c2.jsonl", beams=2, max_len=8)
        blob = b"brown fox pipelines"
        assert a.summarize_bytes(blob, None, None)["summary"] == \
            b.summarize_bytes(blob, None, None)["summary"]
