"""Caching inference service.

POST /summarize takes a multipart upload (field "text" required, "audio" WAV
and "video" feature tensors optional) or a JSON body with text_url /
audio_url / video_url to fetch. Responses are keyed by the SHA-256 of the
concatenated input byte streams in field order: a repeat request is answered
from the append-only cache log without touching the model.

Uploads are processed entirely in memory and discarded once the summary
exists; only the summary and request metadata are persisted, and no client
identity is logged or stored. Up to four inferences run concurrently; beyond
a queue depth of 16 the service sheds load with 503. GET /health never waits
on inference.
"""

from __future__ import annotations

import hashlib
import io
import json
import re
import threading
import time
import urllib.request
import wave
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

from . import __version__
from .rng import Stream
from .data import METADATA_FIELDS
from .decoder import beam_search
from . import features as ft
from .model import SampleInputs, load_checkpoint
from . import tensor as tt

PAYLOAD_LIMIT = 64 * 1024 * 1024
QUEUE_LIMIT = 16
MAX_CONCURRENT = 4
FETCH_TIMEOUT = 60.0
INPUT_FIELDS = ("text", "audio", "video")


class RequestError(ValueError):
    """Maps to HTTP 400."""


def content_hash(parts: list[bytes]) -> str:
    digest = hashlib.sha256()
    for part in parts:
        digest.update(part)
    return digest.hexdigest()


class CacheStore:
    """Append-only JSON-lines log with an in-memory index rebuilt at startup."""

    def __init__(self, path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self.index: dict[str, dict] = {}
        if self.path.exists():
            with open(self.path, "r", encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if line:
                        entry = json.loads(line)
                        self.index[entry["content_hash"]] = entry

    def get(self, key: str) -> dict | None:
        with self._lock:
            return self.index.get(key)

    def put(self, key: str, summary: str, metadata: dict) -> dict:
        entry = {"content_hash": key, "summary": summary, "metadata": metadata,
                 "created_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())}
        with self._lock:
            self.index[key] = entry
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(entry, ensure_ascii=False) + "\n")
        return entry

    def compact(self) -> int:
        """Rewrite the log keeping only the newest entry per hash; returns the
        number of surviving entries."""
        with self._lock:
            tmp = self.path.with_suffix(".compact")
            with open(tmp, "w", encoding="utf-8") as fh:
                for entry in self.index.values():
                    fh.write(json.dumps(entry, ensure_ascii=False) + "\n")
            tmp.replace(self.path)
            return len(self.index)


def parse_multipart(content_type: str, body: bytes) -> dict[str, bytes]:
    match = re.search(r'boundary="?([^";]+)"?', content_type)
    if not match:
        raise RequestError("multipart body without boundary")
    boundary = b"--" + match.group(1).encode("utf-8")
    fields: dict[str, bytes] = {}
    for chunk in body.split(boundary)[1:]:
        if chunk.strip() in (b"", b"--"):
            continue
        chunk = chunk.lstrip(b"\r\n")
        header_blob, _, payload = chunk.partition(b"\r\n\r\n")
        payload = payload.rstrip(b"\r\n")
        name = None
        for line in header_blob.split(b"\r\n"):
            text = line.decode("utf-8", "replace")
            if text.lower().startswith("content-disposition"):
                found = re.search(r'name="([^"]+)"', text)
                if found:
                    name = found.group(1)
        if name:
            fields[name] = payload
    return fields


def fetch_url(url: str, limit: int = PAYLOAD_LIMIT) -> bytes:
    if not url.startswith(("http://", "https://")):
        raise RequestError(f"unsupported URL scheme in {url!r}")
    with urllib.request.urlopen(url, timeout=FETCH_TIMEOUT) as resp:
        blob = resp.read(limit + 1)
    if len(blob) > limit:
        raise PayloadTooLarge(f"fetched resource exceeds {limit} bytes")
    return blob


class PayloadTooLarge(ValueError):
    """Maps to HTTP 413."""


class SummarizerService:
    """Model + cache behind thread-safe request handling."""

    def __init__(self, checkpoint_path, vocab_path, cache_path,
                 beams: int = 4, max_len: int = 40, block_trigrams: bool = True,
                 length_penalty: float = 0.7, max_concurrent: int = MAX_CONCURRENT,
                 queue_limit: int = QUEUE_LIMIT):
        self.model, _ = load_checkpoint(checkpoint_path)
        self.vocab = ft.Vocabulary.load(vocab_path)
        self.cache = CacheStore(cache_path)
        self.beams = beams
        self.max_len = max_len
        self.block_trigrams = block_trigrams
        self.length_penalty = length_penalty
        with open(checkpoint_path, "rb") as fh:
            self.model_hash = hashlib.sha256(fh.read()).hexdigest()[:16]
        self._inference_slots = threading.Semaphore(max_concurrent)
        self.queue_limit = queue_limit
        self._inflight = 0
        self._inflight_lock = threading.Lock()
        self.model_calls = 0

    # -- request admission ------------------------------------------------------

    def admit(self) -> bool:
        with self._inflight_lock:
            if self._inflight >= self.queue_limit:
                return False
            self._inflight += 1
            return True

    def release(self) -> None:
        with self._inflight_lock:
            self._inflight -= 1

    # -- core ---------------------------------------------------------------------

    def summarize_bytes(self, text_blob: bytes, audio_blob: bytes | None,
                        video_blob: bytes | None, metadata: dict | None = None) -> dict:
        key = content_hash([text_blob, audio_blob or b"", video_blob or b""])
        hit = self.cache.get(key)
        if hit is not None:
            return {"summary": hit["summary"], "cached": True, "id": key}

        try:
            text = text_blob.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise RequestError(f"text payload is not UTF-8: {exc}") from None
        audio = None
        if audio_blob:
            try:
                audio = ft.read_wav(io.BytesIO(audio_blob))
            except (ft.FeatureError, wave.Error, EOFError) as exc:
                raise RequestError(f"bad WAV payload: {exc}") from None
        video_mean = None
        if video_blob:
            try:
                blocks, _ = tt.tensor_from_bytes(video_blob)
            except ValueError as exc:
                raise RequestError(f"bad video tensor payload: {exc}") from None
            if blocks.data.ndim != 2 or blocks.shape[1] != ft.VIDEO_FEAT_DIM:
                raise RequestError(f"video features must be [B x {ft.VIDEO_FEAT_DIM}]")
            video_mean = blocks.data.mean(axis=0)

        token_ids = ft.tokenize(text, self.vocab)
        mfcc = None
        if audio is not None:
            pcm, rate = audio
            try:
                mfcc = ft.mfcc(ft.resample_mono(pcm, rate))
            except ft.FeatureError as exc:
                raise RequestError(str(exc)) from None
        inputs = SampleInputs(key=key, token_ids=token_ids, audio_mfcc=mfcc,
                              video_mean=video_mean)

        with self._inference_slots:
            self.model_calls += 1
            eps = Stream(self.model.seed, "eps", key)
            memory, _ = self.model.forward_memory(inputs, eps)
            ids = beam_search(self.model.decoder, memory, self.model.embedding,
                              beams=self.beams, max_len=self.max_len,
                              block_trigrams=self.block_trigrams,
                              length_penalty=self.length_penalty)
        summary = self.vocab.decode(ids)
        clean_meta = {k: metadata[k] for k in METADATA_FIELDS if metadata and k in metadata}
        self.cache.put(key, summary, clean_meta)
        return {"summary": summary, "cached": False, "id": key}


class _Handler(BaseHTTPRequestHandler):
    service: SummarizerService  # injected by make_server

    def log_message(self, *args) -> None:
        pass  # no client identity in logs

    def _send(self, code: int, payload: dict) -> None:
        blob = json.dumps(payload).encode("utf-8")
        self.send_response(code)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(blob)))
        self.end_headers()
        self.wfile.write(blob)

    def do_GET(self) -> None:
        if self.path == "/health":
            self._send(200, {"version": __version__, "model_hash": self.service.model_hash})
        else:
            self._send(404, {"error": "not found"})

    def do_POST(self) -> None:
        if self.path != "/summarize":
            self._send(404, {"error": "not found"})
            return
        if not self.service.admit():
            self._send(503, {"error": "queue full"})
            return
        started = time.monotonic()
        try:
            length = int(self.headers.get("Content-Length", "0"))
            if length > PAYLOAD_LIMIT:
                self._send(413, {"error": f"payload over {PAYLOAD_LIMIT} bytes"})
                return
            body = self.rfile.read(length)
            content_type = self.headers.get("Content-Type", "")
            metadata = {}
            if content_type.startswith("multipart/form-data"):
                fields = parse_multipart(content_type, body)
                if "text" not in fields:
                    raise RequestError("multipart request must include a 'text' file")
                blobs = {name: fields.get(name) for name in INPUT_FIELDS}
                metadata = {k: fields[k].decode("utf-8", "replace")
                            for k in METADATA_FIELDS if k in fields}
            elif content_type.startswith("application/json"):
                try:
                    obj = json.loads(body.decode("utf-8"))
                except (json.JSONDecodeError, UnicodeDecodeError) as exc:
                    raise RequestError(f"bad JSON body: {exc}") from None
                if "text_url" not in obj:
                    raise RequestError("JSON request must include text_url")
                blobs = {"text": fetch_url(obj["text_url"])}
                for name in ("audio", "video"):
                    url = obj.get(f"{name}_url")
                    blobs[name] = fetch_url(url) if url else None
                metadata = obj.get("metadata") or {}
            else:
                raise RequestError(f"unsupported content type {content_type!r}")

            result = self.service.summarize_bytes(blobs["text"], blobs.get("audio"),
                                                  blobs.get("video"), metadata)
            result["elapsed_ms"] = int((time.monotonic() - started) * 1000)
            self._send(200, result)
        except RequestError as exc:
            self._send(400, {"error": str(exc)})
        except PayloadTooLarge as exc:
            self._send(413, {"error": str(exc)})
        except Exception as exc:  # defensive: never kill the worker thread
            self._send(500, {"error": f"internal error: {exc}"})
        finally:
            self.service.release()


def make_server(service: SummarizerService, port: int) -> ThreadingHTTPServer:
    handler = type("BoundHandler", (_Handler,), {"service": service})
    server = ThreadingHTTPServer(("127.0.0.1", port), handler)
    server.daemon_threads = True
    return server


def serve_forever(checkpoint_path, vocab_path, cache_path, port: int, **kwargs) -> None:
    service = SummarizerService(checkpoint_path, vocab_path, cache_path, **kwargs)
    server = make_server(service, port)
    print(f"serving on 127.0.0.1:{server.server_address[1]} (model {service.model_hash})")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        server.shutdown()
