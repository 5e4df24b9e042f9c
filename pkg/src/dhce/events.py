"""Clinical events: token serialization, text encoders and attention pooling."""

from __future__ import annotations

import hashlib
import json
import logging
import time
import urllib.error
import urllib.request
from dataclasses import dataclass
from typing import Mapping, Protocol, Sequence

import numpy as np

from .ehr import ClinicalEvent
from .layers import additive_attention
from .numkit import Tensor

log = logging.getLogger(__name__)

CLS = "[CLS]"
SEP = "[SEP]"


@dataclass(frozen=True)
class EventText:
    text: str
    event_type: str


def serialize_event(event: ClinicalEvent) -> EventText:
    """``[CLS] type [SEP] name [SEP] value ...`` with single spaces."""
    parts = [CLS, event.event_type]
    for name, value in event.features:
        parts += [SEP, name, SEP, value]
    return EventText(" ".join(parts), event.event_type)


class TextEncoder(Protocol):
    dim: int

    def encode(self, texts: Sequence[str]) -> np.ndarray: ...


def _token_hash(token: str, key: bytes) -> int:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8, key=key).digest()
    return int.from_bytes(digest, "little")


def hashing_encode(texts: Sequence[str], dim: int = 64, seed: int = 0) -> np.ndarray:
    """Signed feature hashing of whitespace tokens, L2-normalized per row."""
    if dim < 8:
        raise ValueError("hashing dimension must be >= 8")
    key = int(seed).to_bytes(8, "little")
    out = np.zeros((len(texts), dim))
    for row, text in enumerate(texts):
        for tok in text.split():
            h = _token_hash(tok, key)
            out[row, h % dim] += -1.0 if (h >> 63) & 1 else 1.0
        norm = np.linalg.norm(out[row])
        if norm > 0:
            out[row] /= norm
    return out


class HashingEncoder:
    def __init__(self, dim: int = 64, seed: int = 0):
        if dim < 8:
            raise ValueError("hashing dimension must be >= 8")
        self.dim = dim
        self.seed = seed
        self._memo: dict[str, np.ndarray] = {}

    def encode(self, texts: Sequence[str]) -> np.ndarray:
        missing = [t for t in dict.fromkeys(texts) if t not in self._memo]
        if missing:
            for t, row in zip(missing, hashing_encode(missing, self.dim, self.seed)):
                self._memo[t] = row
        if not texts:
            return np.zeros((0, self.dim))
        return np.stack([self._memo[t] for t in texts])

    def describe(self) -> dict:
        return {"kind": "hashing", "dim": self.dim, "seed": self.seed}


class EncoderError(RuntimeError):
    pass


class EncoderConnectionError(EncoderError):
    """The service could not be reached; safe to retry."""


class EncoderHTTPError(EncoderError):
    def __init__(self, status: int, body: str):
        super().__init__(f"encoder service returned HTTP {status}: {body[:200]}")
        self.status = status
        self.body = body


class EncoderDimensionError(EncoderError):
    """The service disagrees with the configured dimension; not retriable."""


class RemoteEncoder:
    """Client for an embedding service speaking ``GET /info`` and ``POST /encode``."""

    def __init__(self, endpoint: str, dim: int | None = None, timeout: float = 10.0, retries: int = 2,
                 memo: bool = True):
        self.endpoint = endpoint.rstrip("/")
        self.timeout = timeout
        self.retries = retries
        self._memo: dict[str, np.ndarray] | None = {} if memo else None
        served = self.fetch_dim()
        if dim is not None and dim != served:
            raise EncoderDimensionError(f"configured dim {dim} but service reports {served}")
        self.dim = served

    def _request(self, path: str, payload: dict | None = None) -> dict:
        data = None if payload is None else json.dumps(payload).encode("utf-8")
        headers = {"Content-Type": "application/json"} if data is not None else {}
        req = urllib.request.Request(self.endpoint + path, data=data, headers=headers,
                                     method="GET" if data is None else "POST")
        for attempt in range(self.retries + 1):
            try:
                with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                    return json.loads(resp.read().decode("utf-8"))
            except urllib.error.HTTPError as exc:
                body = exc.read().decode("utf-8", errors="replace")
                raise EncoderHTTPError(exc.code, body) from None
            except (urllib.error.URLError, ConnectionError, TimeoutError) as exc:
                if attempt == self.retries:
                    raise EncoderConnectionError(f"cannot reach {self.endpoint}{path}: {exc}") from None
                log.info("encoder request failed (%s), retry %d/%d", exc, attempt + 1, self.retries)
                time.sleep(0.1 * 2**attempt)
        raise AssertionError("unreachable")

    def fetch_dim(self) -> int:
        info = self._request("/info")
        dim = info.get("dim")
        if not isinstance(dim, int) or dim < 1:
            raise EncoderDimensionError(f"service reported invalid dim {dim!r}")
        return dim

    def encode(self, texts: Sequence[str]) -> np.ndarray:
        todo = list(texts) if self._memo is None else [t for t in dict.fromkeys(texts) if t not in self._memo]
        fetched: dict[str, np.ndarray] = {}
        if todo:
            vecs = self._request("/encode", {"texts": todo}).get("vectors")
            if not isinstance(vecs, list) or len(vecs) != len(todo):
                raise EncoderError(f"expected {len(todo)} vectors from the service")
            arr = np.asarray(vecs, dtype=np.float64)
            if arr.ndim != 2 or arr.shape[1] != self.dim:
                raise EncoderDimensionError(f"service returned vectors of shape {arr.shape}, expected dim {self.dim}")
            if not np.isfinite(arr).all():
                raise EncoderError("service returned non-finite values")
            if self._memo is None:
                return arr
            fetched = dict(zip(todo, arr))
            self._memo.update(fetched)
        if not texts:
            return np.zeros((0, self.dim))
        return np.stack([self._memo[t] for t in texts])

    def describe(self) -> dict:
        return {"kind": "remote", "dim": self.dim, "endpoint": self.endpoint,
                "timeout": self.timeout, "retries": self.retries}


def remote_encode(texts: Sequence[str], endpoint: str, timeout: float = 10.0, retries: int = 2) -> np.ndarray:
    return RemoteEncoder(endpoint, timeout=timeout, retries=retries, memo=False).encode(texts)


def make_encoder(spec: Mapping) -> TextEncoder:
    kind = spec.get("kind", "hashing")
    if kind == "hashing":
        return HashingEncoder(int(spec.get("dim", 64)), int(spec.get("seed", 0)))
    if kind == "remote":
        return RemoteEncoder(spec["endpoint"], dim=spec.get("dim"), timeout=float(spec.get("timeout", 10.0)),
                             retries=int(spec.get("retries", 2)))
    raise ValueError(f"unknown encoder kind {kind!r}")


@dataclass(frozen=True)
class EventRepresentation:
    """One pooled vector per event type present in a visit, in first-seen order."""

    types: tuple[str, ...]
    vectors: np.ndarray

    def __len__(self) -> int:
        return len(self.types)


def encode_visit_events(events: Sequence[ClinicalEvent], encoder: TextEncoder) -> EventRepresentation:
    """Encode each event's text and mean-pool events sharing a type."""
    if not events:
        return EventRepresentation((), np.zeros((0, encoder.dim)))
    rows = encoder.encode([serialize_event(e).text for e in events])
    groups: dict[str, list[int]] = {}
    for i, e in enumerate(events):
        groups.setdefault(e.event_type, []).append(i)
    vectors = np.stack([rows[idx].mean(axis=0) for idx in groups.values()])
    return EventRepresentation(tuple(groups), vectors)


def aggregate_events(reps: EventRepresentation, params: Mapping[str, Tensor], with_weights: bool = False):
    """Attention-pool the per-type vectors and project them to the model dimension.

    A visit without events gets the learned ``event_default`` vector.
    """
    if len(reps) == 0:
        o_e, weights = params["event_default"], None
    else:
        pooled, weights = additive_attention(Tensor(reps.vectors), params["event_attn_proj"],
                                             params["event_attn_ctx"])
        o_e = pooled @ params["event_out"]
    return (o_e, weights) if with_weights else o_e
