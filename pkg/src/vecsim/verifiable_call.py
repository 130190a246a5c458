"""Verifiable external calls.

A verifiable external call bundles a request, the responder's public key and
the signed response, so any node can check the response offline without ever
contacting the responder again.  Responses are signed with Ed25519 over the
SHA-256 digest of their canonical encoding.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

from vecsim._codec import lp, sha256, u8, u64

MAX_URI_BYTES = 1024
MAX_PAYLOAD_BYTES = 65536
NONCE_BYTES = 16
KEY_BYTES = 32
SIGNATURE_BYTES = 64


class OversizeField(ValueError):
    pass


class InvalidKey(ValueError):
    pass


class Freshness(enum.Enum):
    FRESH = "fresh"
    CACHEABLE_INTRA_BLOCK = "cacheable_intra_block"
    CACHEABLE_HISTORICAL = "cacheable_historical"

    @property
    def cacheable(self) -> bool:
        return self is not Freshness.FRESH


FRESHNESS_CODES = {
    Freshness.FRESH: 0,
    Freshness.CACHEABLE_INTRA_BLOCK: 1,
    Freshness.CACHEABLE_HISTORICAL: 2,
}


@dataclass(frozen=True)
class ExternalCallRequest:
    endpoint_uri: str
    payload: bytes = b""
    request_nonce: bytes | None = None
    freshness: Freshness = Freshness.CACHEABLE_INTRA_BLOCK

    def __post_init__(self):
        if self.request_nonce is not None and len(self.request_nonce) != NONCE_BYTES:
            raise ValueError(f"request nonce must be {NONCE_BYTES} bytes")
        if self.freshness is Freshness.FRESH and self.request_nonce is None:
            raise ValueError("fresh requests must carry a nonce")
        if self.freshness.cacheable and self.request_nonce is not None:
            raise ValueError("cacheable requests cannot carry a nonce")


@dataclass(frozen=True)
class SignedResponse:
    payload: bytes
    response_nonce: bytes | None
    responder_timestamp: int
    signature: bytes


@dataclass(frozen=True)
class VerifiableExternalCall:
    request: ExternalCallRequest
    public_key: bytes
    signed_response: SignedResponse

    @property
    def key(self) -> CallKey:
        return CallKey.of(self.request)


@dataclass(frozen=True, order=True)
class CallKey:
    """Cache identity of a request: SHA-256 of its nonce-free encoding."""

    digest: bytes

    @classmethod
    def of(cls, req: ExternalCallRequest) -> CallKey:
        return cls(sha256(canonical_encode_request(req, include_nonce=False)))

    @classmethod
    def for_fields(cls, endpoint_uri: str, payload: bytes) -> CallKey:
        return cls(sha256(_encode_request_fields(endpoint_uri, payload, None)))

    def hex(self) -> str:
        return self.digest.hex()


class VerificationResult(enum.Enum):
    OK = "ok"
    SIGNATURE_MISMATCH = "signature_mismatch"
    NONCE_MISMATCH = "nonce_mismatch"
    STALE_RESPONSE = "stale_response"

    @property
    def ok(self) -> bool:
        return self is VerificationResult.OK


def _encode_request_fields(uri: str, payload: bytes, nonce: bytes | None) -> bytes:
    uri_bytes = uri.encode("utf-8")
    if len(uri_bytes) > MAX_URI_BYTES:
        raise OversizeField(f"endpoint_uri is {len(uri_bytes)} bytes (max {MAX_URI_BYTES})")
    if len(payload) > MAX_PAYLOAD_BYTES:
        raise OversizeField(f"payload is {len(payload)} bytes (max {MAX_PAYLOAD_BYTES})")
    out = lp(uri_bytes) + lp(payload)
    if nonce is not None:
        out += lp(nonce)
    return out


def canonical_encode_request(req: ExternalCallRequest, include_nonce: bool) -> bytes:
    """Encode ``(uri, payload[, nonce])`` as 4-byte big-endian length-prefixed fields.

    The nonce field is appended only when ``include_nonce`` is set and the
    request carries one; its presence is recoverable from the total length,
    so the encoding stays injective.
    """
    nonce = req.request_nonce if include_nonce else None
    return _encode_request_fields(req.endpoint_uri, req.payload, nonce)


def canonical_encode_response(payload: bytes, nonce: bytes | None, timestamp: int) -> bytes:
    if len(payload) > MAX_PAYLOAD_BYTES:
        raise OversizeField(f"payload is {len(payload)} bytes (max {MAX_PAYLOAD_BYTES})")
    return lp(payload) + lp(nonce or b"") + u64(timestamp)


def encode_call(call: VerifiableExternalCall) -> bytes:
    """Canonical bytes of a whole call, used when hashing blocks and traces."""
    req = call.request
    resp = call.signed_response
    return (
        lp(canonical_encode_request(req, include_nonce=True))
        + u8(FRESHNESS_CODES[req.freshness])
        + lp(call.public_key)
        + lp(canonical_encode_response(resp.payload, resp.response_nonce, resp.responder_timestamp))
        + lp(resp.signature)
    )


def _response_digest(payload: bytes, nonce: bytes | None, timestamp: int) -> bytes:
    return sha256(canonical_encode_response(payload, nonce, timestamp))


def _private_key(signing_key: bytes) -> Ed25519PrivateKey:
    if not isinstance(signing_key, (bytes, bytearray)) or len(signing_key) != KEY_BYTES:
        raise InvalidKey(f"signing key must be {KEY_BYTES} bytes")
    return Ed25519PrivateKey.from_private_bytes(bytes(signing_key))


def public_key_of(signing_key: bytes) -> bytes:
    """Raw 32-byte Ed25519 verification key for ``signing_key``."""
    return _private_key(signing_key).public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)


def sign_response(
    payload: bytes,
    nonce: bytes | None,
    timestamp: int,
    signing_key: bytes,
) -> SignedResponse:
    if nonce is not None and len(nonce) != NONCE_BYTES:
        raise ValueError(f"nonce must be {NONCE_BYTES} bytes")
    if not 0 <= timestamp < 2**64:
        raise ValueError("timestamp out of range")
    key = _private_key(signing_key)
    signature = key.sign(_response_digest(payload, nonce, timestamp))
    return SignedResponse(payload, nonce, timestamp, signature)


def signature_valid(public_key: bytes, resp: SignedResponse) -> bool:
    """Check only the Ed25519 signature; never raises."""
    try:
        if len(public_key) != KEY_BYTES or len(resp.signature) != SIGNATURE_BYTES:
            return False
        digest = _response_digest(resp.payload, resp.response_nonce, resp.responder_timestamp)
        Ed25519PublicKey.from_public_bytes(bytes(public_key)).verify(bytes(resp.signature), digest)
    except (InvalidSignature, ValueError, TypeError, OverflowError, struct.error):
        return False
    return True


def verify_external_call(
    call: VerifiableExternalCall,
    now: int,
    max_age: int | None,
) -> VerificationResult:
    """Check signature, nonce echo and age of ``call``.

    ``max_age=None`` skips the age check.  Responses timestamped after ``now``
    are not treated as stale.
    """
    resp = call.signed_response
    if not signature_valid(call.public_key, resp):
        return VerificationResult.SIGNATURE_MISMATCH
    if resp.response_nonce != call.request.request_nonce:
        return VerificationResult.NONCE_MISMATCH
    if max_age is not None and now - resp.responder_timestamp > max_age:
        return VerificationResult.STALE_RESPONSE
    return VerificationResult.OK


class NonceStream:
    """Counter-mixed deterministic nonce source.

    Nonce ``i`` is the first 16 bytes of SHA-256(tag || seed || i), so draws
    never depend on anything but the seed and the draw index.
    """

    def __init__(self, seed: int):
        self.seed = seed & (2**64 - 1)
        self.counter = 0

    def __repr__(self):
        return f"NonceStream(seed={self.seed}, counter={self.counter})"


def make_nonce(stream: NonceStream) -> bytes:
    nonce = sha256(b"vecsim/nonce", u64(stream.seed), u64(stream.counter))[:NONCE_BYTES]
    stream.counter += 1
    return nonce
