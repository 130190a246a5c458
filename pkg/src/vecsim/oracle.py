"""Simulated trusted external parties.

Each endpoint owns an Ed25519 key pair and a deterministic behavior, and
answers requests with signed responses.  ``invocation_count`` is the load
metric the scenarios compare across oracle-interaction modes.
"""

from __future__ import annotations

import contextlib
import enum
from dataclasses import dataclass, field
from typing import Iterator, Union

from vecsim._codec import sha256, u64
from vecsim.verifiable_call import (
    ExternalCallRequest,
    SignedResponse,
    public_key_of,
    sign_response,
)


@dataclass(frozen=True)
class Constant:
    value: bytes


@dataclass(frozen=True)
class SeededStream:
    seed: int


@dataclass(frozen=True)
class SteppedFeed:
    values: tuple[bytes, ...]
    ticks_per_step: int = 1

    def __post_init__(self):
        if not self.values:
            raise ValueError("SteppedFeed needs at least one value")
        if self.ticks_per_step < 1:
            raise ValueError("ticks_per_step must be positive")


@dataclass(frozen=True)
class FailAfter:
    """Answers ``value`` for the first ``n`` invocations, then goes silent."""

    n: int
    value: bytes = b"\x00"


Behavior = Union[Constant, SeededStream, SteppedFeed, FailAfter]


class Availability(enum.Enum):
    UP = "up"
    DOWN = "down"


def seeded_stream_value(seed: int, ordinal: int) -> bytes:
    return sha256(b"vecsim/seeded-stream", u64(seed & (2**64 - 1)), u64(ordinal))


def derive_secret_key(endpoint_uri: str) -> bytes:
    """Deterministic signing key for endpoints configured without one."""
    return sha256(b"vecsim/oracle-key", endpoint_uri.encode("utf-8"))


@dataclass
class OracleEndpoint:
    endpoint_uri: str
    secret_key: bytes
    behavior: Behavior
    invocation_count: int = 0
    availability: Availability = Availability.UP
    public_key: bytes = field(init=False)

    def __post_init__(self):
        self.public_key = public_key_of(self.secret_key)

    @classmethod
    def create(cls, endpoint_uri: str, behavior: Behavior, secret_key: bytes | None = None):
        return cls(endpoint_uri, secret_key or derive_secret_key(endpoint_uri), behavior)

    def _next_value(self, now: int) -> bytes | None:
        ordinal = self.invocation_count
        b = self.behavior
        if isinstance(b, Constant):
            return b.value
        if isinstance(b, SeededStream):
            return seeded_stream_value(b.seed, ordinal)
        if isinstance(b, SteppedFeed):
            step = now // b.ticks_per_step
            return b.values[min(step, len(b.values) - 1)]
        if isinstance(b, FailAfter):
            return b.value if ordinal < b.n else None
        raise TypeError(f"unknown oracle behavior {b!r}")


class OracleDirectory:
    def __init__(self, endpoints: list[OracleEndpoint] | None = None):
        self.entries: dict[str, OracleEndpoint] = {}
        for endpoint in endpoints or []:
            self.add(endpoint)

    def add(self, endpoint: OracleEndpoint) -> None:
        if endpoint.endpoint_uri in self.entries:
            raise ValueError(f"duplicate oracle endpoint {endpoint.endpoint_uri!r}")
        self.entries[endpoint.endpoint_uri] = endpoint

    def __getitem__(self, uri: str) -> OracleEndpoint:
        return self.entries[uri]

    def __contains__(self, uri: str) -> bool:
        return uri in self.entries

    def __iter__(self) -> Iterator[OracleEndpoint]:
        return iter(self.entries.values())

    def public_keys(self) -> dict[str, bytes]:
        return {uri: e.public_key for uri, e in self.entries.items()}

    def invocations(self) -> dict[str, int]:
        return {uri: e.invocation_count for uri, e in self.entries.items()}

    def total_invocations(self) -> int:
        return sum(e.invocation_count for e in self.entries.values())

    def set_availability(self, availability: Availability) -> None:
        for e in self.entries.values():
            e.availability = availability

    @contextlib.contextmanager
    def all_down(self):
        """Temporarily take every endpoint down."""
        saved = {uri: e.availability for uri, e in self.entries.items()}
        self.set_availability(Availability.DOWN)
        try:
            yield self
        finally:
            for uri, availability in saved.items():
                self.entries[uri].availability = availability


def handle_request(
    directory: OracleDirectory,
    req: ExternalCallRequest,
    now: int,
) -> SignedResponse | None:
    """Answer ``req`` as the addressed endpoint would, or return None.

    A Down endpoint never sees the request, so its counter is untouched; an
    exhausted FailAfter endpoint receives the request and stays silent, which
    still counts as an invocation.
    """
    endpoint = directory.entries.get(req.endpoint_uri)
    if endpoint is None or endpoint.availability is Availability.DOWN:
        return None
    value = endpoint._next_value(now)
    endpoint.invocation_count += 1
    if value is None:
        return None
    return sign_response(value, req.request_nonce, now, endpoint.secret_key)


def reset_counters(directory: OracleDirectory) -> None:
    for endpoint in directory:
        endpoint.invocation_count = 0
