"""Deterministic contract templates and their transition function.

Three templates are built in: a betting contract settled by a random number
service, a price-driven transfer reading a feed, and a no-op.  A transaction
declares the external call sites its action needs; the caller supplies one
resolved call per site and ``apply_transaction`` turns that into a new state
plus a receipt.  Any failure leaves the state untouched.
"""

from __future__ import annotations

import enum
import functools
import struct
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from typing import Union

from vecsim._codec import lp, sha256, text, u8, uint
from vecsim.verifiable_call import (
    FRESHNESS_CODES,
    CallKey,
    ExternalCallRequest,
    Freshness,
    NonceStream,
    VerifiableExternalCall,
    encode_call,
    make_nonce,
    verify_external_call,
)

RNG_URI = "oracle://rng"
FEED_PREFIX = "oracle://feed/"
HOUSE = "house"
ORACLE_ACCOUNT_PREFIX = "oracle:"
DEFAULT_MAX_AGE = 1000
DEFAULT_MAX_CALLS = 4


def feed_uri(feed_id: str) -> str:
    return FEED_PREFIX + feed_id


def oracle_account(uri: str) -> str:
    """Account id under which a traditional oracle pushes values on-chain."""
    return ORACLE_ACCOUNT_PREFIX + uri


class CallBudgetExceeded(ValueError):
    pass


class AlignmentError(ValueError):
    pass


# -- actions ---------------------------------------------------------------


@dataclass(frozen=True)
class PlaceBet:
    stake: int


@dataclass(frozen=True)
class SettleBet:
    bet_id: str


@dataclass(frozen=True)
class PriceTransfer:
    sender: str
    recipient: str
    feed_id: str
    freshness: Freshness = Freshness.CACHEABLE_INTRA_BLOCK
    # read the feed from contract state instead of calling out (pushed-oracle flow)
    from_state: bool = False

    def __post_init__(self):
        if not self.freshness.cacheable:
            raise ValueError("price feed calls must be cacheable")


@dataclass(frozen=True)
class OracleInput:
    """A value pushed on-chain by a traditional oracle account."""

    uri: str
    value: bytes
    bet_id: str | None = None


@dataclass(frozen=True)
class Noop:
    pass


Action = Union[PlaceBet, SettleBet, PriceTransfer, OracleInput, Noop]


@dataclass(frozen=True)
class FinalizerResolved:
    pass


@dataclass(frozen=True)
class InitiatorResolved:
    calls: tuple[VerifiableExternalCall, ...]


Mode = Union[FinalizerResolved, InitiatorResolved]


@dataclass(frozen=True)
class Transaction:
    initiator: str
    action: Action
    mode: Mode = FinalizerResolved()
    max_calls: int = DEFAULT_MAX_CALLS
    # distinguishes otherwise identical submissions
    salt: int = 0

    @functools.cached_property
    def tx_id(self) -> bytes:
        return sha256(encode_transaction(self))

    @property
    def initiator_resolved(self) -> bool:
        return isinstance(self.mode, InitiatorResolved)


def encode_action(action: Action) -> bytes:
    if isinstance(action, Noop):
        return u8(0)
    if isinstance(action, PlaceBet):
        return u8(1) + uint(action.stake)
    if isinstance(action, SettleBet):
        return u8(2) + text(action.bet_id)
    if isinstance(action, PriceTransfer):
        return (
            u8(3)
            + text(action.sender)
            + text(action.recipient)
            + text(action.feed_id)
            + u8(FRESHNESS_CODES[action.freshness])
            + u8(int(action.from_state))
        )
    if isinstance(action, OracleInput):
        bet = b"" if action.bet_id is None else u8(1) + text(action.bet_id)
        return u8(4) + text(action.uri) + lp(action.value) + lp(bet)
    raise TypeError(f"unknown action {action!r}")


def encode_transaction(tx: Transaction) -> bytes:
    if isinstance(tx.mode, InitiatorResolved):
        mode = u8(1) + struct.pack(">I", len(tx.mode.calls))
        mode += b"".join(lp(encode_call(c)) for c in tx.mode.calls)
    else:
        mode = u8(0)
    return (
        b"vecsim/tx/v1"
        + text(tx.initiator)
        + lp(encode_action(tx.action))
        + lp(mode)
        + uint(tx.max_calls)
        + uint(tx.salt)
    )


# -- state -----------------------------------------------------------------


class BetStatus(enum.Enum):
    PLACED = "placed"
    WON = "won"
    LOST = "lost"


_BET_CODES = {BetStatus.PLACED: 0, BetStatus.WON: 1, BetStatus.LOST: 2}


@dataclass(frozen=True)
class Bet:
    bettor: str
    stake: int
    status: BetStatus = BetStatus.PLACED


@dataclass
class ContractState:
    balances: dict[str, int] = field(default_factory=dict)
    bets: dict[str, Bet] = field(default_factory=dict)
    feed_values: dict[str, bytes] = field(default_factory=dict)

    @classmethod
    def genesis(cls, balances: Mapping[str, int]) -> ContractState:
        if any(v < 0 for v in balances.values()):
            raise ValueError("genesis balances must be non-negative")
        return cls(balances={k: v for k, v in balances.items() if v})

    def copy(self) -> ContractState:
        return ContractState(dict(self.balances), dict(self.bets), dict(self.feed_values))

    def balance(self, account: str) -> int:
        return self.balances.get(account, 0)

    def total_supply(self) -> int:
        """Balances plus stakes escrowed in open bets."""
        escrow = sum(2 * b.stake for b in self.bets.values() if b.status is BetStatus.PLACED)
        return sum(self.balances.values()) + escrow


def state_root(state: ContractState) -> bytes:
    out = [b"vecsim/state/v1", struct.pack(">I", len(state.balances))]
    for account in sorted(state.balances):
        out.append(text(account) + uint(state.balances[account]))
    out.append(struct.pack(">I", len(state.bets)))
    for bet_id in sorted(state.bets):
        bet = state.bets[bet_id]
        out.append(text(bet_id) + text(bet.bettor) + uint(bet.stake) + u8(_BET_CODES[bet.status]))
    out.append(struct.pack(">I", len(state.feed_values)))
    for feed_id in sorted(state.feed_values):
        out.append(text(feed_id) + lp(state.feed_values[feed_id]))
    return sha256(*out)


# -- call sites ------------------------------------------------------------


@dataclass(frozen=True)
class CallSite:
    endpoint_uri: str
    payload: bytes
    freshness: Freshness

    @property
    def key(self) -> CallKey:
        return CallKey.for_fields(self.endpoint_uri, self.payload)

    def request(self, nonce: bytes | None = None) -> ExternalCallRequest:
        return ExternalCallRequest(self.endpoint_uri, self.payload, nonce, self.freshness)

    def matches(self, req: ExternalCallRequest) -> bool:
        return (req.endpoint_uri, req.payload, req.freshness) == (
            self.endpoint_uri,
            self.payload,
            self.freshness,
        )


def call_sites(tx: Transaction) -> list[CallSite]:
    """Nonce-free description of the external calls ``tx`` needs, in order."""
    action = tx.action
    if isinstance(action, SettleBet):
        return [CallSite(RNG_URI, action.bet_id.encode("utf-8"), Freshness.FRESH)]
    if isinstance(action, PriceTransfer) and not action.from_state:
        return [CallSite(feed_uri(action.feed_id), action.feed_id.encode("utf-8"), action.freshness)]
    return []


def declared_calls(
    tx: Transaction,
    state: ContractState,
    stream: NonceStream,
) -> list[ExternalCallRequest]:
    """Requests for every call site of ``tx``; Fresh sites draw a nonce from ``stream``."""
    sites = call_sites(tx)
    if len(sites) > tx.max_calls:
        raise CallBudgetExceeded(f"{len(sites)} call sites exceed budget of {tx.max_calls}")
    return [site.request(make_nonce(stream) if site.freshness is Freshness.FRESH else None) for site in sites]


# -- transitions -----------------------------------------------------------


class ReceiptStatus(enum.Enum):
    APPLIED = "applied"
    FAILED_VERIFICATION = "failed_verification"
    FAILED_NO_RESPONSE = "failed_no_response"
    FAILED_LOGIC = "failed_logic"


RECEIPT_CODES = {
    ReceiptStatus.APPLIED: 0,
    ReceiptStatus.FAILED_VERIFICATION: 1,
    ReceiptStatus.FAILED_NO_RESPONSE: 2,
    ReceiptStatus.FAILED_LOGIC: 3,
}


@dataclass(frozen=True)
class Receipt:
    tx_id: bytes
    status: ReceiptStatus
    calls_used: tuple[CallKey, ...]
    state_root_after: bytes


def encode_receipt(receipt: Receipt) -> bytes:
    keys = b"".join(k.digest for k in receipt.calls_used)
    return (
        lp(receipt.tx_id)
        + u8(RECEIPT_CODES[receipt.status])
        + lp(keys)
        + lp(receipt.state_root_after)
    )


class _LogicFailure(Exception):
    pass


def _credit(state: ContractState, account: str, amount: int) -> None:
    if amount:
        state.balances[account] = state.balance(account) + amount


def _debit(state: ContractState, account: str, amount: int) -> None:
    have = state.balance(account)
    if amount > have:
        raise _LogicFailure(f"{account} cannot cover {amount}")
    if have == amount:
        state.balances.pop(account, None)
    else:
        state.balances[account] = have - amount


def _settle(state: ContractState, bet_id: str | None, rng_value: bytes) -> None:
    bet = state.bets.get(bet_id) if bet_id is not None else None
    if bet is None or bet.status is not BetStatus.PLACED:
        raise _LogicFailure("no open bet")
    if not rng_value:
        raise _LogicFailure("empty random value")
    if rng_value[0] % 2 == 0:
        _credit(state, bet.bettor, 2 * bet.stake)
        state.bets[bet_id] = Bet(bet.bettor, bet.stake, BetStatus.WON)
    else:
        _credit(state, HOUSE, 2 * bet.stake)
        state.bets[bet_id] = Bet(bet.bettor, bet.stake, BetStatus.LOST)


def _transition(state: ContractState, tx: Transaction, values: list[bytes]) -> None:
    action = tx.action
    if isinstance(action, Noop):
        return
    if isinstance(action, PlaceBet):
        bet_id = tx.tx_id.hex()
        if action.stake <= 0 or tx.initiator == HOUSE or bet_id in state.bets:
            raise _LogicFailure("invalid bet")
        # the house escrows a matching stake so a win is always covered
        _debit(state, tx.initiator, action.stake)
        _debit(state, HOUSE, action.stake)
        state.bets[bet_id] = Bet(tx.initiator, action.stake)
        return
    if isinstance(action, SettleBet):
        _settle(state, action.bet_id, values[0])
        return
    if isinstance(action, PriceTransfer):
        if tx.initiator != action.sender:
            raise _LogicFailure("transfer not authorised by sender")
        if action.from_state:
            value = state.feed_values.get(action.feed_id)
            if value is None:
                raise _LogicFailure("feed has no on-chain value")
        else:
            value = values[0]
        amount = min(int.from_bytes(value, "big"), state.balance(action.sender))
        _debit(state, action.sender, amount)
        _credit(state, action.recipient, amount)
        state.feed_values[action.feed_id] = value
        return
    if isinstance(action, OracleInput):
        if tx.initiator != oracle_account(action.uri):
            raise _LogicFailure("oracle input from untrusted account")
        if action.uri == RNG_URI:
            _settle(state, action.bet_id, action.value)
        elif action.uri.startswith(FEED_PREFIX):
            state.feed_values[action.uri[len(FEED_PREFIX):]] = action.value
        else:
            raise _LogicFailure("unknown oracle")
        return
    raise TypeError(f"unknown action {action!r}")


def apply_transaction(
    state: ContractState,
    tx: Transaction,
    resolved: Sequence[VerifiableExternalCall | None],
    now: int,
    *,
    keys: Mapping[str, bytes] | None = None,
    max_age: int | None = DEFAULT_MAX_AGE,
) -> tuple[ContractState, Receipt]:
    """Execute ``tx`` against ``state`` using the resolved calls.

    ``resolved`` holds one entry per call site, None where no response came
    back.  ``keys`` pins the trusted public key per endpoint URI.  Calls
    declared CacheableHistorical are exempt from the ``max_age`` check; their
    reuse is bounded by the ledger's history window instead.
    """
    sites = call_sites(tx)
    used = tuple(site.key for site in sites)

    def failed(status: ReceiptStatus) -> tuple[ContractState, Receipt]:
        return state, Receipt(tx.tx_id, status, used, state_root(state))

    if len(sites) > tx.max_calls:
        return failed(ReceiptStatus.FAILED_LOGIC)
    if len(resolved) != len(sites):
        raise AlignmentError(f"{len(resolved)} resolved calls for {len(sites)} call sites")

    values = []
    for site, call in zip(sites, resolved):
        if call is None:
            return failed(ReceiptStatus.FAILED_NO_RESPONSE)
        if not site.matches(call.request):
            return failed(ReceiptStatus.FAILED_VERIFICATION)
        if keys is not None and keys.get(site.endpoint_uri) != call.public_key:
            return failed(ReceiptStatus.FAILED_VERIFICATION)
        age_limit = None if site.freshness is Freshness.CACHEABLE_HISTORICAL else max_age
        if not verify_external_call(call, now, age_limit).ok:
            return failed(ReceiptStatus.FAILED_VERIFICATION)
        values.append(call.signed_response.payload)

    new_state = state.copy()
    try:
        _transition(new_state, tx, values)
    except _LogicFailure:
        return failed(ReceiptStatus.FAILED_LOGIC)
    return new_state, Receipt(tx.tx_id, ReceiptStatus.APPLIED, used, state_root(new_state))


def well_formed(tx: Transaction) -> bool:
    """Static admission check: call budget respected, initiator calls aligned."""
    sites = call_sites(tx)
    if len(sites) > tx.max_calls:
        return False
    if isinstance(tx.mode, InitiatorResolved):
        calls = tx.mode.calls
        return len(calls) == len(sites) and all(s.matches(c.request) for s, c in zip(sites, calls))
    return True
