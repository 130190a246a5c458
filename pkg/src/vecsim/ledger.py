"""Blocks, chains, response caches and the two block-level code paths.

The finalizing node builds a partial block (everything but call results),
wins proof-of-work on it, then resolves external calls and completes the
block.  Peers validate a completed block by checking signatures and
re-executing every transaction against the stored calls only; validation
never contacts an oracle.
"""

from __future__ import annotations

import enum
import functools
import struct
from collections.abc import Callable, Iterable, Mapping, Sequence
from dataclasses import dataclass, field

from vecsim._codec import lp, sha256, u8, u64
from vecsim.execution import (
    DEFAULT_MAX_AGE,
    CallSite,
    ContractState,
    Transaction,
    apply_transaction,
    call_sites,
    encode_receipt,
    encode_transaction,
    state_root,
    well_formed,
    Receipt,
)
from vecsim.verifiable_call import (
    CallKey,
    ExternalCallRequest,
    Freshness,
    NonceStream,
    SignedResponse,
    VerifiableExternalCall,
    encode_call,
    make_nonce,
    verify_external_call,
)

ZERO_HASH = bytes(32)

OracleAccess = Callable[[ExternalCallRequest], "SignedResponse | None"]


@dataclass(frozen=True)
class ChainParams:
    difficulty: int = 8
    history_window: int = 2
    max_age: int = DEFAULT_MAX_AGE
    block_call_cap: int = 64
    max_block_txs: int = 32


def pow_valid(partial_hash: bytes, nonce_pow: int, difficulty: int) -> bool:
    """True when SHA-256(partial_hash || nonce) has ``difficulty`` leading zero bits."""
    if not 0 <= nonce_pow < 2**64:
        return False
    digest = int.from_bytes(sha256(partial_hash, u64(nonce_pow)), "big")
    return digest >> (256 - difficulty) == 0 if difficulty > 0 else True


# -- partial blocks --------------------------------------------------------


def compute_partial_hash(
    height: int, parent_hash: bytes, producer: int, transactions: Iterable[Transaction]
) -> bytes:
    tx_ids = b"".join(tx.tx_id for tx in transactions)
    return sha256(b"vecsim/partial/v1", u64(height), lp(parent_hash), u64(producer), lp(tx_ids))


@dataclass(frozen=True)
class PartialBlock:
    height: int
    parent_hash: bytes
    producer: int
    transactions: tuple[Transaction, ...]
    nonce_pow: int = 0

    @functools.cached_property
    def partial_hash(self) -> bytes:
        return compute_partial_hash(self.height, self.parent_hash, self.producer, self.transactions)

    def with_nonce(self, nonce_pow: int) -> PartialBlock:
        return PartialBlock(self.height, self.parent_hash, self.producer, self.transactions, nonce_pow)


def encode_partial(partial: PartialBlock) -> bytes:
    txs = b"".join(lp(encode_transaction(tx)) for tx in partial.transactions)
    return (
        b"vecsim/partial/v1"
        + u64(partial.height)
        + lp(partial.parent_hash)
        + u64(partial.producer)
        + struct.pack(">I", len(partial.transactions))
        + txs
        + u64(partial.nonce_pow)
    )


def count_call_sites(transactions: Iterable[Transaction]) -> int:
    return sum(len(call_sites(tx)) for tx in transactions)


def select_transactions(
    pending: Iterable[Transaction],
    params: ChainParams,
    exclude: set[bytes] | frozenset[bytes] = frozenset(),
) -> tuple[Transaction, ...]:
    """Take pending transactions in order while the block caps allow."""
    chosen: list[Transaction] = []
    ids: set[bytes] = set()
    budget = params.block_call_cap
    for tx in pending:
        if len(chosen) >= params.max_block_txs:
            break
        if tx.tx_id in exclude or tx.tx_id in ids or not well_formed(tx):
            continue
        sites = len(call_sites(tx))
        if sites > budget:
            continue
        budget -= sites
        chosen.append(tx)
        ids.add(tx.tx_id)
    return tuple(chosen)


def build_partial_block(
    chain: Chain,
    pending: Iterable[Transaction],
    params: ChainParams,
    producer: int = 0,
    start_nonce: int = 0,
) -> PartialBlock:
    """Assemble a candidate on the chain tip and grind proof-of-work for it."""
    txs = select_transactions(pending, params, chain.included_tx_ids)
    candidate = PartialBlock(chain.height + 1, chain.tip_hash, producer, txs)
    nonce = start_nonce
    while not pow_valid(candidate.partial_hash, nonce, params.difficulty):
        nonce += 1
    return candidate.with_nonce(nonce)


# -- response cache --------------------------------------------------------


class ResponseCache:
    """Verified cacheable calls of one block, keyed by nonce-free request hash."""

    def __init__(self, calls: Iterable[VerifiableExternalCall] = ()):
        self._entries: dict[CallKey, VerifiableExternalCall] = {}
        for call in calls:
            self.insert(call)

    def insert(self, call: VerifiableExternalCall) -> CallKey:
        if not call.request.freshness.cacheable:
            raise ValueError("fresh calls are never cached")
        if not verify_external_call(call, 0, None).ok:
            raise ValueError("refusing to cache an unverified call")
        key = call.key
        self._entries[key] = call
        return key

    def get(self, key: CallKey) -> VerifiableExternalCall | None:
        call = self._entries.get(key)
        if call is None or not verify_external_call(call, 0, None).ok:
            return None
        return call

    def __contains__(self, key: CallKey) -> bool:
        return key in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def items(self) -> list[tuple[CallKey, VerifiableExternalCall]]:
        return sorted(self._entries.items(), key=lambda kv: kv[0])

    def calls(self) -> list[VerifiableExternalCall]:
        return [call for _, call in self.items()]

    @classmethod
    def from_items(cls, items: Iterable[tuple[CallKey, VerifiableExternalCall]]) -> ResponseCache:
        """Rebuild from stored entries without verifying; validation checks them."""
        cache = cls()
        for key, call in items:
            cache._entries[key] = call
        return cache

    def __eq__(self, other):
        return isinstance(other, ResponseCache) and self.items() == other.items()

    def __repr__(self):
        return f"ResponseCache({len(self)} entries)"


# -- blocks ----------------------------------------------------------------


@dataclass(frozen=True)
class BlockHeader:
    height: int
    parent_hash: bytes
    producer: int
    partial_hash: bytes
    nonce_pow: int
    state_root_after: bytes
    completed_at: int


@dataclass(frozen=True)
class BlockEntry:
    tx: Transaction
    receipt: Receipt
    # one slot per Fresh call site of a finalizer-resolved tx; None = no response
    fresh_calls: tuple[VerifiableExternalCall | None, ...] = ()


@dataclass(frozen=True, eq=False)
class Block:
    header: BlockHeader
    entries: tuple[BlockEntry, ...]
    response_cache: ResponseCache = field(default_factory=ResponseCache)

    @functools.cached_property
    def block_hash(self) -> bytes:
        return sha256(encode_block(self))

    @property
    def height(self) -> int:
        return self.header.height

    @property
    def transactions(self) -> tuple[Transaction, ...]:
        return tuple(e.tx for e in self.entries)

    def partial(self) -> PartialBlock:
        h = self.header
        return PartialBlock(h.height, h.parent_hash, h.producer, self.transactions, h.nonce_pow)

    def __eq__(self, other):
        return isinstance(other, Block) and self.block_hash == other.block_hash

    def __hash__(self):
        return hash(self.block_hash)


def _encode_optional_call(call: VerifiableExternalCall | None) -> bytes:
    return u8(0) if call is None else u8(1) + lp(encode_call(call))


def encode_block(block: Block) -> bytes:
    h = block.header
    out = [
        b"vecsim/block/v1",
        u64(h.height),
        lp(h.parent_hash),
        u64(h.producer),
        lp(h.partial_hash),
        u64(h.nonce_pow),
        lp(h.state_root_after),
        u64(h.completed_at),
        struct.pack(">I", len(block.entries)),
    ]
    for entry in block.entries:
        fresh = b"".join(_encode_optional_call(c) for c in entry.fresh_calls)
        out.append(
            lp(encode_transaction(entry.tx))
            + lp(encode_receipt(entry.receipt))
            + struct.pack(">I", len(entry.fresh_calls))
            + fresh
        )
    out.append(struct.pack(">I", len(block.response_cache)))
    for key, call in block.response_cache.items():
        out.append(lp(key.digest) + lp(encode_call(call)))
    return b"".join(out)


def genesis_block(state: ContractState) -> Block:
    header = BlockHeader(
        height=0,
        parent_hash=ZERO_HASH,
        producer=0,
        partial_hash=compute_partial_hash(0, ZERO_HASH, 0, ()),
        nonce_pow=0,
        state_root_after=state_root(state),
        completed_at=0,
    )
    return Block(header, ())


# -- chain -----------------------------------------------------------------


class Chain:
    """A validated chain from genesis, with the indexes validation needs."""

    def __init__(self, genesis_balances: Mapping[str, int]):
        state = ContractState.genesis(genesis_balances)
        self.genesis_balances = dict(genesis_balances)
        self.blocks: list[Block] = [genesis_block(state)]
        self.tip_state = state
        # CallKey -> most recent height whose response cache holds it
        self.historical_cache_index: dict[CallKey, int] = {}
        self.seen_nonces: set[bytes] = set()
        self.included_tx_ids: set[bytes] = set()

    @property
    def height(self) -> int:
        return len(self.blocks) - 1

    @property
    def tip(self) -> Block:
        return self.blocks[-1]

    @property
    def tip_hash(self) -> bytes:
        return self.tip.block_hash

    def copy(self) -> Chain:
        other = Chain.__new__(Chain)
        other.genesis_balances = dict(self.genesis_balances)
        other.blocks = list(self.blocks)
        other.tip_state = self.tip_state
        other.historical_cache_index = dict(self.historical_cache_index)
        other.seen_nonces = set(self.seen_nonces)
        other.included_tx_ids = set(self.included_tx_ids)
        return other

    def append(self, block: Block, state_after: ContractState) -> None:
        """Append an already-validated block and its resulting state."""
        if block.header.parent_hash != self.tip_hash or block.height != self.height + 1:
            raise ValueError("block does not extend the chain tip")
        self.blocks.append(block)
        self.tip_state = state_after
        for key, _ in block.response_cache.items():
            self.historical_cache_index[key] = block.height
        self.seen_nonces.update(block_nonces(block))
        self.included_tx_ids.update(tx.tx_id for tx in block.transactions)

    def historical_lookup(
        self, key: CallKey, height: int, window: int
    ) -> VerifiableExternalCall | None:
        """A cached call from a block at most ``window`` blocks below ``height``."""
        found = self.historical_cache_index.get(key)
        if found is None or height - found > window:
            return None
        return self.blocks[found].response_cache.get(key)


def block_nonces(block: Block) -> list[bytes]:
    """Every request nonce recorded in ``block``, in block order."""
    nonces = []
    for entry in block.entries:
        calls: Iterable[VerifiableExternalCall | None]
        if entry.tx.initiator_resolved:
            calls = entry.tx.mode.calls
        else:
            calls = entry.fresh_calls
        for call in calls:
            if call is not None and call.request.request_nonce is not None:
                nonces.append(call.request.request_nonce)
    return nonces


# -- call resolution -------------------------------------------------------


class Source(enum.Enum):
    LIVE = "live"
    CACHE = "cache"
    HISTORY = "history"
    INITIATOR = "initiator"
    MISSING = "missing"


@dataclass(frozen=True)
class PlannedCall:
    site: CallSite
    source: Source
    live_index: int | None = None
    call: VerifiableExternalCall | None = None


@dataclass
class CallPlan:
    """Where every call site of a block's transactions will be served from.

    ``live`` lists the requests the finalizer must actually send, in order;
    identical cacheable requests appear once.
    """

    height: int
    per_tx: list[list[PlannedCall]]
    live: list[ExternalCallRequest]


def plan_calls(
    transactions: Sequence[Transaction],
    chain: Chain,
    stream: NonceStream,
    params: ChainParams,
) -> CallPlan:
    height = chain.height + 1
    live: list[ExternalCallRequest] = []
    pending_cache: dict[CallKey, int] = {}
    per_tx = []
    for tx in transactions:
        sites = call_sites(tx)
        if tx.initiator_resolved:
            per_tx.append([PlannedCall(s, Source.INITIATOR, call=c) for s, c in zip(sites, tx.mode.calls)])
            continue
        planned = []
        for site in sites:
            if site.freshness is Freshness.FRESH:
                planned.append(PlannedCall(site, Source.LIVE, live_index=len(live)))
                live.append(site.request(make_nonce(stream)))
                continue
            key = site.key
            if key in pending_cache:
                planned.append(PlannedCall(site, Source.CACHE, live_index=pending_cache[key]))
                continue
            if site.freshness is Freshness.CACHEABLE_HISTORICAL:
                old = chain.historical_lookup(key, height, params.history_window)
                if old is not None:
                    planned.append(PlannedCall(site, Source.HISTORY, call=old))
                    continue
            pending_cache[key] = len(live)
            planned.append(PlannedCall(site, Source.LIVE, live_index=len(live)))
            live.append(site.request())
        per_tx.append(planned)
    return CallPlan(height, per_tx, live)


@dataclass
class Resolution:
    calls: list[list[VerifiableExternalCall | None]]
    sources: list[list[Source]]
    cache: ResponseCache
    fresh_calls: list[tuple[VerifiableExternalCall | None, ...]]
    live_invocations: int

    @property
    def cache_hits(self) -> int:
        return sum(
            1
            for srcs, calls in zip(self.sources, self.calls)
            for src, call in zip(srcs, calls)
            if src in (Source.CACHE, Source.HISTORY) and call is not None
        )


def materialize(
    plan: CallPlan,
    responses: Sequence[SignedResponse | None],
    keys: Mapping[str, bytes],
    cache: ResponseCache | None = None,
) -> Resolution:
    """Combine a plan with the oracle replies to its live requests.

    Replies that are missing, come from an endpoint with no configured key,
    or fail signature/nonce verification resolve to None.
    """
    if len(responses) != len(plan.live):
        raise ValueError("one response slot per live request expected")
    cache = cache if cache is not None else ResponseCache()
    live_calls: list[VerifiableExternalCall | None] = []
    for req, resp in zip(plan.live, responses):
        call = None
        if resp is not None and req.endpoint_uri in keys:
            candidate = VerifiableExternalCall(req, keys[req.endpoint_uri], resp)
            if verify_external_call(candidate, 0, None).ok:
                call = candidate
        if call is not None and req.freshness.cacheable:
            cache.insert(call)
        live_calls.append(call)

    all_calls, all_sources, all_fresh = [], [], []
    for planned in plan.per_tx:
        calls, sources, fresh = [], [], []
        for p in planned:
            if p.source is Source.LIVE:
                call = live_calls[p.live_index]
            elif p.source is Source.CACHE:
                call = cache.get(p.site.key) if live_calls[p.live_index] is not None else None
            else:
                call = p.call
            calls.append(call)
            sources.append(p.source)
            if p.source is not Source.INITIATOR and p.site.freshness is Freshness.FRESH:
                fresh.append(call)
        all_calls.append(calls)
        all_sources.append(sources)
        all_fresh.append(tuple(fresh))
    return Resolution(all_calls, all_sources, cache, all_fresh, len(plan.live))


def resolve_calls(
    transactions: Sequence[Transaction],
    chain: Chain,
    oracle_access: OracleAccess,
    *,
    stream: NonceStream,
    keys: Mapping[str, bytes],
    params: ChainParams = ChainParams(),
    cache: ResponseCache | None = None,
) -> Resolution:
    """Resolve every call site of ``transactions`` in order, invoking live only when needed."""
    plan = plan_calls(transactions, chain, stream, params)
    responses = [oracle_access(req) for req in plan.live]
    return materialize(plan, responses, keys, cache)


def assemble_block(
    chain: Chain,
    partial: PartialBlock,
    resolution: Resolution,
    *,
    keys: Mapping[str, bytes],
    params: ChainParams,
    now: int,
) -> tuple[Block, ContractState]:
    state = chain.tip_state
    entries = []
    for tx, calls, fresh in zip(partial.transactions, resolution.calls, resolution.fresh_calls):
        state, receipt = apply_transaction(state, tx, calls, now, keys=keys, max_age=params.max_age)
        entries.append(BlockEntry(tx, receipt, fresh))
    header = BlockHeader(
        height=partial.height,
        parent_hash=partial.parent_hash,
        producer=partial.producer,
        partial_hash=partial.partial_hash,
        nonce_pow=partial.nonce_pow,
        state_root_after=state_root(state),
        completed_at=now,
    )
    return Block(header, tuple(entries), resolution.cache), state


def complete_block(
    chain: Chain,
    partial: PartialBlock,
    oracle_access: OracleAccess,
    *,
    stream: NonceStream,
    keys: Mapping[str, bytes],
    params: ChainParams = ChainParams(),
    now: int = 0,
) -> Block:
    """Perform the external calls for a won partial block and fill in the results."""
    resolution = resolve_calls(
        partial.transactions, chain, oracle_access, stream=stream, keys=keys, params=params
    )
    block, _ = assemble_block(chain, partial, resolution, keys=keys, params=params, now=now)
    return block


# -- validation ------------------------------------------------------------


class RejectReason(enum.Enum):
    BAD_POW = "bad_pow"
    BAD_SIGNATURE = "bad_signature"
    REPLAYED_NONCE = "replayed_nonce"
    REPLAYED_TRANSACTION = "replayed_transaction"
    STATE_MISMATCH = "state_mismatch"
    MALFORMED_CACHE = "malformed_cache"


@dataclass(frozen=True)
class Verdict:
    accepted: bool
    reason: RejectReason | None = None
    state: ContractState | None = field(default=None, compare=False, repr=False)

    def __bool__(self):
        return self.accepted


def _reject(reason: RejectReason) -> Verdict:
    return Verdict(False, reason)


def stored_resolution(chain: Chain, block: Block, params: ChainParams) -> Resolution:
    """Rebuild each transaction's resolved calls from what ``block`` stores."""
    all_calls, all_sources = [], []
    for entry in block.entries:
        sites = call_sites(entry.tx)
        if entry.tx.initiator_resolved:
            all_calls.append(list(entry.tx.mode.calls))
            all_sources.append([Source.INITIATOR] * len(sites))
            continue
        fresh = iter(entry.fresh_calls)
        calls, sources = [], []
        for site in sites:
            if site.freshness is Freshness.FRESH:
                call = next(fresh, None)
                calls.append(call)
                sources.append(Source.LIVE if call is not None else Source.MISSING)
                continue
            key = site.key
            call = block.response_cache.get(key)
            source = Source.CACHE
            if call is None and site.freshness is Freshness.CACHEABLE_HISTORICAL:
                call = chain.historical_lookup(key, block.height, params.history_window)
                source = Source.HISTORY
            calls.append(call)
            sources.append(source if call is not None else Source.MISSING)
        all_calls.append(calls)
        all_sources.append(sources)
    fresh_calls = [e.fresh_calls for e in block.entries]
    return Resolution(all_calls, all_sources, block.response_cache, fresh_calls, 0)


def _structure_ok(chain: Chain, block: Block, params: ChainParams) -> bool:
    if len(block.entries) > params.max_block_txs:
        return False
    if count_call_sites(block.transactions) > params.block_call_cap:
        return False
    if block.header.completed_at < chain.tip.header.completed_at:
        return False
    referenced: set[CallKey] = set()
    for entry in block.entries:
        tx = entry.tx
        if not well_formed(tx) or entry.receipt.tx_id != tx.tx_id:
            return False
        sites = call_sites(tx)
        fresh_sites = [s for s in sites if s.freshness is Freshness.FRESH]
        if tx.initiator_resolved:
            if entry.fresh_calls:
                return False
            continue
        if len(entry.fresh_calls) != len(fresh_sites):
            return False
        for site, call in zip(fresh_sites, entry.fresh_calls):
            if call is not None and not site.matches(call.request):
                return False
        referenced.update(s.key for s in sites if s.freshness.cacheable)
    for key, call in block.response_cache.items():
        if not call.request.freshness.cacheable or call.key != key or key not in referenced:
            return False
    return True


def validate_block(
    chain: Chain,
    block: Block,
    keys: Mapping[str, bytes],
    params: ChainParams = ChainParams(),
    *,
    recall: OracleAccess | None = None,
) -> Verdict:
    """Decide whether ``block`` validly extends ``chain``.

    Only the calls stored in the block (and in earlier cached blocks) are
    used.  ``recall`` is for the all-nodes-call comparison mode, where each
    validator repeats every live call itself and demands the same payload.
    """
    h = block.header
    if h.height != chain.height + 1 or h.parent_hash != chain.tip_hash:
        raise ValueError("validator does not hold the parent block")

    if block.partial().partial_hash != h.partial_hash or not pow_valid(
        h.partial_hash, h.nonce_pow, params.difficulty
    ):
        return _reject(RejectReason.BAD_POW)

    if not _structure_ok(chain, block, params):
        return _reject(RejectReason.MALFORMED_CACHE)

    tx_ids = [tx.tx_id for tx in block.transactions]
    if len(set(tx_ids)) != len(tx_ids) or any(t in chain.included_tx_ids for t in tx_ids):
        return _reject(RejectReason.REPLAYED_TRANSACTION)

    stored = block.response_cache.calls() + [
        c for e in block.entries for c in e.fresh_calls if c is not None
    ]
    for call in stored:
        if keys.get(call.request.endpoint_uri) != call.public_key:
            return _reject(RejectReason.BAD_SIGNATURE)
        if not verify_external_call(call, h.completed_at, None).ok:
            return _reject(RejectReason.BAD_SIGNATURE)

    nonces = block_nonces(block)
    if len(set(nonces)) != len(nonces) or any(n in chain.seen_nonces for n in nonces):
        return _reject(RejectReason.REPLAYED_NONCE)

    if recall is not None:
        for call in stored:
            again = recall(call.request)
            if again is None or again.payload != call.signed_response.payload:
                return _reject(RejectReason.STATE_MISMATCH)

    resolution = stored_resolution(chain, block, params)
    state = chain.tip_state
    for entry, calls in zip(block.entries, resolution.calls):
        state, receipt = apply_transaction(
            state, entry.tx, calls, h.completed_at, keys=keys, max_age=params.max_age
        )
        if receipt != entry.receipt:
            return _reject(RejectReason.STATE_MISMATCH)
    if state_root(state) != h.state_root_after:
        return _reject(RejectReason.STATE_MISMATCH)
    return Verdict(True, state=state)
