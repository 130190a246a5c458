"""Deterministic discrete-event simulation of the two-phase block protocol.

All nodes, the oracles and the message queue advance on one logical event
loop.  A node that wins proof-of-work broadcasts its partial block, then
alone performs the block's external calls and broadcasts the completion.
Peers that accepted the partial stop mining and wait for the completion
until a deadline, after which they discard the partial and mine again.

Events are ordered by ``(deliver_at, insertion sequence)`` and every random
choice is drawn from streams seeded by ``NetworkConfig.global_seed``, so the
event trace is a pure function of the configuration and the scenario.
"""

from __future__ import annotations

import enum
import heapq
import random
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Union

from vecsim._codec import lp, sha256, u64
from vecsim.execution import (
    DEFAULT_MAX_AGE,
    FEED_PREFIX,
    RNG_URI,
    OracleInput,
    PlaceBet,
    ReceiptStatus,
    Transaction,
    oracle_account,
    state_root,
    well_formed,
)
from vecsim.ledger import (
    Block,
    CallPlan,
    Chain,
    ChainParams,
    PartialBlock,
    assemble_block,
    encode_partial,
    materialize,
    plan_calls,
    pow_valid,
    select_transactions,
    validate_block,
)
from vecsim.oracle import OracleDirectory, handle_request
from vecsim.verifiable_call import (
    ExternalCallRequest,
    Freshness,
    NonceStream,
    SignedResponse,
    canonical_encode_request,
    canonical_encode_response,
    make_nonce,
)

AGENT_SEED_SALT = 0x5EED_A6E7


class OracleMode(enum.Enum):
    TRADITIONAL_ORACLE = "traditional_oracle"
    ALL_NODES_CALL = "all_nodes_call"
    VERIFIABLE_EXTERNAL_CALLS = "verifiable_external_calls"


@dataclass(frozen=True)
class NetworkConfig:
    node_count: int = 4
    link_latency: int = 1
    drop_probability: Fraction = Fraction(0)
    difficulty: int = 8
    completion_timeout: int = 100
    global_seed: int = 0
    oracle_latency: int | None = None
    history_window: int = 2
    max_age: int = DEFAULT_MAX_AGE
    block_call_cap: int = 64
    max_block_txs: int = 32
    mine_empty: bool = False

    def __post_init__(self):
        object.__setattr__(self, "drop_probability", Fraction(self.drop_probability))
        if self.node_count < 1:
            raise ValueError("node_count must be at least 1")
        if not 0 <= self.drop_probability <= 1:
            raise ValueError("drop_probability must lie in [0, 1]")
        if self.link_latency < 0 or self.completion_timeout < 0:
            raise ValueError("latencies and timeouts must be non-negative")
        if not 0 <= self.difficulty <= 256:
            raise ValueError("difficulty is a leading-zero bit count in [0, 256]")

    @property
    def params(self) -> ChainParams:
        return ChainParams(
            difficulty=self.difficulty,
            history_window=self.history_window,
            max_age=self.max_age,
            block_call_cap=self.block_call_cap,
            max_block_txs=self.max_block_txs,
        )

    @property
    def oracle_delay(self) -> int:
        return self.link_latency if self.oracle_latency is None else self.oracle_latency


# -- messages --------------------------------------------------------------


@dataclass(frozen=True)
class SubmitTx:
    tx: Transaction


@dataclass(frozen=True)
class PartialBlockMsg:
    partial: PartialBlock


@dataclass(frozen=True)
class CompletionMsg:
    block: Block


@dataclass(frozen=True)
class OracleRequest:
    request: ExternalCallRequest
    reply_to: int
    tag: bytes
    index: int


@dataclass(frozen=True)
class OracleReply:
    tag: bytes
    index: int
    response: SignedResponse | None


@dataclass(frozen=True)
class CompletionTimeout:
    partial_hash: bytes


@dataclass(frozen=True)
class ClientAction:
    index: int


Message = Union[
    SubmitTx, PartialBlockMsg, CompletionMsg, OracleRequest, OracleReply, CompletionTimeout, ClientAction
]


@dataclass(order=True)
class SimEvent:
    deliver_at: int
    seq: int
    source: str = field(compare=False)
    destination: int | str = field(compare=False)
    message: Message = field(compare=False)


def message_digest(msg: Message) -> str:
    if isinstance(msg, SubmitTx):
        raw = msg.tx.tx_id
    elif isinstance(msg, PartialBlockMsg):
        raw = sha256(encode_partial(msg.partial))
    elif isinstance(msg, CompletionMsg):
        raw = msg.block.block_hash
    elif isinstance(msg, OracleRequest):
        raw = sha256(
            canonical_encode_request(msg.request, include_nonce=True),
            u64(msg.reply_to),
            lp(msg.tag),
            u64(msg.index),
        )
    elif isinstance(msg, OracleReply):
        r = msg.response
        body = b"none" if r is None else (
            canonical_encode_response(r.payload, r.response_nonce, r.responder_timestamp) + r.signature
        )
        raw = sha256(lp(msg.tag), u64(msg.index), body)
    elif isinstance(msg, CompletionTimeout):
        raw = msg.partial_hash
    else:
        raw = sha256(b"client", u64(msg.index))
    return raw.hex()[:16]


def _name(endpoint: int | str) -> str:
    return f"n{endpoint}" if isinstance(endpoint, int) else endpoint


# -- nodes -----------------------------------------------------------------


class Phase(enum.Enum):
    MINING = "mining"
    AWAITING_COMPLETION = "awaiting_completion"
    COMPLETING = "completing"


@dataclass
class _Completion:
    partial: PartialBlock
    parent: Chain
    plan: CallPlan
    responses: list[SignedResponse | None]
    waiting: set[int]


class NodeState:
    def __init__(self, node_id: int, genesis_balances, global_seed: int):
        self.node_id = node_id
        self.chain = Chain(genesis_balances)
        # every validated block this node holds, keyed by hash, as a chain view
        self.views: dict[bytes, Chain] = {self.chain.tip_hash: self.chain}
        self.phase = Phase.MINING
        self.awaiting: bytes | None = None
        self.deadline: int | None = None
        self.completing: _Completion | None = None
        self.stream = NonceStream(global_seed ^ node_id)
        self.seen: dict[bytes, Transaction] = {}
        self.expired: set[bytes] = set()
        self.crashed = False
        self.pow_nonce = 0
        self._candidate_key: tuple | None = None
        self._candidate: PartialBlock | None = None

    def pool(self) -> list[Transaction]:
        included = self.chain.included_tx_ids
        return [tx for tx in self.seen.values() if tx.tx_id not in included]

    def candidate(self, params: ChainParams, mine_empty: bool) -> PartialBlock | None:
        key = (self.chain.tip_hash, len(self.seen))
        if key != self._candidate_key:
            txs = select_transactions(self.pool(), params, self.chain.included_tx_ids)
            self._candidate_key = key
            self._candidate = None
            if txs or mine_empty:
                self._candidate = PartialBlock(
                    self.chain.height + 1, self.chain.tip_hash, self.node_id, txs
                )
        return self._candidate

    def __repr__(self):
        return f"NodeState(n{self.node_id}, height={self.chain.height}, phase={self.phase.value})"


# -- world -----------------------------------------------------------------

ClientCallback = Callable[["World"], Sequence[Transaction]]


class World:
    """Nodes, oracles and the event queue of one simulation run."""

    def __init__(
        self,
        config: NetworkConfig,
        directory: OracleDirectory,
        genesis_balances,
        *,
        mode: OracleMode = OracleMode.VERIFIABLE_EXTERNAL_CALLS,
        crash_winner_at_height: int | None = None,
    ):
        self.config = config
        self.params = config.params
        self.directory = directory
        self.keys = directory.public_keys()
        self.mode = mode
        self.nodes = [NodeState(i, genesis_balances, config.global_seed) for i in range(config.node_count)]
        self.queue: list[SimEvent] = []
        self.seq = 0
        self.tick = 0
        self.trace: list[str] = []
        self.rng = random.Random(config.global_seed)
        self.crash_winner_at_height = crash_winner_at_height
        self.crashed_winner: int | None = None
        self.invocations_by_block: dict[bytes, int] = {}
        self.callers_by_block: dict[bytes, set[int]] = {}
        self.agent_invocations = 0
        self._clients: list[ClientCallback] = []
        self._agent_stream = NonceStream(config.global_seed ^ AGENT_SEED_SALT)
        self._agent_salt = 0
        self._agent_bets: set[str] = set()
        self._agent_scanned: set[bytes] = set()
        if mode is OracleMode.TRADITIONAL_ORACLE:
            self._agent_push_feeds()

    # -- plumbing ----------------------------------------------------------

    def _emit(self, source: str, destination: int | str, message: Message, delay: int) -> None:
        heapq.heappush(self.queue, SimEvent(self.tick + delay, self.seq, source, destination, message))
        self.seq += 1

    def _log(self, src: str, dst: str, kind: str, digest: str) -> None:
        self.trace.append(f"{self.tick} {src} {dst} {kind} {digest}")

    def _dropped(self) -> bool:
        p = self.config.drop_probability
        if p == 0:
            return False
        if p == 1:
            return True
        return self.rng.random() < p

    def _broadcast(self, node: NodeState, message: Message) -> None:
        for peer in self.nodes:
            if peer.node_id == node.node_id:
                continue
            if self._dropped():
                self._log(_name(node.node_id), _name(peer.node_id), "Dropped", message_digest(message))
                continue
            self._emit(_name(node.node_id), peer.node_id, message, self.config.link_latency)

    def inject(self, transactions: Sequence[Transaction], source: str = "client") -> None:
        """Submit transactions to every node, arriving after one link latency."""
        for tx in transactions:
            for node in self.nodes:
                self._emit(source, node.node_id, SubmitTx(tx), self.config.link_latency)

    def schedule_client(self, tick: int, callback: ClientCallback) -> None:
        """Run ``callback`` at ``tick`` and inject the transactions it returns."""
        if tick < self.tick:
            raise ValueError("cannot schedule a client action in the past")
        self._clients.append(callback)
        heapq.heappush(
            self.queue, SimEvent(tick, self.seq, "client", "client", ClientAction(len(self._clients) - 1))
        )
        self.seq += 1

    def _invoke(self, request: ExternalCallRequest, tag: bytes | None, caller: int | None):
        endpoint = self.directory.entries.get(request.endpoint_uri)
        before = endpoint.invocation_count if endpoint else 0
        response = handle_request(self.directory, request, self.tick)
        if endpoint is not None and endpoint.invocation_count > before and tag is not None:
            self.invocations_by_block[tag] = self.invocations_by_block.get(tag, 0) + 1
        if caller is not None and tag is not None:
            self.callers_by_block.setdefault(tag, set()).add(caller)
        return response

    # -- event loop --------------------------------------------------------

    def step(self) -> None:
        """Deliver the next due event, or run one mining round and advance the clock."""
        if self.queue and self.queue[0].deliver_at <= self.tick:
            event = heapq.heappop(self.queue)
            msg = event.message
            self._log(event.source, _name(event.destination), type(msg).__name__, message_digest(msg))
            self._dispatch(event)
            return
        self._mining_round()
        self.tick += 1

    def run(self, until: Callable[[World], bool] | None = None, max_ticks: int = 100_000) -> None:
        while self.tick < max_ticks:
            if until is not None and until(self):
                return
            self.step()

    def _dispatch(self, event: SimEvent) -> None:
        msg = event.message
        if isinstance(msg, ClientAction):
            self.inject(self._clients[msg.index](self))
            return
        if isinstance(msg, OracleRequest):
            response = self._invoke(msg.request, msg.tag, None)
            reply = OracleReply(msg.tag, msg.index, response)
            self._emit(str(event.destination), msg.reply_to, reply, self.config.oracle_delay)
            return
        node = self.nodes[event.destination]
        if node.crashed:
            return
        if isinstance(msg, SubmitTx):
            if msg.tx.tx_id not in node.seen and well_formed(msg.tx):
                node.seen[msg.tx.tx_id] = msg.tx
        elif isinstance(msg, PartialBlockMsg):
            self.on_partial_received(node, msg.partial)
        elif isinstance(msg, CompletionMsg):
            self.on_completion_received(node, msg.block)
        elif isinstance(msg, OracleReply):
            self._on_oracle_reply(node, msg)
        elif isinstance(msg, CompletionTimeout):
            if node.phase is Phase.AWAITING_COMPLETION and node.awaiting == msg.partial_hash:
                self.on_completion_timeout(node)

    def _mining_round(self) -> None:
        for node in self.nodes:
            if node.crashed or node.phase is not Phase.MINING:
                continue
            candidate = node.candidate(self.params, self.config.mine_empty)
            if candidate is None:
                continue
            nonce = node.pow_nonce
            node.pow_nonce += 1
            if pow_valid(candidate.partial_hash, nonce, self.params.difficulty):
                self.on_mine_success(node, candidate.with_nonce(nonce))

    # -- protocol handlers -------------------------------------------------

    def on_mine_success(self, node: NodeState, partial: PartialBlock) -> None:
        self._log(_name(node.node_id), "*", "Mined", partial.partial_hash.hex()[:16])
        self._broadcast(node, PartialBlockMsg(partial))
        if self.crashed_winner is None and self.crash_winner_at_height == partial.height:
            node.crashed = True
            self.crashed_winner = node.node_id
            self._log(_name(node.node_id), "*", "Crashed", partial.partial_hash.hex()[:16])
            return
        plan = plan_calls(partial.transactions, node.chain, node.stream, self.params)
        node.phase = Phase.COMPLETING
        node.completing = _Completion(
            partial, node.chain, plan, [None] * len(plan.live), set(range(len(plan.live)))
        )
        if not plan.live:
            self._finish_completion(node)
            return
        tag = partial.partial_hash
        self.callers_by_block.setdefault(tag, set()).add(node.node_id)
        for i, request in enumerate(plan.live):
            self._emit(
                _name(node.node_id),
                request.endpoint_uri,
                OracleRequest(request, node.node_id, tag, i),
                self.config.oracle_delay,
            )

    def _on_oracle_reply(self, node: NodeState, reply: OracleReply) -> None:
        comp = node.completing
        if comp is None or comp.partial.partial_hash != reply.tag or reply.index not in comp.waiting:
            return
        comp.responses[reply.index] = reply.response
        comp.waiting.discard(reply.index)
        if not comp.waiting:
            self._finish_completion(node)

    def _finish_completion(self, node: NodeState) -> None:
        comp = node.completing
        resolution = materialize(comp.plan, comp.responses, self.keys)
        block, state = assemble_block(
            comp.parent, comp.partial, resolution, keys=self.keys, params=self.params, now=self.tick
        )
        node.completing = None
        node.phase = Phase.MINING
        self._store_block(node, comp.parent, block, state)
        self._broadcast(node, CompletionMsg(block))

    def on_partial_received(self, node: NodeState, partial: PartialBlock) -> None:
        if node.phase is not Phase.MINING:
            return
        tip = node.chain
        if partial.parent_hash != tip.tip_hash or partial.height != tip.height + 1:
            return
        ph = partial.partial_hash
        if ph in node.expired or not pow_valid(ph, partial.nonce_pow, self.params.difficulty):
            return
        txs = partial.transactions
        if select_transactions(txs, self.params, tip.included_tx_ids) != txs:
            return
        node.phase = Phase.AWAITING_COMPLETION
        node.awaiting = ph
        node.deadline = self.tick + self.config.completion_timeout
        self._emit(_name(node.node_id), node.node_id, CompletionTimeout(ph), self.config.completion_timeout)

    def on_completion_received(self, node: NodeState, block: Block) -> None:
        ph = block.header.partial_hash
        if ph in node.expired or block.block_hash in node.views:
            return
        parent = node.views.get(block.header.parent_hash)
        if parent is None or parent.height + 1 != block.height:
            return
        recall = None
        if self.mode is OracleMode.ALL_NODES_CALL:
            def recall(request, _node=node.node_id):
                return self._invoke(request, ph, _node)
        verdict = validate_block(parent, block, self.keys, self.params, recall=recall)
        if not verdict:
            self._log(_name(node.node_id), "*", f"Rejected:{verdict.reason.value}", ph.hex()[:16])
            return
        self._store_block(node, parent, block, verdict.state)

    def on_completion_timeout(self, node: NodeState) -> None:
        node.expired.add(node.awaiting)
        self._log(_name(node.node_id), "*", "TimedOut", node.awaiting.hex()[:16])
        node.phase = Phase.MINING
        node.awaiting = None
        node.deadline = None

    def _store_block(self, node: NodeState, parent: Chain, block: Block, state) -> None:
        view = parent.copy()
        view.append(block, state)
        node.views[block.block_hash] = view
        if view.height <= node.chain.height:
            return
        node.chain = view
        if node.phase is Phase.AWAITING_COMPLETION:
            node.phase = Phase.MINING
            node.awaiting = None
            node.deadline = None
        if self.mode is OracleMode.TRADITIONAL_ORACLE and node is self.observer():
            self._agent_scan(node)

    # -- traditional oracle agent ------------------------------------------

    def observer(self) -> NodeState | None:
        """The node whose committed chain the traditional oracle agent watches."""
        return next((n for n in self.nodes if not n.crashed), None)

    def _agent_push(self, uri: str, request: ExternalCallRequest, bet_id: str | None) -> None:
        before = self.directory.total_invocations()
        response = handle_request(self.directory, request, self.tick)
        self.agent_invocations += self.directory.total_invocations() - before
        if response is None:
            return
        tx = Transaction(oracle_account(uri), OracleInput(uri, response.payload, bet_id), salt=self._agent_salt)
        self._agent_salt += 1
        self.inject([tx], source="oracle-agent")

    def _agent_push_feeds(self) -> None:
        for endpoint in self.directory:
            uri = endpoint.endpoint_uri
            if uri.startswith(FEED_PREFIX):
                feed_id = uri[len(FEED_PREFIX):]
                self._agent_push(uri, ExternalCallRequest(uri, feed_id.encode("utf-8")), None)

    def _agent_scan(self, node: NodeState) -> None:
        for block in node.chain.blocks[1:]:
            if block.block_hash in self._agent_scanned:
                continue
            self._agent_scanned.add(block.block_hash)
            for entry in block.entries:
                if not isinstance(entry.tx.action, PlaceBet):
                    continue
                if entry.receipt.status is not ReceiptStatus.APPLIED:
                    continue
                bet_id = entry.tx.tx_id.hex()
                if bet_id in self._agent_bets:
                    continue
                self._agent_bets.add(bet_id)
                request = ExternalCallRequest(
                    RNG_URI, bet_id.encode("utf-8"), make_nonce(self._agent_stream), Freshness.FRESH
                )
                self._agent_push(RNG_URI, request, bet_id)

    # -- observation helpers -----------------------------------------------

    def live_nodes(self) -> list[NodeState]:
        return [n for n in self.nodes if not n.crashed]

    def min_height(self) -> int:
        return min(n.chain.height for n in self.live_nodes())

    def max_height(self) -> int:
        return max(n.chain.height for n in self.nodes)

    def tips_consistent(self) -> bool:
        """Nodes sharing a tip hash must hold bit-identical tip state roots."""
        roots: dict[bytes, bytes] = {}
        for node in self.nodes:
            root = state_root(node.chain.tip_state)
            if roots.setdefault(node.chain.tip_hash, root) != root:
                return False
            if root != node.chain.tip.header.state_root_after:
                return False
        return True

    def trace_text(self) -> str:
        header = "# vecsim-trace v1 fields: tick src dst kind digest\n"
        return header + "".join(line + "\n" for line in self.trace)


def at_height(height: int) -> Callable[[World], bool]:
    """Stop condition: every live node has reached ``height``."""
    return lambda world: world.min_height() >= height
