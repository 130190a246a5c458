"""Line-oriented chain export and offline revalidation.

The first line is a header record (format, version, consensus parameters,
trusted endpoint keys, genesis balances); every following line is one block
from height 1 upward.  All byte strings are lowercase hex and field order is
fixed, so an honest export is byte-for-byte reproducible.
"""

from __future__ import annotations

import json
from collections.abc import Mapping
from pathlib import Path
from typing import Any

from vecsim.execution import (
    Action,
    FinalizerResolved,
    InitiatorResolved,
    Noop,
    OracleInput,
    PlaceBet,
    PriceTransfer,
    Receipt,
    ReceiptStatus,
    SettleBet,
    Transaction,
)
from vecsim.ledger import (
    Block,
    BlockEntry,
    BlockHeader,
    Chain,
    ChainParams,
    ResponseCache,
    validate_block,
)
from vecsim.verifiable_call import (
    CallKey,
    ExternalCallRequest,
    Freshness,
    SignedResponse,
    VerifiableExternalCall,
)

FORMAT_NAME = "vecsim-chain"
FORMAT_VERSION = 1


class FormatError(ValueError):
    pass


def _hex(b: bytes | None) -> str | None:
    return None if b is None else b.hex()


def _unhex(s: Any, field: str) -> bytes:
    if not isinstance(s, str):
        raise FormatError(f"{field}: expected hex string")
    try:
        return bytes.fromhex(s)
    except ValueError as exc:
        raise FormatError(f"{field}: {exc}") from None


def _opt_unhex(s: Any, field: str) -> bytes | None:
    return None if s is None else _unhex(s, field)


# -- to JSON ---------------------------------------------------------------


def call_to_json(call: VerifiableExternalCall) -> dict:
    req, resp = call.request, call.signed_response
    return {
        "request": {
            "endpoint_uri": req.endpoint_uri,
            "payload": req.payload.hex(),
            "request_nonce": _hex(req.request_nonce),
            "freshness": req.freshness.value,
        },
        "public_key": call.public_key.hex(),
        "signed_response": {
            "payload": resp.payload.hex(),
            "response_nonce": _hex(resp.response_nonce),
            "responder_timestamp": resp.responder_timestamp,
            "signature": resp.signature.hex(),
        },
    }


def action_to_json(action: Action) -> dict:
    if isinstance(action, PlaceBet):
        return {"kind": "place_bet", "stake": action.stake}
    if isinstance(action, SettleBet):
        return {"kind": "settle_bet", "bet_id": action.bet_id}
    if isinstance(action, PriceTransfer):
        return {
            "kind": "price_transfer",
            "sender": action.sender,
            "recipient": action.recipient,
            "feed_id": action.feed_id,
            "freshness": action.freshness.value,
            "from_state": action.from_state,
        }
    if isinstance(action, OracleInput):
        return {"kind": "oracle_input", "uri": action.uri, "value": action.value.hex(), "bet_id": action.bet_id}
    return {"kind": "noop"}


def tx_to_json(tx: Transaction) -> dict:
    if isinstance(tx.mode, InitiatorResolved):
        mode = {"kind": "initiator", "calls": [call_to_json(c) for c in tx.mode.calls]}
    else:
        mode = {"kind": "finalizer"}
    return {
        "tx_id": tx.tx_id.hex(),
        "initiator": tx.initiator,
        "action": action_to_json(tx.action),
        "mode": mode,
        "max_calls": tx.max_calls,
        "salt": tx.salt,
    }


def receipt_to_json(receipt: Receipt) -> dict:
    return {
        "tx_id": receipt.tx_id.hex(),
        "status": receipt.status.value,
        "calls_used": [k.hex() for k in receipt.calls_used],
        "state_root_after": receipt.state_root_after.hex(),
    }


def block_to_json(block: Block) -> dict:
    h = block.header
    return {
        "header": {
            "height": h.height,
            "parent_hash": h.parent_hash.hex(),
            "producer": h.producer,
            "partial_hash": h.partial_hash.hex(),
            "nonce_pow": h.nonce_pow,
            "state_root_after": h.state_root_after.hex(),
            "completed_at": h.completed_at,
        },
        "transactions": [
            {
                "tx": tx_to_json(e.tx),
                "receipt": receipt_to_json(e.receipt),
                "fresh_calls": [None if c is None else call_to_json(c) for c in e.fresh_calls],
            }
            for e in block.entries
        ],
        "response_cache": [
            {"key": key.hex(), "call": call_to_json(call)} for key, call in block.response_cache.items()
        ],
    }


# -- from JSON -------------------------------------------------------------


def _get(obj: Any, key: str, where: str) -> Any:
    if not isinstance(obj, dict) or key not in obj:
        raise FormatError(f"{where}: missing field {key!r}")
    return obj[key]


def _int(obj: Any, key: str, where: str) -> int:
    value = _get(obj, key, where)
    if not isinstance(value, int) or isinstance(value, bool) or value < 0:
        raise FormatError(f"{where}.{key}: expected non-negative integer")
    return value


def _enum(cls, value: Any, where: str):
    try:
        return cls(value)
    except ValueError:
        raise FormatError(f"{where}: unknown value {value!r}") from None


def call_from_json(obj: Any, where: str = "call") -> VerifiableExternalCall:
    req = _get(obj, "request", where)
    resp = _get(obj, "signed_response", where)
    try:
        request = ExternalCallRequest(
            endpoint_uri=_get(req, "endpoint_uri", where),
            payload=_unhex(_get(req, "payload", where), f"{where}.request.payload"),
            request_nonce=_opt_unhex(_get(req, "request_nonce", where), f"{where}.request.request_nonce"),
            freshness=_enum(Freshness, _get(req, "freshness", where), f"{where}.request.freshness"),
        )
    except (ValueError, TypeError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"{where}.request: {exc}") from None
    response = SignedResponse(
        payload=_unhex(_get(resp, "payload", where), f"{where}.signed_response.payload"),
        response_nonce=_opt_unhex(_get(resp, "response_nonce", where), f"{where}.response_nonce"),
        responder_timestamp=_int(resp, "responder_timestamp", where),
        signature=_unhex(_get(resp, "signature", where), f"{where}.signature"),
    )
    return VerifiableExternalCall(request, _unhex(_get(obj, "public_key", where), f"{where}.public_key"), response)


def action_from_json(obj: Any, where: str) -> Action:
    kind = _get(obj, "kind", where)
    try:
        if kind == "place_bet":
            return PlaceBet(_int(obj, "stake", where))
        if kind == "settle_bet":
            return SettleBet(_get(obj, "bet_id", where))
        if kind == "price_transfer":
            return PriceTransfer(
                _get(obj, "sender", where),
                _get(obj, "recipient", where),
                _get(obj, "feed_id", where),
                _enum(Freshness, _get(obj, "freshness", where), f"{where}.freshness"),
                bool(_get(obj, "from_state", where)),
            )
        if kind == "oracle_input":
            return OracleInput(
                _get(obj, "uri", where),
                _unhex(_get(obj, "value", where), f"{where}.value"),
                _get(obj, "bet_id", where),
            )
        if kind == "noop":
            return Noop()
    except ValueError as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"{where}: {exc}") from None
    raise FormatError(f"{where}: unknown action kind {kind!r}")


def tx_from_json(obj: Any, where: str = "tx") -> Transaction:
    mode_obj = _get(obj, "mode", where)
    mode_kind = _get(mode_obj, "kind", f"{where}.mode")
    if mode_kind == "initiator":
        calls = _get(mode_obj, "calls", f"{where}.mode")
        mode = InitiatorResolved(tuple(call_from_json(c, f"{where}.mode.calls[{i}]") for i, c in enumerate(calls)))
    elif mode_kind == "finalizer":
        mode = FinalizerResolved()
    else:
        raise FormatError(f"{where}.mode: unknown kind {mode_kind!r}")
    tx = Transaction(
        initiator=_get(obj, "initiator", where),
        action=action_from_json(_get(obj, "action", where), f"{where}.action"),
        mode=mode,
        max_calls=_int(obj, "max_calls", where),
        salt=_int(obj, "salt", where),
    )
    if tx.tx_id.hex() != _get(obj, "tx_id", where):
        raise FormatError(f"{where}.tx_id: does not match transaction contents")
    return tx


def receipt_from_json(obj: Any, where: str = "receipt") -> Receipt:
    return Receipt(
        tx_id=_unhex(_get(obj, "tx_id", where), f"{where}.tx_id"),
        status=_enum(ReceiptStatus, _get(obj, "status", where), f"{where}.status"),
        calls_used=tuple(
            CallKey(_unhex(k, f"{where}.calls_used")) for k in _get(obj, "calls_used", where)
        ),
        state_root_after=_unhex(_get(obj, "state_root_after", where), f"{where}.state_root_after"),
    )


def block_from_json(obj: Any, where: str = "block") -> Block:
    h = _get(obj, "header", where)
    hw = f"{where}.header"
    header = BlockHeader(
        height=_int(h, "height", hw),
        parent_hash=_unhex(_get(h, "parent_hash", hw), f"{hw}.parent_hash"),
        producer=_int(h, "producer", hw),
        partial_hash=_unhex(_get(h, "partial_hash", hw), f"{hw}.partial_hash"),
        nonce_pow=_int(h, "nonce_pow", hw),
        state_root_after=_unhex(_get(h, "state_root_after", hw), f"{hw}.state_root_after"),
        completed_at=_int(h, "completed_at", hw),
    )
    entries = []
    for i, e in enumerate(_get(obj, "transactions", where)):
        ew = f"{where}.transactions[{i}]"
        fresh = tuple(
            None if c is None else call_from_json(c, f"{ew}.fresh_calls[{j}]")
            for j, c in enumerate(_get(e, "fresh_calls", ew))
        )
        entries.append(
            BlockEntry(tx_from_json(_get(e, "tx", ew), f"{ew}.tx"), receipt_from_json(_get(e, "receipt", ew)), fresh)
        )
    cache_items = []
    for i, c in enumerate(_get(obj, "response_cache", where)):
        cw = f"{where}.response_cache[{i}]"
        cache_items.append(
            (CallKey(_unhex(_get(c, "key", cw), f"{cw}.key")), call_from_json(_get(c, "call", cw), f"{cw}.call"))
        )
    return Block(header, tuple(entries), ResponseCache.from_items(cache_items))


# -- whole chains ----------------------------------------------------------


def _dumps(obj: Any) -> str:
    return json.dumps(obj, separators=(",", ":"), ensure_ascii=True)


def dump_chain(chain: Chain, keys: Mapping[str, bytes], params: ChainParams) -> str:
    header = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "params": {
            "difficulty": params.difficulty,
            "history_window": params.history_window,
            "max_age": params.max_age,
            "block_call_cap": params.block_call_cap,
            "max_block_txs": params.max_block_txs,
        },
        "keys": {uri: keys[uri].hex() for uri in sorted(keys)},
        "genesis_balances": {acct: chain.genesis_balances[acct] for acct in sorted(chain.genesis_balances)},
    }
    lines = [_dumps(header)] + [_dumps(block_to_json(b)) for b in chain.blocks[1:]]
    return "\n".join(lines) + "\n"


def export_chain(chain: Chain, path: str | Path, keys: Mapping[str, bytes], params: ChainParams) -> None:
    Path(path).write_text(dump_chain(chain, keys, params), encoding="utf-8")


def load_chain_text(text: str) -> tuple[dict, ChainParams, dict[str, bytes], list[Block]]:
    """Parse an export into (header, params, keys, blocks); raises FormatError."""
    lines = [line for line in text.splitlines() if line.strip()]
    if not lines:
        raise FormatError("empty chain file")
    try:
        records = [json.loads(line) for line in lines]
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid JSON: {exc}") from None
    header = records[0]
    if _get(header, "format", "header") != FORMAT_NAME or _get(header, "version", "header") != FORMAT_VERSION:
        raise FormatError("header: unsupported format or version")
    p = _get(header, "params", "header")
    params = ChainParams(
        difficulty=_int(p, "difficulty", "header.params"),
        history_window=_int(p, "history_window", "header.params"),
        max_age=_int(p, "max_age", "header.params"),
        block_call_cap=_int(p, "block_call_cap", "header.params"),
        max_block_txs=_int(p, "max_block_txs", "header.params"),
    )
    keys = {uri: _unhex(k, f"header.keys[{uri}]") for uri, k in _get(header, "keys", "header").items()}
    genesis = _get(header, "genesis_balances", "header")
    if not isinstance(genesis, dict) or not all(isinstance(v, int) and v >= 0 for v in genesis.values()):
        raise FormatError("header.genesis_balances: expected map of non-negative integers")
    blocks = [block_from_json(r, f"line {i + 2}") for i, r in enumerate(records[1:])]
    return header, params, keys, blocks


def validate_chain_text(text: str, keys: Mapping[str, bytes] | None = None) -> bool:
    """Replay an export from genesis on a fresh validator; no oracle is ever contacted.

    ``keys`` overrides the trusted keys recorded in the file header.
    """
    header, params, file_keys, blocks = load_chain_text(text)
    trusted = dict(keys) if keys is not None else file_keys
    chain = Chain(header["genesis_balances"])
    for block in blocks:
        if block.height != chain.height + 1 or block.header.parent_hash != chain.tip_hash:
            return False
        verdict = validate_block(chain, block, trusted, params)
        if not verdict:
            return False
        chain.append(block, verdict.state)
    return True


def validate_chain_file(path: str | Path, keys: Mapping[str, bytes] | None = None) -> bool:
    return validate_chain_text(Path(path).read_text(encoding="utf-8"), keys)
