"""Scenario files, the scenario runner and its metrics report.

A scenario is one YAML document describing the network, the oracle
endpoints, genesis balances, a tick-stamped transaction script, the oracle
interaction mode and a stop condition.  See docs/SCHEMA.md for the format.
"""

from __future__ import annotations

import hashlib
import json
from collections.abc import Mapping
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Any

import yaml

from vecsim.chainfile import dump_chain, validate_chain_text
from vecsim.execution import (
    DEFAULT_MAX_CALLS,
    InitiatorResolved,
    Noop,
    OracleInput,
    PlaceBet,
    PriceTransfer,
    ReceiptStatus,
    SettleBet,
    Transaction,
    declared_calls,
    state_root,
)
from vecsim.ledger import Chain, Source, stored_resolution
from vecsim.network import NetworkConfig, OracleMode, World, at_height
from vecsim.oracle import (
    Availability,
    Constant,
    FailAfter,
    OracleDirectory,
    OracleEndpoint,
    SeededStream,
    SteppedFeed,
)
from vecsim.verifiable_call import Freshness, NonceStream, VerifiableExternalCall

SCHEMA_VERSION = 1
CLIENT_SEED_SALT = 0xC11E_27
DEFAULT_MAX_TICKS = 200_000


class ConfigError(ValueError):
    def __init__(self, location: str, message: str):
        super().__init__(f"{location}: {message}")
        self.location = location


@dataclass(frozen=True)
class OracleSpec:
    uri: str
    behavior: Any
    secret_key: bytes | None = None
    availability: Availability = Availability.UP

    def build(self) -> OracleEndpoint:
        endpoint = OracleEndpoint.create(self.uri, self.behavior, self.secret_key)
        endpoint.availability = self.availability
        return endpoint


@dataclass(frozen=True)
class TxSpec:
    action: str
    initiator: str
    label: str | None = None
    stake: int = 0
    bet: str | None = None
    sender: str | None = None
    recipient: str | None = None
    feed: str | None = None
    freshness: Freshness = Freshness.CACHEABLE_INTRA_BLOCK
    resolve: str = "finalizer"
    max_calls: int = DEFAULT_MAX_CALLS


@dataclass(frozen=True)
class ScriptEntry:
    tick: int
    txs: tuple[TxSpec, ...]


@dataclass(frozen=True)
class Scenario:
    network: NetworkConfig
    oracles: tuple[OracleSpec, ...]
    genesis_balances: Mapping[str, int]
    script: tuple[ScriptEntry, ...]
    mode: OracleMode = OracleMode.VERIFIABLE_EXTERNAL_CALLS
    stop_at_height: int | None = None
    stop_at_tick: int | None = None
    crash_winner_at_height: int | None = None
    max_ticks: int = DEFAULT_MAX_TICKS

    def with_overrides(self, mode: OracleMode | None = None, seed: int | None = None) -> Scenario:
        out = self
        if mode is not None:
            out = replace(out, mode=mode)
        if seed is not None:
            out = replace(out, network=replace(out.network, global_seed=seed))
        return out


# -- loading ---------------------------------------------------------------


def _req(obj: Mapping, key: str, where: str) -> Any:
    if key not in obj:
        raise ConfigError(where, f"missing required key {key!r}")
    return obj[key]


def _as_int(value: Any, where: str, minimum: int = 0) -> int:
    if not isinstance(value, int) or isinstance(value, bool) or value < minimum:
        raise ConfigError(where, f"expected integer >= {minimum}, got {value!r}")
    return value


def _as_str(value: Any, where: str) -> str:
    if not isinstance(value, str) or not value:
        raise ConfigError(where, f"expected non-empty string, got {value!r}")
    return value


def _as_hex(value: Any, where: str) -> bytes:
    if not isinstance(value, str):
        raise ConfigError(where, f"expected quoted hex string, got {value!r}")
    try:
        return bytes.fromhex(value)
    except ValueError:
        raise ConfigError(where, f"invalid hex {value!r}") from None


def _as_map(value: Any, where: str) -> Mapping:
    if not isinstance(value, Mapping):
        raise ConfigError(where, "expected a mapping")
    return value


def _check_keys(obj: Mapping, allowed: set[str], where: str) -> None:
    unknown = sorted(set(obj) - allowed)
    if unknown:
        raise ConfigError(where, f"unknown key(s) {', '.join(map(str, unknown))}")


def _parse_network(obj: Any) -> NetworkConfig:
    where = "network"
    obj = _as_map(obj, where)
    fields = {
        "node_count", "link_latency", "drop_probability", "difficulty", "completion_timeout",
        "global_seed", "oracle_latency", "history_window", "max_age", "block_call_cap",
        "max_block_txs", "mine_empty",
    }
    _check_keys(obj, fields, where)
    kwargs: dict[str, Any] = {}
    for key in fields - {"drop_probability", "mine_empty"}:
        if key in obj:
            kwargs[key] = _as_int(obj[key], f"{where}.{key}", 1 if key == "node_count" else 0)
    if "drop_probability" in obj:
        try:
            kwargs["drop_probability"] = Fraction(str(obj["drop_probability"]))
        except (ValueError, ZeroDivisionError):
            raise ConfigError(f"{where}.drop_probability", "expected a rational like 0, 1/4 or 0.5") from None
    if "mine_empty" in obj:
        kwargs["mine_empty"] = bool(obj["mine_empty"])
    try:
        return NetworkConfig(**kwargs)
    except ValueError as exc:
        raise ConfigError(where, str(exc)) from None


def _parse_oracle(obj: Any, where: str) -> OracleSpec:
    obj = _as_map(obj, where)
    _check_keys(
        obj,
        {"uri", "behavior", "value", "seed", "values", "ticks_per_step", "n", "secret_key", "availability"},
        where,
    )
    uri = _as_str(_req(obj, "uri", where), f"{where}.uri")
    kind = _req(obj, "behavior", where)
    if kind == "constant":
        behavior = Constant(_as_hex(_req(obj, "value", where), f"{where}.value"))
    elif kind == "seeded_stream":
        behavior = SeededStream(_as_int(_req(obj, "seed", where), f"{where}.seed"))
    elif kind == "stepped_feed":
        values = _req(obj, "values", where)
        if not isinstance(values, list) or not values:
            raise ConfigError(f"{where}.values", "expected a non-empty list of hex strings")
        behavior = SteppedFeed(
            tuple(_as_hex(v, f"{where}.values[{i}]") for i, v in enumerate(values)),
            _as_int(obj.get("ticks_per_step", 1), f"{where}.ticks_per_step", 1),
        )
    elif kind == "fail_after":
        behavior = FailAfter(
            _as_int(_req(obj, "n", where), f"{where}.n"),
            _as_hex(obj.get("value", "00"), f"{where}.value"),
        )
    else:
        raise ConfigError(f"{where}.behavior", f"unknown behavior {kind!r}")
    secret = None
    if "secret_key" in obj:
        secret = _as_hex(obj["secret_key"], f"{where}.secret_key")
        if len(secret) != 32:
            raise ConfigError(f"{where}.secret_key", "must be 32 bytes")
    try:
        availability = Availability(obj.get("availability", "up"))
    except ValueError:
        raise ConfigError(f"{where}.availability", "expected up or down") from None
    return OracleSpec(uri, behavior, secret, availability)


_ACTIONS = {"place_bet", "settle_bet", "price_transfer", "noop"}


def _parse_tx(obj: Any, where: str) -> TxSpec:
    obj = _as_map(obj, where)
    _check_keys(
        obj,
        {"action", "initiator", "label", "stake", "bet", "from", "to", "feed", "freshness", "resolve", "max_calls"},
        where,
    )
    action = _req(obj, "action", where)
    if action not in _ACTIONS:
        raise ConfigError(f"{where}.action", f"expected one of {sorted(_ACTIONS)}")
    initiator = _as_str(_req(obj, "initiator", where), f"{where}.initiator")
    spec = TxSpec(
        action=action,
        initiator=initiator,
        label=obj.get("label"),
        max_calls=_as_int(obj.get("max_calls", DEFAULT_MAX_CALLS), f"{where}.max_calls"),
    )
    resolve = obj.get("resolve", "finalizer")
    if resolve not in ("finalizer", "initiator"):
        raise ConfigError(f"{where}.resolve", "expected finalizer or initiator")
    spec = replace(spec, resolve=resolve)
    if action == "place_bet":
        spec = replace(spec, stake=_as_int(_req(obj, "stake", where), f"{where}.stake", 1))
    elif action == "settle_bet":
        spec = replace(spec, bet=_as_str(_req(obj, "bet", where), f"{where}.bet"))
    elif action == "price_transfer":
        try:
            freshness = Freshness(obj.get("freshness", "cacheable_intra_block"))
        except ValueError:
            freshness = None
        if freshness is None or not freshness.cacheable:
            raise ConfigError(f"{where}.freshness", "expected cacheable_intra_block or cacheable_historical")
        spec = replace(
            spec,
            sender=_as_str(obj.get("from", initiator), f"{where}.from"),
            recipient=_as_str(_req(obj, "to", where), f"{where}.to"),
            feed=_as_str(_req(obj, "feed", where), f"{where}.feed"),
            freshness=freshness,
        )
    return spec


def parse_scenario(doc: Any) -> Scenario:
    doc = _as_map(doc, "scenario")
    _check_keys(
        doc,
        {"version", "network", "oracles", "genesis_balances", "script", "mode", "stop", "faults", "max_ticks"},
        "scenario",
    )
    version = doc.get("version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError("version", f"unsupported schema version {version!r}")
    network = _parse_network(doc.get("network", {}))

    oracles_raw = doc.get("oracles", [])
    if not isinstance(oracles_raw, list):
        raise ConfigError("oracles", "expected a list")
    oracles = tuple(_parse_oracle(o, f"oracles[{i}]") for i, o in enumerate(oracles_raw))
    uris = [o.uri for o in oracles]
    if len(set(uris)) != len(uris):
        raise ConfigError("oracles", "endpoint URIs must be unique")

    balances_raw = _as_map(doc.get("genesis_balances", {}), "genesis_balances")
    balances = {
        _as_str(k, "genesis_balances"): _as_int(v, f"genesis_balances.{k}") for k, v in balances_raw.items()
    }

    script_raw = doc.get("script", [])
    if not isinstance(script_raw, list):
        raise ConfigError("script", "expected a list")
    script = []
    last_tick = -1
    labels: set[str] = set()
    for i, entry in enumerate(script_raw):
        where = f"script[{i}]"
        entry = _as_map(entry, where)
        _check_keys(entry, {"tick", "tx", "txs"}, where)
        tick = _as_int(_req(entry, "tick", where), f"{where}.tick")
        if tick <= last_tick:
            raise ConfigError(f"{where}.tick", "ticks must be strictly increasing")
        last_tick = tick
        if ("tx" in entry) == ("txs" in entry):
            raise ConfigError(where, "give exactly one of tx or txs")
        raw_txs = [entry["tx"]] if "tx" in entry else entry["txs"]
        if not isinstance(raw_txs, list) or not raw_txs:
            raise ConfigError(f"{where}.txs", "expected a non-empty list")
        txs = []
        for j, raw in enumerate(raw_txs):
            loc = f"{where}.txs[{j}]" if "txs" in entry else f"{where}.tx"
            spec = _parse_tx(raw, loc)
            if spec.label is not None:
                if spec.action != "place_bet" or spec.label in labels:
                    raise ConfigError(f"{loc}.label", "labels name place_bet txs and must be unique")
                labels.add(spec.label)
            if spec.bet is not None and spec.bet not in labels:
                raise ConfigError(f"{loc}.bet", f"unknown bet label {spec.bet!r}")
            txs.append(spec)
        script.append(ScriptEntry(tick, tuple(txs)))

    try:
        mode = OracleMode(doc.get("mode", OracleMode.VERIFIABLE_EXTERNAL_CALLS.value))
    except ValueError:
        raise ConfigError("mode", f"expected one of {[m.value for m in OracleMode]}") from None

    stop = _as_map(doc.get("stop", {}), "stop")
    _check_keys(stop, {"at_height", "at_tick"}, "stop")
    if len(stop) != 1:
        raise ConfigError("stop", "give exactly one of at_height or at_tick")
    stop_h = _as_int(stop["at_height"], "stop.at_height") if "at_height" in stop else None
    stop_t = _as_int(stop["at_tick"], "stop.at_tick") if "at_tick" in stop else None

    faults = _as_map(doc.get("faults", {}), "faults")
    _check_keys(faults, {"crash_winner_at_height"}, "faults")
    crash = faults.get("crash_winner_at_height")
    if crash is not None:
        crash = _as_int(crash, "faults.crash_winner_at_height", 1)

    return Scenario(
        network=network,
        oracles=oracles,
        genesis_balances=balances,
        script=tuple(script),
        mode=mode,
        stop_at_height=stop_h,
        stop_at_tick=stop_t,
        crash_winner_at_height=crash,
        max_ticks=_as_int(doc.get("max_ticks", DEFAULT_MAX_TICKS), "max_ticks", 1),
    )


def load_scenario(path: str | Path) -> Scenario:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(str(path), f"cannot read scenario: {exc.strerror}") from None
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{path}:{mark.line + 1}:{mark.column + 1}" if mark else str(path)
        raise ConfigError(where, "invalid YAML") from None
    return parse_scenario(doc)


# -- transactions from specs -----------------------------------------------


def _salt(entry_index: int, position: int) -> int:
    return entry_index * 1000 + position


def build_script_transactions(
    scenario: Scenario,
) -> tuple[list[list[tuple[TxSpec, Transaction]]], dict[str, str]]:
    """Turn each script entry into (spec, transaction) pairs adapted to the mode.

    In the traditional-oracle mode settle_bet entries are dropped (the oracle
    agent settles bets itself) and price transfers read the pushed on-chain
    feed value.  Returns the per-entry pairs and the bet label map.
    """
    traditional = scenario.mode is OracleMode.TRADITIONAL_ORACLE
    bet_ids: dict[str, str] = {}
    out = []
    for i, entry in enumerate(scenario.script):
        pairs = []
        for j, spec in enumerate(entry.txs):
            salt = _salt(i, j)
            if spec.action == "place_bet":
                action = PlaceBet(spec.stake)
            elif spec.action == "settle_bet":
                if traditional:
                    continue
                action = SettleBet(bet_ids[spec.bet])
            elif spec.action == "price_transfer":
                action = PriceTransfer(spec.sender, spec.recipient, spec.feed, spec.freshness, traditional)
            else:
                action = Noop()
            tx = Transaction(spec.initiator, action, max_calls=spec.max_calls, salt=salt)
            if spec.label is not None:
                bet_ids[spec.label] = tx.tx_id.hex()
            pairs.append((spec, tx))
        out.append(pairs)
    return out, bet_ids


def _initiator_resolve(world: World, tx: Transaction, stream: NonceStream) -> Transaction | None:
    """Perform ``tx``'s calls on the submitter's side and attach the signed results."""
    calls = []
    for request in declared_calls(tx, world.nodes[0].chain.tip_state, stream):
        response = world._invoke(request, None, None)
        key = world.keys.get(request.endpoint_uri)
        if response is None or key is None:
            return None
        calls.append(VerifiableExternalCall(request, key, response))
    return replace(tx, mode=InitiatorResolved(tuple(calls)))


# -- metrics ---------------------------------------------------------------


@dataclass
class MetricsReport:
    mode: str
    seed: int
    final_tick: int
    final_height: int
    blocks_to_completion: dict[str, int | None]
    oracle_invocations: dict[str, int]
    invocations_per_block: list[int]
    cache_hits: int
    final_state_root: str
    chain_valid: bool
    validation_invocations: int
    trace_digest: str
    extras: dict[str, Any] = field(default_factory=dict)

    @property
    def total_invocations(self) -> int:
        return sum(self.oracle_invocations.values())

    def as_records(self) -> list[dict[str, Any]]:
        records: list[dict[str, Any]] = [{"format": "vecsim-report", "version": SCHEMA_VERSION}]
        records.append({"metric": "mode", "value": self.mode})
        records.append({"metric": "seed", "value": self.seed})
        records.append({"metric": "final_tick", "value": self.final_tick})
        records.append({"metric": "final_height", "value": self.final_height})
        for label in sorted(self.blocks_to_completion):
            records.append({"metric": "blocks_to_completion", "process": label, "value": self.blocks_to_completion[label]})
        for uri in sorted(self.oracle_invocations):
            records.append({"metric": "oracle_invocations", "uri": uri, "value": self.oracle_invocations[uri]})
        records.append({"metric": "invocations_per_block", "value": list(self.invocations_per_block)})
        records.append({"metric": "cache_hits", "value": self.cache_hits})
        records.append({"metric": "final_state_root", "value": self.final_state_root})
        records.append({"metric": "chain_valid", "value": self.chain_valid})
        records.append({"metric": "validation_invocations", "value": self.validation_invocations})
        records.append({"metric": "trace_digest", "value": self.trace_digest})
        return records

    def to_json_lines(self) -> str:
        return "".join(json.dumps(r, separators=(",", ":")) + "\n" for r in self.as_records())

    def to_text(self) -> str:
        lines = [
            f"mode:                   {self.mode}",
            f"seed:                   {self.seed}",
            f"final tick:             {self.final_tick}",
            f"final height:           {self.final_height}",
        ]
        for label in sorted(self.blocks_to_completion):
            value = self.blocks_to_completion[label]
            lines.append(f"blocks to completion:   {label} = {'incomplete' if value is None else value}")
        for uri in sorted(self.oracle_invocations):
            lines.append(f"oracle invocations:     {uri} = {self.oracle_invocations[uri]}")
        lines += [
            f"invocations per block:  {' '.join(map(str, self.invocations_per_block)) or '-'}",
            f"cache hits:             {self.cache_hits}",
            f"final state root:       {self.final_state_root}",
            f"chain valid:            {'yes' if self.chain_valid else 'NO'}",
            f"validation invocations: {self.validation_invocations}",
            f"trace digest:           {self.trace_digest}",
        ]
        return "\n".join(lines) + "\n"


def blocks_to_completion(chain: Chain, bet_ids: Mapping[str, str]) -> dict[str, int | None]:
    """Blocks spanned from a bet's placement to its settlement, inclusive."""
    placed: dict[str, int] = {}
    settled: dict[str, int] = {}
    for block in chain.blocks[1:]:
        for entry in block.entries:
            if entry.receipt.status is not ReceiptStatus.APPLIED:
                continue
            action = entry.tx.action
            if isinstance(action, PlaceBet):
                placed.setdefault(entry.tx.tx_id.hex(), block.height)
            elif isinstance(action, SettleBet):
                settled.setdefault(action.bet_id, block.height)
            elif isinstance(action, OracleInput) and action.bet_id is not None:
                settled.setdefault(action.bet_id, block.height)
    out: dict[str, int | None] = {}
    for label, bet_id in bet_ids.items():
        if bet_id in placed and bet_id in settled:
            out[label] = settled[bet_id] - placed[bet_id] + 1
        else:
            out[label] = None
    return out


def count_cache_hits(views: Mapping[bytes, Chain], chain: Chain, params) -> int:
    hits = 0
    for block in chain.blocks[1:]:
        parent = views[block.header.parent_hash]
        resolution = stored_resolution(parent, block, params)
        served = sum(
            1 for srcs in resolution.sources for s in srcs if s in (Source.CACHE, Source.HISTORY)
        )
        # the first use of each cache entry was a live call
        hits += served - len(block.response_cache)
    return hits


@dataclass
class RunResult:
    report: MetricsReport
    world: World
    chain: Chain
    chain_text: str
    bet_ids: dict[str, str]


def run_scenario(scenario: Scenario) -> RunResult:
    """Run ``scenario`` to its stop condition and collect the metrics report."""
    directory = OracleDirectory([spec.build() for spec in scenario.oracles])
    world = World(
        scenario.network,
        directory,
        scenario.genesis_balances,
        mode=scenario.mode,
        crash_winner_at_height=scenario.crash_winner_at_height,
    )
    entries, bet_ids = build_script_transactions(scenario)
    client_stream = NonceStream(scenario.network.global_seed ^ CLIENT_SEED_SALT)

    for entry, pairs in zip(scenario.script, entries):
        def submit(w: World, pairs=pairs) -> list[Transaction]:
            out = []
            for spec, tx in pairs:
                if spec.resolve == "initiator" and scenario.mode is not OracleMode.TRADITIONAL_ORACLE:
                    resolved = _initiator_resolve(w, tx, client_stream)
                    if resolved is None:
                        continue
                    tx = resolved
                out.append(tx)
            return out

        world.schedule_client(entry.tick, submit)

    if scenario.stop_at_height is not None:
        world.run(at_height(scenario.stop_at_height), scenario.max_ticks)
    else:
        world.run(lambda w: w.tick >= scenario.stop_at_tick, scenario.max_ticks)

    reporter = world.observer()
    chain = reporter.chain
    params = scenario.network.params
    chain_text = dump_chain(chain, world.keys, params)
    with directory.all_down():
        before = directory.invocations()
        chain_valid = validate_chain_text(chain_text)
        validation_invocations = sum(directory.invocations()[u] - before[u] for u in before)

    report = MetricsReport(
        mode=scenario.mode.value,
        seed=scenario.network.global_seed,
        final_tick=world.tick,
        final_height=chain.height,
        blocks_to_completion=blocks_to_completion(chain, bet_ids),
        oracle_invocations=directory.invocations(),
        invocations_per_block=[
            world.invocations_by_block.get(b.header.partial_hash, 0) for b in chain.blocks[1:]
        ],
        cache_hits=count_cache_hits(reporter.views, chain, params),
        final_state_root=state_root(chain.tip_state).hex(),
        chain_valid=chain_valid,
        validation_invocations=validation_invocations,
        trace_digest=hashlib.sha256(world.trace_text().encode()).hexdigest(),
    )
    return RunResult(report, world, chain, chain_text, bet_ids)
