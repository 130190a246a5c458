"""Acceptance gate: nine end-to-end criteria, one PASS/FAIL line each.

Run with ``pytest tests/test_acceptance.py -v`` (the summary lines appear at
the end of the session) or directly with ``python tests/test_acceptance.py``.
Every criterion is checked at its exact stated tolerance.
"""

from __future__ import annotations

import contextlib
import dataclasses
import os
import random
import sys
from fractions import Fraction

import pytest

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import vecsim.network as network  # noqa: E402
from fuzz_helpers import run_random_scenario  # noqa: E402
from ledger_forgery import forge_block  # noqa: E402
from ledger_helpers import Harness, bet_pair, transfer  # noqa: E402
from vecsim.chainfile import dump_chain, validate_chain_text  # noqa: E402
from vecsim.execution import PriceTransfer, Transaction, state_root  # noqa: E402
from vecsim.ledger import Block, BlockEntry, RejectReason, ResponseCache  # noqa: E402
from vecsim.network import CompletionMsg, NetworkConfig, OracleMode, World  # noqa: E402
from vecsim.oracle import Constant, OracleDirectory, OracleEndpoint, SeededStream  # noqa: E402
from vecsim.scenario import load_scenario, parse_scenario, run_scenario  # noqa: E402
from vecsim.verifiable_call import (  # noqa: E402
    VerifiableExternalCall,
    verify_external_call,
)

HERE = os.path.dirname(os.path.abspath(__file__))
SCENARIOS = os.path.join(os.path.dirname(HERE), "scenarios")
RESULTS: dict[int, tuple[bool, str]] = {}


# -- shared builders -------------------------------------------------------


def feed_scenario(nodes: int, mode: OracleMode, blocks: int, seed: int = 0):
    """One price-feed transfer (one call site) per block, submitted block by block."""
    return parse_scenario(
        {
            "network": {"node_count": nodes, "difficulty": 8, "global_seed": seed},
            "oracles": [{"uri": "oracle://feed/ETHUSD", "behavior": "constant", "value": "00000001"}],
            "genesis_balances": {"alice": 10_000},
            "script": [
                {"tick": 400 * i, "tx": {"action": "price_transfer", "initiator": "alice", "to": "bob", "feed": "ETHUSD"}}
                for i in range(blocks)
            ],
            "mode": mode.value,
            "stop": {"at_height": blocks},
        }
    )


def bet_world(nodes=4, seed=0, blocks=20, mode=OracleMode.VERIFIABLE_EXTERNAL_CALLS, **cfg):
    """A world with a place+settle bet and a feed transfer submitted for each of ``blocks`` blocks."""
    directory = OracleDirectory(
        [
            OracleEndpoint.create("oracle://rng", SeededStream(9)),
            OracleEndpoint.create("oracle://feed/ETHUSD", Constant(bytes.fromhex("00000003"))),
        ]
    )
    config = NetworkConfig(node_count=nodes, global_seed=seed, difficulty=8, **cfg)
    world = World(config, directory, {"alice": 10**6, "carol": 10**6, "house": 10**7}, mode=mode)

    for i in range(blocks):
        def submit(w, i=i):
            place, settle = bet_pair(stake=5, salt=i)
            return [place, settle, Transaction("carol", PriceTransfer("carol", "bob", "ETHUSD"), salt=i)]

        world.schedule_client(300 * i, submit)
    return world


@contextlib.contextmanager
def counting_validation(world: World):
    """Record the oracle-invocation delta around every validate_block the world runs."""
    deltas: list[int] = []
    original = network.validate_block

    def counted(*args, **kwargs):
        before = world.directory.total_invocations()
        verdict = original(*args, **kwargs)
        deltas.append(world.directory.total_invocations() - before)
        return verdict

    network.validate_block = counted
    try:
        yield deltas
    finally:
        network.validate_block = original


# -- criteria --------------------------------------------------------------


def criterion_1():
    scenario = load_scenario(os.path.join(SCENARIOS, "rng_bet.yaml"))
    vec = run_scenario(scenario.with_overrides(mode=OracleMode.VERIFIABLE_EXTERNAL_CALLS)).report
    trad = run_scenario(scenario.with_overrides(mode=OracleMode.TRADITIONAL_ORACLE)).report
    v, t = vec.blocks_to_completion["bet1"], trad.blocks_to_completion["bet1"]
    ok = v == 1 and t is not None and t >= 2
    return ok, f"bet completes in {v} block(s) with verifiable calls, {t} with a traditional oracle"


def criterion_2():
    parts, ok = [], True
    for n in (2, 4, 8):
        for mode, expected in ((OracleMode.ALL_NODES_CALL, n), (OracleMode.VERIFIABLE_EXTERNAL_CALLS, 1)):
            report = run_scenario(feed_scenario(n, mode, blocks=3)).report
            per_block = report.invocations_per_block
            ok &= len(per_block) == 3 and all(x == expected for x in per_block)
            parts.append(f"N={n} {mode.value}={per_block}")
    return ok, "; ".join(parts)


def criterion_3():
    result = run_scenario(load_scenario(os.path.join(SCENARIOS, "cache_reuse.yaml")))
    chain = result.chain
    layout = [[e.tx.action.freshness.value for e in b.entries] for b in chain.blocks[1:]]
    expected_layout = [["cacheable_intra_block", "cacheable_intra_block"], ["cacheable_historical"]]
    per_block = result.report.invocations_per_block
    ok = layout == expected_layout and per_block == [1, 0] and result.report.chain_valid
    return ok, f"Tx-1/Tx-2 block invocations={per_block[0]}, Tx-3 next block additional={per_block[1]}"


def criterion_4():
    world = bet_world(blocks=20)
    with counting_validation(world) as deltas:
        world.run(network.at_height(20), 200_000)
    height = world.min_height()
    ok = height >= 20 and len(deltas) > 0 and all(d == 0 for d in deltas)
    return ok, f"{len(deltas)} peer validations over {height} blocks, oracle delta total={sum(deltas)}"


def criterion_5():
    world = bet_world(blocks=20, seed=1)
    world.run(network.at_height(20), 200_000)
    chain = world.nodes[0].chain
    text = dump_chain(chain, world.keys, world.params)
    before = world.directory.total_invocations()
    with world.directory.all_down():
        valid = validate_chain_text(text)
    delta = world.directory.total_invocations() - before
    ok = chain.height >= 20 and valid and delta == 0
    return ok, f"{chain.height}-block export revalidated from genesis with oracles down: valid={valid}, calls={delta}"


def criterion_6():
    def run(seed):
        world = bet_world(blocks=6, seed=seed, drop_probability=Fraction(1, 10))
        consistent = True
        last_tick = -1
        while world.tick < 100_000 and world.max_height() < 6:
            world.step()
            if world.tick != last_tick:
                consistent &= world.tips_consistent()
                last_tick = world.tick
        roots = [state_root(n.chain.tip_state) for n in world.nodes]
        return world.trace_text(), roots, consistent

    a, b = run(17), run(17)
    ok = a[0] == b[0] and a[1] == b[1] and a[2] and b[2]
    lines = a[0].count("\n") - 1
    return ok, f"{lines}-event traces identical={a[0] == b[0]}, roots identical={a[1] == b[1]}, per-tick tip/root consistency={a[2] and b[2]}"


def _forged_completion_rejections():
    world = bet_world(nodes=4, blocks=1)
    forged: list[bytes] = []
    original = world._broadcast

    def forging(node, message):
        if isinstance(message, CompletionMsg) and not forged:
            forged.append(message.block.header.partial_hash)
            message = CompletionMsg(forge_block(message.block))
        original(node, message)

    world._broadcast = forging
    world.run(lambda w: bool(forged), 50_000)
    start = world.tick
    world.run(lambda w: w.tick > start + world.config.completion_timeout, 50_000)
    tag = forged[0].hex()[:16]
    producer = next(n for n in world.nodes if n.chain.height and n.chain.blocks[1].header.partial_hash == forged[0])
    peers = [n for n in world.nodes if n is not producer]
    rejected = {line.split()[1] for line in world.trace if line.endswith(f"Rejected:bad_signature {tag}")}
    accepted = [n for n in peers if any(b.header.partial_hash == forged[0] for b in n.chain.blocks)]
    return len(rejected), len(peers), len(accepted)


def _replayed_nonce_reason():
    h = Harness()
    place, settle = bet_pair()
    first = h.extend([place, settle])
    old = first.entries[1].fresh_calls[0]
    place2, settle2 = bet_pair(salt=1)
    block = h.produce([place2, settle2])
    entry = block.entries[1]
    replay = VerifiableExternalCall(
        dataclasses.replace(old.request, payload=entry.fresh_calls[0].request.payload),
        old.public_key,
        old.signed_response,
    )
    bad = Block(block.header, (block.entries[0], BlockEntry(entry.tx, entry.receipt, (replay,))), block.response_cache)
    return h.validate(bad).reason


def _flip(data: bytes, bit: int) -> bytes:
    out = bytearray(data)
    out[bit // 8] ^= 1 << (bit % 8)
    return bytes(out)


def _tamper(call: VerifiableExternalCall, rng: random.Random, fields: list[str]) -> VerifiableExternalCall:
    req, resp = call.request, call.signed_response
    field = rng.choice(fields)
    if field == "payload":
        resp = dataclasses.replace(resp, payload=_flip(resp.payload, rng.randrange(8 * len(resp.payload))))
    elif field == "response_nonce":
        resp = dataclasses.replace(resp, response_nonce=_flip(resp.response_nonce, rng.randrange(128)))
    elif field == "request_nonce":
        req = dataclasses.replace(req, request_nonce=_flip(req.request_nonce, rng.randrange(128)))
    elif field == "timestamp":
        resp = dataclasses.replace(resp, responder_timestamp=resp.responder_timestamp ^ (1 << rng.randrange(64)))
    elif field == "signature":
        resp = dataclasses.replace(resp, signature=_flip(resp.signature, rng.randrange(512)))
    elif field == "public_key":
        return VerifiableExternalCall(req, _flip(call.public_key, rng.randrange(256)), resp)
    return VerifiableExternalCall(req, call.public_key, resp)


def _stored_call_tampering(cases=1000):
    h = Harness()
    place, settle = bet_pair()
    block = h.produce([place, settle, transfer("carol")])
    fresh = block.entries[1].fresh_calls[0]
    (cached,) = block.response_cache.calls()
    rng = random.Random(7)
    failures = 0
    signed_fields = ["payload", "timestamp", "signature", "public_key"]
    for i in range(cases):
        if i % 2 == 0:
            bad = _tamper(fresh, rng, signed_fields + ["response_nonce", "request_nonce"])
        else:
            bad = _tamper(cached, rng, signed_fields)
        failures += not verify_external_call(bad, block.header.completed_at, None).ok

    # block level: every field of a stored call, request side included
    block_rejects, block_cases = 0, 0
    for field in ("uri", "query", "payload", "request_nonce", "response_nonce", "timestamp", "signature", "public_key"):
        if field == "uri":
            tampered = dataclasses.replace(fresh, request=dataclasses.replace(fresh.request, endpoint_uri="oracle://rnh"))
        elif field == "query":
            query = _flip(fresh.request.payload, 3)
            tampered = dataclasses.replace(fresh, request=dataclasses.replace(fresh.request, payload=query))
        else:
            tampered = _tamper(fresh, random.Random(field), [field])
        e = block.entries[1]
        entries = (block.entries[0], BlockEntry(e.tx, e.receipt, (tampered,)), block.entries[2])
        block_cases += 1
        block_rejects += not h.validate(Block(block.header, entries, block.response_cache))
    for field in ("payload", "timestamp", "signature", "public_key"):
        bad = _tamper(cached, random.Random(field), [field])
        cache = ResponseCache.from_items([(cached.key, bad)])
        block_cases += 1
        block_rejects += not h.validate(Block(block.header, block.entries, cache))
    return failures, cases, block_rejects, block_cases


def criterion_7():
    rejected, peers, accepted = _forged_completion_rejections()
    reason = _replayed_nonce_reason()
    failures, cases, block_rejects, block_cases = _stored_call_tampering()
    ok = (
        rejected == peers
        and accepted == 0
        and reason is RejectReason.REPLAYED_NONCE
        and failures == cases >= 1000
        and block_rejects == block_cases
    )
    return ok, (
        f"forged completion rejected by {rejected}/{peers} peers; replay -> {reason.value if reason else None}; "
        f"{failures}/{cases} bit flips fail verification; {block_rejects}/{block_cases} tampered blocks rejected"
    )


def criterion_8():
    timeout = 100
    world = bet_world(blocks=3, completion_timeout=timeout, mine_empty=True)
    world.crash_winner_at_height = 2
    world.run(lambda w: w.crashed_winner is not None, 100_000)
    crash_tick = world.tick
    bound = crash_tick + timeout + 10_000
    world.run(lambda w: w.min_height() > 2, bound + 1)
    ok = world.crashed_winner is not None and world.min_height() > 2 and world.tick <= bound
    return ok, (
        f"winner n{world.crashed_winner} crashed at tick {crash_tick} after broadcasting height 2; "
        f"live nodes reached height {world.min_height()} at tick {world.tick} (bound {bound})"
    )


def criterion_9():
    mismatches = 0
    for seed in range(200):
        try:
            run_random_scenario(10_000 + seed)
        except AssertionError:
            mismatches += 1
    return mismatches == 0, f"200 randomized scenarios, {mismatches} disagreements with the straight-line model"


CRITERIA = {
    1: ("RNG bet: 1 block with verifiable calls, >=2 with a traditional oracle", criterion_1),
    2: ("per-block invocations N (all nodes call) vs 1 (verifiable calls), N in {2,4,8}", criterion_2),
    3: ("shared cacheable call: 1 invocation, historical reuse: 0 more", criterion_3),
    4: ("peer validation performs 0 oracle invocations over 20 blocks", criterion_4),
    5: ("20-block export revalidates from genesis with oracles down", criterion_5),
    6: ("identical seeds give identical traces, roots and per-tick consistency", criterion_6),
    7: ("adversarial suite: forged completion, nonce replay, 1000 bit flips", criterion_7),
    8: ("liveness after the winner crashes", criterion_8),
    9: ("apply_transaction equals the straight-line model on 200 scenarios", criterion_9),
}


def format_line(number: int, ok: bool, detail: str) -> str:
    return f"criterion {number}: {'PASS' if ok else 'FAIL'} - {CRITERIA[number][0]} ({detail})"


@pytest.mark.parametrize("number", sorted(CRITERIA))
def test_criterion(number):
    ok, detail = CRITERIA[number][1]()
    RESULTS[number] = (ok, detail)
    print(format_line(number, ok, detail))
    assert ok, detail


if __name__ == "__main__":
    failed = 0
    for n in sorted(CRITERIA):
        ok, detail = CRITERIA[n][1]()
        failed += not ok
        print(format_line(n, ok, detail))
    sys.exit(1 if failed else 0)
