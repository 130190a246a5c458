"""Randomized transaction sequences checked against the straight-line model."""

import random

import ref_contracts
from vecsim.execution import (
    HOUSE,
    ContractState,
    Noop,
    PlaceBet,
    PriceTransfer,
    ReceiptStatus,
    SettleBet,
    Transaction,
    apply_transaction,
    declared_calls,
    state_root,
)
from vecsim.oracle import derive_secret_key
from vecsim.verifiable_call import NonceStream, VerifiableExternalCall, public_key_of, sign_response


def resolve(tx, state, value, now=10, ts=None, stream=None):
    """Sign ``value`` for every call site of ``tx`` with the derived endpoint key."""
    stream = stream or NonceStream(0)
    out = []
    for req in declared_calls(tx, state, stream):
        sk = derive_secret_key(req.endpoint_uri)
        resp = sign_response(value, req.request_nonce, now if ts is None else ts, sk)
        out.append(VerifiableExternalCall(req, public_key_of(sk), resp))
    return out


ACCOUNTS = ["alice", "bob", "carol", HOUSE]


def to_model(state):
    bets = {k: (b.bettor, b.stake, b.status.value) for k, b in state.bets.items()}
    return dict(state.balances), bets, dict(state.feed_values)


def random_step(rng, state, model, i):
    """Apply one random transaction to both implementations and compare."""
    kind = rng.choice(["place", "settle", "transfer", "noop"])
    who = rng.choice(ACCOUNTS)
    respond = rng.random() > 0.1
    if kind == "place":
        stake = rng.randrange(0, 60)
        tx = Transaction(who, PlaceBet(stake), salt=i)
        new, receipt = apply_transaction(state, tx, [], 0)
        expect, outcome = ref_contracts.place_bet(model, who, stake, tx.tx_id.hex())
    elif kind == "settle":
        bet_ids = sorted(model[1]) + ["missing"]
        bet_id = rng.choice(bet_ids)
        value = bytes([rng.randrange(256)]) + bytes(rng.randrange(4)) if rng.random() > 0.05 else b""
        tx = Transaction(who, SettleBet(bet_id), salt=i)
        calls = resolve(tx, state, value) if respond else [None]
        new, receipt = apply_transaction(state, tx, calls, 10)
        expect, outcome = ref_contracts.settle_bet(model, bet_id, value if respond else None)
    elif kind == "transfer":
        sender = rng.choice(ACCOUNTS)
        recipient = rng.choice(ACCOUNTS)
        value = rng.randrange(0, 150).to_bytes(rng.randrange(1, 4), "big")
        tx = Transaction(who, PriceTransfer(sender, recipient, "ETHUSD"), salt=i)
        calls = resolve(tx, state, value) if respond else [None]
        new, receipt = apply_transaction(state, tx, calls, 10)
        expect, outcome = ref_contracts.price_transfer(model, who, sender, recipient, "ETHUSD", value if respond else None)
    else:
        tx = Transaction(who, Noop(), salt=i)
        new, receipt = apply_transaction(state, tx, [], 0)
        expect, outcome = model, "applied"
    status = {
        "applied": ReceiptStatus.APPLIED,
        "logic": ReceiptStatus.FAILED_LOGIC,
        "no_response": ReceiptStatus.FAILED_NO_RESPONSE,
    }[outcome]
    assert receipt.status is status, (kind, receipt.status, outcome)
    assert to_model(new) == expect
    assert receipt.state_root_after == state_root(new)
    return new, expect


def run_random_scenario(seed, steps=12):
    rng = random.Random(seed)
    balances = {a: rng.randrange(0, 200) for a in ACCOUNTS}
    state = ContractState.genesis(balances)
    model = ({k: v for k, v in balances.items() if v}, {}, {})
    assert to_model(state) == model
    supply = state.total_supply()
    for i in range(steps):
        state, model = random_step(rng, state, model, i)
    # transfers and bets only move value around
    assert state.total_supply() == supply


